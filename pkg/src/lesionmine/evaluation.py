"""Detection matching, FROC sensitivity at fixed false positives per image,
per-class aggregation and tag confusion matrices.

Matching is tag-agnostic by default: a prediction localizes a lesion if its
IoU clears the threshold, whatever tag it carries, and tag agreement is
tracked separately in the confusion matrix. ``tag_required=True`` restricts
matches to same-tag pairs.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Annotation
from .errors import ConfigError, DataError
from .fusion import Detection
from .geometry import iou
from .tags import TAGGED_CLASSES, LesionTag, zero_counts


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    fp_per_image_points: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    primary_operating_point: float = 4.0
    tag_required: bool = False

    def __post_init__(self) -> None:
        pts = tuple(float(p) for p in self.fp_per_image_points)
        object.__setattr__(self, "fp_per_image_points", pts)
        if not pts or any(p <= 0 for p in pts) or list(pts) != sorted(set(pts)):
            raise ConfigError(f"fp_per_image_points must be positive and ascending, got {pts}")
        if self.primary_operating_point <= 0:
            raise ConfigError("primary_operating_point must be positive")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")


@dataclass
class MatchResult:
    # (prediction, matched ground truth or None) in processing order
    outcomes: list[tuple[Detection, Annotation | None]]
    fn: list[Annotation]

    @property
    def tp(self) -> list[tuple[Detection, Annotation]]:
        return [(p, g) for p, g in self.outcomes if g is not None]

    @property
    def fp(self) -> list[Detection]:
        return [p for p, g in self.outcomes if g is None]


def _box_key(b) -> tuple:
    return (b.x_min, b.y_min, b.x_max, b.y_max)


def match_greedy(
    gts: Sequence[Annotation],
    preds: Sequence[Detection],
    iou_thr: float = 0.5,
    tag_required: bool = False,
) -> MatchResult:
    """Greedy one-to-one matching on a single image.

    Predictions are taken by descending score (ties: higher best IoU, then
    box coordinates, then tag); each claims the still-unmatched ground truth
    with the highest IoU >= ``iou_thr``.
    """
    gts = list(gts)
    ious = [[iou(p.box, g.box) for g in gts] for p in preds]

    def order(i: int) -> tuple:
        p = preds[i]
        return (-p.score, -max(ious[i], default=0.0), _box_key(p.box), p.tag.order)

    taken = [False] * len(gts)
    outcomes = []
    for i in sorted(range(len(preds)), key=order):
        p = preds[i]
        best, best_key = None, None
        for j, g in enumerate(gts):
            if taken[j] or ious[i][j] < iou_thr:
                continue
            if tag_required and g.tag != p.tag:
                continue
            k = (-ious[i][j], _box_key(g.box), g.tag.order)
            if best_key is None or k < best_key:
                best, best_key = j, k
        if best is None:
            outcomes.append((p, None))
        else:
            taken[best] = True
            outcomes.append((p, gts[best]))
    fn = [g for j, g in enumerate(gts) if not taken[j]]
    return MatchResult(outcomes=outcomes, fn=fn)


@dataclass
class FrocCurve:
    """Step function of (mean FP per image, sensitivity) over score thresholds.

    ``thresholds`` descend; entry ``i`` keeps every prediction scoring at
    least ``thresholds[i]``.
    """

    thresholds: list[float]
    fp_per_image: list[float]
    sensitivity: list[float]
    per_class: dict[LesionTag, list[float]]
    gt_counts: dict[LesionTag, int]
    n_gt: int
    n_images: int
    matches: list[MatchResult] = field(repr=False, default_factory=list)

    def _bracket(self, fp: float) -> int:
        if fp < 0:
            raise ValueError(f"operating point must be non-negative, got {fp}")
        # index into the origin-prefixed curve of the last point with FP <= fp
        return bisect_right([0.0] + self.fp_per_image, fp) - 1

    def _interp(self, values: Sequence[float], fp: float) -> float:
        # points sharing an FP rate collapse onto the last (highest) one
        xs, ys = [0.0], [0.0]
        for x, y in zip(self.fp_per_image, values):
            if x == xs[-1]:
                ys[-1] = y
            else:
                xs.append(x)
                ys.append(y)
        i = bisect_right(xs, fp) - 1
        if i == len(xs) - 1:
            return ys[-1]
        x0, y0, x1, y1 = xs[i], ys[i], xs[i + 1], ys[i + 1]
        return y0 + (y1 - y0) * (fp - x0) / (x1 - x0)

    def sensitivity_at(self, fp: float) -> float:
        return self._interp(self.sensitivity, fp)

    def class_sensitivity_at(self, tag: LesionTag, fp: float) -> float | None:
        if self.gt_counts.get(tag, 0) == 0:
            return None
        return self._interp(self.per_class[tag], fp)

    def operating_threshold(self, fp: float) -> float:
        """Lowest score threshold whose FP rate does not exceed ``fp`` (inf if none)."""
        i = self._bracket(fp)
        return float("inf") if i == 0 else self.thresholds[i - 1]


def froc_curve(
    images: Sequence[tuple[Sequence[Annotation], Sequence[Detection]]],
    cfg: EvalConfig | None = None,
) -> FrocCurve:
    """Sweep every distinct prediction score over ``(ground truths, predictions)`` pairs."""
    cfg = cfg or EvalConfig()
    if not images:
        raise DataError("FROC needs at least one image")
    gt_counts = zero_counts()
    n_gt = 0
    matches = []
    events: list[tuple[float, LesionTag | None, bool]] = []
    for gts, preds in images:
        n_gt += len(gts)
        for g in gts:
            if g.tag.is_tagged:
                gt_counts[g.tag] += 1
        m = match_greedy(gts, preds, cfg.iou_threshold, cfg.tag_required)
        matches.append(m)
        for p, g in m.outcomes:
            events.append((p.score, g.tag if g is not None else None, g is not None))
    if n_gt == 0:
        raise DataError("FROC needs at least one ground-truth lesion")

    events.sort(key=lambda e: -e[0])
    thresholds, fps, sens = [], [], []
    per_class = {t: [] for t in TAGGED_CLASSES}
    tp = fp = 0
    tp_class = zero_counts()
    i = 0
    while i < len(events):
        score = events[i][0]
        while i < len(events) and events[i][0] == score:
            _, gtag, hit = events[i]
            if hit:
                tp += 1
                if gtag is not None and gtag.is_tagged:
                    tp_class[gtag] += 1
            else:
                fp += 1
            i += 1
        thresholds.append(score)
        fps.append(fp / len(images))
        sens.append(tp / n_gt)
        for t in TAGGED_CLASSES:
            per_class[t].append(tp_class[t] / gt_counts[t] if gt_counts[t] else 0.0)
    return FrocCurve(
        thresholds=thresholds,
        fp_per_image=fps,
        sensitivity=sens,
        per_class=per_class,
        gt_counts=gt_counts,
        n_gt=n_gt,
        n_images=len(images),
        matches=matches,
    )


def unweighted_mean(values: "Mapping[LesionTag, float | None] | Sequence[float | None]") -> float:
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    present = [v for v in vals if v is not None]
    if not present:
        raise DataError("no class sensitivities to average")
    return sum(present) / len(present)


@dataclass
class SensitivityReport:
    per_class: dict[LesionTag, float | None]
    mean: float
    operating_point: float
    lesion_counts: dict[LesionTag, int]
    overall: float | None = None

    @property
    def missing_classes(self) -> list[LesionTag]:
        return [t for t, v in self.per_class.items() if v is None]

    @classmethod
    def from_per_class(
        cls,
        per_class: Mapping[LesionTag, float | None],
        operating_point: float = 4.0,
        lesion_counts: Mapping[LesionTag, int] | None = None,
    ) -> "SensitivityReport":
        pc = {t: per_class.get(t) for t in TAGGED_CLASSES}
        return cls(
            per_class=pc,
            mean=unweighted_mean(pc),
            operating_point=operating_point,
            lesion_counts=dict(lesion_counts or zero_counts()),
        )


def sensitivity_report(curve: FrocCurve, cfg: EvalConfig | None = None) -> SensitivityReport:
    """Per-class sensitivity at the global FP operating point plus the unweighted class mean.

    Classes absent from the ground truth are reported as ``None`` and left
    out of the mean.
    """
    cfg = cfg or EvalConfig()
    op = cfg.primary_operating_point
    per_class = {t: curve.class_sensitivity_at(t, op) for t in TAGGED_CLASSES}
    present = [v for v in per_class.values() if v is not None]
    return SensitivityReport(
        per_class=per_class,
        mean=sum(present) / len(present) if present else 0.0,
        operating_point=op,
        lesion_counts=dict(curve.gt_counts),
        overall=curve.sensitivity_at(op),
    )


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth tags, columns predicted tags, both in ``TAGGED_CLASSES`` order."""

    counts: list[list[int]]

    @classmethod
    def zeros(cls) -> "ConfusionMatrix":
        n = len(TAGGED_CLASSES)
        return cls([[0] * n for _ in range(n)])

    def cell(self, gt: LesionTag, pred: LesionTag) -> int:
        return self.counts[TAGGED_CLASSES.index(gt)][TAGGED_CLASSES.index(pred)]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def row_sums(self) -> dict[LesionTag, int]:
        return {t: sum(row) for t, row in zip(TAGGED_CLASSES, self.counts)}


def confusion_matrix(match_results: Sequence[MatchResult], min_score: float = 0.0) -> ConfusionMatrix:
    """Tally (ground-truth tag, predicted tag) over TP pairs scoring at least ``min_score``."""
    cm = ConfusionMatrix.zeros()
    for m in match_results:
        for p, g in m.tp:
            if p.score >= min_score and g.tag.is_tagged:
                cm.counts[TAGGED_CLASSES.index(g.tag)][TAGGED_CLASSES.index(p.tag)] += 1
    return cm


@dataclass
class Evaluation:
    curve: FrocCurve
    report: SensitivityReport
    confusion: ConfusionMatrix


def evaluate(
    images: Sequence[tuple[Sequence[Annotation], Sequence[Detection]]],
    cfg: EvalConfig | None = None,
) -> Evaluation:
    cfg = cfg or EvalConfig()
    curve = froc_curve(images, cfg)
    report = sensitivity_report(curve, cfg)
    cm = confusion_matrix(curve.matches, curve.operating_threshold(cfg.primary_operating_point))
    return Evaluation(curve, report, cm)


def lesion_outcomes(curve: FrocCurve, fp: float) -> list[int]:
    """Per-lesion hit (1) / miss (0) at the operating threshold for ``fp``."""
    thr = curve.operating_threshold(fp)
    out = []
    for m in curve.matches:
        hits = sum(1 for p, g in m.tp if p.score >= thr)
        total = len(m.fn) + len(m.tp)
        out.extend([1] * hits + [0] * (total - hits))
    return out


def bootstrap_ci(
    outcomes: Sequence[float],
    level: float = 0.95,
    resamples: int = 1000,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of per-lesion outcomes."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    if resamples < 100:
        raise ConfigError(f"resamples must be at least 100, got {resamples}")
    data = np.asarray(outcomes, dtype=float)
    if data.size == 0:
        raise DataError("bootstrap needs at least one outcome")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(resamples, data.size))
    means = data[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def metrics_json(
    ev: Evaluation,
    cfg: EvalConfig,
    round: int | None = None,
    policy: str | None = None,
    **extra,
) -> dict:
    rep = ev.report
    out = {
        "round": round,
        "policy": policy,
        "per_class": {t.value: rep.per_class[t] for t in TAGGED_CLASSES},
        "mean": rep.mean,
        "overall": rep.overall,
        "operating_point": rep.operating_point,
        "iou_threshold": cfg.iou_threshold,
        "lesion_counts": {t.value: rep.lesion_counts.get(t, 0) for t in TAGGED_CLASSES},
        "missing_classes": [t.value for t in rep.missing_classes],
        "froc": {str(p): ev.curve.sensitivity_at(p) for p in cfg.fp_per_image_points},
        "confusion": ev.confusion.counts,
        "confusion_labels": [t.value for t in TAGGED_CLASSES],
    }
    out.update(extra)
    return out
