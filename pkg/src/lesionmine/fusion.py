"""Ensembling of detections: weighted boxes fusion, with greedy NMS as a baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError, DataError
from .geometry import BBox, iou
from .tags import LesionTag


@dataclass(frozen=True)
class Detection:
    box: BBox
    tag: LesionTag
    score: float
    model_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score must lie in [0, 1], got {self.score}")
        if not self.tag.is_tagged:
            raise DataError("detections must carry one of the 8 lesion tags")

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "tag": self.tag.value, "score": self.score}

    @classmethod
    def from_json(cls, obj: dict, model_id: str = "") -> "Detection":
        try:
            return cls(
                box=BBox.from_seq(obj["box"]),
                tag=LesionTag.parse(obj["tag"]),
                score=float(obj["score"]),
                model_id=str(obj.get("model_id", model_id)),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed detection {obj!r}: {exc}") from None


def rank_key(d: Detection) -> tuple:
    """Descending score, then tag order, then lexicographic box coordinates."""
    return (-d.score, d.tag.order, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.5
    skip_score_threshold: float = 0.0
    # None means "the number of detection lists passed in".
    model_count: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"fusion iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if not 0.0 <= self.skip_score_threshold < 1.0:
            raise ConfigError(
                f"skip_score_threshold must lie in [0, 1), got {self.skip_score_threshold}"
            )
        if self.model_count is not None and self.model_count < 1:
            raise ConfigError(f"model_count must be positive, got {self.model_count}")


@dataclass
class _Cluster:
    members: list[Detection] = field(default_factory=list)
    weighted: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    score_sum: float = 0.0
    box: BBox | None = None

    def add(self, d: Detection) -> None:
        self.members.append(d)
        for i, c in enumerate(d.box.as_list()):
            self.weighted[i] += d.score * c
        self.score_sum += d.score
        if self.score_sum > 0:
            self.box = BBox(*(w / self.score_sum for w in self.weighted))
        else:
            # all-zero scores: fall back to the unweighted mean
            n = len(self.members)
            self.box = BBox(
                *(sum(m.box.as_list()[i] for m in self.members) / n for i in range(4))
            )


def weighted_boxes_fusion(
    per_model_detections: Sequence[Iterable[Detection]],
    cfg: FusionConfig | None = None,
) -> list[Detection]:
    """Fuse detections from several models into score-weighted average boxes.

    Boxes are visited in descending score order. Each joins the same-tag
    cluster whose running fused box overlaps it most (IoU >= threshold), or
    starts a new cluster. A cluster's score is the mean member score scaled by
    ``min(len(cluster), model_count) / model_count``, so boxes found by only a
    few models are down-weighted.
    """
    cfg = cfg or FusionConfig()
    model_count = cfg.model_count or len(per_model_detections)
    entries = [
        d
        for dets in per_model_detections
        for d in dets
        if d.score >= cfg.skip_score_threshold
    ]
    if not entries:
        return []
    entries.sort(key=rank_key)

    clusters: dict[LesionTag, list[_Cluster]] = {}
    for d in entries:
        candidates = clusters.setdefault(d.tag, [])
        best: _Cluster | None = None
        best_iou = -1.0
        for cl in candidates:
            v = iou(cl.box, d.box)
            if v >= cfg.iou_threshold and v > best_iou:
                best, best_iou = cl, v
        if best is None:
            best = _Cluster()
            candidates.append(best)
        best.add(d)

    fused = []
    for tag, tag_clusters in clusters.items():
        for cl in tag_clusters:
            n = len(cl.members)
            mean_score = cl.score_sum / n
            score = mean_score * min(n, model_count) / model_count
            fused.append(Detection(cl.box, tag, min(score, 1.0), "wbf"))
    fused.sort(key=rank_key)
    return fused


def nms(detections: Iterable[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-tag non-maximum suppression; suppresses overlaps with IoU >= threshold."""
    kept: dict[LesionTag, list[Detection]] = {}
    for d in sorted(detections, key=rank_key):
        same_tag = kept.setdefault(d.tag, [])
        if all(iou(d.box, k.box) < iou_threshold for k in same_tag):
            same_tag.append(d)
    return sorted((d for ds in kept.values() for d in ds), key=rank_key)
