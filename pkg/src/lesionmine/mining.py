"""Multi-round self-training: predict, filter by confidence, merge, rebalance, retrain.

Run directory layout::

    run.json                  config, seeds and policy of the run
    splits/                   O_Tr / F_Tr / F_V / F_T manifests
    round_<k>/manifest.jsonl  exactly what round k's model was trained on
    round_<k>/mined.jsonl     slices touched by round k's mining
    round_<k>/metrics.json    F_T evaluation of round k's model
    round_<k>/model/          backend-owned
    round_<k>/state.json      checkpoint header; written last, marks the round complete
    ensemble/metrics.json     ensemble of every round's best epoch
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import (
    MINED,
    Annotation,
    SliceKey,
    SliceRecord,
    SplitSet,
    class_counts,
    default_image_ref,
    read_manifest,
    upsample_balance,
    write_manifest,
    write_splits,
)
from .detector.base import DetectorBackend, ModelHandle
from .errors import BackendError, ConfigError
from .evaluation import EvalConfig, Evaluation, evaluate, metrics_json
from .fusion import Detection, FusionConfig, weighted_boxes_fusion
from .geometry import iou
from .policy import VARIABLE, ThresholdPolicy, parse_policy, policy_to_config, threshold_for_round
from .tags import TAGGED_CLASSES, LesionTag, zero_counts

log = logging.getLogger(__name__)

STATE_FILE = "state.json"


@dataclass(frozen=True)
class SelfTrainConfig:
    policy: ThresholdPolicy = VARIABLE
    # None runs every round of the policy; fewer rounds truncate it
    rounds: int | None = None
    upsample: bool = True
    intra_patient_mining: bool = True
    dedup_iou: float = 0.5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # mine and evaluate with the WBF-fused epoch ensemble rather than the best epoch alone
    use_epoch_ensemble: bool = True
    # let slices mined in earlier rounds be mined again (their labels then act as existing)
    remine_mined_slices: bool = True
    # unannotated context slices at these slice-index offsets from each O_Tr slice
    context_offsets: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", parse_policy(self.policy))
        object.__setattr__(self, "context_offsets", tuple(int(o) for o in self.context_offsets))
        if self.rounds is not None and not 0 <= self.rounds <= self.policy.rounds:
            raise ConfigError(
                f"rounds must lie in 0..{self.policy.rounds} for policy {self.policy.name!r}, got {self.rounds}"
            )
        if not 0.0 < self.dedup_iou <= 1.0:
            raise ConfigError(f"dedup_iou must lie in (0, 1], got {self.dedup_iou}")

    @property
    def n_rounds(self) -> int:
        return self.policy.rounds if self.rounds is None else self.rounds

    def to_json(self) -> dict:
        return {
            "policy": policy_to_config(self.policy),
            "policy_name": self.policy.name,
            "thresholds": list(self.policy.thresholds),
            "rounds": self.n_rounds,
            "upsample": self.upsample,
            "intra_patient_mining": self.intra_patient_mining,
            "dedup_iou": self.dedup_iou,
            "fusion": {
                "iou_threshold": self.fusion.iou_threshold,
                "skip_score_threshold": self.fusion.skip_score_threshold,
            },
            "eval": {
                "iou_threshold": self.eval.iou_threshold,
                "fp_per_image_points": list(self.eval.fp_per_image_points),
                "primary_operating_point": self.eval.primary_operating_point,
                "tag_required": self.eval.tag_required,
            },
            "use_epoch_ensemble": self.use_epoch_ensemble,
            "remine_mined_slices": self.remine_mined_slices,
            "context_offsets": list(self.context_offsets),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SelfTrainConfig":
        return cls(
            policy=parse_policy(obj.get("thresholds") if obj.get("policy_name") == "custom" else obj["policy"]),
            rounds=obj.get("rounds"),
            upsample=obj.get("upsample", True),
            intra_patient_mining=obj.get("intra_patient_mining", True),
            dedup_iou=obj.get("dedup_iou", 0.5),
            fusion=FusionConfig(**obj.get("fusion", {})),
            eval=EvalConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.get("eval", {}).items()}),
            use_epoch_ensemble=obj.get("use_epoch_ensemble", True),
            remine_mined_slices=obj.get("remine_mined_slices", True),
            context_offsets=tuple(obj.get("context_offsets", ())),
            seed=obj.get("seed", 0),
        )


@dataclass
class MiningRoundState:
    round: int
    training_set: list[SliceRecord]
    mined_counts: dict[LesionTag, int]
    model: ModelHandle
    best_epoch: ModelHandle | None = None
    threshold: float | None = None
    new_mined_counts: dict[LesionTag, int] = field(default_factory=zero_counts)
    metrics: dict | None = None


# --------------------------------------------------------------------------
# selection rules


def filter_mined(
    predictions: Mapping[SliceKey, Sequence[Detection]], threshold: float
) -> dict[SliceKey, list[Detection]]:
    """Keep detections scoring at least ``threshold``; drop slices left with none."""
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    kept = {}
    for key, dets in predictions.items():
        survivors = [d for d in dets if d.score >= threshold]
        if survivors:
            kept[key] = survivors
    return kept


def dedup_against_annotations(
    preds: Sequence[Detection], existing: Sequence[Annotation], iou_thr: float = 0.5
) -> list[Detection]:
    """Drop predictions overlapping an existing annotation of the slice at IoU >= ``iou_thr``."""
    return [p for p in preds if all(iou(p.box, a.box) < iou_thr for a in existing)]


def mined_counts(records: Sequence[SliceRecord]) -> dict[LesionTag, int]:
    counts = zero_counts()
    for r in records:
        for a in r.annotations:
            if a.is_mined:
                counts[a.tag] += 1
    return counts


# --------------------------------------------------------------------------
# prediction helpers


def predict_slices(
    backend: DetectorBackend,
    handle: ModelHandle,
    keys: Sequence[SliceKey],
    use_epoch_ensemble: bool = True,
    fusion: FusionConfig | None = None,
) -> dict[SliceKey, list[Detection]]:
    """Predict with one model, or with its epoch ensemble fused by WBF."""
    keys = list(keys)
    if not keys:
        return {}
    handles = backend.epoch_ensemble(handle) if use_epoch_ensemble else [handle]
    if len(handles) == 1:
        return _checked(backend.predict(handles[0], keys), keys)
    per_model = [_checked(backend.predict(h, keys), keys) for h in handles]
    cfg = replace(fusion or FusionConfig(), model_count=len(handles))
    return {k: weighted_boxes_fusion([p.get(k, []) for p in per_model], cfg) for k in keys}


def _checked(preds: Mapping[SliceKey, list[Detection]], keys: Sequence[SliceKey]) -> dict:
    allowed = set(keys)
    extra = [k for k in preds if k not in allowed]
    if extra:
        raise BackendError(f"backend returned predictions for {len(extra)} unrequested slices, e.g. {extra[0]}")
    return {k: list(preds.get(k, [])) for k in keys}


def evaluate_predictions(
    records: Sequence[SliceRecord],
    predictions: Mapping[SliceKey, Sequence[Detection]],
    cfg: EvalConfig,
) -> Evaluation:
    images = [(list(r.annotations), list(predictions.get(r.key, []))) for r in records]
    return evaluate(images, cfg)


def ensemble_rounds(
    states: Sequence[MiningRoundState],
    fusion: FusionConfig,
    backend: DetectorBackend,
    eval_slices: Sequence[SliceKey],
) -> dict[SliceKey, list[Detection]]:
    """WBF over each round's best-epoch predictions, one vote per round."""
    if len(states) < 2:
        raise ConfigError("ensembling rounds needs at least two rounds")
    missing = [s.round for s in states if s.best_epoch is None]
    if missing:
        raise ConfigError(f"rounds {missing} have no best epoch")
    keys = list(eval_slices)
    per_round = [_checked(backend.predict(s.best_epoch, keys), keys) for s in states]
    cfg = replace(fusion, model_count=len(states))
    return {k: weighted_boxes_fusion([p[k] for p in per_round], cfg) for k in keys}


# --------------------------------------------------------------------------
# run directory


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def round_dir(run_dir: str | os.PathLike, k: int) -> Path:
    return Path(run_dir) / f"round_{k}"


def _train_and_record(
    k: int,
    base: list[SliceRecord],
    cfg: SelfTrainConfig,
    backend: DetectorBackend,
    splits: SplitSet,
    run_dir: Path,
    threshold: float | None,
    new_counts: dict[LesionTag, int],
    mined_log: list[dict],
) -> MiningRoundState:
    rdir = round_dir(run_dir, k)
    manifest = upsample_balance(base) if cfg.upsample else list(base)
    write_manifest(rdir / "manifest.jsonl", manifest)
    with open(rdir / "mined.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for line in mined_log:
            fh.write(json.dumps(line, sort_keys=True) + "\n")

    try:
        model = backend.train(rdir / "manifest.jsonl", k, rdir / "model")
        epochs = backend.epoch_ensemble(model)
        best = epochs[0] if epochs else model
        preds = predict_slices(backend, model, [r.key for r in splits.F_T], cfg.use_epoch_ensemble, cfg.fusion)
    except BackendError as exc:
        raise BackendError(f"round {k}: {exc}") from exc
    ev = evaluate_predictions(splits.F_T, preds, cfg.eval)
    cum = mined_counts(base)
    metrics = metrics_json(
        ev,
        cfg.eval,
        round=k,
        policy=cfg.policy.name,
        threshold=threshold,
        upsample=cfg.upsample,
        mined_counts={t.value: cum[t] for t in TAGGED_CLASSES},
        new_mined_counts={t.value: new_counts[t] for t in TAGGED_CLASSES},
        training_counts={t.value: v for t, v in class_counts(manifest).items()},
    )
    _dump(rdir / "metrics.json", metrics)
    state = MiningRoundState(
        round=k,
        training_set=list(base),
        mined_counts=cum,
        model=model,
        best_epoch=best,
        threshold=threshold,
        new_mined_counts=dict(new_counts),
        metrics=metrics,
    )
    _dump(
        rdir / STATE_FILE,
        {
            "round": k,
            "threshold": threshold,
            "model": model.to_json(relative_to=run_dir),
            "best_epoch": best.to_json(relative_to=run_dir),
            "mined_counts": {t.value: cum[t] for t in TAGGED_CLASSES},
            "new_mined_counts": {t.value: new_counts[t] for t in TAGGED_CLASSES},
            "training_slices": len(base),
        },
    )
    log.info("round %d: mean sensitivity %.3f, %d mined lesions in training set", k, metrics["mean"], sum(cum.values()))
    return state


def load_round_state(run_dir: str | os.PathLike, k: int) -> MiningRoundState:
    run_dir = Path(run_dir)
    rdir = round_dir(run_dir, k)
    header = json.loads((rdir / STATE_FILE).read_text())
    base = [replace(r, repeat_count=1) for r in read_manifest(rdir / "manifest.jsonl")]
    return MiningRoundState(
        round=k,
        training_set=base,
        mined_counts={LesionTag(t): v for t, v in header["mined_counts"].items()},
        model=ModelHandle.from_json(header["model"], relative_to=run_dir),
        best_epoch=ModelHandle.from_json(header["best_epoch"], relative_to=run_dir),
        threshold=header["threshold"],
        new_mined_counts={LesionTag(t): v for t, v in header["new_mined_counts"].items()},
        metrics=json.loads((rdir / "metrics.json").read_text()),
    )


def completed_rounds(run_dir: str | os.PathLike) -> list[int]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return []
    done = []
    for p in run_dir.glob("round_*"):
        suffix = p.name[len("round_"):]
        if suffix.isdigit() and (p / STATE_FILE).exists():
            done.append(int(suffix))
    done.sort()
    # only a gap-free prefix is trustworthy
    return [k for i, k in enumerate(done) if k == i]


# --------------------------------------------------------------------------
# rounds


def train_baseline(
    cfg: SelfTrainConfig, backend: DetectorBackend, splits: SplitSet, run_dir: str | os.PathLike
) -> MiningRoundState:
    """Round 0: train on F_Tr alone (upsampled when ``cfg.upsample``)."""
    base = sorted((r for r in splits.F_Tr if r.annotations), key=lambda r: r.key)
    base = [replace(r, repeat_count=1) for r in base]
    return _train_and_record(0, base, cfg, backend, splits, Path(run_dir), None, zero_counts(), [])


def run_round(
    state: MiningRoundState,
    cfg: SelfTrainConfig,
    backend: DetectorBackend,
    splits: SplitSet,
    run_dir: str | os.PathLike,
) -> MiningRoundState:
    """Mine one round with ``state.model`` and retrain from scratch on the result."""
    k = state.round + 1
    thr = threshold_for_round(cfg.policy, k)
    current = {r.key: r for r in state.training_set}
    o_tr = {r.key: r for r in splits.O_Tr}
    f_tr_keys = {r.key for r in splits.F_Tr}

    targets: list[SliceKey] = []
    for key in sorted(o_tr):
        if cfg.remine_mined_slices or key not in current:
            targets.append(key)
    pool_records = dict(o_tr)
    for key in sorted(o_tr):
        for off in cfg.context_offsets:
            ctx = key._replace(slice_index=key.slice_index + off)
            if ctx in o_tr or ctx in pool_records or ctx in f_tr_keys:
                continue
            pool_records[ctx] = SliceRecord(ctx, default_image_ref(ctx))
            if cfg.remine_mined_slices or ctx not in current:
                targets.append(ctx)
    if cfg.intra_patient_mining:
        targets.extend(sorted(f_tr_keys & set(current)))

    try:
        preds = predict_slices(backend, state.model, targets, cfg.use_epoch_ensemble, cfg.fusion)
    except BackendError as exc:
        raise BackendError(f"round {k}: {exc}") from exc
    kept = filter_mined(preds, thr)

    new_set = dict(current)
    new_counts = zero_counts()
    mined_log = []
    for key in targets:
        dets = preds.get(key, [])
        if not dets:
            continue
        base = current.get(key) or pool_records[key]
        survivors = dedup_against_annotations(kept.get(key, []), base.annotations, cfg.dedup_iou)
        anns = tuple(Annotation(d.box, d.tag, MINED, k, d.score) for d in survivors)
        if anns:
            new_set[key] = replace(base, annotations=base.annotations + anns, repeat_count=1)
            for a in anns:
                new_counts[a.tag] += 1
        mined_log.append(
            {
                "key": key.to_json(),
                "image_ref": base.image_ref,
                "repeat_count": 1,
                "annotations": [a.to_json() for a in anns],
                "rejected": [d.to_json() for d in dets if d.score < thr],
                "source": "intra" if key in f_tr_keys else "inter",
            }
        )

    base_set = sorted(new_set.values(), key=lambda r: r.key)
    return _train_and_record(k, base_set, cfg, backend, splits, Path(run_dir), thr, new_counts, mined_log)


@dataclass
class SelfTrainingResult:
    states: list[MiningRoundState]
    ensemble_metrics: dict | None
    run_dir: Path

    @property
    def metrics(self) -> list[dict]:
        return [s.metrics for s in self.states]


def run_self_training(
    cfg: SelfTrainConfig,
    backend: DetectorBackend,
    splits: SplitSet,
    run_dir: str | os.PathLike,
    resume: bool = False,
    extra_run_info: Mapping | None = None,
    max_round: int | None = None,
) -> SelfTrainingResult:
    """Baseline plus ``cfg.n_rounds`` mining rounds, checkpointed round by round.

    With ``resume`` the run continues after the last complete round found in
    ``run_dir``; the recorded config must match. ``max_round`` stops early
    (used by the single-round ``mine`` command).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_info = {"selftrain": cfg.to_json(), "split_seed": splits.seed, **(extra_run_info or {})}
    run_json = run_dir / "run.json"
    done = completed_rounds(run_dir)
    if done and not resume:
        raise ConfigError(f"{run_dir} already holds rounds {done}; pass resume to continue")
    if resume and run_json.exists():
        recorded = json.loads(run_json.read_text())
        if recorded.get("selftrain") != run_info["selftrain"]:
            raise ConfigError(f"config differs from the one recorded in {run_json}")
    else:
        _dump(run_json, run_info)
        write_splits(run_dir / "splits", splits)

    last = cfg.n_rounds if max_round is None else min(cfg.n_rounds, max_round)
    states = [load_round_state(run_dir, k) for k in done if k <= last]
    if not states:
        states.append(train_baseline(cfg, backend, splits, run_dir))
    while states[-1].round < last:
        states.append(run_round(states[-1], cfg, backend, splits, run_dir))

    ensemble = None
    if len(states) >= 2 and states[-1].round == cfg.n_rounds:
        keys = [r.key for r in splits.F_T]
        try:
            preds = ensemble_rounds(states, cfg.fusion, backend, keys)
        except BackendError as exc:
            raise BackendError(f"round ensemble: {exc}") from exc
        ev = evaluate_predictions(splits.F_T, preds, cfg.eval)
        ensemble = metrics_json(ev, cfg.eval, round=None, policy=cfg.policy.name, rounds=[s.round for s in states])
        _dump(run_dir / "ensemble" / "metrics.json", ensemble)
    return SelfTrainingResult(states=states, ensemble_metrics=ensemble, run_dir=run_dir)
