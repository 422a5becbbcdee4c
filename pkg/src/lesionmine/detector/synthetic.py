"""A deterministic stand-in detector for desk-scale self-training runs.

Per-class sensitivity grows with the number of training lesions of that class
(repeat counts included)::

    p_c = p0_c + (1 - p0_c) * (1 - exp(-n_c / kappa))

At prediction time each hidden lesion of class ``c`` is found with
probability ``p_c`` and scored around ``p_c``, so frequent classes are also
the confident ones. All random draws for a slice come from ``(seed, slice
key)`` and are consumed in a fixed order regardless of the model, so a
better model finds a superset of what a worse one found.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..dataset import (
    OFFICIAL_TEST,
    OFFICIAL_TRAIN,
    OFFICIAL_VAL,
    Annotation,
    DatasetIndex,
    SliceKey,
    SliceRecord,
    class_counts,
    default_image_ref,
    read_manifest,
)
from ..errors import ConfigError, DataError
from ..fusion import Detection
from ..geometry import BBox
from ..tags import TAGGED_CLASSES, LesionTag
from .base import ModelHandle

# Baseline training-set lesion counts per class, used as class prevalence for synthetic worlds.
REFERENCE_PREVALENCE = {
    LesionTag.BONE: 97,
    LesionTag.KIDNEY: 195,
    LesionTag.SOFT_TISSUE: 288,
    LesionTag.PELVIS: 321,
    LesionTag.LIVER: 426,
    LesionTag.MEDIASTINUM: 613,
    LesionTag.ABDOMEN: 788,
    LesionTag.LUNG: 1039,
}

DEFAULT_BASE_SENSITIVITY = {
    LesionTag.BONE: 0.70,
    LesionTag.KIDNEY: 0.70,
    LesionTag.SOFT_TISSUE: 0.72,
    LesionTag.PELVIS: 0.72,
    LesionTag.LIVER: 0.74,
    LesionTag.MEDIASTINUM: 0.74,
    LesionTag.ABDOMEN: 0.73,
    LesionTag.LUNG: 0.75,
}

MODEL_FILE = "model.json"


@dataclass(frozen=True)
class SyntheticBackendConfig:
    base_sensitivity: Mapping[LesionTag, float] = field(
        default_factory=lambda: dict(DEFAULT_BASE_SENSITIVITY)
    )
    kappa: float = 30.0
    sigma: float = 0.15
    fp_rate: float = 1.0
    jitter: float = 0.03
    seed: int = 0
    n_epochs: int = 5
    # spread of the per-epoch sensitivity perturbation; None means sigma
    epoch_spread: float | None = 0.03
    image_size: float = 512.0

    def __post_init__(self) -> None:
        base = {LesionTag.parse(k): float(v) for k, v in dict(self.base_sensitivity).items()}
        for tag in TAGGED_CLASSES:
            base.setdefault(tag, 0.5)
        object.__setattr__(self, "base_sensitivity", base)
        if any(not 0.0 <= v <= 1.0 for v in base.values()):
            raise ConfigError("base sensitivities must lie in [0, 1]")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.sigma < 0 or self.fp_rate < 0 or self.jitter < 0:
            raise ConfigError("sigma, fp_rate and jitter must be non-negative")
        if self.epoch_spread is not None and self.epoch_spread < 0:
            raise ConfigError("epoch_spread must be non-negative")
        if not 1 <= self.n_epochs <= 5:
            raise ConfigError("n_epochs must lie in 1..5")

    def to_json(self) -> dict:
        return {
            "base_sensitivity": {t.value: self.base_sensitivity[t] for t in TAGGED_CLASSES},
            "kappa": self.kappa,
            "sigma": self.sigma,
            "fp_rate": self.fp_rate,
            "jitter": self.jitter,
            "seed": self.seed,
            "n_epochs": self.n_epochs,
            "epoch_spread": self.epoch_spread,
            "image_size": self.image_size,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SyntheticBackendConfig":
        obj = dict(obj)
        base = obj.pop("base_sensitivity", None)
        if isinstance(base, (int, float)):
            base = {t: float(base) for t in TAGGED_CLASSES}
        kwargs = {k: obj[k] for k in ("kappa", "sigma", "fp_rate", "jitter", "seed", "n_epochs", "epoch_spread", "image_size") if k in obj}
        unknown = set(obj) - set(kwargs)
        if unknown:
            raise ConfigError(f"unknown synthetic backend keys {sorted(unknown)}")
        if base is not None:
            kwargs["base_sensitivity"] = base
        return cls(**kwargs)


@dataclass(frozen=True)
class SyntheticModel:
    counts: Mapping[LesionTag, int]
    sensitivity: Mapping[LesionTag, float]

    def to_json(self) -> dict:
        return {
            "counts": {t.value: self.counts[t] for t in TAGGED_CLASSES},
            "sensitivity": {t.value: self.sensitivity[t] for t in TAGGED_CLASSES},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SyntheticModel":
        return cls(
            counts={LesionTag(k): int(v) for k, v in obj["counts"].items()},
            sensitivity={LesionTag(k): float(v) for k, v in obj["sensitivity"].items()},
        )


def learned_sensitivity(p0: float, n: float, kappa: float) -> float:
    return p0 + (1.0 - p0) * (1.0 - math.exp(-n / kappa))


def synthetic_train(records: Iterable[SliceRecord], cfg: SyntheticBackendConfig) -> SyntheticModel:
    records = list(records)
    if not records:
        raise DataError("cannot train on an empty manifest")
    counts = class_counts(records)
    sens = {t: learned_sensitivity(cfg.base_sensitivity[t], counts[t], cfg.kappa) for t in TAGGED_CLASSES}
    return SyntheticModel(counts=counts, sensitivity=sens)


def _slice_rng(seed: int, key: SliceKey) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(str(key).encode())])


def _epoch_sensitivity(model: SyntheticModel, cfg: SyntheticBackendConfig, epoch: int | None) -> dict[LesionTag, float]:
    # epoch 0 is the best epoch and keeps the model's own sensitivities; the
    # perturbation pattern depends only on (seed, epoch) so it is shared by all rounds
    if not epoch:
        return dict(model.sensitivity)
    spread = cfg.sigma if cfg.epoch_spread is None else cfg.epoch_spread
    z = np.random.default_rng([cfg.seed, 0x5EED, epoch]).standard_normal(len(TAGGED_CLASSES))
    return {
        t: float(np.clip(model.sensitivity[t] + spread * z[i], 0.0, 1.0))
        for i, t in enumerate(TAGGED_CLASSES)
    }


def synthetic_predict(
    model: SyntheticModel,
    cfg: SyntheticBackendConfig,
    truth: Mapping[SliceKey, Sequence[Annotation]],
    slices: Sequence[SliceKey],
    epoch: int | None = None,
    model_id: str = "synthetic",
) -> dict[SliceKey, list[Detection]]:
    sens = _epoch_sensitivity(model, cfg, epoch)
    size = cfg.image_size
    out: dict[SliceKey, list[Detection]] = {}
    for key in slices:
        rng = _slice_rng(cfg.seed, key)
        dets = []
        lesions = sorted(truth.get(key, ()), key=lambda a: (a.box.as_list(), a.tag.order))
        for a in lesions:
            u = rng.random()
            z = rng.standard_normal()
            j = rng.standard_normal(4)
            if not a.tag.is_tagged:
                continue
            p = sens[a.tag]
            if u >= p:
                continue
            b = a.box
            try:
                box = BBox(
                    b.x_min + cfg.jitter * b.width * j[0],
                    b.y_min + cfg.jitter * b.height * j[1],
                    b.x_max + cfg.jitter * b.width * j[2],
                    b.y_max + cfg.jitter * b.height * j[3],
                )
            except DataError:
                box = b
            score = float(min(max(p + cfg.sigma * z, 0.0), 1.0))
            dets.append(Detection(box, a.tag, score, model_id))
        n_fp = rng.poisson(cfg.fp_rate)
        for _ in range(n_fp):
            w, h = rng.uniform(8.0, 64.0, size=2)
            x0 = rng.uniform(0.0, size - w)
            y0 = rng.uniform(0.0, size - h)
            score = float(rng.uniform(0.0, 0.6))
            tag = TAGGED_CLASSES[int(rng.integers(len(TAGGED_CLASSES)))]
            dets.append(Detection(BBox(x0, y0, x0 + w, y0 + h), tag, score, model_id))
        out[key] = dets
    return out


class SyntheticBackend:
    """File-backed wrapper so the synthetic model plugs into the self-training loop."""

    def __init__(self, cfg: SyntheticBackendConfig, truth: Mapping[SliceKey, Sequence[Annotation]]):
        self.cfg = cfg
        self.truth = {k: tuple(v) for k, v in truth.items()}

    @classmethod
    def from_index(cls, cfg: SyntheticBackendConfig, index: DatasetIndex) -> "SyntheticBackend":
        return cls(cfg, {r.key: r.annotations for r in index.records})

    def train(self, manifest, round: int, out_dir) -> ModelHandle:
        model = synthetic_train(read_manifest(manifest), self.cfg)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {"round": round, **model.to_json()}
        (out_dir / MODEL_FILE).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        return ModelHandle(str(out_dir))

    def load(self, handle: ModelHandle) -> SyntheticModel:
        path = Path(handle.path) / MODEL_FILE
        try:
            return SyntheticModel.from_json(json.loads(path.read_text()))
        except FileNotFoundError:
            raise DataError(f"no synthetic model at {path}") from None

    def predict(self, handle: ModelHandle, slices: Sequence[SliceKey]) -> dict[SliceKey, list[Detection]]:
        model_id = f"{os.path.basename(handle.path)}@{handle.epoch}"
        return synthetic_predict(self.load(handle), self.cfg, self.truth, slices, handle.epoch, model_id)

    def epoch_ensemble(self, handle: ModelHandle) -> list[ModelHandle]:
        return [ModelHandle(handle.path, epoch=e) for e in range(self.cfg.n_epochs)]


# --------------------------------------------------------------------------
# synthetic worlds


def make_synthetic_world(
    n_slices: int = 500,
    seed: int = 0,
    prevalence: Mapping[LesionTag, float] | None = None,
    test_coverage: float = 0.8,
    min_per_class: int = 4,
    lesions_per_slice: Sequence[float] = (0.55, 0.3, 0.15),
) -> tuple[DatasetIndex, set[SliceKey]]:
    """Generate a DeepLesion-shaped index plus a fully-annotated test slice list.

    Unlike real DeepLesion, official-training slices keep their true tags so
    the synthetic detector knows what it should find there. Every class gets
    at least ``min_per_class`` lesions in the official validation+test pool
    and in the fully-annotated test slices.
    """
    rng = np.random.default_rng(seed)
    prevalence = dict(prevalence or REFERENCE_PREVALENCE)
    tags = list(TAGGED_CLASSES)
    weights = np.array([prevalence.get(t, 0.0) for t in tags], dtype=float)
    weights /= weights.sum()

    records: list[SliceRecord] = []
    split_of: dict[SliceKey, int] = {}
    patient = 0
    while len(records) < n_slices:
        patient += 1
        pid = f"{patient:06d}"
        flag = int(rng.choice([OFFICIAL_TRAIN, OFFICIAL_VAL, OFFICIAL_TEST], p=[0.7, 0.15, 0.15]))
        n_patient_slices = int(min(rng.integers(1, 4), n_slices - len(records)))
        for s in range(n_patient_slices):
            key = SliceKey(pid, "01", f"{s + 1:02d}", int(rng.integers(10, 200)))
            n_lesions = 1 + int(rng.choice(len(lesions_per_slice), p=lesions_per_slice))
            anns = []
            for _ in range(n_lesions):
                w, h = rng.uniform(12.0, 60.0, size=2)
                x0 = rng.uniform(0.0, 512.0 - w)
                y0 = rng.uniform(0.0, 512.0 - h)
                tag = tags[int(rng.choice(len(tags), p=weights))]
                anns.append(Annotation(BBox(round(x0, 2), round(y0, 2), round(x0 + w, 2), round(y0 + h, 2)), tag))
            records.append(SliceRecord(key, default_image_ref(key), tuple(anns)))
            split_of[key] = flag

    test_patients = sorted({r.patient_id for r in records if split_of[r.key] == OFFICIAL_TEST})
    n_cov = max(1, int(round(test_coverage * len(test_patients))))
    covered = set(test_patients[:n_cov])
    test_slices = {r.key for r in records if r.patient_id in covered}

    groups = {
        "test": [i for i, r in enumerate(records) if r.key in test_slices],
        "pool": [i for i, r in enumerate(records) if split_of[r.key] != OFFICIAL_TRAIN and r.key not in test_slices],
    }
    for members in groups.values():
        _enforce_min_per_class(records, members, min_per_class, rng)
    return DatasetIndex(records=records, official_split=split_of), test_slices


def _enforce_min_per_class(records: list[SliceRecord], members: list[int], minimum: int, rng) -> None:
    # relabel lesions of the most common class until every class reaches the minimum
    for tag in TAGGED_CLASSES:
        while True:
            counts = class_counts(records[i] for i in members)
            if counts[tag] >= minimum:
                break
            donor = max(counts, key=lambda t: (counts[t], -t.order))
            if counts[donor] <= minimum:
                return
            spots = [(i, j) for i in members for j, a in enumerate(records[i].annotations) if a.tag == donor]
            i, j = spots[int(rng.integers(len(spots)))]
            anns = list(records[i].annotations)
            anns[j] = Annotation(anns[j].box, tag)
            records[i] = SliceRecord(records[i].key, records[i].image_ref, tuple(anns), records[i].repeat_count)
