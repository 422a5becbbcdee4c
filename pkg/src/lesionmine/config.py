"""Run configuration: one TOML file with flat sections.

::

    [paths]
    index = "DL_info.csv"          # DeepLesion index; omit for a synthetic world
    test_list = "test_slices.txt"  # fully annotated test slices
    run_dir = "runs/variable"

    [split]
    train_fraction = 0.7
    seed = 0

    [selftrain]
    policy = "variable"            # or a list of percents, e.g. [90, 85, 80, 75]
    rounds = 4
    upsample = true

    [fusion]
    iou_threshold = 0.5

    [eval]
    primary_operating_point = 4.0

    [backend]
    kind = "synthetic"             # or "external" with command = [...]

    [backend.synthetic]
    kappa = 30.0

    [world]                        # synthetic world used when no index is given
    n_slices = 500
    seed = 0

Relative paths are resolved against the config file's directory. Only paths
can be overridden from the environment (``LESIONMINE_INDEX``,
``LESIONMINE_TEST_LIST``, ``LESIONMINE_RUN_DIR``).
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .evaluation import EvalConfig
from .fusion import FusionConfig
from .mining import SelfTrainConfig
from .policy import parse_policy, policy_to_config

ENV_OVERRIDES = {
    "index": "LESIONMINE_INDEX",
    "test_list": "LESIONMINE_TEST_LIST",
    "run_dir": "LESIONMINE_RUN_DIR",
}

BACKEND_KINDS = ("synthetic", "external")


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "synthetic"
    command: tuple[str, ...] = ()
    timeout: float = 600.0
    max_line_length: int = 1 << 20
    # keyword arguments for SyntheticBackendConfig
    synthetic: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))
        if self.kind == "external" and not self.command:
            raise ConfigError("external backend needs a command")
        if self.timeout <= 0 or self.max_line_length <= 0:
            raise ConfigError("backend timeout and max_line_length must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "command": list(self.command),
            "timeout": self.timeout,
            "max_line_length": self.max_line_length,
            "synthetic": dict(self.synthetic),
        }


@dataclass(frozen=True)
class WorldSpec:
    n_slices: int = 500
    seed: int = 0
    test_coverage: float = 0.8

    def __post_init__(self) -> None:
        if self.n_slices < 10:
            raise ConfigError("a synthetic world needs at least 10 slices")


@dataclass(frozen=True)
class RunConfig:
    index: Path | None = None
    test_list: Path | None = None
    run_dir: Path | None = None
    train_fraction: float = 0.7
    split_seed: int = 0
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    backend: BackendSpec = field(default_factory=BackendSpec)
    world: WorldSpec = field(default_factory=WorldSpec)

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    @property
    def uses_synthetic_world(self) -> bool:
        return self.index is None

    def validate(self) -> "RunConfig":
        """Check that referenced inputs exist and the combination makes sense."""
        if self.index is None:
            if self.backend.kind != "synthetic":
                raise ConfigError("paths.index is required unless the synthetic backend is used")
        else:
            if not self.index.is_file():
                raise ConfigError(f"index file not found: {self.index}")
            if self.test_list is None:
                raise ConfigError("paths.test_list is required with a real index")
        if self.test_list is not None and not self.test_list.is_file():
            raise ConfigError(f"test slice list not found: {self.test_list}")
        return self

    def with_overrides(self, **changes) -> "RunConfig":
        """Apply CLI flags; ``None`` values leave the field alone."""
        st_changes = {}
        for key in ("policy", "rounds", "upsample", "seed"):
            value = changes.pop(key, None)
            if value is not None:
                st_changes[key] = value
        cfg = self
        if st_changes:
            if "policy" in st_changes and "rounds" not in st_changes:
                # a new policy with the old round count may not fit
                pol = parse_policy(st_changes["policy"])
                if cfg.selftrain.rounds is not None and cfg.selftrain.rounds > pol.rounds:
                    st_changes["rounds"] = None
            cfg = replace(cfg, selftrain=replace(cfg.selftrain, **st_changes))
        kind = changes.pop("backend", None)
        if kind is not None:
            cfg = replace(cfg, backend=replace(cfg.backend, kind=kind))
        for key in ("index", "test_list", "run_dir"):
            value = changes.pop(key, None)
            if value is not None:
                cfg = replace(cfg, **{key: Path(value)})
        if changes:
            raise ConfigError(f"unknown overrides {sorted(changes)}")
        return cfg

    def to_dict(self) -> dict:
        st = self.selftrain
        return {
            "paths": {
                k: (str(getattr(self, k)) if getattr(self, k) is not None else None)
                for k in ("index", "test_list", "run_dir")
            },
            "split": {"train_fraction": self.train_fraction, "seed": self.split_seed},
            "selftrain": {
                "policy": policy_to_config(st.policy),
                "rounds": st.rounds,
                "upsample": st.upsample,
                "intra_patient_mining": st.intra_patient_mining,
                "dedup_iou": st.dedup_iou,
                "use_epoch_ensemble": st.use_epoch_ensemble,
                "remine_mined_slices": st.remine_mined_slices,
                "context_offsets": list(st.context_offsets),
                "seed": st.seed,
            },
            "fusion": {
                "iou_threshold": st.fusion.iou_threshold,
                "skip_score_threshold": st.fusion.skip_score_threshold,
            },
            "eval": {
                "iou_threshold": st.eval.iou_threshold,
                "fp_per_image_points": list(st.eval.fp_per_image_points),
                "primary_operating_point": st.eval.primary_operating_point,
                "tag_required": st.eval.tag_required,
            },
            "backend": self.backend.to_dict(),
            "world": {"n_slices": self.world.n_slices, "seed": self.world.seed, "test_coverage": self.world.test_coverage},
        }

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: str | os.PathLike | None = None) -> "RunConfig":
        data = dict(data)
        known = {"paths", "split", "selftrain", "fusion", "eval", "backend", "world"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

        def section(name: str, allowed: set[str]) -> dict:
            sec = data.get(name) or {}
            if not isinstance(sec, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            extra = set(sec) - allowed
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            return dict(sec)

        paths = section("paths", set(ENV_OVERRIDES))
        split = section("split", {"train_fraction", "seed"})
        st = section("selftrain", {f.name for f in fields(SelfTrainConfig)} - {"fusion", "eval"})
        fusion = section("fusion", {"iou_threshold", "skip_score_threshold"})
        ev = section("eval", {f.name for f in fields(EvalConfig)})
        backend = section("backend", {f.name for f in fields(BackendSpec)})
        world = section("world", {f.name for f in fields(WorldSpec)})

        resolved = {}
        for key, env in ENV_OVERRIDES.items():
            value = os.environ.get(env) or paths.get(key)
            if value is None:
                resolved[key] = None
                continue
            p = Path(value).expanduser()
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            resolved[key] = p

        try:
            if "fp_per_image_points" in ev:
                ev["fp_per_image_points"] = tuple(ev["fp_per_image_points"])
            if "context_offsets" in st:
                st["context_offsets"] = tuple(st["context_offsets"])
            selftrain = SelfTrainConfig(fusion=FusionConfig(**fusion), eval=EvalConfig(**ev), **st)
            return cls(
                train_fraction=float(split.get("train_fraction", 0.7)),
                split_seed=int(split.get("seed", 0)),
                selftrain=selftrain,
                backend=BackendSpec(**backend),
                world=WorldSpec(**world),
                **resolved,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from None


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read a TOML config; ``None`` gives the defaults (plus path overrides from the environment)."""
    if path is None:
        return RunConfig.from_dict({}, base_dir=Path.cwd())
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(data, base_dir=path.parent)
