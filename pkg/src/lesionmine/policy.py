"""Per-round confidence-threshold schedules for selecting mined predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError


@dataclass(frozen=True)
class ThresholdPolicy:
    name: str
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.thresholds:
            raise ConfigError(f"policy {self.name!r} has no rounds")
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ConfigError(f"policy {self.name!r}: threshold {t} outside (0, 1]")

    @property
    def rounds(self) -> int:
        return len(self.thresholds)

    def percents(self) -> list[float]:
        return [round(t * 100, 6) for t in self.thresholds]


STATIC = ThresholdPolicy("static", (0.90, 0.90, 0.90, 0.90))
SEMI_VARIABLE = ThresholdPolicy("semi_variable", (0.90, 0.90, 0.85, 0.85))
VARIABLE = ThresholdPolicy("variable", (0.90, 0.85, 0.80, 0.75))

_BUILTIN = {p.name: p for p in (STATIC, SEMI_VARIABLE, VARIABLE)}


def builtin_policies() -> list[ThresholdPolicy]:
    return [STATIC, SEMI_VARIABLE, VARIABLE]


def threshold_for_round(policy: ThresholdPolicy, round: int) -> float:
    """Threshold applied when mining for ``round`` (1-based)."""
    if not 1 <= round <= policy.rounds:
        raise ConfigError(f"round {round} outside 1..{policy.rounds} for policy {policy.name!r}")
    return policy.thresholds[round - 1]


def parse_policy(spec: "str | Sequence[float] | ThresholdPolicy") -> ThresholdPolicy:
    """Accept a built-in name or a list of per-round thresholds.

    List entries above 1 are read as percentages (``[90, 85]``); entries in
    (0, 1] are taken as fractions already.
    """
    if isinstance(spec, ThresholdPolicy):
        return spec
    if isinstance(spec, str):
        name = spec.strip().lower().replace("-", "_")
        if name in _BUILTIN:
            return _BUILTIN[name]
        if "," in name or name.replace(".", "").isdigit():
            return parse_policy([float(v) for v in name.split(",") if v.strip()])
        raise ConfigError(f"unknown policy {spec!r}; expected one of {sorted(_BUILTIN)} or a list")
    try:
        values = [float(v) for v in spec]
    except (TypeError, ValueError):
        raise ConfigError(f"cannot interpret policy {spec!r}") from None
    fractions = [v / 100.0 if v > 1.0 else v for v in values]
    return ThresholdPolicy("custom", tuple(fractions))


def policy_to_config(policy: ThresholdPolicy) -> "str | list[float]":
    if _BUILTIN.get(policy.name) == policy:
        return policy.name
    return policy.percents()
