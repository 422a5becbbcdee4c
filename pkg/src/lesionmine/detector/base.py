from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence, runtime_checkable

from ..dataset import SliceKey
from ..fusion import Detection


@dataclass(frozen=True)
class ModelHandle:
    """Opaque reference to a trained model; ``path`` is owned by the backend."""

    path: str
    epoch: int | None = None

    def to_json(self, relative_to: str | os.PathLike | None = None) -> dict:
        path = self.path
        if relative_to is not None:
            path = os.path.relpath(path, relative_to)
        return {"path": path.replace(os.sep, "/"), "epoch": self.epoch}

    @classmethod
    def from_json(cls, obj: Mapping, relative_to: str | os.PathLike | None = None) -> "ModelHandle":
        path = str(obj["path"])
        if relative_to is not None and not os.path.isabs(path):
            path = os.path.join(relative_to, path)
        return cls(path=path, epoch=obj.get("epoch"))


@runtime_checkable
class DetectorBackend(Protocol):
    """What the self-training loop needs from a detector.

    ``train`` always starts from scratch. ``predict`` must be deterministic for
    a fixed handle and input, and must only return keys it was asked about.
    ``epoch_ensemble`` returns at most five handles, best epoch first.
    """

    def train(self, manifest: str | os.PathLike, round: int, out_dir: str | os.PathLike) -> ModelHandle: ...

    def predict(self, handle: ModelHandle, slices: Sequence[SliceKey]) -> dict[SliceKey, list[Detection]]: ...

    def epoch_ensemble(self, handle: ModelHandle) -> list[ModelHandle]: ...
