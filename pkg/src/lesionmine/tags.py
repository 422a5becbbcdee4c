"""Lesion body-part tags.

DeepLesion encodes the coarse lesion type as an integer 1..8, with -1 for
lesions that carry no tag (the whole official training split).
"""

from __future__ import annotations

from enum import Enum

from .errors import DataError


class LesionTag(str, Enum):
    BONE = "bone"
    ABDOMEN = "abdomen"
    MEDIASTINUM = "mediastinum"
    LIVER = "liver"
    LUNG = "lung"
    KIDNEY = "kidney"
    SOFT_TISSUE = "soft_tissue"
    PELVIS = "pelvis"
    UNTAGGED = "untagged"

    @property
    def code(self) -> int:
        return _CODE_OF[self]

    @property
    def order(self) -> int:
        """Sort position used for deterministic tie-breaking (DeepLesion code order)."""
        return _ORDER_OF[self]

    @property
    def is_tagged(self) -> bool:
        return self is not LesionTag.UNTAGGED

    @classmethod
    def from_code(cls, code: int) -> "LesionTag":
        try:
            return _TAG_OF_CODE[int(code)]
        except (KeyError, ValueError):
            raise DataError(f"unknown coarse lesion type code {code!r}") from None

    @classmethod
    def parse(cls, value: "str | int | LesionTag") -> "LesionTag":
        if isinstance(value, LesionTag):
            return value
        if isinstance(value, int):
            return cls.from_code(value)
        text = str(value).strip().lower().replace(" ", "_")
        try:
            return cls(text)
        except ValueError:
            pass
        try:
            return cls.from_code(int(text))
        except (ValueError, DataError):
            raise DataError(f"unknown lesion tag {value!r}") from None

    def __str__(self) -> str:
        return self.value


_CODE_OF = {
    LesionTag.BONE: 1,
    LesionTag.ABDOMEN: 2,
    LesionTag.MEDIASTINUM: 3,
    LesionTag.LIVER: 4,
    LesionTag.LUNG: 5,
    LesionTag.KIDNEY: 6,
    LesionTag.SOFT_TISSUE: 7,
    LesionTag.PELVIS: 8,
    LesionTag.UNTAGGED: -1,
}
_TAG_OF_CODE = {v: k for k, v in _CODE_OF.items()}
_ORDER_OF = {tag: i for i, tag in enumerate(LesionTag)}

# The eight tagged classes in DeepLesion code order.
TAGGED_CLASSES: tuple[LesionTag, ...] = tuple(t for t in LesionTag if t.is_tagged)

# Column order of the published result tables (rarest to most common).
TABLE_ORDER: tuple[LesionTag, ...] = (
    LesionTag.BONE,
    LesionTag.KIDNEY,
    LesionTag.SOFT_TISSUE,
    LesionTag.PELVIS,
    LesionTag.LIVER,
    LesionTag.MEDIASTINUM,
    LesionTag.ABDOMEN,
    LesionTag.LUNG,
)

TABLE_HEADERS = {
    LesionTag.BONE: "Bone",
    LesionTag.KIDNEY: "Kidney",
    LesionTag.SOFT_TISSUE: "Soft Tissue",
    LesionTag.PELVIS: "Pelvis",
    LesionTag.LIVER: "Liver",
    LesionTag.MEDIASTINUM: "Mediastinum",
    LesionTag.ABDOMEN: "Abdomen",
    LesionTag.LUNG: "Lung",
}


def zero_counts() -> dict[LesionTag, int]:
    return {tag: 0 for tag in TAGGED_CLASSES}
