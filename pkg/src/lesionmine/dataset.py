"""Slice-level annotation records, DeepLesion ingestion, patient-level splits and
class-balancing upsampling.

A dataset manifest is line-delimited JSON with one object per slice::

    {"key": {...}, "image_ref": "...", "repeat_count": 1,
     "annotations": [{"box": [x1, y1, x2, y2], "tag": "liver",
                      "provenance": "ground_truth"}, ...]}

Mined annotations additionally carry ``round`` and ``score``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, ParseError
from .geometry import BBox
from .tags import TAGGED_CLASSES, LesionTag, zero_counts

GROUND_TRUTH = "ground_truth"
MINED = "mined"

OFFICIAL_TRAIN, OFFICIAL_VAL, OFFICIAL_TEST = 1, 2, 3

SPLIT_NAMES = ("O_Tr", "F_Tr", "F_V", "F_T")


class SliceKey(NamedTuple):
    patient_id: str
    study_id: str
    series_id: str
    slice_index: int

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "study_id": self.study_id,
            "series_id": self.series_id,
            "slice_index": self.slice_index,
        }

    @classmethod
    def from_json(cls, obj) -> "SliceKey":
        if isinstance(obj, str):
            return parse_file_name(obj)
        if isinstance(obj, (list, tuple)) and len(obj) == 4:
            return cls(str(obj[0]), str(obj[1]), str(obj[2]), int(obj[3]))
        try:
            return cls(
                str(obj["patient_id"]),
                str(obj["study_id"]),
                str(obj["series_id"]),
                int(obj["slice_index"]),
            )
        except (KeyError, TypeError, ValueError):
            raise DataError(f"malformed slice key {obj!r}") from None

    @property
    def file_name(self) -> str:
        return f"{self.patient_id}_{self.study_id}_{self.series_id}_{self.slice_index:03d}.png"

    def __str__(self) -> str:
        return self.file_name


_FILE_NAME_RE = re.compile(r"^(?P<p>[^_/\\]+)_(?P<st>[^_/\\]+)_(?P<se>[^_/\\]+)_(?P<sl>\d+)(\.png)?$")


def parse_file_name(name: str) -> SliceKey:
    """Parse a DeepLesion ``File_name`` such as ``000001_01_01_109.png``."""
    m = _FILE_NAME_RE.match(name.strip())
    if m is None:
        raise DataError(f"cannot parse DeepLesion file name {name!r}")
    return SliceKey(m["p"], m["st"], m["se"], int(m["sl"]))


def default_image_ref(key: SliceKey) -> str:
    return f"Images_png/{key.patient_id}_{key.study_id}_{key.series_id}/{key.slice_index:03d}.png"


@dataclass(frozen=True)
class Annotation:
    box: BBox
    tag: LesionTag
    provenance: str = GROUND_TRUTH
    round: int | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if self.provenance == MINED:
            if self.round is None or self.round < 1:
                raise DataError("mined annotations need a round >= 1")
            if self.score is None or not 0.0 <= self.score <= 1.0:
                raise DataError("mined annotations need a score in [0, 1]")
            if not self.tag.is_tagged:
                raise DataError("mined annotations carry the predicted tag")
        elif self.provenance == GROUND_TRUTH:
            if self.round is not None or self.score is not None:
                raise DataError("ground-truth annotations carry no round/score")
        else:
            raise DataError(f"unknown provenance {self.provenance!r}")

    @property
    def is_mined(self) -> bool:
        return self.provenance == MINED

    def to_json(self) -> dict:
        out = {"box": self.box.as_list(), "tag": self.tag.value, "provenance": self.provenance}
        if self.is_mined:
            out["round"] = self.round
            out["score"] = self.score
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        try:
            return cls(
                box=BBox.from_seq(obj["box"]),
                tag=LesionTag.parse(obj["tag"]),
                provenance=obj.get("provenance", GROUND_TRUTH),
                round=obj.get("round"),
                score=obj.get("score"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed annotation {obj!r}: {exc}") from None


@dataclass(frozen=True)
class SliceRecord:
    key: SliceKey
    image_ref: str | None = None
    annotations: tuple[Annotation, ...] = ()
    repeat_count: int = 1

    def __post_init__(self) -> None:
        if self.repeat_count < 1:
            raise DataError(f"repeat_count must be >= 1, got {self.repeat_count}")
        if not isinstance(self.annotations, tuple):
            object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def patient_id(self) -> str:
        return self.key.patient_id

    def tag_counts(self) -> Counter:
        """Tagged lesions on one copy of the slice (no multiplicity)."""
        return Counter(a.tag for a in self.annotations if a.tag.is_tagged)

    def to_json(self) -> dict:
        return {
            "key": self.key.to_json(),
            "image_ref": self.image_ref,
            "repeat_count": self.repeat_count,
            "annotations": [a.to_json() for a in self.annotations],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SliceRecord":
        try:
            return cls(
                key=SliceKey.from_json(obj["key"]),
                image_ref=obj.get("image_ref"),
                annotations=tuple(Annotation.from_json(a) for a in obj.get("annotations", [])),
                repeat_count=int(obj.get("repeat_count", 1)),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest record: {exc}") from None


@dataclass
class DatasetIndex:
    records: list[SliceRecord]
    official_split: dict[SliceKey, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def by_key(self) -> dict[SliceKey, SliceRecord]:
        return {r.key: r for r in self.records}


@dataclass
class SplitSet:
    O_Tr: list[SliceRecord]
    F_Tr: list[SliceRecord]
    F_V: list[SliceRecord]
    F_T: list[SliceRecord]
    seed: int
    # original O_Tr annotations, kept only for visualization
    stripped: dict[SliceKey, tuple[Annotation, ...]] = field(default_factory=dict)

    def members(self) -> dict[str, list[SliceRecord]]:
        return {"O_Tr": self.O_Tr, "F_Tr": self.F_Tr, "F_V": self.F_V, "F_T": self.F_T}

    def patients(self, name: str) -> set[str]:
        return {r.patient_id for r in self.members()[name]}


# --------------------------------------------------------------------------
# manifests


def dumps_record(record: SliceRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True)


def write_manifest(path: str | os.PathLike, records: Iterable[SliceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_record(r))
            fh.write("\n")


def read_manifest(path: str | os.PathLike) -> list[SliceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON in {path}: {exc}", row=lineno) from None
            try:
                records.append(SliceRecord.from_json(obj))
            except DataError as exc:
                raise ParseError(f"{path}: {exc}", row=lineno) from None
    return records


# --------------------------------------------------------------------------
# DeepLesion DL_info.csv


REQUIRED_COLUMNS = ("File_name", "Bounding_boxes", "Coarse_lesion_type", "Train_Val_Test")


def parse_boxes(field_text: str) -> list[BBox]:
    """Parse ``"x1, y1, x2, y2[, x1, y1, x2, y2 ...]"`` into boxes."""
    parts = [p.strip() for p in field_text.split(",")]
    if parts == [""]:
        raise DataError("empty bounding box field")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise DataError(f"non-numeric bounding box field {field_text!r}") from None
    if len(values) % 4:
        raise DataError(f"bounding box field needs a multiple of 4 numbers, got {len(values)}")
    return [BBox.from_seq(values[i : i + 4]) for i in range(0, len(values), 4)]


def load_deeplesion_index(index_file: str | os.PathLike) -> DatasetIndex:
    """Read a ``DL_info.csv``-format file into one record per annotated slice.

    Rows sharing a ``File_name`` (DeepLesion lists one lesion per row) are
    merged into one slice. Records come back sorted by slice key.
    """
    grouped: dict[SliceKey, list[Annotation]] = {}
    split_of: dict[SliceKey, int] = {}
    with open(index_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if header and missing:
            raise ParseError(f"missing columns {missing}", row=1)
        for row in reader:
            rowno = reader.line_num
            try:
                key = parse_file_name(row["File_name"] or "")
                boxes = parse_boxes(row["Bounding_boxes"] or "")
                tag = LesionTag.from_code(int(float(row["Coarse_lesion_type"])))
                flag = int(row["Train_Val_Test"])
            except (DataError, ValueError, TypeError) as exc:
                raise ParseError(str(exc), row=rowno) from None
            if flag not in (OFFICIAL_TRAIN, OFFICIAL_VAL, OFFICIAL_TEST):
                raise ParseError(f"Train_Val_Test must be 1, 2 or 3, got {flag}", row=rowno)
            if split_of.setdefault(key, flag) != flag:
                raise ParseError(f"slice {key} listed under two official splits", row=rowno)
            grouped.setdefault(key, []).extend(Annotation(b, tag) for b in boxes)
    records = [
        SliceRecord(key=k, image_ref=default_image_ref(k), annotations=tuple(grouped[k]))
        for k in sorted(grouped)
    ]
    return DatasetIndex(records=records, official_split=split_of)


def read_slice_list(path: str | os.PathLike) -> set[SliceKey]:
    """One DeepLesion file name per line; blank lines and ``#`` comments ignored."""
    keys = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                keys.add(parse_file_name(text.split(",")[0]))
            except DataError as exc:
                raise ParseError(str(exc), row=lineno) from None
    return keys


# --------------------------------------------------------------------------
# splits


def build_splits(
    index: DatasetIndex,
    fully_annotated_test_slices: Iterable[SliceKey],
    train_fraction: float = 0.7,
    seed: int = 0,
) -> SplitSet:
    """Construct the patient-disjoint O_Tr / F_Tr / F_V / F_T partition.

    F_T is the overlap of the fully annotated slice list with the official
    test split. Its patients leave the official validation+test pool; the
    remaining patients are shuffled with ``seed`` and cut at
    ``train_fraction`` into F_Tr and F_V. O_Tr is the official training split
    with its annotations stripped.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    wanted = set(fully_annotated_test_slices)
    split_of = index.official_split

    f_t = [r for r in index.records if r.key in wanted and split_of.get(r.key) == OFFICIAL_TEST]
    if not f_t:
        raise DataError("the fully annotated test list does not overlap the official test split")
    test_patients = {r.patient_id for r in f_t}

    pool = [
        r
        for r in index.records
        if split_of.get(r.key) in (OFFICIAL_VAL, OFFICIAL_TEST) and r.patient_id not in test_patients
    ]
    pool_patients = sorted({r.patient_id for r in pool})
    if not pool_patients:
        raise DataError("no patients left for training/validation after removing F_T patients")

    rng = np.random.default_rng(seed)
    shuffled = [pool_patients[i] for i in rng.permutation(len(pool_patients))]
    n_train = int(math.floor(train_fraction * len(shuffled) + 0.5))
    train_patients = set(shuffled[:n_train])

    f_tr = [r for r in pool if r.patient_id in train_patients]
    f_v = [r for r in pool if r.patient_id not in train_patients]

    # official splits are patient-level; guard anyway so the partition stays disjoint
    held_out = test_patients | set(pool_patients)
    o_tr, stripped = [], {}
    for r in index.records:
        if split_of.get(r.key) == OFFICIAL_TRAIN and r.patient_id not in held_out:
            stripped[r.key] = r.annotations
            o_tr.append(replace(r, annotations=(), repeat_count=1))
    return SplitSet(O_Tr=o_tr, F_Tr=f_tr, F_V=f_v, F_T=f_t, seed=seed, stripped=stripped)


def write_splits(directory: str | os.PathLike, splits: SplitSet) -> None:
    directory = Path(directory)
    for name, records in splits.members().items():
        write_manifest(directory / f"{name}.jsonl", records)
    write_manifest(
        directory / "O_Tr_stripped.jsonl",
        (SliceRecord(k, None, anns) for k, anns in sorted(splits.stripped.items())),
    )
    (directory / "split.json").write_text(json.dumps({"seed": splits.seed}) + "\n")


def read_splits(directory: str | os.PathLike) -> SplitSet:
    directory = Path(directory)
    members = {name: read_manifest(directory / f"{name}.jsonl") for name in SPLIT_NAMES}
    stripped_path = directory / "O_Tr_stripped.jsonl"
    stripped = {}
    if stripped_path.exists():
        stripped = {r.key: r.annotations for r in read_manifest(stripped_path)}
    seed = json.loads((directory / "split.json").read_text())["seed"]
    return SplitSet(**members, seed=seed, stripped=stripped)


@dataclass(frozen=True)
class SplitSummaryRow:
    name: str
    patients: int
    studies: int
    series: int
    slices: int
    lesions: int


def summarize(name: str, records: Sequence[SliceRecord], lesions: int | None = None) -> SplitSummaryRow:
    keys = [r.key for r in records]
    return SplitSummaryRow(
        name=name,
        patients=len({k.patient_id for k in keys}),
        studies=len({(k.patient_id, k.study_id) for k in keys}),
        series=len({(k.patient_id, k.study_id, k.series_id) for k in keys}),
        slices=len(keys),
        lesions=sum(len(r.annotations) for r in records) if lesions is None else lesions,
    )


def split_summary(index: DatasetIndex, splits: SplitSet) -> list[SplitSummaryRow]:
    rows = [summarize("O", index.records)]
    rows.append(summarize("O_Tr", splits.O_Tr, lesions=sum(len(a) for a in splits.stripped.values())))
    for name in ("F_T", "F_Tr", "F_V"):
        rows.append(summarize(name, splits.members()[name]))
    return rows


# --------------------------------------------------------------------------
# class balance


def class_counts(records: Iterable[SliceRecord]) -> dict[LesionTag, int]:
    """Tagged lesions per class, counting each slice ``repeat_count`` times."""
    counts = zero_counts()
    for r in records:
        for tag, n in r.tag_counts().items():
            counts[tag] += n * r.repeat_count
    return counts


@dataclass(frozen=True)
class UpsampleReport:
    target: int
    before: Mapping[LesionTag, int]
    after: Mapping[LesionTag, int]

    @property
    def per_class_disparity(self) -> dict[LesionTag, int]:
        return {t: self.after[t] - self.target for t in TAGGED_CLASSES if self.before[t] > 0}

    @property
    def total_disparity(self) -> int:
        return sum(abs(v) for v in self.per_class_disparity.values())


def upsample_with_report(records: Sequence[SliceRecord]) -> tuple[list[SliceRecord], UpsampleReport]:
    """Repeat whole slices of minority classes until each reaches the majority count.

    Classes are processed rarest first. Within a class, slices are cycled in
    ascending key order; when the next slice would overshoot the remaining
    deficit, the slice whose lesion count fits the deficit most closely is
    used instead, and only if none fits is the smallest overshoot accepted.
    Every lesion on a repeated slice counts toward its own class.
    """
    records = list(records)
    per_slice = [r.tag_counts() for r in records]
    before = class_counts(records)
    present = [t for t in TAGGED_CLASSES if before[t] > 0]
    if not present:
        raise DataError("upsampling needs at least one tagged lesion")
    target = max(before.values())
    counts = dict(before)
    repeat = [r.repeat_count for r in records]

    for tag in sorted(present, key=lambda t: (before[t], t.order)):
        holders = sorted((i for i, c in enumerate(per_slice) if c[tag]), key=lambda i: records[i].key)
        pos = 0
        while counts[tag] < target:
            deficit = target - counts[tag]
            i = holders[pos % len(holders)]
            if per_slice[i][tag] <= deficit:
                pos += 1
            else:
                fitting = [j for j in holders if per_slice[j][tag] <= deficit]
                if fitting:
                    i = min(fitting, key=lambda j: (-per_slice[j][tag], records[j].key))
                else:
                    i = min(holders, key=lambda j: (per_slice[j][tag], records[j].key))
            repeat[i] += 1
            for t, n in per_slice[i].items():
                counts[t] += n

    out = [
        r if repeat[i] == r.repeat_count else replace(r, repeat_count=repeat[i])
        for i, r in enumerate(records)
    ]
    return out, UpsampleReport(target=target, before=before, after=counts)


def upsample_balance(records: Sequence[SliceRecord]) -> list[SliceRecord]:
    return upsample_with_report(records)[0]


def expand_repeats(records: Iterable[SliceRecord]) -> list[SliceRecord]:
    """Materialize ``repeat_count`` as duplicated entries, for backends that need it."""
    return [replace(r, repeat_count=1) for r in records for _ in range(r.repeat_count)]


def bundled_fixture(name: str) -> Path:
    """Path of a small DeepLesion-format file shipped with the package."""
    path = Path(__file__).parent / "data" / name
    if not path.exists():
        raise DataError(f"no bundled fixture named {name!r}")
    return path
