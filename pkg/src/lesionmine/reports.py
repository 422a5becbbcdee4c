"""Per-round result tables, split summaries and plot data.

Tables have one column per lesion class (bone first, lung last) plus a
Mean column. CSV keeps full precision; the aligned text form shows one
decimal place, e.g. ``77.4%``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import SliceKey, SplitSummaryRow, read_manifest
from .errors import DataError
from .mining import completed_rounds, round_dir
from .policy import ThresholdPolicy, builtin_policies, parse_policy
from .tags import TABLE_HEADERS, TABLE_ORDER, LesionTag

ENSEMBLE_LABEL = "Ensemble of Rounds"
MINED_LABEL = "# Lesions mined"
USED_LABEL = "# Lesions used"
MEAN_HEADER = "Mean"


@dataclass
class TableRow:
    label: str
    values: dict[LesionTag, float | None]
    mean: float | None


@dataclass
class CountRow:
    label: str
    counts: dict[LesionTag, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def share(self, tag: LesionTag) -> float:
        return self.counts[tag] / self.total if self.total else 0.0


def row_from_metrics(label: str, metrics: Mapping) -> TableRow:
    per_class = metrics["per_class"]
    return TableRow(
        label=label,
        values={t: per_class.get(t.value) for t in TABLE_ORDER},
        mean=metrics.get("mean"),
    )


def round_label(metrics: Mapping) -> str:
    k = metrics["round"]
    thr = metrics.get("threshold")
    if thr is None:
        return f"Round {k}"
    return f"Round {k} ({format_percent(thr, decimals=0)})"


def sensitivity_rows(round_metrics: Sequence[Mapping], ensemble: Mapping | None = None) -> list[TableRow]:
    rows = [row_from_metrics(round_label(m), m) for m in round_metrics]
    if ensemble is not None:
        rows.append(row_from_metrics(ENSEMBLE_LABEL, ensemble))
    return rows


def count_row(label: str, counts: Mapping) -> CountRow:
    return CountRow(label, {t: int(counts.get(t.value, counts.get(t, 0))) for t in TABLE_ORDER})


# -- formatting --------------------------------------------------------------


def format_percent(value: float | None, decimals: int = 1) -> str:
    if value is None:
        return "-"
    return f"{100.0 * value:.{decimals}f}%"


def _align(table: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    lines = []
    for n, row in enumerate(table):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def header() -> list[str]:
    return ["Round"] + [TABLE_HEADERS[t] for t in TABLE_ORDER] + [MEAN_HEADER]


def render_text(rows: Sequence[TableRow], counts: Sequence[CountRow] = ()) -> str:
    table = [header()]
    for r in rows:
        table.append([r.label] + [format_percent(r.values[t]) for t in TABLE_ORDER] + [format_percent(r.mean)])
    for c in counts:
        table.append(
            [c.label] + [f"{c.counts[t]} ({format_percent(c.share(t))})" for t in TABLE_ORDER] + ["-"]
        )
    return _align(table)


def _csv_header() -> list[str]:
    return ["row"] + [t.value for t in TABLE_ORDER] + ["mean"]


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def write_table_csv(path_or_buf, rows: Sequence[TableRow]) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_csv_header())
        for r in rows:
            w.writerow([r.label] + [_num(r.values[t]) for t in TABLE_ORDER] + [_num(r.mean)])

    if isinstance(path_or_buf, io.TextIOBase):
        emit(path_or_buf)
    else:
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            emit(fh)


def read_table_csv(path: str | os.PathLike) -> list[TableRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != _csv_header():
            raise DataError(f"{path}: unexpected table header {head}")
        rows = []
        for line in reader:
            vals = [None if c == "" else float(c) for c in line[1:]]
            rows.append(TableRow(line[0], dict(zip(TABLE_ORDER, vals[:-1])), vals[-1]))
    return rows


def write_counts_csv(path: str | os.PathLike, rows: Sequence[CountRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row"] + [t.value for t in TABLE_ORDER] + ["total"])
        for r in rows:
            w.writerow([r.label] + [r.counts[t] for t in TABLE_ORDER] + [r.total])


def read_counts_csv(path: str | os.PathLike) -> list[CountRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [CountRow(line[0], {t: int(v) for t, v in zip(TABLE_ORDER, line[1:-1])}) for line in reader]


# -- run directories -----------------------------------------------------------


def load_run_metrics(run_dir: str | os.PathLike) -> tuple[list[dict], dict | None]:
    """Round metrics in round order (gap-free prefix) and the ensemble metrics if present."""
    run_dir = Path(run_dir)
    rounds = [json.loads((round_dir(run_dir, k) / "metrics.json").read_text()) for k in completed_rounds(run_dir)]
    ens_path = run_dir / "ensemble" / "metrics.json"
    ensemble = json.loads(ens_path.read_text()) if ens_path.exists() else None
    return rounds, ensemble


def run_tables(run_dir: str | os.PathLike) -> tuple[list[TableRow], list[CountRow]]:
    rounds, ensemble = load_run_metrics(run_dir)
    rows = sensitivity_rows(rounds, ensemble)
    counts: list[CountRow] = []
    if rounds:
        last = rounds[-1]
        if last["round"] == 0:
            counts.append(count_row(USED_LABEL, last.get("training_counts", {})))
        else:
            counts.append(count_row(MINED_LABEL, last.get("mined_counts", {})))
    return rows, counts


def write_run_report(run_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> dict[str, Path]:
    """Write sensitivity.csv, mined.csv and report.txt; returns their paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, counts = run_tables(run_dir)
    paths = {
        "sensitivity": out_dir / "sensitivity.csv",
        "mined": out_dir / "mined.csv",
        "text": out_dir / "report.txt",
    }
    write_table_csv(paths["sensitivity"], rows)
    write_counts_csv(paths["mined"], counts)
    text = render_text(rows, counts) if rows else "no completed rounds\n"
    paths["text"].write_text(text, encoding="utf-8")
    return paths


# -- split summaries -------------------------------------------------------------

SPLIT_COLUMNS = ("patients", "studies", "series", "slices", "lesions")


def render_split_summary(rows: Sequence[SplitSummaryRow]) -> str:
    table = [["Split", *[c.capitalize() for c in SPLIT_COLUMNS]]]
    for r in rows:
        table.append([r.name] + [str(getattr(r, c)) for c in SPLIT_COLUMNS])
    return _align(table)


def write_split_summary_csv(path: str | os.PathLike, rows: Sequence[SplitSummaryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", *SPLIT_COLUMNS])
        for r in rows:
            w.writerow([r.name] + [getattr(r, c) for c in SPLIT_COLUMNS])


# -- plot data -------------------------------------------------------------------

ORIGINAL = "original"
MINED_CLASS = "mined"
LOW_CONFIDENCE = "low-confidence"


def overlay_records(run_dir: str | os.PathLike) -> list[dict]:
    """Box-overlay records for every slice touched by mining.

    Boxes accepted in a round are ``mined``; predictions under that round's
    threshold are ``low-confidence``; the slice's existing ground truth is
    ``original``.
    """
    run_dir = Path(run_dir)
    out: list[dict] = []
    for k in completed_rounds(run_dir):
        mined_path = round_dir(run_dir, k) / "mined.jsonl"
        if k == 0 or not mined_path.exists():
            continue
        manifest = {r.key: r for r in read_manifest(round_dir(run_dir, k) / "manifest.jsonl")}
        with open(mined_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                entry = json.loads(line)
                key = entry["key"]
                record = manifest.get(SliceKey.from_json(key))
                base = {"round": k, "key": key, "image_ref": entry["image_ref"], "source": entry.get("source")}
                if record is not None:
                    for a in record.annotations:
                        if not a.is_mined:
                            out.append({**base, "box": a.box.as_list(), "tag": a.tag.value, "score": None, "class": ORIGINAL})
                for a in entry["annotations"]:
                    out.append({**base, "box": a["box"], "tag": a["tag"], "score": a.get("score"), "class": MINED_CLASS})
                for d in entry.get("rejected", []):
                    out.append({**base, "box": d["box"], "tag": d["tag"], "score": d["score"], "class": LOW_CONFIDENCE})
    return out


def threshold_series(policies: Iterable[ThresholdPolicy] | None = None) -> list[tuple[str, int, float]]:
    """(policy, round, threshold) points for plotting threshold schedules."""
    policies = list(builtin_policies() if policies is None else policies)
    return [(p.name, k, t) for p in policies for k, t in enumerate(p.thresholds, start=1)]


def write_plotdata(run_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> dict[str, Path]:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plotdata"
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = builtin_policies()
    run_json = run_dir / "run.json"
    if run_json.exists():
        st = json.loads(run_json.read_text()).get("selftrain", {})
        if st.get("policy_name") == "custom":
            policies.append(parse_policy(st["thresholds"]))
    paths = {"overlays": out_dir / "overlays.jsonl", "thresholds": out_dir / "thresholds.csv"}
    with open(paths["overlays"], "w", encoding="utf-8", newline="\n") as fh:
        for rec in overlay_records(run_dir):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(paths["thresholds"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "round", "threshold"])
        for name, k, t in threshold_series(policies):
            w.writerow([name, k, repr(t)])
    return paths
