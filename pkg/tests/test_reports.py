import csv
import io
import json

import pytest

from lesionmine.dataset import build_splits, split_summary
from lesionmine.detector import SyntheticBackend, SyntheticBackendConfig, make_synthetic_world
from lesionmine.mining import SelfTrainConfig, run_self_training
from lesionmine.policy import parse_policy
from lesionmine.reports import (
    ENSEMBLE_LABEL,
    LOW_CONFIDENCE,
    MINED_CLASS,
    ORIGINAL,
    TableRow,
    format_percent,
    read_counts_csv,
    read_table_csv,
    render_split_summary,
    render_text,
    run_tables,
    threshold_series,
    write_plotdata,
    write_run_report,
    write_table_csv,
)
from lesionmine.fusion import Detection
from lesionmine.geometry import BBox
from lesionmine.tags import TABLE_ORDER, LesionTag

from .fakes import ScriptedBackend

# Ensemble-of-rounds sensitivities for the variable policy with upsampling, in table order
ENSEMBLE_PERCENTS = [77.4, 76.5, 83.8, 76.0, 81.8, 78.3, 72.0, 82.4]


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    idx, test = make_synthetic_world(160, seed=2)
    splits = build_splits(idx, test, 0.7, seed=0)
    run_dir = tmp_path_factory.mktemp("run")
    backend = SyntheticBackend.from_index(SyntheticBackendConfig(), idx)
    run_self_training(SelfTrainConfig(policy="variable"), backend, splits, run_dir)
    return run_dir


def test_format_percent():
    assert format_percent(0.774) == "77.4%"
    assert format_percent(0.72) == "72.0%"
    assert format_percent(None) == "-"
    assert format_percent(0.9, decimals=0) == "90%"


def test_reference_ensemble_row_renders():
    values = {t: p / 100 for t, p in zip(TABLE_ORDER, ENSEMBLE_PERCENTS)}
    mean = sum(values.values()) / len(values)
    text = render_text([TableRow(ENSEMBLE_LABEL, values, mean)])
    line = text.splitlines()[2]
    assert line.startswith(ENSEMBLE_LABEL)
    cells = line[len(ENSEMBLE_LABEL):].split()
    assert cells[0] == "77.4%" and cells[-1] == "78.5%"
    assert cells == [f"{p:.1f}%" for p in ENSEMBLE_PERCENTS] + ["78.5%"]


def test_table_csv_round_trip(tmp_path):
    rows = [
        TableRow("Round 0", {t: (i + 1) / 9 for i, t in enumerate(TABLE_ORDER)}, 0.5),
        TableRow("x", {t: None for t in TABLE_ORDER}, None),
    ]
    write_table_csv(tmp_path / "t.csv", rows)
    assert read_table_csv(tmp_path / "t.csv") == rows
    buf = io.StringIO()
    write_table_csv(buf, rows)
    assert buf.getvalue() == (tmp_path / "t.csv").read_text()


def test_run_table_layout(synthetic_run):
    rows, counts = run_tables(synthetic_run)
    # rounds 0..4 plus the ensemble, then the mined-lesion row
    assert [r.label for r in rows] == [
        "Round 0",
        "Round 1 (90%)",
        "Round 2 (85%)",
        "Round 3 (80%)",
        "Round 4 (75%)",
        ENSEMBLE_LABEL,
    ]
    assert [c.label for c in counts] == ["# Lesions mined"]
    paths = write_run_report(synthetic_run)
    with open(paths["sensitivity"]) as fh:
        table = list(csv.reader(fh))
    assert len(table) == 1 + 4 + 2
    assert all(len(r) == 1 + 9 for r in table)
    assert read_table_csv(paths["sensitivity"]) == rows
    assert read_counts_csv(paths["mined"]) == counts
    text = paths["text"].read_text()
    assert "Soft Tissue" in text and "Mean" in text


def test_reports_are_byte_identical(synthetic_run, tmp_path):
    a = write_run_report(synthetic_run, tmp_path / "a")
    b = write_run_report(synthetic_run, tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()


def test_baseline_only_table(tmp_path):
    idx, test = make_synthetic_world(80, seed=1)
    splits = build_splits(idx, test, 0.7, seed=0)
    run_self_training(SelfTrainConfig(rounds=0), SyntheticBackend.from_index(SyntheticBackendConfig(), idx), splits, tmp_path)
    rows, counts = run_tables(tmp_path)
    assert [r.label for r in rows] == ["Round 0"]
    assert [c.label for c in counts] == ["# Lesions used"]
    assert sum(counts[0].counts.values()) > 0


def _mined_line(run_dir, entry):
    path = run_dir / "round_1" / "mined.jsonl"
    path.write_text(json.dumps(entry) + "\n")


def test_plotdata_colour_classes(synthetic_run, tmp_path):
    out = write_plotdata(synthetic_run, tmp_path / "plots")
    records = [json.loads(line) for line in out["overlays"].read_text().splitlines()]
    assert {r["class"] for r in records} <= {ORIGINAL, MINED_CLASS, LOW_CONFIDENCE}
    for r in records:
        if r["class"] == MINED_CLASS:
            assert r["score"] >= {1: 0.90, 2: 0.85, 3: 0.80, 4: 0.75}[r["round"]]
        if r["class"] == LOW_CONFIDENCE:
            assert r["score"] < {1: 0.90, 2: 0.85, 3: 0.80, 4: 0.75}[r["round"]]
    again = write_plotdata(synthetic_run, tmp_path / "plots2")
    assert again["overlays"].read_bytes() == out["overlays"].read_bytes()


def test_one_mined_and_one_rejected_box(tmp_path, mini_index, mini_test_slices):
    splits = build_splits(mini_index, mini_test_slices, 0.7, seed=0)
    key = splits.O_Tr[0].key
    lung = LesionTag.LUNG
    backend = ScriptedBackend(
        {key: [Detection(BBox(10, 10, 40, 40), lung, 0.95), Detection(BBox(100, 100, 130, 130), lung, 0.60)]}
    )
    run_self_training(SelfTrainConfig(rounds=1, upsample=False), backend, splits, tmp_path)
    out = write_plotdata(tmp_path)
    records = [json.loads(line) for line in out["overlays"].read_text().splitlines()]
    assert sorted(r["class"] for r in records) == [LOW_CONFIDENCE, MINED_CLASS]
    by_class = {r["class"]: r for r in records}
    assert by_class[MINED_CLASS]["box"] == [10, 10, 40, 40]
    assert by_class[LOW_CONFIDENCE]["score"] == 0.60


def test_threshold_series():
    pts = [(k, t) for name, k, t in threshold_series([parse_policy("variable")])]
    assert pts == [(1, 0.90), (2, 0.85), (3, 0.80), (4, 0.75)]
    names = {name for name, _, _ in threshold_series()}
    assert names == {"static", "semi_variable", "variable"}


def test_empty_run_dir(tmp_path):
    out = write_plotdata(tmp_path / "empty")
    assert out["overlays"].read_text() == ""
    assert run_tables(tmp_path / "empty") == ([], [])


def test_split_summary_rows_add_up(mini_index, mini_test_slices):
    splits = build_splits(mini_index, mini_test_slices, 0.7, seed=0)
    rows = split_summary(mini_index, splits)
    text = render_split_summary(rows)
    assert text.splitlines()[0].split() == ["Split", "Patients", "Studies", "Series", "Slices", "Lesions"]
    by_name = {r.name: r for r in rows}
    parts = [by_name[n] for n in ("O_Tr", "F_Tr", "F_V", "F_T")]
    for col in ("patients", "studies", "series", "slices", "lesions"):
        assert sum(getattr(r, col) for r in parts) == getattr(by_name["O"], col)
