"""``lesionmine`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .config import RunConfig, load_config
from .dataset import (
    SPLIT_NAMES,
    DatasetIndex,
    SliceKey,
    build_splits,
    load_deeplesion_index,
    read_manifest,
    read_slice_list,
    read_splits,
    split_summary,
    write_splits,
)
from .detector import ExternalBackend, SyntheticBackend, SyntheticBackendConfig, make_synthetic_world
from .errors import ConfigError, DataError, LesionMineError, ParseError
from .evaluation import EvalConfig, metrics_json
from .fusion import Detection, FusionConfig, weighted_boxes_fusion
from .mining import completed_rounds, evaluate_predictions, run_self_training
from .reports import render_split_summary, render_text, run_tables, write_plotdata, write_run_report, write_split_summary_csv
from .tags import TAGGED_CLASSES

log = logging.getLogger("lesionmine")


# -- prediction files -----------------------------------------------------------


def read_predictions(path) -> dict[SliceKey, list[Detection]]:
    """JSONL, one ``{"key": ..., "detections": [...]}`` object per slice."""
    out: dict[SliceKey, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = SliceKey.from_json(obj["key"])
                dets = [Detection.from_json(d) for d in obj["detections"]]
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                raise ParseError(f"{path}: bad prediction line ({exc})", row=lineno) from None
            out.setdefault(key, []).extend(dets)
    return out


def write_predictions(path, predictions) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(predictions):
            dets = [d.to_json() for d in predictions[key]]
            fh.write(json.dumps({"key": key.to_json(), "detections": dets}, sort_keys=True) + "\n")


# -- wiring -----------------------------------------------------------------------


def load_inputs(cfg: RunConfig) -> tuple[DatasetIndex, set[SliceKey]]:
    cfg.validate()
    if cfg.uses_synthetic_world:
        w = cfg.world
        return make_synthetic_world(w.n_slices, seed=w.seed, test_coverage=w.test_coverage)
    index = load_deeplesion_index(cfg.index)
    return index, read_slice_list(cfg.test_list)


def make_backend(cfg: RunConfig, index: DatasetIndex):
    spec = cfg.backend
    if spec.kind == "synthetic":
        try:
            syn = SyntheticBackendConfig.from_json(dict(spec.synthetic))
        except TypeError as exc:
            raise ConfigError(f"bad [backend.synthetic] section: {exc}") from None
        return SyntheticBackend.from_index(syn, index)
    return ExternalBackend(spec.command, timeout=spec.timeout, max_line_length=spec.max_line_length)


def _close(backend) -> None:
    close = getattr(backend, "close", None)
    if close is not None:
        close()


def _resolve_config(config, run_dir=None, **overrides) -> RunConfig:
    cfg = load_config(config)
    cfg = cfg.with_overrides(run_dir=run_dir, **overrides)
    return cfg


def _require_run_dir(cfg: RunConfig) -> Path:
    if cfg.run_dir is None:
        raise ConfigError("no run directory; pass --run-dir or set paths.run_dir")
    return cfg.run_dir


def _run_info(cfg: RunConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "seeds": {
            "split": cfg.split_seed,
            "selftrain": cfg.selftrain.seed,
            "backend": cfg.backend.synthetic.get("seed", 0) if cfg.backend.kind == "synthetic" else None,
            "world": cfg.world.seed if cfg.uses_synthetic_world else None,
        },
        "version": __version__,
    }


# -- commands ----------------------------------------------------------------------

config_option = click.option("--config", "config", type=click.Path(dir_okay=False), help="TOML run configuration.")
run_dir_option = click.option("--run-dir", type=click.Path(file_okay=False), help="Run directory (overrides paths.run_dir).")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More logging.")
def cli(verbose: int) -> None:
    """Self-training toolkit for lesion detection and tagging."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@run_dir_option
@click.option("--seed", type=int, help="Split seed.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default: <run-dir>/splits).")
def split(config, run_dir, seed, out) -> None:
    """Build patient-disjoint splits and print their summary."""
    cfg = _resolve_config(config, run_dir)
    if seed is not None:
        cfg = replace(cfg, split_seed=seed)
    index, test_slices = load_inputs(cfg)
    splits = build_splits(index, test_slices, cfg.train_fraction, cfg.split_seed)
    out_dir = Path(out) if out else _require_run_dir(cfg) / "splits"
    write_splits(out_dir, splits)
    rows = split_summary(index, splits)
    write_split_summary_csv(out_dir / "summary.csv", rows)
    text = render_split_summary(rows)
    (out_dir / "summary.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


def _selftrain_overrides(policy, rounds, no_upsample, backend, seed) -> dict:
    return {
        "policy": policy,
        "rounds": rounds,
        "upsample": False if no_upsample else None,
        "backend": backend,
        "seed": seed,
    }


def _run_options(f):
    for opt in reversed(
        [
            config_option,
            run_dir_option,
            click.option("--policy", help="static, semi_variable, variable, or comma-separated percents."),
            click.option("--rounds", type=int, help="Mining rounds (at most the policy length)."),
            click.option("--no-upsample", is_flag=True, help="Train on mined data without class balancing."),
            click.option("--backend", type=click.Choice(["synthetic", "external"]), help="Detector backend."),
            click.option("--seed", type=int, help="Seed for splitting and self-training."),
        ]
    ):
        f = opt(f)
    return f


def _execute(cfg: RunConfig, resume: bool, max_round: int | None = None):
    run_dir = _require_run_dir(cfg)
    index, test_slices = load_inputs(cfg)
    splits_dir = run_dir / "splits"
    if resume and (splits_dir / "split.json").exists():
        splits = read_splits(splits_dir)
    else:
        splits = build_splits(index, test_slices, cfg.train_fraction, cfg.split_seed)
    backend = make_backend(cfg, index)
    try:
        result = run_self_training(
            cfg.selftrain, backend, splits, run_dir, resume=resume, extra_run_info=_run_info(cfg), max_round=max_round
        )
    finally:
        _close(backend)
    write_run_report(run_dir)
    return result


@cli.command()
@_run_options
@click.option("--resume", is_flag=True, help="Continue after the last completed round.")
def run(config, run_dir, policy, rounds, no_upsample, backend, seed, resume) -> None:
    """Baseline plus every mining round, then the round ensemble and tables."""
    cfg = _resolve_config(config, run_dir, **_selftrain_overrides(policy, rounds, no_upsample, backend, seed))
    if seed is not None:
        cfg = replace(cfg, split_seed=seed)
    _execute(cfg, resume)
    rows, counts = run_tables(cfg.run_dir)
    click.echo(render_text(rows, counts), nl=False)


@cli.command()
@_run_options
def mine(config, run_dir, policy, rounds, no_upsample, backend, seed) -> None:
    """Advance a run by one round (the baseline if nothing has run yet)."""
    cfg = _resolve_config(config, run_dir, **_selftrain_overrides(policy, rounds, no_upsample, backend, seed))
    if seed is not None:
        cfg = replace(cfg, split_seed=seed)
    done = completed_rounds(_require_run_dir(cfg))
    target = done[-1] + 1 if done else 0
    if target > cfg.selftrain.n_rounds:
        raise ConfigError(f"all {cfg.selftrain.n_rounds} rounds are already complete")
    result = _execute(cfg, resume=bool(done), max_round=target)
    m = result.states[-1].metrics
    click.echo(f"round {m['round']}: mean sensitivity {m['mean']:.4f}")


@cli.command("eval")
@click.option("--predictions", required=True, type=click.Path(exists=True, dir_okay=False), help="Prediction JSONL.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), help="Ground-truth manifest.")
@click.option("--split", "split_name", type=click.Choice(SPLIT_NAMES), default="F_T", show_default=True)
@config_option
@run_dir_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
def eval_cmd(predictions, manifest, split_name, config, run_dir, out) -> None:
    """Score a prediction file against a ground-truth manifest or split."""
    cfg = _resolve_config(config, run_dir)
    if manifest is not None:
        records = read_manifest(manifest)
    else:
        records = read_splits(_require_run_dir(cfg) / "splits").members()[split_name]
    preds = read_predictions(predictions)
    wanted = {r.key for r in records}
    unknown = [k for k in preds if k not in wanted]
    if unknown:
        raise DataError(f"{len(unknown)} predicted slices are not in the ground truth, e.g. {unknown[0]}")
    if not any(preds.values()):
        click.echo("warning: prediction file holds no detections", err=True)
    ev_cfg: EvalConfig = cfg.selftrain.eval
    ev = evaluate_predictions(records, preds, ev_cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = metrics_json(ev, ev_cfg)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    with open(out_dir / "froc.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fp_per_image", "sensitivity"])
        curve = ev.curve
        for t, f, s in zip(curve.thresholds, curve.fp_per_image, curve.sensitivity):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(s))])
    with open(out_dir / "confusion.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\predicted"] + [t.value for t in TAGGED_CLASSES])
        for t, row in zip(TAGGED_CLASSES, ev.confusion.counts):
            w.writerow([t.value] + list(row))
    click.echo(f"mean sensitivity at {ev_cfg.primary_operating_point:g} FP: {metrics['mean']:.4f}")


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Fused prediction JSONL.")
@click.option("--iou-thr", type=float, default=0.5, show_default=True)
@click.option("--skip-thr", type=float, default=0.0, show_default=True)
def fuse(inputs, out, iou_thr, skip_thr) -> None:
    """Fuse prediction files (one per model) with weighted boxes fusion."""
    per_model = [read_predictions(p) for p in inputs]
    fcfg = FusionConfig(iou_threshold=iou_thr, skip_score_threshold=skip_thr, model_count=len(per_model))
    keys = sorted(set().union(*per_model))
    fused = {k: weighted_boxes_fusion([m.get(k, []) for m in per_model], fcfg) for k in keys}
    write_predictions(out, fused)
    click.echo(f"fused {len(per_model)} files over {len(keys)} slices")


@cli.command()
@run_dir_option
@config_option
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default: <run-dir>/plotdata).")
def plotdata(run_dir, config, out) -> None:
    """Emit box-overlay records and threshold schedules for plotting."""
    cfg = _resolve_config(config, run_dir)
    paths = write_plotdata(_require_run_dir(cfg), out)
    click.echo(f"wrote {paths['overlays']} and {paths['thresholds']}")


@cli.command()
@run_dir_option
@config_option
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default: the run directory).")
def report(run_dir, config, out) -> None:
    """Re-render the sensitivity and mined-lesion tables of a run."""
    cfg = _resolve_config(config, run_dir)
    rd = _require_run_dir(cfg)
    if not rd.is_dir():
        raise ConfigError(f"run directory not found: {rd}")
    paths = write_run_report(rd, out)
    click.echo(paths["text"].read_text(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="lesionmine", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except LesionMineError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
