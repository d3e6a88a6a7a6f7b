"""Command-line harness: train, eval, calibrate, perturb, rank, reliability.

Usage::

    calmargin <command> --config <path> [--force] [--out <dir>]

Exit codes: 0 success, 1 usage/config error, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .losses import LossConfig
from .metrics import (
    MetricReport,
    ece,
    evaluate_case,
    foreground_mask,
    mean_case_rank,
    sum_rank,
)
from .metrics import cece as cece_metric
from .metrics import nll as nll_metric
from .posthoc import apply_temperature, fit_temperature
from .tensor_store import ValidationError, read_array, softmax, write_array
from .trainer import (
    NumericalError,
    PixelModel,
    Split,
    generate_dataset,
    perturb_gaussian,
    rng_for,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("train", "eval", "calibrate", "perturb", "rank", "reliability")
THREADS_ENV = "CALMARGIN_THREADS"
RANK_METRICS = ("dsc", "asd", "ece", "cece")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- file helpers

def fmt(x) -> str:
    """Locale-free, round-trip float formatting for CSV cells."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    atomic_write(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str = __version__
    outputs: dict[str, list[str]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    status: str = "complete"

    def to_json(self) -> dict:
        return asdict(self)


def manifest_path(out: Path, command: str) -> Path:
    return out / f"manifest_{command}.json"


def partial_marker(out: Path, command: str) -> Path:
    return out / f"{command}.partial"


def check_overwrite(out: Path, command: str, force: bool) -> None:
    p = manifest_path(out, command)
    if p.exists() and not force:
        try:
            prev = json.loads(p.read_text()).get("config_hash", "?")
        except (OSError, json.JSONDecodeError):
            prev = "?"
        raise UsageError(f"{p} records a completed run (config {prev}); pass --force to overwrite")


# ---------------------------------------------------------------- models

def model_dir(out: Path, name: str) -> Path:
    return out / "models" / name


def save_model(model: PixelModel, loss: LossConfig, best_epoch: int, path: Path) -> list[Path]:
    path.mkdir(parents=True, exist_ok=True)
    write_array(model.params, path / "params.calt")
    meta = {
        "radius": model.radius,
        "hidden": model.hidden,
        "num_classes": model.num_classes,
        "input_center": model.input_center,
        "input_scale": model.input_scale,
        "loss": asdict(loss),
        "best_epoch": best_epoch,
    }
    write_json(path / "model.json", meta)
    return [path / "params.calt", path / "model.json"]


def load_model(path: Path) -> PixelModel:
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise UsageError(f"no trained model at {path}; run 'train' first")
    meta = json.loads(meta_path.read_text())
    params = read_array(path / "params.calt")
    return PixelModel(
        radius=meta["radius"],
        hidden=meta["hidden"],
        num_classes=meta["num_classes"],
        params=params,
        input_center=meta["input_center"],
        input_scale=meta["input_scale"],
    )


# ---------------------------------------------------------------- evaluation helpers

def pooled_calibration(probs: np.ndarray, labels: np.ndarray, background: int, num_bins: int, mask_rule: str = "union"):
    """ECE, CECE, NLL over all pixels of a split under the configured mask rule."""
    pred = probs.argmax(axis=-1)
    if mask_rule == "union":
        mask = foreground_mask(pred, labels, background)
    else:
        mask = np.ones(labels.shape, dtype=bool)
    if not mask.any():
        return float("nan"), float("nan"), float("nan")
    return (
        ece(probs, labels, mask, num_bins)[0],
        cece_metric(probs, labels, mask, num_bins)[0],
        nll_metric(probs, labels, mask),
    )


def evaluate_probs(method: str, probs: np.ndarray, labels: np.ndarray, background: int = 0, num_bins: int = 15, mask_rule: str = "union"):
    """Per-case reports plus a summary row (mean DSC/ASD over cases, pooled calibration)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ValidationError(f"probability shape {probs.shape} does not match labels {labels.shape}")
    cases = [
        evaluate_case(probs[i], labels[i], method, f"case{i:03d}", background, num_bins) for i in range(len(labels))
    ]
    asds = [r.mean_asd for r in cases if not math.isnan(r.mean_asd)]
    e, ce_, nl = pooled_calibration(probs, labels, background, num_bins, mask_rule)
    summary = {
        "method": method,
        "dsc": float(np.mean([r.mean_dsc for r in cases])),
        "asd": float(np.mean(asds)) if asds else float("nan"),
        "ece": e,
        "cece": ce_,
        "nll": nl,
    }
    return cases, summary


CASE_HEADER = ["method", "case", "dsc", "asd", "ece", "cece", "nll"]
SUMMARY_HEADER = ["method", "dsc", "asd", "ece", "cece", "nll"]


def case_rows(reports: list[MetricReport]) -> list[list]:
    return [[r.method, r.case, r.mean_dsc, r.mean_asd, r.ece, r.cece, r.nll] for r in reports]


def summary_row(s: dict) -> list:
    return [s[k] for k in SUMMARY_HEADER]


# ---------------------------------------------------------------- run context

class Run:
    def __init__(self, config: ExperimentConfig, out: Path, force: bool):
        self.config = config
        self.out = out
        self.force = force
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = generate_dataset(self.config.task)
        return self._data

    def model(self, name: str) -> PixelModel:
        return load_model(model_dir(self.out, name))

    def names(self) -> list[str]:
        return [l.name for l in self.config.losses]

    def map_methods(self, fn):
        """Run ``fn(loss)`` per method, concurrently if a thread count is set."""
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
        _ = self.data  # generate once before workers start
        losses = self.config.losses
        if threads <= 1 or len(losses) == 1:
            return [fn(l) for l in losses]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, losses))


def _timed(fn):
    def wrapper(loss):
        t0 = time.perf_counter()
        res = fn(loss)
        return res, time.perf_counter() - t0

    return wrapper


# ---------------------------------------------------------------- commands

def cmd_train(run: Run) -> RunManifest:
    cfg = run.config
    man = RunManifest("train", cfg.hash())

    @_timed
    def one(loss: LossConfig):
        ms = cfg.model
        model = PixelModel(
            radius=ms.radius, hidden=ms.hidden, num_classes=cfg.task.num_classes,
            input_center=ms.input_center, input_scale=ms.input_scale,
        ).init(rng_for(cfg.seed, f"init:{loss.name}"))
        res = train(
            model, run.data, loss, cfg.schedule, rng_for(cfg.seed, f"batch:{loss.name}"),
            cfg.metrics.background, cfg.metrics.num_bins,
        )
        paths = save_model(res.model, loss, res.best_epoch, model_dir(run.out, loss.name))
        log_path = run.out / "logs" / f"{loss.name}.csv"
        header = ["epoch", "lr", "train_loss", "val_dsc", "val_ece"]
        write_csv(log_path, header, [[row[k] for k in header] for row in res.log])
        return paths + [log_path]

    for loss, (paths, dt) in zip(cfg.losses, run.map_methods(one)):
        man.outputs[loss.name] = [str(p.relative_to(run.out)) for p in paths]
        man.timings[loss.name] = dt
    return man


def cmd_eval(run: Run) -> RunManifest:
    cfg = run.config
    ms = cfg.metrics
    man = RunManifest("eval", cfg.hash())
    test = run.data.test

    @_timed
    def one(loss: LossConfig):
        probs = softmax(run.model(loss.name).logits(test.images))
        cases, summary = evaluate_probs(loss.name, probs, test.labels, ms.background, ms.num_bins, ms.mask_rule)
        d = run.out / "eval" / loss.name
        write_csv(d / "cases.csv", CASE_HEADER, case_rows(cases))
        write_csv(d / "summary.csv", SUMMARY_HEADER, [summary_row(summary)])
        write_json(d / "reports.json", {"summary": _jsonable(summary), "cases": [r.to_json() for r in cases]})
        return [d / "cases.csv", d / "summary.csv", d / "reports.json"], (cases, summary)

    results = run.map_methods(one)
    all_cases, all_summary = [], []
    for loss, ((paths, (cases, summary)), dt) in zip(cfg.losses, results):
        man.outputs[loss.name] = [str(p.relative_to(run.out)) for p in paths]
        man.timings[loss.name] = dt
        all_cases += case_rows(cases)
        all_summary.append(summary_row(summary))
    # combined tables are written after all methods finish, by this thread only
    write_csv(run.out / "eval" / "cases.csv", CASE_HEADER, all_cases)
    write_csv(run.out / "eval" / "summary.csv", SUMMARY_HEADER, all_summary)
    man.outputs["_combined"] = ["eval/cases.csv", "eval/summary.csv"]
    return man


def cmd_calibrate(run: Run) -> RunManifest:
    cfg = run.config
    ms = cfg.metrics
    man = RunManifest("calibrate", cfg.hash())
    val, test = run.data.val, run.data.test

    @_timed
    def one(loss: LossConfig):
        model = run.model(loss.name)
        d = run.out / "calibrate" / loss.name
        rows = []
        _, pre = evaluate_probs(loss.name, softmax(model.logits(test.images)), test.labels, ms.background, ms.num_bins, ms.mask_rule)
        rows.append(["pre", 1.0] + summary_row(pre)[1:])
        fit_json = None
        if cfg.temperature_scaling:
            fit = fit_temperature(model.logits(val.images), val.labels, cfg.ts_foreground_only, ms.background)
            probs = apply_temperature(model.logits(test.images), fit.temperature)
            _, post = evaluate_probs(loss.name, probs, test.labels, ms.background, ms.num_bins, ms.mask_rule)
            rows.append(["ts", fit.temperature] + summary_row(post)[1:])
            fit_json = fit.to_json()
        write_json(d / "temperature.json", {"method": loss.name, "enabled": cfg.temperature_scaling, "fit": fit_json})
        write_csv(d / "summary.csv", ["stage", "temperature"] + SUMMARY_HEADER[1:], rows)
        return [d / "temperature.json", d / "summary.csv"]

    for loss, (paths, dt) in zip(cfg.losses, run.map_methods(one)):
        man.outputs[loss.name] = [str(p.relative_to(run.out)) for p in paths]
        man.timings[loss.name] = dt
    return man


def cmd_perturb(run: Run) -> RunManifest:
    cfg = run.config
    ms = cfg.metrics
    man = RunManifest("perturb", cfg.hash())
    test = run.data.test
    # one noise draw per sigma, shared by all methods
    noisy = [
        perturb_gaussian(test.images, s, rng_for(cfg.seed, f"perturb:{i}")) for i, s in enumerate(cfg.noise_grid)
    ]

    @_timed
    def one(loss: LossConfig):
        model = run.model(loss.name)
        rows = []
        for sigma, imgs in zip(cfg.noise_grid, noisy):
            _, s = evaluate_probs(loss.name, softmax(model.logits(imgs)), test.labels, ms.background, ms.num_bins, ms.mask_rule)
            rows.append([sigma, s["dsc"], s["ece"], s["cece"], s["asd"]])
        p = run.out / "perturb" / f"{loss.name}.csv"
        write_csv(p, ["sigma", "dsc", "ece", "cece", "asd"], rows)
        return [p]

    for loss, (paths, dt) in zip(cfg.losses, run.map_methods(one)):
        man.outputs[loss.name] = [str(p.relative_to(run.out)) for p in paths]
        man.timings[loss.name] = dt
    return man


def cmd_reliability(run: Run) -> RunManifest:
    cfg = run.config
    ms = cfg.metrics
    man = RunManifest("reliability", cfg.hash())
    test = run.data.test

    @_timed
    def one(loss: LossConfig):
        probs = softmax(run.model(loss.name).logits(test.images))
        pred = probs.argmax(axis=-1)
        if ms.mask_rule == "union":
            mask = foreground_mask(pred, test.labels, ms.background)
        else:
            mask = np.ones(test.labels.shape, dtype=bool)
        _, table = ece(probs, test.labels, mask, ms.num_bins)
        p = run.out / "reliability" / f"{loss.name}.csv"
        atomic_write(p, table.to_csv())
        return [p]

    for loss, (paths, dt) in zip(cfg.losses, run.map_methods(one)):
        man.outputs[loss.name] = [str(p.relative_to(run.out)) for p in paths]
        man.timings[loss.name] = dt
    return man


def read_report_csv(path: Path):
    """Parse a report CSV with a 'method' column, optional 'case' column and numeric metric columns.

    Returns (metrics, summary, per_case) where per_case is None without a case column.
    """
    if not path.exists():
        raise UsageError(f"report file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "method" not in rows[0]:
        raise ValidationError(f"{path}: needs a header with a 'method' column and at least one row")
    metrics = [k for k in rows[0] if k not in ("method", "case")]
    if not metrics:
        raise ValidationError(f"{path}: no metric columns")

    def num(v, where):
        try:
            return float(v)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"{path}: non-numeric value {v!r} in {where}") from e

    if "case" in rows[0]:
        per_case: dict[str, dict[str, dict[str, float]]] = {}
        for r in rows:
            per_case.setdefault(r["method"], {})[r["case"]] = {m: num(r[m], m) for m in metrics}
        summary = {
            meth: {m: float(np.nanmean([c[m] for c in cases.values()])) for m in metrics}
            for meth, cases in per_case.items()
        }
        return metrics, summary, per_case
    summary = {}
    for r in rows:
        if r["method"] in summary:
            raise ValidationError(f"{path}: duplicate method {r['method']!r}")
        summary[r["method"]] = {m: num(r[m], m) for m in metrics}
    return metrics, summary, None


def rank_reports(summary, per_case, metrics, out: Path) -> list[Path]:
    paths = []
    rm = sum_rank(summary, metrics)
    rows = []
    for i, m in enumerate(rm.methods):
        rows.append([m] + list(rm.ranks[i]) + [rm.total[i], rm.final[i]])
    p = out / "rank" / "sum_rank.csv"
    write_csv(p, ["method"] + [f"rank_{k}" for k in rm.metrics] + ["total", "final"], rows)
    paths.append(p)
    if per_case is not None:
        cr = mean_case_rank(per_case, metrics)
        p = out / "rank" / "mean_case_rank.csv"
        write_csv(p, ["method", "mean_rank", "final"], [[m, cr.mean_rank[i], cr.final[i]] for i, m in enumerate(cr.methods)])
        paths.append(p)
    return paths


def cmd_rank(run: Run, reports: list[Path] | None = None) -> RunManifest:
    man = RunManifest("rank", run.config.hash() if run.config is not None else "reports")
    t0 = time.perf_counter()
    if reports:
        summary, per_case, metrics = {}, {}, None
        for path in reports:
            mets, s, pc = read_report_csv(path)
            if metrics is None:
                metrics = mets
            elif mets != metrics:
                raise ValidationError(f"{path}: metric columns {mets} differ from {metrics}")
            summary.update(s)
            if pc is None:
                per_case = None
            elif per_case is not None:
                per_case.update(pc)
    else:
        case_path = run.out / "eval" / "cases.csv"
        if not case_path.exists():
            raise UsageError("no eval outputs found; run 'eval' first or pass --reports")
        metrics = list(RANK_METRICS)
        _, summary, _ = read_report_csv(run.out / "eval" / "summary.csv")
        _, _, per_case = read_report_csv(case_path)
    paths = rank_reports(summary, per_case, metrics, run.out)
    man.outputs["_rank"] = [str(p.relative_to(run.out)) for p in paths]
    man.timings["_rank"] = time.perf_counter() - t0
    return man


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calmargin", description="Margin-based label smoothing experiments on a synthetic segmentation task.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="experiment JSON config")
    p.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
    p.add_argument("--force", action="store_true", help="overwrite a completed run")
    p.add_argument("--reports", type=Path, nargs="+", help="rank: report CSVs instead of the run's eval outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "perturb": cmd_perturb,
    "reliability": cmd_reliability,
}


def run_command(args) -> RunManifest:
    if args.config is None:
        if not (args.command == "rank" and args.reports):
            raise UsageError("--config is required")
        config = None
        if args.out is None:
            raise UsageError("rank with --reports and no --config needs --out")
        out = args.out
    else:
        config = load_config(args.config)
        out = args.out if args.out is not None else Path(config.output_dir)
    check_overwrite(out, args.command, args.force)
    out.mkdir(parents=True, exist_ok=True)
    marker = partial_marker(out, args.command)
    run = Run(config, out, args.force)
    try:
        if args.command == "rank":
            man = cmd_rank(run, args.reports)
        else:
            man = DISPATCH[args.command](run)
    except BaseException as e:
        atomic_write(marker, f"{type(e).__name__}: {e}\n")
        raise
    write_json(manifest_path(out, args.command), man.to_json())
    if marker.exists():
        marker.unlink()
    return man


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"calmargin: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        man = run_command(args)
    except (UsageError, ConfigError) as e:
        print(f"calmargin: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"calmargin: validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as e:
        print(f"calmargin: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{args.command}: done ({man.config_hash})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
