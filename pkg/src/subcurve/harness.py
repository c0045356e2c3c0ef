"""Config-driven experiment grid: optimiser comparison runs, result tables and
curvature probes."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .autodiff import DENSE_PARAM_CAP, Tape, fd_hessian, grad_fn
from .curvature import LAMBDA_FLOOR, LowRankHessian, batch_class_gradients, batch_eigenvalues, build_low_rank
from .data import Dataset, generate_blobs, load_idx, split_holdout
from .linalg import DEFAULT_RANK_TOL, EigenSystem, gram_schmidt
from .model import ModelSpec, init_params, param_count
from .optimizers import DivergenceError, OptimizerConfig, TrainState, train_epoch
from .svg import line_chart

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "eta", "batch_size", "seed", "epoch", "step", "split", "loss", "accuracy")
OUT_ENV = "SUBCURVE_OUT"

# Reference values for display next to desk-scale results; never compared against.
PUBLISHED_REFERENCE = {
    "description": "ResNet9 on CIFAR-10, final accuracy (%) and loss",
    "accuracy": {"0.1": {"sgd": 88, "quasi_newton": 92},
                 "0.05": {"sgd": 87, "quasi_newton": 92},
                 "0.01": {"sgd": 82, "quasi_newton": 90}},
    "loss": {"0.1": {"sgd": 0.3574, "quasi_newton": 0.3304},
             "0.05": {"sgd": 0.3985, "quasi_newton": 0.3346},
             "0.01": {"sgd": 0.5362, "quasi_newton": 0.3411}},
}

DEFAULT_CONFIG = {
    "name": "experiment",
    "dataset": {"kind": "blobs", "num_classes": 4, "per_class": 100, "dim": 20,
                "mean_scale": 4.0, "sigma": 0.25, "seed": 0, "holdout": 0.2},
    "model": {"layer_widths": [20, 80, 4], "activation": "relu"},
    "optimizers": [{"method": "sgd"}, {"method": "quasi_newton"}],
    "etas": [0.1, 0.05, 0.01],
    "batch_sizes": [128],
    "epochs": 200,
    "seeds": [0, 1, 2],
    "out": "runs",
    "probe": {"top_n": 30, "rel_tol": DEFAULT_RANK_TOL, "self_check": False, "fd": False,
              "max_examples": 400},
}
BLOB_KEYS = {"kind", "num_classes", "per_class", "dim", "mean_scale", "sigma", "seed", "holdout"}
IDX_KEYS = {"kind", "images", "labels", "num_classes", "holdout", "seed", "limit"}
OPTIMIZER_KEYS = {f.name for f in fields(OptimizerConfig)} - {"eta"}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "<config>", line: int = 1):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return 1


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict, base_dir: Path | None = None, text: str = "",
                   path: str = "<config>") -> dict:
    """Fill defaults and validate; errors carry the line of the offending key."""

    def fail(msg, key):
        raise ConfigError(msg, path, _line_of(text, key))

    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        key = sorted(unknown)[0]
        fail(f"unknown top-level key {key!r}", key)
    cfg = _merge(DEFAULT_CONFIG, raw)
    ds = cfg["dataset"]
    kind = ds.get("kind", "blobs")
    if kind == "blobs":
        ds = {**DEFAULT_CONFIG["dataset"], **ds}
        allowed = BLOB_KEYS
    elif kind == "idx":
        ds = {"num_classes": None, "holdout": 0.2, "seed": 0, "limit": None, **ds}
        allowed = IDX_KEYS
        for key in ("images", "labels"):
            if key not in ds:
                fail(f"idx dataset needs {key!r}", "dataset")
            p = Path(ds[key])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if not p.exists():
                fail(f"{key} file not found: {p}", key)
            ds[key] = str(p)
    else:
        fail(f"dataset kind must be 'blobs' or 'idx', got {kind!r}", "kind")
    extra = set(ds) - allowed
    if extra:
        key = sorted(extra)[0]
        fail(f"unknown dataset key {key!r}", key)
    if not 0.0 <= float(ds["holdout"]) < 1.0:
        fail("holdout must lie in [0, 1)", "holdout")
    cfg["dataset"] = ds
    try:
        spec = ModelSpec(tuple(cfg["model"]["layer_widths"]), cfg["model"].get("activation", "relu"))
    except (ValueError, TypeError) as exc:
        fail(str(exc), "layer_widths")
    if kind == "blobs":
        if spec.input_dim != ds["dim"]:
            fail(f"first layer width {spec.input_dim} != dataset dim {ds['dim']}", "layer_widths")
        if spec.num_classes != ds["num_classes"]:
            fail(f"last layer width {spec.num_classes} != num_classes {ds['num_classes']}",
                 "layer_widths")
    cfg["model"] = spec.to_dict()
    opts = []
    if not cfg["optimizers"]:
        fail("at least one optimizer is required", "optimizers")
    for o in cfg["optimizers"]:
        bad = set(o) - OPTIMIZER_KEYS
        if bad:
            key = sorted(bad)[0]
            fail(f"unknown optimizer key {key!r}", key)
        try:
            resolved = OptimizerConfig(**{**o, "eta": 1.0}).to_dict()
        except (ValueError, TypeError) as exc:
            fail(str(exc), "optimizers")
        resolved.pop("eta")
        opts.append(resolved)
    cfg["optimizers"] = opts
    if not cfg["etas"] or any(not (isinstance(e, (int, float)) and e > 0) for e in cfg["etas"]):
        fail("etas must be a non-empty list of positive numbers", "etas")
    cfg["etas"] = [float(e) for e in cfg["etas"]]
    if not cfg["batch_sizes"] or any(not (isinstance(b, int) and b >= 1) for b in cfg["batch_sizes"]):
        fail("batch_sizes must be a non-empty list of positive integers", "batch_sizes")
    if not isinstance(cfg["epochs"], int) or cfg["epochs"] < 1:
        fail("epochs must be a positive integer", "epochs")
    if not cfg["seeds"] or any(not isinstance(s, int) for s in cfg["seeds"]):
        fail("seeds must be a non-empty list of integers", "seeds")
    rel_tol = cfg["probe"]["rel_tol"]
    if not 0.0 < rel_tol < 1.0:
        fail("probe rel_tol must lie in (0, 1)", "rel_tol")
    return cfg


def load_config(path, out: str | None = None, seeds: int | None = None) -> dict:
    """Read, override and resolve a JSON config file.

    Output root precedence: ``out`` argument, then ``$SUBCURVE_OUT``, then the
    config's own ``out`` (relative to the config file).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", str(path), exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", str(path))
    if seeds is not None:
        raw["seeds"] = list(range(seeds))
    cfg = resolve_config(raw, path.parent, text, str(path))
    if out is not None:
        cfg["out"] = out
    elif os.environ.get(OUT_ENV):
        cfg["out"] = os.environ[OUT_ENV]
    elif not Path(cfg["out"]).is_absolute():
        cfg["out"] = str(path.parent / cfg["out"])
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of every semantic field.

    ``name`` and ``out`` are excluded; IDX file paths are replaced by digests of
    their contents so the hash does not depend on where the files live.
    """
    semantic = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in ("out", "name")}
    ds = semantic["dataset"]
    for key in ("images", "labels"):
        if key in ds:
            ds[key] = hashlib.sha256(Path(ds[key]).read_bytes()).hexdigest()
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_dataset(ds_cfg: dict) -> tuple[Dataset, Dataset | None]:
    if ds_cfg["kind"] == "blobs":
        ds = generate_blobs(ds_cfg["num_classes"], ds_cfg["per_class"], ds_cfg["dim"],
                            ds_cfg["mean_scale"], ds_cfg["sigma"], ds_cfg["seed"])
    else:
        ds = load_idx(ds_cfg["images"], ds_cfg["labels"], ds_cfg.get("num_classes"))
        if ds_cfg.get("limit"):
            ds = ds.subset(np.arange(min(int(ds_cfg["limit"]), len(ds))))
    return split_holdout(ds, float(ds_cfg["holdout"]), int(ds_cfg["seed"]))


@dataclass(frozen=True)
class Cell:
    index: int
    method_cfg: dict
    eta: float
    batch_size: int
    seed: int

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**{**self.method_cfg, "eta": self.eta})

    @property
    def tag(self) -> str:
        return f"{self.index:03d}-{self.method_cfg['method']}-eta{self.eta:g}-bs{self.batch_size}-seed{self.seed}"


def grid(cfg: dict) -> list[Cell]:
    cells = []
    for m in cfg["optimizers"]:
        for eta in cfg["etas"]:
            for bs in cfg["batch_sizes"]:
                for seed in cfg["seeds"]:
                    cells.append(Cell(len(cells), m, eta, bs, seed))
    return cells


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def _evaluate(spec, theta, ds: Dataset | None):
    if ds is None or len(ds) == 0:
        return None
    try:
        fwd = Tape(spec, theta, ds.inputs, ds.labels).forward
    except FloatingPointError:
        return {"loss": math.inf, "accuracy": 0.0}
    return {"loss": fwd.mean_loss, "accuracy": fwd.accuracy}


def _num(v: float) -> str:
    return repr(float(v))


def train_cell(cfg: dict, cell: Cell, observer=None):
    """Train one grid cell. Returns (csv rows, summary, final train state)."""
    spec = ModelSpec(tuple(cfg["model"]["layer_widths"]), cfg["model"]["activation"])
    train, val = build_dataset(cfg["dataset"])
    opt = cell.optimizer
    state = TrainState.fresh(init_params(spec, cell.seed), train.num_classes, opt)
    key = (opt.method, _num(cell.eta), str(cell.batch_size), str(cell.seed))
    rows: list[tuple] = []
    outcome, reason = "completed", ""
    val_history = []
    t0 = time.perf_counter()
    for epoch in range(cfg["epochs"]):
        try:
            state, metrics = train_epoch(spec, train, opt, state, cell.batch_size,
                                         epoch_seed(cell.seed, epoch), observer)
        except DivergenceError as exc:
            metrics = exc.metrics
            outcome, reason = "diverged", str(exc)
        for m in metrics:
            rows.append((*key, str(m.epoch), str(m.step), "train", _num(m.mean_loss),
                         _num(m.train_accuracy)))
        if outcome == "diverged":
            break
        ev = _evaluate(spec, state.theta, val)
        if ev is not None:
            val_history.append({"epoch": epoch, "step": state.step, **ev})
            rows.append((*key, str(epoch), str(state.step), "val", _num(ev["loss"]),
                         _num(ev["accuracy"])))
    summary = {
        "cell": cell.tag,
        "method": opt.method,
        "eta": cell.eta,
        "batch_size": cell.batch_size,
        "seed": cell.seed,
        "outcome": outcome,
        "reason": reason,
        "steps": state.step if outcome == "completed" else (int(rows[-1][5]) if rows else 0),
        "final_train": _evaluate(spec, state.theta, train) if outcome == "completed" else None,
        "final_val": val_history[-1] if (val_history and outcome == "completed") else None,
        "wall_time_s": time.perf_counter() - t0,
    }
    log.info("%s %s after %d steps (%.1fs)", cell.tag, outcome, summary["steps"],
             summary["wall_time_s"])
    return rows, summary, state


def cell_svg(cell: Cell, rows) -> str:
    train = [(int(r[5]), float(r[7])) for r in rows if r[6] == "train"]
    val = [(int(r[5]), float(r[7])) for r in rows if r[6] == "val"]
    series = [("train (batch)", [s for s, _ in train], [v for _, v in train])]
    if val:
        series.append(("validation", [s for s, _ in val], [v for _, v in val]))
    title = f"{cell.method_cfg['method']} eta={cell.eta:g} batch={cell.batch_size} seed={cell.seed}"
    return line_chart(series, title, "step", "loss", log_y=True)


def _run_cell_to_staging(args):
    cfg, cell, staging = args
    rows, summary, _ = train_cell(cfg, cell)
    d = Path(staging) / cell.tag
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "rows.csv", "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (d / "loss.svg").write_text(cell_svg(cell, rows))
    return cell.tag


def run(cfg: dict, jobs: int = 1) -> dict:
    """Execute every grid cell and write metrics.csv, summary.json and per-cell SVGs."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    staging = out / ".staging"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    cells = grid(cfg)
    work = [(cfg, c, str(staging)) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_cell_to_staging, work))
    else:
        for w in work:
            _run_cell_to_staging(w)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    summaries = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for c in cells:
        d = staging / c.tag
        buf.write((d / "rows.csv").read_text())
        summaries.append(json.loads((d / "summary.json").read_text()))
        shutil.move(str(d / "loss.svg"), plots / f"{c.tag}.svg")
    (out / "metrics.csv").write_text(buf.getvalue())
    shutil.rmtree(staging)
    record = {
        "schema": "run-v1",
        "config_hash": config_hash(cfg),
        "cells": summaries,
        "diverged": sum(s["outcome"] == "diverged" for s in summaries),
    }
    (out / "summary.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return record


def read_metrics(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"{p}: unexpected columns {reader.fieldnames}")
            rows.extend(reader)
    return rows


def _diverged_cells(paths) -> set[tuple]:
    """Cells marked diverged in a summary.json sitting next to a metrics file."""
    out = set()
    for p in paths:
        summary = Path(p).with_name("summary.json")
        if not summary.exists():
            continue
        for c in json.loads(summary.read_text()).get("cells", []):
            if c.get("outcome") == "diverged":
                out.add((float(c["eta"]), int(c["batch_size"]), c["method"], int(c["seed"])))
    return out


def compare(paths) -> dict:
    """Mean and spread of final accuracy and loss per (eta, method) across seeds.

    The final value of a cell is its last validation row, or its last training
    row when the run had no holdout. Cells recorded as diverged are counted but
    left out of the statistics.
    """
    rows = read_metrics(paths)
    diverged = _diverged_cells(paths)
    last: dict[tuple, dict] = {}
    for r in rows:
        key = (float(r["eta"]), int(r["batch_size"]), r["method"], int(r["seed"]))
        prev = last.get(key)
        if prev is None or r["split"] == "val" or prev["split"] == "train":
            last[key] = r
    methods = sorted({k[2] for k in last})
    groups: dict[tuple, dict[str, list]] = {}
    for key, r in sorted(last.items()):
        eta, bs, method, _ = key
        g = groups.setdefault((eta, bs), {})
        value = None if key in diverged else (float(r["accuracy"]), float(r["loss"]))
        g.setdefault(method, []).append(value)
    if len(methods) < 2 or any(len(g) < len(methods) for g in groups.values()):
        raise ValueError("incomplete grid: every eta needs every method")
    table = []
    for (eta, bs), g in sorted(groups.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
        entry = {"eta": eta, "batch_size": bs}
        for method in methods:
            ok = [v for v in g[method] if v is not None]
            acc = [100.0 * a for a, _ in ok]
            loss = [lo for _, lo in ok]
            entry[method] = {
                "seeds": len(g[method]),
                "diverged": len(g[method]) - len(ok),
                "accuracy_mean": statistics.fmean(acc) if ok else None,
                "accuracy_std": statistics.pstdev(acc) if ok else None,
                "loss_mean": statistics.fmean(loss) if ok else None,
                "loss_std": statistics.pstdev(loss) if ok else None,
            }
        table.append(entry)
    return {"methods": methods, "rows": table, "published_reference": PUBLISHED_REFERENCE}


def format_comparison(result: dict) -> str:
    methods = result["methods"]
    lines = ["Accuracy (%)  [mean ± std across seeds]"]
    header = f"{'eta':>8} {'batch':>6} " + " ".join(f"{m:>22}" for m in methods)
    for metric, scale in (("accuracy", "{:.2f} ± {:.2f}"), ("loss", "{:.4f} ± {:.4f}")):
        if metric == "loss":
            lines.append("")
            lines.append("Loss  [mean ± std across seeds]")
        lines.append(header)
        for row in result["rows"]:
            texts = []
            for m in methods:
                r = row[m]
                if r[metric + "_mean"] is None:
                    text = "diverged"
                else:
                    text = scale.format(r[metric + "_mean"], r[metric + "_std"])
                    if r["diverged"]:
                        text += f" ({r['diverged']} div)"
                texts.append(f"{text:>22}")
            cells = " ".join(texts)
            lines.append(f"{row['eta']:>8g} {row['batch_size']:>6d} {cells}")
    ref = result["published_reference"]
    lines.append("")
    lines.append(f"Reference only ({ref['description']}):")
    lines.append(f"{'eta':>8} {'sgd acc':>8} {'qn acc':>8} {'sgd loss':>9} {'qn loss':>9}")
    for eta in ref["accuracy"]:
        a, lo = ref["accuracy"][eta], ref["loss"][eta]
        lines.append(f"{eta:>8} {a['sgd']:>8} {a['quasi_newton']:>8} {lo['sgd']:>9} {lo['quasi_newton']:>9}")
    return "\n".join(lines) + "\n"


def _probe_cell(cfg: dict) -> Cell:
    return grid(cfg)[0]


def _full_set(cfg: dict, train: Dataset) -> Dataset:
    cap = int(cfg["probe"].get("max_examples") or len(train))
    return train if len(train) <= cap else train.subset(np.arange(cap))


def spectrum(cfg: dict) -> dict:
    """Train the first grid cell, then report the top Gauss-Newton eigenvalues."""
    cell = _probe_cell(cfg)
    spec = ModelSpec(tuple(cfg["model"]["layer_widths"]), cfg["model"]["activation"])
    _check_dense(spec)
    _, summary, state = train_cell(cfg, cell)
    train, _ = build_dataset(cfg["dataset"])
    subset = _full_set(cfg, train)
    tape = Tape(spec, state.theta, subset.inputs, subset.labels)
    gn = diag.gauss_newton_from_jacobian(tape.jacobian(), tape.forward.probs)
    fd = None
    if cfg["probe"].get("fd"):
        fd = fd_hessian(grad_fn(spec, subset.inputs, subset.labels), state.theta)
    report = diag.eigenspectrum_report(gn, int(cfg["probe"]["top_n"]), spec.num_classes, fd)
    report.update({"cell": cell.tag, "outcome": summary["outcome"], "examples": len(subset),
                   "config_hash": config_hash(cfg)})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "spectrum.json").write_text(diag.to_json(report))
    vals = report["top_eigenvalues"]
    series = [("Gauss-Newton", range(1, len(vals) + 1), vals)]
    if fd is not None:
        series.append(("finite difference", range(1, len(vals) + 1), report["fd_top_eigenvalues"]))
    (out / "spectrum.svg").write_text(
        line_chart(series, f"top {len(vals)} eigenvalues (C={spec.num_classes})", "index",
                   "eigenvalue", log_y=True))
    return report


def _check_dense(spec: ModelSpec) -> None:
    if param_count(spec) > DENSE_PARAM_CAP:
        raise ConfigError(f"model has {param_count(spec)} parameters; dense diagnostics "
                          f"are capped at {DENSE_PARAM_CAP}")


def probe(cfg: dict) -> dict:
    """Train the first grid cell logging per-batch class gradients, then compare
    them with the exact Gauss-Newton eigensystem at the final parameters."""
    cell = _probe_cell(cfg)
    spec = ModelSpec(tuple(cfg["model"]["layer_widths"]), cfg["model"]["activation"])
    _check_dense(spec)
    pcfg = cfg["probe"]
    rel_tol = float(pcfg["rel_tol"])
    snapshots = []

    def observer(step, class_grads, _low_rank):
        snapshots.append((step, class_grads))

    _, summary, state = train_cell(cfg, cell, observer)
    train, _ = build_dataset(cfg["dataset"])
    subset = _full_set(cfg, train)
    tape = Tape(spec, state.theta, subset.inputs, subset.labels)
    jac = tape.jacobian()
    fwd = tape.forward
    gn = diag.gauss_newton_from_jacobian(jac, fwd.probs)
    eig = diag.sym_eig(gn)
    class_grads = batch_class_gradients(jac, subset.labels, spec.num_classes)
    present = [g for g in class_grads if g is not None]
    if pcfg.get("self_check"):
        # both sides become the orthonormalised class gradients, so the score must be 1
        basis = gram_schmidt(present)
        present = list(basis)
        eig = EigenSystem(np.ones(basis.shape[0]), basis.T)
    overlap = diag.subspace_overlap(present, eig, rel_tol)
    overlap.rank_per_batch = diag.rank_trace(snapshots, eig, rel_tol)
    overlap.residual_stats = diag.logit_residuals(jac, subset.labels, class_grads)

    lam = batch_eigenvalues(fwd.probs, fwd.labels, class_grads)
    keep = [k for k, g in enumerate(class_grads) if g is not None and np.linalg.norm(g) > 0]
    dirs = np.vstack([class_grads[k] / np.linalg.norm(class_grads[k]) for k in keep])
    h_full = LowRankHessian(dirs, np.maximum(lam[keep], LAMBDA_FLOOR), tuple(keep), False)
    report = {
        "cell": cell.tag,
        "outcome": summary["outcome"],
        "examples": len(subset),
        "config_hash": config_hash(cfg),
        "self_check": bool(pcfg.get("self_check")),
        "spectrum": diag.eigenspectrum_report(gn, int(pcfg["top_n"]), spec.num_classes),
        "overlap": overlap.to_dict(),
        "low_rank_error": diag.low_rank_error(gn, h_full),
        "direction_max_cross_dot": h_full.max_cross_dot(),
    }
    if state.curvature is not None:
        h_ema = build_low_rank(state.curvature)
        if h_ema.rank:
            report["ema_low_rank_error"] = diag.low_rank_error(gn, h_ema)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(diag.to_json(report))
    vals = report["spectrum"]["top_eigenvalues"]
    (out / "spectrum.svg").write_text(
        line_chart([("Gauss-Newton", range(1, len(vals) + 1), vals)],
                   f"top {len(vals)} eigenvalues (C={spec.num_classes})", "index", "eigenvalue",
                   log_y=True))
    trace = overlap.rank_per_batch
    (out / "rank_per_batch.svg").write_text(
        line_chart([("combined rank", [t["step"] for t in trace], [t["rank"] for t in trace])],
                   "rank of [class gradients | top-C eigenvectors]", "step", "rank"))
    return report
