"""Experiment driver behind the ``gsp`` command: configs, runs, CSV/JSON/SVG output."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import load_weights, save_weights
from .downstream import aggregate_runs, format_mean_std
from .graph import Dataset, DatasetError, kshot_split, load_dataset, make_batch, synthesize_sbm
from .optim import METHODS, PROX_SCALINGS, TuneConfig, tune
from .plots import write_chart
from .pretrain import PretrainConfig, pretrain
from .prompt import PromptBasis, PromptVector

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)

RESULTS_COLUMNS = ("method", "lambda", "k", "seed", "accuracy", "nnz", "zero_rows",
                   "epochs_best", "wall_ms")
SWEEP_COLUMNS = ("method", "lambda", "k", "seed", "val_accuracy", "accuracy", "nnz",
                 "zero_rows", "zero_dims", "epochs_best", "wall_ms")
REPORT_COLUMNS = ("run", "method", "lambda", "k", "seeds", "accuracy", "zero_fraction")

# column -> parser; an empty cell is allowed where the parser is wrapped in _optional
_COLUMN_TYPES = {
    "method": str, "run": str, "lambda": float, "k": int, "seed": int, "seeds": int,
    "accuracy": float, "val_accuracy": float, "nnz": int, "zero_rows": int, "zero_dims": int,
    "epochs_best": int, "wall_ms": int, "zero_fraction": float,
}
_OPTIONAL = {"lambda", "k", "nnz", "zero_rows", "zero_dims", "zero_fraction"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "tune"
    dataset: str | None = None
    synthetic: dict | None = None
    max_degree: int = 10
    backbone: str | None = None
    pretrain: dict = field(default_factory=dict)
    method: str = "gsfp"
    lam: float | None = None
    eta: float = 1e-3
    epochs: int = 200
    head_lr: float | None = None
    weight_decay: float = 5e-4
    prox_scaling: str = "paperLiteral"
    prompt_weight_decay: bool = False
    adapter_trainable: bool = False
    k: int | None = None
    shots: int = 1
    stratified: bool = False
    seeds: list = field(default_factory=lambda: [0])
    lambda_grid: list | None = None
    out: str = "runs/out"
    plots: bool = False
    runs: list = field(default_factory=list)

    _KEY_ALIASES = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = cls._KEY_ALIASES.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command not in ("pretrain", "tune", "sweep", "report"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command == "report":
            return
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'dataset' or 'synthetic'")
        if self.command == "pretrain":
            return
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        sparse = self.method in ("gsfp", "gsmfp")
        basis = self.method in ("gpfplus", "gsmfp")
        if self.lam is not None and not sparse:
            raise ConfigError(f"'lambda' only applies to gsfp/gsmfp, not {self.method}")
        if self.lambda_grid is not None and not sparse:
            raise ConfigError(f"'lambda_grid' only applies to gsfp/gsmfp, not {self.method}")
        if self.k is not None and not basis:
            raise ConfigError(f"'k' only applies to gpfplus/gsmfp, not {self.method}")
        if self.command == "sweep":
            if not sparse:
                raise ConfigError("sweep needs method gsfp or gsmfp")
            if self.lambda_grid is not None and not self.lambda_grid:
                raise ConfigError("lambda_grid must be nonempty")
        if self.prox_scaling not in PROX_SCALINGS:
            raise ConfigError(f"prox_scaling must be one of {PROX_SCALINGS}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("'seeds' must be a nonempty list of integers")
        if self.shots < 1:
            raise ConfigError("'shots' must be >= 1")
        try:
            self.tune_config(self.seeds[0], self.lam or 0.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def sparse(self) -> bool:
        return self.method in ("gsfp", "gsmfp")

    @property
    def basis(self) -> bool:
        return self.method in ("gpfplus", "gsmfp")

    @property
    def grid(self) -> list[float]:
        return [float(v) for v in (self.lambda_grid if self.lambda_grid is not None else DEFAULT_GRID)]

    def tune_config(self, seed: int, lam: float) -> TuneConfig:
        return TuneConfig(lam=lam, eta=self.eta, epochs=self.epochs, head_lr=self.head_lr,
                          weight_decay=self.weight_decay, seed=seed,
                          prox_scaling=self.prox_scaling,
                          prompt_weight_decay=self.prompt_weight_decay,
                          k=self.k if self.k is not None else 10,
                          adapter_trainable=self.adapter_trainable)

    def echo(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def load_config(path, overrides: dict | None = None, command: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    raw = dict(raw)
    if command is not None:
        raw["command"] = command
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def resolve_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset, max_degree=cfg.max_degree)
    params = dict(cfg.synthetic)
    try:
        blocks = params.pop("blocks")
        sizes = params.pop("sizes")
        return synthesize_sbm(blocks, sizes, params.pop("p_in"), params.pop("p_out"),
                              params.pop("feature_dim"), params.pop("seed", 0), **params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'synthetic' section: {exc}") from None


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    try:
        return PretrainConfig(**cfg.pretrain)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'pretrain' section: {exc}") from None


def resolve_backbone(cfg: RunConfig, data: Dataset):
    if cfg.backbone is not None:
        return load_weights(cfg.backbone)
    return pretrain(data, pretrain_config(cfg))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GSP_THREADS", "1")))
    except ValueError:
        raise ConfigError("GSP_THREADS must be an integer") from None


def _pool_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def _prompt_json(prompt):
    if isinstance(prompt, PromptVector):
        return {"p": prompt.p.tolist()}
    if isinstance(prompt, PromptBasis):
        return {"P": prompt.P.tolist(), "B": prompt.B.tolist()}
    return None


def _run_one(cfg: RunConfig, data, batch, backbone, seed: int, lam: float) -> dict:
    start = time.perf_counter()
    split = kshot_split(data, cfg.shots, seed, stratified=cfg.stratified)
    res = tune(cfg.method, data, split, backbone, cfg.tune_config(seed, lam), batch=batch)
    wall_ms = int(round((time.perf_counter() - start) * 1000))
    sp = res.sparsity(batch.features @ res.head.adapter if res.head.adapter is not None else batch.features)
    return {
        "seed": seed,
        "lambda": lam if cfg.sparse else None,
        "k": (cfg.k if cfg.k is not None else 10) if cfg.basis else None,
        "val_accuracy": res.val_accuracy,
        "accuracy": res.test_accuracy,
        "epochs_best": res.best_epoch,
        "nnz": None if sp is None else sp.nnz,
        "zero_dims": None if sp is None else sp.zero_dims,
        "zero_rows": None if sp is None else sp.zero_rows,
        "zero_cols": None if sp is None else sp.zero_cols,
        "zero_fraction": None if sp is None else sp.zero_fraction,
        "final_zero_rows": (None if not isinstance(res.final_prompt, PromptBasis)
                            else int((~np.any(res.final_prompt.P != 0, axis=1)).sum())),
        "trace": {
            "data_loss": res.trace.data_losses(),
            "regularizer": [r.reg for r in res.trace.records],
            "objective": res.trace.objectives(),
            "nnz": [r.nnz for r in res.trace.records],
        },
        "prompt": _prompt_json(res.prompt),
        "wall_ms": wall_ms,
    }


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _text_cell(v):
    return f"{v:.4g}" if isinstance(v, float) else _cell(v)


def _results_row(method, run, columns):
    row = dict(run, method=method)
    return [_cell(row.get(c)) for c in columns]


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def read_csv(path, columns=None) -> list[dict]:
    """Parse a CSV written by this module, validating it against its header."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = tuple(rows[0])
    if columns is not None and header != tuple(columns):
        raise ValueError(f"{path}: header {header} does not match schema {tuple(columns)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        rec = {}
        for name, cell in zip(header, row):
            parse = _COLUMN_TYPES.get(name, str)
            if cell == "" and name in _OPTIONAL:
                rec[name] = None
                continue
            try:
                rec[name] = parse(cell)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad {name} value {cell!r}") from None
        out.append(rec)
    return out


def _summary(runs) -> dict:
    accs = [r["accuracy"] for r in runs]
    mean, std = aggregate_runs(accs)
    zf = [r["zero_fraction"] for r in runs if r["zero_fraction"] is not None]
    return {
        "mean": mean,
        "std": std,
        "cell": format_mean_std(accs),
        "val_mean": aggregate_runs([r["val_accuracy"] for r in runs])[0],
        "zero_fraction_mean": float(np.mean(zf)) if zf else None,
    }


def _loss_plot(path, runs, title):
    series = {}
    for r in runs:
        obj = r["trace"]["objective"]
        series[f"seed {r['seed']}"] = (list(range(len(obj))), obj)
    write_chart(path, series, title, "epoch", "composite objective")


def cmd_pretrain(cfg: RunConfig) -> Path:
    data = resolve_dataset(cfg)
    pcfg = pretrain_config(cfg)
    backbone = pretrain(data, pcfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "weights.json"
    save_weights(backbone, path)
    return path


def cmd_tune(cfg: RunConfig) -> dict:
    started = time.perf_counter()
    data = resolve_dataset(cfg)
    backbone = resolve_backbone(cfg, data)
    before = backbone.fingerprint()
    batch = make_batch(data)
    lam = float(cfg.lam or 0.0)
    runs = _pool_map(lambda s: _run_one(cfg, data, batch, backbone, s, lam), cfg.seeds)
    assert backbone.fingerprint() == before, "backbone weights changed during tuning"

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", RESULTS_COLUMNS,
              [_results_row(cfg.method, r, RESULTS_COLUMNS) for r in runs])
    report = {
        "command": "tune",
        "config": cfg.echo(),
        "method": cfg.method,
        "lambda": lam if cfg.sparse else None,
        "k": runs[0]["k"],
        "runs": runs,
        "aggregate": _summary(runs),
        "wall_ms": int(round((time.perf_counter() - started) * 1000)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    if cfg.plots:
        _loss_plot(out / "loss.svg", runs, f"{cfg.method} training objective")
    return report


def select_lambda(points) -> float:
    """Best validation accuracy; ties go to the larger (sparser) lambda."""
    best = None
    for p in points:
        if best is None or p["val_mean"] > best["val_mean"] or (
                p["val_mean"] == best["val_mean"] and p["lambda"] > best["lambda"]):
            best = p
    return best["lambda"]


def cmd_sweep(cfg: RunConfig) -> dict:
    started = time.perf_counter()
    data = resolve_dataset(cfg)
    backbone = resolve_backbone(cfg, data)
    before = backbone.fingerprint()
    batch = make_batch(data)
    grid = cfg.grid
    jobs = [(lam, s) for lam in grid for s in cfg.seeds]
    results = _pool_map(lambda j: _run_one(cfg, data, batch, backbone, j[1], j[0]), jobs)
    assert backbone.fingerprint() == before, "backbone weights changed during tuning"

    by_lam = {lam: [r for (l2, _), r in zip(jobs, results) if l2 == lam] for lam in grid}
    points = []
    for lam in grid:
        runs = by_lam[lam]
        s = _summary(runs)
        zr = [r["final_zero_rows"] for r in runs if r["final_zero_rows"] is not None]
        points.append({"lambda": lam, **s,
                       "final_zero_rows_mean": float(np.mean(zr)) if zr else None})
    best = select_lambda(points)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS,
              [_results_row(cfg.method, r, SWEEP_COLUMNS) for r in results])
    best_runs = by_lam[best]
    write_csv(out / "results.csv", RESULTS_COLUMNS,
              [_results_row(cfg.method, r, RESULTS_COLUMNS) for r in best_runs])
    report = {
        "command": "sweep",
        "config": cfg.echo(),
        "method": cfg.method,
        "lambda": best,
        "best_lambda": best,
        "k": best_runs[0]["k"],
        "grid": points,
        "runs": best_runs,
        "aggregate": _summary(best_runs),
        "wall_ms": int(round((time.perf_counter() - started) * 1000)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))

    labels = [_lambda_label(v) for v in grid]
    xs = list(range(len(grid)))
    write_chart(out / "sweep_accuracy.svg",
                {"val": (xs, [p["val_mean"] for p in points]),
                 "test": (xs, [p["mean"] for p in points])},
                f"{cfg.method}: accuracy vs lambda", "lambda", "accuracy", x_labels=labels)
    zf = [p["zero_fraction_mean"] for p in points]
    sparsity = {"zero fraction": (xs, zf)}
    write_chart(out / "sweep_sparsity.svg", sparsity,
                f"{cfg.method}: prompt sparsity vs lambda", "lambda",
                "fraction of zero prompt dims", x_labels=labels)
    if cfg.plots:
        _loss_plot(out / "loss.svg", best_runs, f"{cfg.method} (lambda={best:g}) training objective")
    return report


def _lambda_label(v: float) -> str:
    return "0" if v == 0 else f"{v:g}"


def cmd_report(dirs, out=None) -> list[dict]:
    if not dirs:
        raise ConfigError("report needs at least one run directory")
    rows = []
    for d in dirs:
        path = Path(d) / "report.json"
        if not path.is_file():
            raise ConfigError(f"{path}: missing report.json")
        try:
            rep = json.loads(path.read_text())
            accs = [r["accuracy"] for r in rep["runs"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed report ({exc})") from None
        zf = [r.get("zero_fraction") for r in rep["runs"] if r.get("zero_fraction") is not None]
        rows.append({
            "run": Path(d).name,
            "method": rep.get("method", ""),
            "lambda": rep.get("lambda"),
            "k": rep.get("k"),
            "seeds": len(accs),
            "accuracy": format_mean_std(accs),
            "zero_fraction": float(np.mean(zf)) if zf else None,
        })
    table = [[_cell(r[c]) for c in REPORT_COLUMNS] for r in rows]
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out) / "comparison.csv", REPORT_COLUMNS, table)
        (Path(out) / "comparison.txt").write_text(report_text(rows))
    return rows


def report_text(rows) -> str:
    return format_table(REPORT_COLUMNS, [[_text_cell(r[c]) for c in REPORT_COLUMNS] for r in rows])


def format_table(columns, table) -> str:
    widths = [max(len(c), *(len(r[i]) for r in table)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in table]
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError", "RunConfig", "load_config", "cmd_pretrain", "cmd_tune", "cmd_sweep",
    "cmd_report", "read_csv", "report_text", "select_lambda", "RESULTS_COLUMNS", "SWEEP_COLUMNS",
    "REPORT_COLUMNS", "DEFAULT_GRID", "DatasetError",
]
