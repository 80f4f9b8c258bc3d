"""Experiment procedures built on :func:`vibft.training.train`.

* :func:`run_sweep` - grid search with per-cell seed averaging.
* :func:`expected_max_curve` - expected best test score among ``n`` seeds.
* :func:`beta_sweep_curves` - final train/val loss as a function of beta0.
* :func:`bias_probe` - linear probe on a frozen model's view of bias-only inputs.
* :func:`ablation_compare` - bottleneck vs the same head without KL, paired by seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .data import Dataset, atomic_write
from .numkit import ContractError, NonFiniteError, Rng, Tensor
from .training import (
    ConfigError,
    Model,
    OptimizerConfig,
    OptimizerState,
    RegularizerSpec,
    RunConfig,
    RunRecord,
    adam_step,
    train,
)
from .vib import Linear

log = logging.getLogger(__name__)

VIB_BETA_GRID = (1e-4, 1e-5, 1e-6)
VIB_K_GRID = (144, 192, 288, 384)
DROPOUT_GRID = (0.25, 0.45, 0.65, 0.85)
MIXOUT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
WD_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
VARYING_RESOURCE_K_GRID = (12, 18, 24, 36, 48, 72, 96, 144, 192, 288, 384)
VARYING_RESOURCE_BETA_GRID = (1e-4, 1e-5)

GRID_KEYS = ("beta0", "k", "dropout_p", "mixout_p", "wd_lambda")


def apply_cell(base: RunConfig, cell: Mapping[str, float]) -> RunConfig:
    """Config for one grid cell; regularizer keys switch the regularizer kind."""
    cfg = base
    for key, value in cell.items():
        if key == "beta0":
            cfg = replace(cfg, beta0=float(value))
        elif key == "k":
            cfg = replace(cfg, k=int(value))
        elif key == "dropout_p":
            cfg = replace(cfg, regularizer=replace(cfg.regularizer, kind="dropout", p=float(value)))
        elif key == "mixout_p":
            cfg = replace(cfg, regularizer=replace(cfg.regularizer, kind="mixout", p=float(value)))
        elif key == "wd_lambda":
            cfg = replace(cfg, regularizer=replace(cfg.regularizer, kind="wd_to_init", lam=float(value)))
        else:
            raise ConfigError(f"grid key {key!r} is not one of {GRID_KEYS}")
    return cfg


@dataclass(frozen=True)
class SweepSpec:
    base: RunConfig
    grid: Mapping[str, Sequence[float]]
    seeds: Sequence[int] = (0,)

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ConfigError("grid: every axis needs at least one value")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        for key in self.grid:
            if key not in GRID_KEYS:
                raise ConfigError(f"grid: unknown axis {key!r}, expected one of {GRID_KEYS}")

    def cells(self) -> list[dict]:
        keys = list(self.grid)
        out = [{}]
        for key in keys:
            out = [{**c, key: v} for c in out for v in self.grid[key]]
        return out


@dataclass
class CellSummary:
    cell: dict
    mean_val: float
    std_val: float
    mean_test: float | None
    runs: int
    failed: int

    def sort_key(self) -> tuple:
        # best validation first; ties prefer the smaller bottleneck, then the smaller beta0
        return (-self.mean_val, self.cell.get("k", 0), self.cell.get("beta0", 0.0))


@dataclass
class SweepResult:
    records: list[RunRecord]
    cells: list[CellSummary]
    best: CellSummary | None

    @property
    def failures(self) -> list[RunRecord]:
        return [r for r in self.records if not r.ok]

    def records_for(self, cell: Mapping) -> list[RunRecord]:
        return [r for r in self.records if r.cell == dict(cell)]


def summarize_cells(cells: Sequence[dict], records: Sequence[RunRecord]) -> list[CellSummary]:
    out = []
    for cell in cells:
        runs = [r for r in records if r.cell == cell]
        ok = [r for r in runs if r.ok]
        vals = [r.best_val_metric for r in ok]
        tests = [r.test_metric for r in ok if r.test_metric is not None]
        out.append(CellSummary(
            cell=cell,
            mean_val=float(np.mean(vals)) if vals else -np.inf,
            std_val=float(np.std(vals)) if vals else 0.0,
            mean_test=float(np.mean(tests)) if tests else None,
            runs=len(runs),
            failed=len(runs) - len(ok),
        ))
    return out


def select_best(summaries: Sequence[CellSummary]) -> CellSummary | None:
    usable = [s for s in summaries if np.isfinite(s.mean_val)]
    return min(usable, key=CellSummary.sort_key) if usable else None


def _run_one(args) -> RunRecord:
    cfg, data, cell, keep_model = args
    record = train(cfg, data)
    record.cell = dict(cell)
    if not keep_model:
        record.model = None
    return record


def run_many(jobs_args: list, jobs: int = 1) -> list[RunRecord]:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_run_one(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, jobs_args))


def run_sweep(
    spec: SweepSpec,
    data: Mapping[str, Dataset],
    jobs: int = 1,
    keep_models: bool = False,
) -> SweepResult:
    """One run per (cell, seed); the best cell maximises mean validation metric.

    Failed runs stay in ``records`` but are left out of the cell averages.
    """
    cells = spec.cells()
    args = [(replace(apply_cell(spec.base, c), seed=int(s)).validate(), data, c, keep_models)
            for c in cells for s in spec.seeds]
    records = run_many(args, jobs)
    for r in records:
        if not r.ok:
            log.warning("run %s (cell %s) failed: %s", r.run_id, r.cell, r.error)
    summaries = summarize_cells(cells, records)
    return SweepResult(records, summaries, select_best(summaries))


@dataclass
class ExpectedMaxPoint:
    n: int
    expected_max: float
    std_max: float
    metric_std: float


def expected_max_curve(values: Sequence[float], max_n: int | None = None) -> list[ExpectedMaxPoint]:
    """Expected maximum of ``n`` draws with replacement from the observed metrics.

    ``E[max_n] = sum_i v_(i) * ((i/m)^n - ((i-1)/m)^n)`` over sorted values.
    ``std_max`` is the standard deviation of that maximum; ``metric_std`` is
    the plain spread of the inputs, reported alongside.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    m = v.size
    if m == 0:
        raise ContractError("expected_max_curve needs at least one value")
    i = np.arange(1, m + 1, dtype=np.float64)
    spread = float(v.std())
    out = []
    for n in range(1, (max_n or m) + 1):
        w = (i / m) ** n - ((i - 1) / m) ** n
        e1 = float(w @ v)
        e2 = float(w @ (v * v))
        out.append(ExpectedMaxPoint(n, e1, float(np.sqrt(max(e2 - e1 * e1, 0.0))), spread))
    return out


@dataclass
class BetaCurveRow:
    beta0: float
    train_loss: float | None
    val_loss: float | None
    train_accuracy: float | None
    val_accuracy: float | None
    mean_sigma: float | None
    status: str


def beta_sweep_curves(
    base: RunConfig,
    betas: Sequence[float],
    data: Mapping[str, Dataset],
    jobs: int = 1,
) -> list[BetaCurveRow]:
    """Final-epoch train and validation losses for each beta0 at a fixed K and seed."""
    if not betas:
        raise ContractError("beta_sweep_curves needs at least one beta0")
    if base.mode != "vib":
        raise ConfigError("beta curves need mode 'vib'")
    args = [(replace(base, beta0=float(b)).validate(), data, {"beta0": float(b)}, False) for b in betas]
    rows = []
    for b, r in zip(betas, run_many(args, jobs)):
        last = r.epochs[-1] if r.epochs and r.ok else None
        rows.append(BetaCurveRow(
            float(b),
            last.train_loss if last else None,
            last.val_loss if last else None,
            last.train_accuracy if last else None,
            last.val_accuracy if last else None,
            last.mean_sigma if last else None,
            r.status,
        ))
    return rows


@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple[int, ...] = ()
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0


@dataclass
class ProbeReport:
    input_mode: str
    train_accuracy: float | None
    val_accuracy: float | None
    test_accuracy: float | None
    chance: float
    run_id: str | None = None
    columns: list[int] = field(default_factory=list)
    best_epoch: int | None = None
    status: str = "ok"
    diagnostics: str | None = None


PROBE_MODES = ("shortcut-only", "posterior-samples")


def _bias_columns(data: Mapping[str, Dataset], columns: Sequence[int] | None) -> list[int]:
    if columns is not None:
        return list(columns)
    spec = data["train"].spec
    if spec is None:
        raise ContractError("bias probe needs explicit columns for data without a synthetic spec")
    return list(spec.shortcut_columns)


def _probe_inputs(model: Model | None, ds: Dataset, mode: str, cols: list[int], rng: Rng | None) -> np.ndarray:
    if mode == "shortcut-only":
        return ds.view(cols, zero_others=False)
    return model.representation(ds.view(cols, zero_others=True), rng)


def bias_probe(
    model: Model | None,
    data: Mapping[str, Dataset],
    input_mode: str = "posterior-samples",
    columns: Sequence[int] | None = None,
    probe: ProbeConfig = ProbeConfig(),
    run_id: str | None = None,
) -> ProbeReport:
    """Train a fresh probe to predict labels from bias-only inputs.

    ``shortcut-only`` reads the raw bias columns.  ``posterior-samples``
    zeroes every other column, passes the result through the frozen model
    and reads a sampled code ``z`` (redrawn each probe epoch), the mean code
    for the deterministic ablation, or the encoder features for baselines.
    The probe early-stops on validation accuracy; test accuracy is read on
    ``test_id`` (or ``test``).
    """
    if input_mode not in PROBE_MODES:
        raise ContractError(f"input_mode must be one of {PROBE_MODES}, got {input_mode!r}")
    if input_mode == "posterior-samples" and model is None:
        raise ContractError("posterior-samples probes need a trained model")
    cols = _bias_columns(data, columns)
    train_ds, val_ds = data["train"], data["val"]
    test_ds = data.get("test_id", data.get("test"))
    c = train_ds.num_classes
    before = model.state() if model is not None else None
    root = Rng(probe.seed)
    sample_rng, init_rng = root.spawn("samples"), root.spawn("init")
    stochastic = input_mode == "posterior-samples" and model.config.mode == "vib"

    def inputs(ds, rng):
        return _probe_inputs(model, ds, input_mode, cols, rng if stochastic else None)

    x_val = inputs(val_ds, sample_rng)
    x_test = inputs(test_ds, sample_rng) if test_ds is not None else None
    x_train = inputs(train_ds, sample_rng)
    width = x_train.shape[1]
    layers, fan_in = [], width
    for i, h in enumerate((*probe.hidden, c)):
        layers.append(Linear.init(init_rng, fan_in, h, f"probe.{i}"))
        fan_in = h
    params = {}
    for i, layer in enumerate(layers):
        params.update(layer.named(f"probe.{i}"))

    def forward(x):
        h = Tensor(x)
        for i, layer in enumerate(layers):
            h = layer(h)
            if i < len(layers) - 1:
                h = nk.relu(h)
        return h

    def accuracy(x, ds):
        return float(np.mean(np.argmax(forward(x).data, axis=1) == ds.labels))

    report = ProbeReport(input_mode, None, None, None, 1.0 / c, run_id, cols)
    opt = OptimizerState(OptimizerConfig(lr=probe.lr))
    best, best_state = -np.inf, None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(1, probe.epochs + 1):
                if stochastic and epoch > 1:
                    x_train = inputs(train_ds, sample_rng)
                loss = nk.softmax_cross_entropy(forward(x_train), train_ds.labels)
                adam_step(params, nk.backward(loss, params), opt)
                val_acc = accuracy(x_val, val_ds)
                if val_acc > best:
                    best, report.best_epoch = val_acc, epoch
                    best_state = {n: p.data.copy() for n, p in params.items()}
    except NonFiniteError as exc:
        report.status, report.diagnostics = "failed", f"probe diverged: {exc}"
        return report
    for n, p in params.items():
        p.data = best_state[n]
    report.train_accuracy = accuracy(x_train, train_ds)
    report.val_accuracy = accuracy(x_val, val_ds)
    report.test_accuracy = accuracy(x_test, test_ds) if x_test is not None else None
    if model is not None:
        after = model.state()
        if any(not np.array_equal(before[n], after[n]) for n in before):
            raise ContractError("bias probe modified the frozen model")
    return report


@dataclass
class AblationComparison:
    vib: list[RunRecord]
    ablation: list[RunRecord]
    deltas: list[dict]
    best_k: dict[str, int | None]
    best_mean_test: dict[str, float | None]


def ablation_compare(
    base: RunConfig,
    data: Mapping[str, Dataset],
    k_grid: Sequence[int] = VIB_K_GRID,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
) -> AblationComparison:
    """Train the bottleneck and its beta=0 deterministic ablation on matched seeds and K grid."""
    vib_base = replace(base, mode="vib")
    abl_base = replace(base, mode="ablation_deterministic", beta0=0.0, regularizer=RegularizerSpec())
    vib = run_sweep(SweepSpec(vib_base, {"k": list(k_grid)}, seeds), data, jobs)
    abl = run_sweep(SweepSpec(abl_base, {"k": list(k_grid)}, seeds), data, jobs)
    by_key = {(r.run_config.k, r.seed): r for r in abl.records}
    deltas = []
    for r in vib.records:
        other = by_key[(r.run_config.k, r.seed)]
        if r.ok and other.ok:
            deltas.append({"k": r.run_config.k, "seed": r.seed, "vib": r.test_metric,
                           "ablation": other.test_metric, "delta": r.test_metric - other.test_metric})
    best_k = {name: (res.best.cell["k"] if res.best else None) for name, res in (("vib", vib), ("ablation", abl))}
    best_test = {name: (res.best.mean_test if res.best else None) for name, res in (("vib", vib), ("ablation", abl))}
    return AblationComparison(vib.records, abl.records, deltas, best_k, best_test)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.canonical_json().encode()).hexdigest()[:12]


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def write_outputs(out_dir, stem: str, base: RunConfig, rows: Sequence[Mapping], summary: Mapping) -> tuple[Path, Path]:
    """Write ``<stem>-<config hash>.csv`` and ``.json`` atomically."""
    out_dir = Path(out_dir)
    name = f"{stem}-{config_hash(base)}"
    csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
    atomic_write(csv_path, rows_to_csv(rows))
    atomic_write(json_path, json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return csv_path, json_path


def _json_default(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
