"""MSE training with best-on-validation selection, metrics and experiment runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import Dataset, SplitSpec, split_by_year
from .tensor import NonFiniteError, ShapeError, Tensor

logger = logging.getLogger(__name__)

PRESET_EPOCHS = {"cvt13": 150, "cvt21": 200, "cvtw24": 250, "tiny": 30}
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.00025
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    runs: int = 4
    val_fraction: float = 0.10
    precision: str = "float32"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.runs < 1 or self.batch_size < 1:
            raise ValueError("epochs, runs and batch_size must be >= 1")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_config_for(preset: str, **overrides) -> TrainConfig:
    if preset not in PRESET_EPOCHS:
        raise ValueError(f"unknown model preset {preset!r}")
    overrides.setdefault("epochs", PRESET_EPOCHS[preset])
    return TrainConfig(**overrides)


class TrainingDivergedError(RuntimeError):
    pass


class DegenerateTargetsError(ValueError):
    pass


# -- metrics --------------------------------------------------------------
@dataclass(frozen=True)
class Metrics:
    mse: float
    rmse: float
    r2: float


@dataclass(frozen=True)
class MetricSummary:
    """Arithmetic means of several Metrics (rmse is not sqrt(mse) here)."""

    mse: float
    rmse: float
    r2: float

    @classmethod
    def of(cls, items: Sequence) -> MetricSummary:
        return cls(
            float(np.mean([m.mse for m in items])),
            float(np.mean([m.rmse for m in items])),
            float(np.mean([m.r2 for m in items])),
        )


def compute_metrics(pred: np.ndarray, target: np.ndarray) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.size} predictions for {target.size} targets")
    if target.size == 0:
        raise ValueError("cannot evaluate an empty set")
    resid = target - pred
    ss_res = float(resid @ resid)
    centred = target - target.mean()
    ss_tot = float(centred @ centred)
    if ss_tot == 0.0:
        raise DegenerateTargetsError("all targets are equal; R^2 is undefined")
    mse = ss_res / target.size
    return Metrics(mse, float(np.sqrt(mse)), 1.0 - ss_res / ss_tot)


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    return ((pred - target) ** 2).mean()


def evaluate(params: M.ParamStore, cfg: M.ModelConfig, ds: Dataset, batch_size: int = 64) -> Metrics:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _check_grid(ds, cfg)
    pred = M.predict(ds.grids(), cfg, params, batch_size)
    return compute_metrics(pred, ds.yields)


def baseline_mean(train_ds: Dataset, test_ds: Dataset) -> Metrics:
    """Predict the training-set mean yield for every test sample."""
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ValueError("baseline needs non-empty train and test sets")
    pred = np.full(len(test_ds), train_ds.yields.mean())
    return compute_metrics(pred, test_ds.yields)


def _check_grid(ds: Dataset, cfg: M.ModelConfig) -> None:
    expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
    if tuple(ds.grid_shape) != expected:
        raise ShapeError(f"dataset grids are {tuple(ds.grid_shape)} but the model expects {expected}")


# -- optimizer ------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: M.ParamStore, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update applied in place; returns (params, state)."""
    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype)
    return params, state


# -- training -------------------------------------------------------------
@dataclass
class History:
    initial_train_loss: float
    initial_val_loss: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    best_val_loss: float = float("inf")


def with_target_scaling(cfg: M.ModelConfig, train_ds: Dataset) -> M.ModelConfig:
    """Fix the output affine map to the training targets' mean and std."""
    y = train_ds.yields
    std = float(y.std())
    return cfg.replace(target_mean=float(y.mean()), target_std=std if std > 0 else 1.0)


def _mse(params, cfg, x, y, batch_size) -> float:
    pred = M.predict(x, cfg, params, batch_size).astype(np.float64).reshape(-1)
    return float(np.mean((pred - y) ** 2))


def train(
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    params: M.ParamStore | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[M.ParamStore, History]:
    """Minibatch Adam on the MSE loss.

    After every epoch the full validation MSE is computed; the parameters of
    the epoch with the lowest validation MSE are returned.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation sets must be non-empty")
    _check_grid(train_ds, model_cfg)
    _check_grid(val_ds, model_cfg)
    dtype = train_cfg.dtype
    if params is None:
        params = M.init_params(model_cfg, train_cfg.seed, dtype)
    x_train, y_train = train_ds.grids(dtype), train_ds.yields
    x_val, y_val = val_ds.grids(dtype), val_ds.yields
    eb = train_cfg.eval_batch_size

    history = History(_mse(params, model_cfg, x_train, y_train, eb), _mse(params, model_cfg, x_val, y_val, eb))
    best = params.copy()
    state = AdamState()
    rng = np.random.default_rng([train_cfg.seed, 1])
    n = len(train_ds)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            try:
                params.zero_grad()
                pred = M.forward(Tensor(x_train[idx]), model_cfg, params, training=True)
                loss = mse_loss(pred, y_train[idx].reshape(-1, 1).astype(dtype))
                loss.backward()
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b + 1}: {exc}") from exc
            adam_step(params, grads, state, train_cfg)
            total += loss.item() * len(idx)
        params.zero_grad()
        val = _mse(params, model_cfg, x_val, y_val, eb)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best = params.copy()
        logger.debug("epoch %d train %.4f val %.4f", epoch, total / n, val)
        if on_epoch is not None:
            on_epoch(epoch, total / n, val)
    return best, history


# -- experiments ----------------------------------------------------------
@dataclass
class CellResult:
    year: int
    run: int
    seed: int
    metrics: Metrics
    baseline: Metrics
    best_epoch: int
    model_cfg: M.ModelConfig
    params: M.ParamStore | None = None


@dataclass
class ExperimentReport:
    cells: list[CellResult]
    years: list[int]
    runs: int

    def cell(self, year: int, run: int) -> CellResult:
        return next(c for c in self.cells if c.year == year and c.run == run)

    def year_mean(self, year: int) -> MetricSummary:
        return MetricSummary.of([c.metrics for c in self.cells if c.year == year])

    def year_baseline(self, year: int) -> MetricSummary:
        return MetricSummary.of([c.baseline for c in self.cells if c.year == year])

    @property
    def grand_mean(self) -> MetricSummary:
        return MetricSummary.of([self.year_mean(y) for y in self.years])

    @property
    def grand_baseline(self) -> MetricSummary:
        return MetricSummary.of([self.year_baseline(y) for y in self.years])

    def rows(self) -> list[tuple[str, MetricSummary, MetricSummary]]:
        out = [(str(y), self.year_mean(y), self.year_baseline(y)) for y in self.years]
        out.append(("AVG", self.grand_mean, self.grand_baseline))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["year", "mse", "rmse", "r2", "baseline_mse", "baseline_rmse", "baseline_r2"])
        for label, m, b in self.rows():
            w.writerow([label, repr(m.mse), repr(m.rmse), repr(m.r2), repr(b.mse), repr(b.rmse), repr(b.r2)])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["year", "run", "seed", "best_epoch", "mse", "rmse", "r2"])
        for c in self.cells:
            w.writerow([c.year, c.run, c.seed, c.best_epoch, repr(c.metrics.mse), repr(c.metrics.rmse), repr(c.metrics.r2)])
        return buf.getvalue()

    def to_markdown(self, label: str = "CvT") -> str:
        rows = self.rows()
        table = [["Year", f"{label} RMSE", f"{label} R²", "Mean RMSE", "Mean R²"]]
        for name, m, b in rows:
            table.append([name, f"{m.rmse:.2f}", f"{m.r2:.3f}", f"{b.rmse:.2f}", f"{b.r2:.3f}"])
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]

        def fmt(r):
            return "| " + " | ".join(c.ljust(wd) for c, wd in zip(r, widths)) + " |"

        lines = [fmt(table[0]), "|" + "|".join("-" * (wd + 2) for wd in widths) + "|"]
        lines += [fmt(r) for r in table[1:]]
        return "\n".join(lines) + "\n"


def run_seed(base_seed: int, year: int, run: int) -> int:
    return int(np.random.SeedSequence([base_seed, year, run]).generate_state(1)[0])


def run_experiment(
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    ds: Dataset,
    test_years: Sequence[int],
    keep_params: bool = False,
    on_cell: Callable[[CellResult], None] | None = None,
) -> ExperimentReport:
    """Train and evaluate every (test year, run) cell.

    Each cell draws its own seed, which fixes the validation split, the
    initialization and the minibatch order.
    """
    available = set(ds.years.tolist())
    missing = [y for y in test_years if y not in available]
    if missing:
        raise ValueError(f"test years {missing} not in dataset; available years: {sorted(available)}")
    cells = []
    for year in test_years:
        for run in range(train_cfg.runs):
            seed = run_seed(train_cfg.seed, year, run)
            train_ds, val_ds, test_ds = split_by_year(ds, SplitSpec(year, train_cfg.val_fraction, seed))
            cfg = with_target_scaling(model_cfg, train_ds)
            params, history = train(cfg, train_cfg.replace(seed=seed), train_ds, val_ds)
            cell = CellResult(
                year,
                run,
                seed,
                evaluate(params, cfg, test_ds, train_cfg.eval_batch_size),
                baseline_mean(train_ds, test_ds),
                history.best_epoch,
                cfg,
                params,
            )
            logger.info("year %d run %d: rmse %.3f r2 %.3f", year, run, cell.metrics.rmse, cell.metrics.r2)
            if on_cell is not None:
                on_cell(cell)
            if not keep_params:
                cell.params = None
            cells.append(cell)
    return ExperimentReport(cells, list(test_years), train_cfg.runs)
