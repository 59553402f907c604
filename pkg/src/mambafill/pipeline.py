"""Training loop, reverse-chain sampler, metrics, and simple baselines.

Training follows the conditional denoising recipe: per step, carve
imputation targets out of the observed entries, corrupt the series at a
uniformly drawn diffusion step, predict the injected noise, and score the
squared error on the targets only. Imputation runs the learned reverse
chain from pure noise at the non-conditioning entries and takes the
per-entry median over several draws.
"""
from __future__ import annotations

import copy
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Context, Tape
from .diffusion import DiffusionSchedule, forward_noise, masked_loss, reverse_step
from .masking import MaskPair, draw_training_masks
from .model import ConditioningBundle, NoisePredictor


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the learning rate drops to fixed values after
    75% and 90% of the epochs."""

    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    milestones: tuple[float, float] = (0.75, 0.9)
    milestone_rates: tuple[float, float] = (1e-4, 1e-5)
    seed: int = 0
    mask_strategy: str = "point"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not all(0.0 < m < 1.0 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, 1): {self.milestones}")
        rates = (self.learning_rate,) + tuple(self.milestone_rates)
        if not all(r > 0 for r in rates) or list(rates) != sorted(rates, reverse=True):
            raise ValueError(f"learning rates must be positive and decreasing: {rates}")

    def rate_at(self, epoch: int) -> float:
        frac = epoch / max(self.epochs, 1)
        if frac >= self.milestones[1]:
            return self.milestone_rates[1]
        if frac >= self.milestones[0]:
            return self.milestone_rates[0]
        return self.learning_rate


@dataclass
class WindowSet:
    """A stack of fixed-length windows: values and their observed mask."""

    values: np.ndarray    # [num, N, L]
    observed: np.ndarray  # [num, N, L] boolean

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise ValueError(f"values {self.values.shape} and observed "
                             f"{self.observed.shape} differ")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    loss_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class ImputationResult:
    median: np.ndarray                 # [num, N, L]
    samples: np.ndarray                # [draws, num, N, L]
    seed: int
    wall_time: float
    metrics: "Metrics | None" = None


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float


class Adam:
    """Standard bias-corrected adaptive-moment optimizer."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, grads, lr: float) -> None:
        """Apply one update from (Parameter, gradient) pairs."""
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for param, g in grads:
            key = id(param)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(param.value)
                self._v[key] = np.zeros_like(param.value)
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def linear_interpolate(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Per-node linear interpolation in time with constant extrapolation.

    Rows with no observed value at all are filled with zeros and reported
    through a warning; downstream code treats such windows as uninformative
    conditioning rather than an error.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    length = values.shape[-1]
    flat_v = values.reshape(-1, length)
    flat_m = observed.reshape(-1, length)
    out = np.empty_like(flat_v)
    grid = np.arange(length)
    empty_rows = 0
    for i in range(flat_v.shape[0]):
        idx = np.flatnonzero(flat_m[i])
        if idx.size == 0:
            out[i] = 0.0
            empty_rows += 1
        elif idx.size == 1:
            out[i] = flat_v[i, idx[0]]
        else:
            out[i] = np.interp(grid, idx, flat_v[i, idx])
    if empty_rows:
        warnings.warn(f"linear_interpolate: {empty_rows} node row(s) had no "
                      "observed values; filled with zeros", stacklevel=2)
    return out.reshape(values.shape)


def metrics(x_hat: np.ndarray, x_true: np.ndarray, target: np.ndarray) -> Metrics:
    """MAE and MSE over target entries only."""
    target = np.asarray(target, dtype=bool)
    if not target.any():
        raise ValueError("metrics: target mask selects no entries")
    err = np.asarray(x_hat)[target] - np.asarray(x_true)[target]
    return Metrics(mae=float(np.abs(err).mean()), mse=float((err ** 2).mean()))


def baselines(values: np.ndarray, observed: np.ndarray, kind: str,
              node_means: np.ndarray | None = None) -> np.ndarray:
    """Reference imputers: per-node historical mean, or linear interpolation.

    ``node_means`` should come from the training split; when omitted the
    observed entries of ``values`` itself are used.
    """
    observed = np.asarray(observed, dtype=bool)
    values = np.asarray(values, dtype=np.float64)
    if kind == "linear":
        filled = linear_interpolate(values, observed)
    elif kind == "mean":
        if node_means is None:
            with np.errstate(invalid="ignore"):
                node_means = np.where(observed, values, np.nan)
                node_means = np.nanmean(node_means.reshape(-1, *values.shape[-2:]),
                                        axis=(0, 2))
            node_means = np.nan_to_num(node_means)
        fill = np.broadcast_to(np.asarray(node_means)[:, None], values.shape[-2:])
        filled = np.broadcast_to(fill, values.shape).copy()
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return np.where(observed, values, filled)


# ---------------------------------------------------------------------------
# training


def train_step(model: NoisePredictor, optimizer: Adam, tape: Tape,
               schedule: DiffusionSchedule, batch_values: np.ndarray,
               batch_observed: np.ndarray, adjacency_norm: np.ndarray,
               rng: np.random.Generator, lr: float, mask_strategy: str = "point",
               pool=None, fixed: tuple | None = None) -> float:
    """One optimization step; returns the scalar loss.

    ``fixed`` optionally pins (MaskPair, t, eps) so a step can be replayed
    deterministically (used by the overfit check).
    """
    if fixed is None:
        pair = draw_training_masks(mask_strategy, batch_observed, rng, pool=pool)
        t = rng.integers(1, schedule.steps + 1, size=batch_values.shape[0])
        eps = rng.standard_normal(batch_values.shape)
    else:
        pair, t, eps = fixed
    cond = pair.conditioning
    x_interp = linear_interpolate(batch_values, cond)
    x0 = np.where(pair.observed, batch_values, 0.0)
    x_noisy = forward_noise(x0, t, eps, schedule) * (1.0 - cond)

    tape.reset()
    ctx = Context(tape, rng, train=True)
    bundle = ConditioningBundle(x_interp=x_interp,
                                adjacency_norm=adjacency_norm, t=t)
    eps_hat = model.predict_noise(ctx, x_noisy, bundle, cond.astype(np.float64))
    loss = masked_loss(eps, eps_hat, pair.target)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise TrainingDivergedError(
            f"non-finite training loss {loss_value} "
            f"(step {optimizer.step_count + 1}, lr {lr})")
    grads = tape.backward(loss)
    optimizer.step(tape.param_grads(grads), lr)
    return loss_value


def _validation_loss(model: NoisePredictor, windows: WindowSet,
                     schedule: DiffusionSchedule, adjacency_norm: np.ndarray,
                     seed: int, mask_strategy: str, pool) -> float:
    rng = np.random.default_rng(seed)
    pair = draw_training_masks(mask_strategy, windows.observed, rng, pool=pool)
    cond = pair.conditioning
    t = rng.integers(1, schedule.steps + 1, size=len(windows))
    eps = rng.standard_normal(windows.values.shape)
    x0 = np.where(pair.observed, windows.values, 0.0)
    x_noisy = forward_noise(x0, t, eps, schedule) * (1.0 - cond)
    x_interp = linear_interpolate(windows.values, cond)
    ctx = Context(tape=None, rng=None, train=False)
    bundle = ConditioningBundle(x_interp=x_interp,
                                adjacency_norm=adjacency_norm, t=t)
    eps_hat = model.predict_noise(ctx, x_noisy, bundle, cond.astype(np.float64))
    return masked_loss(eps, eps_hat, pair.target).item()


def train(model: NoisePredictor, train_windows: WindowSet, cfg: TrainConfig,
          schedule: DiffusionSchedule, adjacency_norm: np.ndarray,
          val_windows: WindowSet | None = None, pool=None,
          log_every: int = 0) -> TrainResult:
    """Optimize the model; keeps the best-validation parameter snapshot.

    Deterministic for a fixed config and seed in single-worker mode: every
    random draw comes from one generator seeded by ``cfg.seed``, and the
    validation draws use a separate per-epoch stream.
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    tape = Tape()
    result = TrainResult(best_state=model.state_dict())
    if cfg.epochs == 0:
        return result

    num = len(train_windows)
    best_val = np.inf
    for epoch in range(cfg.epochs):
        lr = cfg.rate_at(epoch)
        order = rng.permutation(num)
        for start in range(0, num, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(
                model, optimizer, tape, schedule,
                train_windows.values[idx], train_windows.observed[idx],
                adjacency_norm, rng, lr, cfg.mask_strategy, pool)
            result.loss_curve.append(loss)
            if log_every and optimizer.step_count % log_every == 0:
                print(f"epoch {epoch} step {optimizer.step_count} "
                      f"loss {loss:.4f} lr {lr:g}")
        if val_windows is not None and len(val_windows):
            val = _validation_loss(model, val_windows, schedule, adjacency_norm,
                                   seed=cfg.seed + 7919 * (epoch + 1),
                                   mask_strategy=cfg.mask_strategy, pool=pool)
            result.val_curve.append(val)
            if val < best_val:
                best_val = val
                result.best_state = model.state_dict()
                result.best_epoch = epoch
        else:
            result.best_state = model.state_dict()
            result.best_epoch = epoch
    return result


# ---------------------------------------------------------------------------
# sampling


def impute(model: NoisePredictor, values: np.ndarray, observed: np.ndarray,
           schedule: DiffusionSchedule, adjacency_norm: np.ndarray,
           draws: int = 100, seed: int = 0) -> ImputationResult:
    """Fill every non-observed entry with the median of ``draws`` reverse chains.

    Observed entries pass through bit-identical. Each chain owns an RNG
    stream spawned from the root seed, so results do not depend on how the
    chains are batched and repeat exactly for a fixed seed.
    """
    if draws < 1:
        raise ValueError(f"need at least one draw, got {draws}")
    t_start = time.perf_counter()
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[None]
        observed = observed[None]
    num, n_nodes, length = values.shape

    cond = observed.astype(np.float64)
    x_interp = linear_interpolate(values, observed)
    ctx = Context(tape=None, rng=None, train=False)
    prior = model.encode_prior(ctx, x_interp, adjacency_norm)

    # Replicate the conditioning across chains; chain c occupies rows
    # [c*num, (c+1)*num).
    rep = lambda a: np.concatenate([a] * draws, axis=0)
    cond_rep = rep(cond)
    bundle_interp = rep(x_interp)
    prior_rep = type(prior)(np.concatenate([prior.data] * draws, axis=0))

    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(seed).spawn(draws)]

    def chain_noise():
        return np.concatenate(
            [g.standard_normal((num, n_nodes, length)) for g in streams], axis=0)

    sample = chain_noise() * (1.0 - cond_rep)
    for t in range(schedule.steps, 0, -1):
        bundle = ConditioningBundle(x_interp=bundle_interp,
                                    adjacency_norm=adjacency_norm, t=t)
        eps_hat = model.predict_noise(ctx, sample * (1.0 - cond_rep), bundle,
                                      cond_rep, prior=prior_rep).data
        z = chain_noise() if t > 1 else None
        sample = reverse_step(sample, eps_hat, t, schedule, z) * (1.0 - cond_rep)

    samples = sample.reshape(draws, num, n_nodes, length)
    filled = np.median(samples, axis=0)
    median = np.where(observed, values, filled)
    if squeeze:
        median = median[0]
        samples = samples[:, 0]
    return ImputationResult(median=median, samples=samples, seed=seed,
                            wall_time=time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# per-node standardization


@dataclass(frozen=True)
class NodeScaler:
    """Per-node shift/scale fitted on observed training entries."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, observed: np.ndarray) -> "NodeScaler":
        values = np.asarray(values, dtype=np.float64)
        observed = np.asarray(observed, dtype=bool)
        flat_v = np.moveaxis(values, -2, 0).reshape(values.shape[-2], -1)
        flat_m = np.moveaxis(observed, -2, 0).reshape(values.shape[-2], -1)
        mean = np.empty(values.shape[-2])
        std = np.empty(values.shape[-2])
        for i in range(values.shape[-2]):
            vals = flat_v[i, flat_m[i]]
            mean[i] = vals.mean() if vals.size else 0.0
            std[i] = vals.std() if vals.size else 1.0
        std = np.maximum(std, 1e-8)
        return cls(mean=mean, std=std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]


# ---------------------------------------------------------------------------
# dataset text files


def save_series(path, values: np.ndarray, observed: np.ndarray,
                node_ids: list[str] | None = None) -> None:
    """Columnar text: header of node ids, one row per step, empty = missing."""
    values = np.asarray(values)
    observed = np.asarray(observed, dtype=bool)
    n_nodes, length = values.shape
    ids = node_ids or [f"node{i}" for i in range(n_nodes)]
    with open(path, "w") as fh:
        fh.write(",".join(ids) + "\n")
        for t in range(length):
            cells = [repr(values[i, t]) if observed[i, t] else ""
                     for i in range(n_nodes)]
            fh.write(",".join(cells) + "\n")


def load_series(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path) as fh:
        header = fh.readline().strip()
        ids = header.split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip("\n")]
    length = len(rows)
    n_nodes = len(ids)
    values = np.zeros((n_nodes, length))
    observed = np.zeros((n_nodes, length), dtype=bool)
    for t, row in enumerate(rows):
        if len(row) != n_nodes:
            raise ValueError(f"{path}: row {t + 2} has {len(row)} cells, "
                             f"expected {n_nodes}")
        for i, cell in enumerate(row):
            if cell != "":
                values[i, t] = float(cell)
                observed[i, t] = True
    return values, observed, ids


def save_adjacency(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix), delimiter=",")


def load_adjacency(path) -> np.ndarray:
    matrix = np.loadtxt(path, delimiter=",")
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{path}: adjacency must be square, got {matrix.shape}")
    return matrix
