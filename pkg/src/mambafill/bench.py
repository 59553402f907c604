"""Desk-scale benchmark harnesses: end-to-end run, ablation, missing-rate
sensitivity, and the downstream node-prediction task.

Every harness is a deterministic function of one flat experiment config and
writes a manifest sufficient to replay the run. Outputs stay inside the
chosen output directory; dataset inputs are never mutated.
"""
from __future__ import annotations

import dataclasses
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Context, Module, Parameter, Tape
from .diffusion import DiffusionSchedule, quadratic_schedule
from .graph import GraphSpec
from .masking import scenario_masks, simulate_failure_masks
from .model import ModelConfig, NoisePredictor
from .pipeline import (Adam, Metrics, NodeScaler, TrainConfig, WindowSet,
                       baselines, impute, linear_interpolate, metrics, train)
from .synth import SyntheticSpec, generate_synthetic

SENSITIVITY_RATES = tuple(round(0.1 * k, 1) for k in range(1, 10))
DOWNSTREAM_HIDDEN = 100
DOWNSTREAM_EPOCHS = 500
DOWNSTREAM_SEEDS = 5
DOWNSTREAM_TRAIN_FRACTION = 0.8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One flat key space covering data, model, training, and evaluation.

    Model keys mirror the reference full-scale configuration (channel size,
    noise-estimation layers, attention heads, noise levels, diffusion steps,
    virtual nodes, dropout, state expansion, convolution width, block
    expansion); defaults are desk scale.
    """

    # synthetic data
    nodes: int = 8
    horizon: int = 2400
    time_length: int = 24
    noise_sigma: float = 0.15
    coupling: float = 0.8
    offset_scale: float = 0.5
    length_scale: float = 0.6
    kernel_threshold: float = 0.05
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    # training
    train_windows: int = 2000
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 1e-3
    # architecture
    nem_layers: int = 2
    channel_size: int = 16
    attention_heads: int = 4
    beta_min: float = 1e-4
    beta_max: float = 0.2
    diffusion_steps: int = 50
    virtual_nodes: int = 4
    mamba_dropout: float = 0.1
    ssm_state_dim: int = 16
    conv_width: int = 4
    expansion_factor: int = 2
    mode: str = "bi"
    # evaluation
    mask_strategy: str = "point"
    scenario: str = "point"
    missing_rate: float = 0.25
    num_draws: int = 25
    seed: int = 0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        valid = set(cls.field_names())
        unknown = sorted(set(data) - valid)
        if unknown:
            raise ConfigError(
                f"unknown config key(s) {unknown}; valid keys: "
                f"{sorted(valid)}")
        coerced = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                value = data[f.name]
                if f.type in ("int",) and not isinstance(value, bool):
                    value = int(value)
                elif f.type == "float":
                    value = float(value)
                coerced[f.name] = value
        return cls(**coerced)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_nodes=self.nodes, horizon=self.horizon, window=self.time_length,
            coupling=self.coupling, offset_scale=self.offset_scale,
            noise_sigma=self.noise_sigma, length_scale=self.length_scale,
            kernel_threshold=self.kernel_threshold, seed=self.seed)

    def model_config(self, mode: str | None = None) -> ModelConfig:
        return ModelConfig(
            nodes=self.nodes, seq_len=self.time_length,
            channels=self.channel_size, nem_layers=self.nem_layers,
            heads=self.attention_heads, virtual_nodes=self.virtual_nodes,
            expansion=self.expansion_factor, conv_width=self.conv_width,
            state_dim=self.ssm_state_dim, dropout=self.mamba_dropout,
            diffusion_steps=self.diffusion_steps, mode=mode or self.mode)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed if seed is None else seed,
            mask_strategy=self.mask_strategy)

    def schedule(self) -> DiffusionSchedule:
        return quadratic_schedule(self.diffusion_steps, self.beta_min,
                                  self.beta_max)


@dataclass
class DeskData:
    """A prepared dataset: ground truth, scenario mask, splits, windows."""

    truth: np.ndarray
    observed: np.ndarray
    graph: GraphSpec
    scaler: NodeScaler
    train_set: WindowSet          # scaled values
    val_set: WindowSet            # scaled values
    test_set: WindowSet           # scaled values
    test_raw: WindowSet           # original values, same mask
    test_truth: np.ndarray        # [num_test, N, L] complete
    split: tuple[int, int]
    failure_pool: list[np.ndarray] = field(default_factory=list)


def _window_stack(series: np.ndarray, mask: np.ndarray, starts,
                  length: int) -> tuple[np.ndarray, np.ndarray]:
    vals = np.stack([series[:, s:s + length] for s in starts])
    obs = np.stack([mask[:, s:s + length] for s in starts])
    return vals, obs


def prepare_data(cfg: ExperimentConfig) -> DeskData:
    truth, graph = generate_synthetic(cfg.synthetic_spec())
    pool = []
    scen_rng = np.random.default_rng(cfg.seed + 101)
    kwargs = {}
    if cfg.scenario == "simulated_failure":
        pool = simulate_failure_masks(8, cfg.nodes, cfg.horizon,
                                      np.random.default_rng(cfg.seed + 377))
        kwargs["pool"] = pool
    observed = scenario_masks(cfg.scenario, truth.shape, scen_rng,
                              rate=cfg.missing_rate, **kwargs)

    horizon, length = cfg.horizon, cfg.time_length
    t0 = int(round(cfg.train_fraction * horizon))
    t1 = int(round((cfg.train_fraction + cfg.val_fraction) * horizon))
    scaler = NodeScaler.fit(truth[:, :t0], observed[:, :t0])
    scaled = scaler.transform(truth)

    win_rng = np.random.default_rng(cfg.seed + 202)
    train_starts = win_rng.integers(0, t0 - length + 1, size=cfg.train_windows)
    val_starts = range(t1 - ((t1 - t0) // length) * length + t0 - t0, 0) \
        if False else range(t0, t1 - length + 1, length)
    test_starts = range(t1, horizon - length + 1, length)

    train_vals, train_obs = _window_stack(scaled, observed, train_starts, length)
    val_vals, val_obs = _window_stack(scaled, observed, list(val_starts), length)
    test_vals, test_obs = _window_stack(scaled, observed, list(test_starts), length)
    raw_vals, _ = _window_stack(truth, observed, list(test_starts), length)
    return DeskData(
        truth=truth, observed=observed, graph=graph, scaler=scaler,
        train_set=WindowSet(train_vals, train_obs),
        val_set=WindowSet(val_vals, val_obs),
        test_set=WindowSet(test_vals, test_obs),
        test_raw=WindowSet(raw_vals, test_obs),
        test_truth=raw_vals.copy(), split=(t0, t1), failure_pool=pool)


def train_model(cfg: ExperimentConfig, data: DeskData, mode: str | None = None,
                seed: int | None = None, log_every: int = 0):
    """Build and fit one model variant; parameters end at the best-val state."""
    model_cfg = cfg.model_config(mode)
    train_cfg = cfg.train_config(seed)
    schedule = cfg.schedule()
    model = NoisePredictor(model_cfg, seed=train_cfg.seed)
    result = train(model, data.train_set, train_cfg, schedule,
                   data.graph.adjacency_norm, val_windows=data.val_set,
                   pool=data.failure_pool or None, log_every=log_every)
    model.load_state_dict(result.best_state)
    return model, result, schedule


def evaluate_model(model: NoisePredictor, schedule: DiffusionSchedule,
                   cfg: ExperimentConfig, data: DeskData,
                   seed: int | None = None,
                   test_set: WindowSet | None = None,
                   test_raw: WindowSet | None = None,
                   test_truth: np.ndarray | None = None):
    """Impute the test windows and score against the held-back truth."""
    test_set = data.test_set if test_set is None else test_set
    test_raw = data.test_raw if test_raw is None else test_raw
    test_truth = data.test_truth if test_truth is None else test_truth
    imp = impute(model, test_set.values, test_set.observed, schedule,
                 data.graph.adjacency_norm, draws=cfg.num_draws,
                 seed=cfg.seed + 404 if seed is None else seed)
    denorm = data.scaler.inverse(imp.median)
    x_hat = np.where(test_raw.observed, test_raw.values, denorm)
    targets = ~test_raw.observed
    scored = metrics(x_hat, test_truth, targets)
    return x_hat, scored, imp


def baseline_metrics(cfg: ExperimentConfig, data: DeskData,
                     test_raw: WindowSet | None = None,
                     test_truth: np.ndarray | None = None) -> dict[str, Metrics]:
    test_raw = data.test_raw if test_raw is None else test_raw
    test_truth = data.test_truth if test_truth is None else test_truth
    t0 = data.split[0]
    train_means = np.array([
        data.truth[i, :t0][data.observed[i, :t0]].mean()
        if data.observed[i, :t0].any() else 0.0
        for i in range(cfg.nodes)])
    targets = ~test_raw.observed
    out = {}
    for kind in ("mean", "linear"):
        filled = baselines(test_raw.values, test_raw.observed, kind,
                           node_means=train_means if kind == "mean" else None)
        out[kind] = metrics(filled, test_truth, targets)
    return out


# ---------------------------------------------------------------------------
# run artifacts


def git_describe() -> str:
    try:
        proc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=10)
        if proc.returncode == 0:
            return proc.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig,
                   wall_times: dict[str, float], extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "git": git_describe(),
        "wall_times_s": {k: round(v, 3) for k, v in wall_times.items()},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_curve_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# harnesses


def run_benchmark(cfg: ExperimentConfig, out_dir: Path,
                  log_every: int = 0) -> dict:
    """Train one model and compare against the mean/linear baselines."""
    out_dir = Path(out_dir)
    times: dict[str, float] = {}
    tic = time.perf_counter()
    data = prepare_data(cfg)
    times["prepare"] = time.perf_counter() - tic

    tic = time.perf_counter()
    model, result, schedule = train_model(cfg, data, log_every=log_every)
    times["train"] = time.perf_counter() - tic

    tic = time.perf_counter()
    _, model_metrics, imp = evaluate_model(model, schedule, cfg, data)
    times["impute"] = time.perf_counter() - tic
    base = baseline_metrics(cfg, data)

    metrics_path = out_dir / "metrics.jsonl"
    summary = {"model": model_metrics, **base}
    for name, m in summary.items():
        append_jsonl(metrics_path, {
            "scenario": cfg.scenario, "imputer": name, "seed": cfg.seed,
            "mae": m.mae, "mse": m.mse,
            "wall_time_s": round(times.get("impute", 0.0), 3)})
    write_curve_csv(out_dir / "loss_curve.csv", ["step", "loss"],
                    list(enumerate(result.loss_curve)))
    write_manifest(out_dir, "evaluate", cfg, times,
                   {"imputation_seed": imp.seed})
    return {"metrics": summary, "times": times,
            "loss_curve": result.loss_curve, "model": model,
            "schedule": schedule, "data": data}


def run_ablation(cfg: ExperimentConfig, out_dir: Path, n_seeds: int = 3,
                 log_every: int = 0) -> list[dict]:
    """Directional ablation: train matched variants over shared seeds/data."""
    out_dir = Path(out_dir)
    data = prepare_data(cfg)
    rows = []
    times: dict[str, float] = {}
    for k in range(n_seeds):
        seed = cfg.seed + k
        for mode in ("bi", "uni"):
            tic = time.perf_counter()
            model, _, schedule = train_model(cfg, data, mode=mode, seed=seed,
                                             log_every=log_every)
            _, scored, _ = evaluate_model(model, schedule, cfg, data,
                                          seed=cfg.seed + 404)
            times[f"{mode}_seed{seed}"] = time.perf_counter() - tic
            row = {"variant": mode, "seed": seed,
                   "mae": scored.mae, "mse": scored.mse}
            rows.append(row)
            append_jsonl(out_dir / "ablation.jsonl", row)
    write_manifest(out_dir, "ablate", cfg, times,
                   {"rows": len(rows), "n_seeds": n_seeds})
    return rows


def run_sensitivity(cfg: ExperimentConfig, out_dir: Path,
                    rates=SENSITIVITY_RATES, log_every: int = 0) -> dict:
    """One checkpoint evaluated under point-missing masks of growing rate."""
    rates = tuple(rates)
    if any(r <= 0.0 or r >= 1.0 for r in rates):
        raise ValueError(f"missing rates must lie in (0, 1): a rate of 0 "
                         f"leaves no imputation targets (got {rates})")
    out_dir = Path(out_dir)
    times: dict[str, float] = {}
    tic = time.perf_counter()
    data = prepare_data(cfg)
    model, _, schedule = train_model(cfg, data, log_every=log_every)
    times["train"] = time.perf_counter() - tic

    t1 = data.split[1]
    length = cfg.time_length
    starts = list(range(t1, cfg.horizon - length + 1, length))
    rows = []
    tic = time.perf_counter()
    for rate in rates:
        rng = np.random.default_rng(cfg.seed + 500 + int(round(rate * 100)))
        observed = scenario_masks("point", data.truth.shape, rng, rate=rate)
        scaled = data.scaler.transform(data.truth)
        test_vals = np.stack([scaled[:, s:s + length] for s in starts])
        test_obs = np.stack([observed[:, s:s + length] for s in starts])
        raw_vals = np.stack([data.truth[:, s:s + length] for s in starts])
        test_set = WindowSet(test_vals, test_obs)
        test_raw = WindowSet(raw_vals, test_obs)
        _, scored, _ = evaluate_model(model, schedule, cfg, data,
                                      seed=cfg.seed + 404,
                                      test_set=test_set, test_raw=test_raw,
                                      test_truth=raw_vals)
        row = {"rate": rate, "mae": scored.mae, "mse": scored.mse}
        rows.append(row)
        append_jsonl(out_dir / "sensitivity.jsonl", row)
    times["evaluate"] = time.perf_counter() - tic

    maes = [r["mae"] for r in rows]
    inversions = [maes[i] - maes[i + 1] for i in range(len(maes) - 1)
                  if maes[i + 1] < maes[i]]
    summary = {
        "rates": list(rates), "mae": maes, "mse": [r["mse"] for r in rows],
        "n_inversions": len(inversions),
        "max_inversion": max(inversions) if inversions else 0.0,
        "mean_mae": float(np.mean(maes)),
    }
    write_curve_csv(out_dir / "sensitivity_curve.csv", ["rate", "mae", "mse"],
                    [(r["rate"], r["mae"], r["mse"]) for r in rows])
    write_manifest(out_dir, "sensitivity", cfg, times, {"summary": summary})
    return summary


# ---------------------------------------------------------------------------
# downstream node prediction


class _DownstreamMlp(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.w1 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden)))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)))
        self.b2 = Parameter(np.zeros(1))

    def forward(self, ctx: Context, x):
        h = ad.silu(ad.linear(x, ctx.p(self.w1), ctx.p(self.b1)))
        return ad.linear(h, ctx.p(self.w2), ctx.p(self.b2))


def _fit_downstream_mlp(features: np.ndarray, labels: np.ndarray, seed: int,
                        epochs: int = DOWNSTREAM_EPOCHS, lr: float = 1e-3):
    mlp = _DownstreamMlp(features.shape[1], DOWNSTREAM_HIDDEN,
                         np.random.default_rng(seed))
    optimizer = Adam()
    tape = Tape()
    x_const = features
    y_const = labels[:, None]
    for _ in range(epochs):
        tape.reset()
        ctx = Context(tape, None, train=True)
        pred = mlp.forward(ctx, ad.constant(x_const))
        err = ad.sub(pred, ad.constant(y_const))
        loss = ad.mean(ad.reshape(ad.mul(err, err), (err.data.size,)))
        grads = tape.backward(loss)
        optimizer.step(tape.param_grads(grads), lr)

    def predict(x: np.ndarray) -> np.ndarray:
        ctx = Context(None, None, train=False)
        return mlp.forward(ctx, ad.constant(x)).data[:, 0]

    return predict


def select_target_node(graph: GraphSpec, which: str = "max") -> int:
    """Highest- or lowest-connectivity node by weighted degree."""
    degree = graph.adjacency.sum(axis=1)
    return int(np.argmax(degree) if which == "max" else np.argmin(degree))


def _held_out_imputations(cfg: ExperimentConfig, data: DeskData,
                          model: NoisePredictor,
                          schedule: DiffusionSchedule) -> dict[str, np.ndarray]:
    """Impute the val+test region with each configured imputer."""
    t0 = data.split[0]
    length = cfg.time_length
    starts = list(range(t0, cfg.horizon - length + 1, length))
    scaled = data.scaler.transform(data.truth)
    vals = np.stack([scaled[:, s:s + length] for s in starts])
    obs = np.stack([data.observed[:, s:s + length] for s in starts])
    raw = np.stack([data.truth[:, s:s + length] for s in starts])

    imp = impute(model, vals, obs, schedule, data.graph.adjacency_norm,
                 draws=cfg.num_draws, seed=cfg.seed + 606)
    model_filled = np.where(obs, raw, data.scaler.inverse(imp.median))

    train_means = np.array([
        data.truth[i, :t0][data.observed[i, :t0]].mean()
        if data.observed[i, :t0].any() else 0.0
        for i in range(cfg.nodes)])

    def reassemble(windows: np.ndarray) -> np.ndarray:
        out = np.empty((cfg.nodes, len(starts) * length))
        for j, _ in enumerate(starts):
            out[:, j * length:(j + 1) * length] = windows[j]
        return out

    held = {
        "model": reassemble(model_filled),
        "mean": reassemble(baselines(raw, obs, "mean", node_means=train_means)),
        "linear": reassemble(baselines(raw, obs, "linear")),
        "oracle": reassemble(raw),
    }
    held["_observed"] = reassemble(obs.astype(float)).astype(bool)
    held["_truth"] = reassemble(raw)
    held["_start"] = np.array([starts[0]])
    return held


def run_downstream(cfg: ExperimentConfig, out_dir: Path,
                   target_node: int | None = None,
                   n_seeds: int = DOWNSTREAM_SEEDS,
                   log_every: int = 0) -> list[dict]:
    """Predict one node from the others at the same step, per imputer.

    An MLP with one hidden layer of DOWNSTREAM_HIDDEN units trains for
    DOWNSTREAM_EPOCHS full-batch steps on an 80/20 split of the imputed
    held-out data, min-max normalized; the same seeds are reused across
    imputers and test metrics only count steps whose target value was truly
    observed.
    """
    out_dir = Path(out_dir)
    times: dict[str, float] = {}
    tic = time.perf_counter()
    data = prepare_data(cfg)
    model, _, schedule = train_model(cfg, data, log_every=log_every)
    times["train"] = time.perf_counter() - tic

    if target_node is None:
        target_node = select_target_node(data.graph, "max")
    tic = time.perf_counter()
    held = _held_out_imputations(cfg, data, model, schedule)
    times["impute"] = time.perf_counter() - tic

    observed_target = held["_observed"][target_node]
    other = [i for i in range(cfg.nodes) if i != target_node]
    n_rows = held["_truth"].shape[1]
    split_at = int(DOWNSTREAM_TRAIN_FRACTION * n_rows)
    test_rows = np.arange(split_at, n_rows)
    scorable = test_rows[observed_target[test_rows]]

    rows = []
    tic = time.perf_counter()
    for imputer in ("model", "mean", "linear", "oracle"):
        series = held[imputer]
        feats = series[other].T                      # [steps, N-1]
        labels = series[target_node]
        f_train, f_test = feats[:split_at], feats[split_at:]
        y_train = labels[:split_at]
        lo, hi = f_train.min(axis=0), f_train.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        y_lo, y_hi = y_train.min(), y_train.max()
        y_span = max(y_hi - y_lo, 1e-12)
        fn_train = (f_train - lo) / span
        fn_test = (f_test - lo) / span
        yn_train = (y_train - y_lo) / y_span
        truth_scorable = held["_truth"][target_node, scorable]
        for seed in range(n_seeds):
            predict = _fit_downstream_mlp(fn_train, yn_train,
                                          seed=cfg.seed + 700 + seed)
            pred = predict(fn_test) * y_span + y_lo
            pred_scorable = pred[scorable - split_at]
            err = pred_scorable - truth_scorable
            row = {"imputer": imputer, "seed": seed, "node": target_node,
                   "mae": float(np.abs(err).mean()),
                   "mse": float((err ** 2).mean())}
            rows.append(row)
            append_jsonl(out_dir / "downstream.jsonl", row)
    times["mlp"] = time.perf_counter() - tic
    write_manifest(out_dir, "downstream", cfg, times,
                   {"target_node": target_node, "scorable_rows": len(scorable)})
    return rows
