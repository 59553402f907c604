"""Finite-difference verification of analytic gradients.

The numeric side only ever evaluates forward passes, so it is independent of
the tape's backward rules. Central differences at h=1e-5 in double precision
resolve gradients to roughly 1e-10 absolute, comfortably inside the 1e-4
relative tolerance used across the test suite.

``run_full_suite`` checks every primitive, every learned block, and the
end-to-end masked diffusion loss on a tiny two-node model; it backs both the
test suite and the ``gradcheck`` CLI subcommand.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Context, Parameter, Tape, Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
# Relative error floor: below this magnitude the comparison is dominated by
# finite-difference noise, so near-zero gradients compare in absolute terms.
REL_FLOOR = 1e-6


def numeric_gradient(f: Callable[[], float], param: Parameter,
                     h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` wrt every entry of ``param``."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(build_loss: Callable[[Tape], Tensor],
                    params: Sequence[Parameter],
                    h: float = DEFAULT_H) -> float:
    """Compare tape gradients against finite differences for each parameter.

    ``build_loss`` must construct the scalar loss Tensor on a fresh tape and
    be deterministic (re-seed any internal RNG per call). Returns the worst
    elementwise relative error over all parameters.
    """
    tape = Tape()
    loss = build_loss(tape)
    grads = tape.backward(loss)
    by_param = {id(p): g for p, g in tape.param_grads(grads)}

    def forward() -> float:
        t = Tape()
        return build_loss(t).item()

    worst = 0.0
    for p in params:
        analytic = by_param.get(id(p), np.zeros_like(p.value))
        numeric = numeric_gradient(forward, p, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# primitive suite


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, weights))


def run_primitive_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive op, each against finite differences."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, build, params):
        results[name] = check_gradients(build, params)

    def param(*shape, scale=1.0, shift=0.0):
        return Parameter(rng.normal(0.0, 1.0, shape) * scale + shift)

    def w(*shape):
        return rng.normal(0.0, 1.0, shape)

    # arithmetic with broadcasting
    for name, op in (("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)):
        a, b = param(3, 4), param(4)
        ww = w(3, 4)
        check(name, lambda t, a=a, b=b, ww=ww, op=op:
              _weighted_sum(op(Context(t).p(a), Context(t).p(b)), ww), [a, b])
    a, b = param(3, 4), Parameter(rng.uniform(0.5, 1.5, (3, 4))
                                  * rng.choice([-1.0, 1.0], (3, 4)))
    ww = w(3, 4)
    check("div", lambda t: _weighted_sum(
        ad.div(Context(t).p(a), Context(t).p(b)), ww), [a, b])

    a, b = param(2, 3, 4), param(4, 5)
    ww = w(2, 3, 5)
    check("matmul", lambda t: _weighted_sum(
        ad.matmul(Context(t).p(a), Context(t).p(b)), ww), [a, b])

    # structural
    a = param(2, 3, 4)
    ww = w(3, 2, 4)
    check("transpose", lambda t: _weighted_sum(
        ad.transpose(Context(t).p(a), (1, 0, 2)), ww), [a])
    a = param(2, 6)
    ww = w(3, 4)
    check("reshape", lambda t: _weighted_sum(
        ad.reshape(Context(t).p(a), (3, 4)), ww), [a])
    a = param(3, 4)
    ww = w(3, 4)
    check("flip", lambda t: _weighted_sum(
        ad.flip(Context(t).p(a), axis=-1), ww), [a])
    a, b = param(2, 3), param(2, 2)
    ww = w(2, 5)
    check("concat", lambda t: _weighted_sum(
        ad.concat([Context(t).p(a), Context(t).p(b)], axis=-1), ww), [a, b])
    a = param(3, 6)
    ww = w(3, 3)
    check("slice", lambda t: _weighted_sum(
        ad.slice_axis(Context(t).p(a), 1, 1, 4), ww), [a])

    # reductions
    a = param(3, 4)
    ww = w(3)
    check("sum", lambda t: _weighted_sum(
        ad.sum(Context(t).p(a), axis=-1), ww), [a])
    a = param(3, 4)
    check("mean", lambda t: ad.mean(Context(t).p(a)), [a])

    # nonlinearities
    for name, op in (("sigmoid", ad.sigmoid), ("tanh", ad.tanh),
                     ("softplus", ad.softplus), ("silu", ad.silu)):
        a = param(3, 4)
        ww = w(3, 4)
        check(name, lambda t, a=a, ww=ww, op=op:
              _weighted_sum(op(Context(t).p(a)), ww), [a])
    a = param(3, 4, scale=0.5)
    ww = w(3, 4)
    check("exp", lambda t: _weighted_sum(ad.exp(Context(t).p(a)), ww), [a])
    a = param(3, 5)
    ww = w(3, 5)
    check("softmax", lambda t: _weighted_sum(
        ad.softmax(Context(t).p(a), axis=-1), ww), [a])

    # normalization / convolution / regularization
    x, gain, bias = param(2, 3, 6), param(6, shift=1.0, scale=0.2), param(6)
    ww = w(2, 3, 6)
    check("layer_norm", lambda t: _weighted_sum(
        ad.layer_norm(Context(t).p(x), Context(t).p(gain), Context(t).p(bias)),
        ww), [x, gain, bias])
    x, k = param(2, 5, 3), param(4, 3)
    ww = w(2, 5, 3)
    check("depthwise_conv1d", lambda t: _weighted_sum(
        ad.depthwise_conv1d(Context(t).p(x), Context(t).p(k)), ww), [x, k])
    x = param(4, 5)
    ww = w(4, 5)
    check("dropout", lambda t: _weighted_sum(
        ad.dropout(Context(t).p(x), 0.3, np.random.default_rng(99), True),
        ww), [x])

    # gather / select
    table = param(5, 3)
    idx = np.array([0, 2, 2, 4])
    ww = w(4, 3)
    check("embedding_lookup", lambda t: _weighted_sum(
        ad.embedding_lookup(Context(t).p(table), idx), ww), [table])
    x = param(3, 4)
    mask = rng.random((3, 4)) < 0.5
    mask.flat[0] = True
    ww = w(int(mask.sum()))
    check("masked_select", lambda t: _weighted_sum(
        ad.masked_select(Context(t).p(x), mask), ww), [x])

    # the scan primitive, both evaluation orders (shared sequential adjoint)
    from .ssm import linear_recurrence
    a = Parameter(rng.uniform(-0.9, 0.9, (5, 2, 3)))
    u = param(5, 2, 3)
    ww = w(5, 2, 3)
    for name, parallel in (("linear_recurrence_seq", False),
                           ("linear_recurrence_par", True)):
        check(name, lambda t, parallel=parallel: _weighted_sum(
            linear_recurrence(Context(t).p(a), Context(t).p(u),
                              parallel=parallel, chunk=2), ww), [a, u])
    return results


# ---------------------------------------------------------------------------
# block and model suite


def _tiny_model_config():
    from .model import ModelConfig
    return ModelConfig(nodes=2, seq_len=8, channels=4, nem_layers=1, heads=2,
                       virtual_nodes=2, expansion=2, conv_width=3, state_dim=4,
                       dropout=0.0, diffusion_steps=5, mode="bi")


def run_block_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per learned block on tiny shapes."""
    from .graph import MpnnLayer, VirtualNodeAttention, build_adjacency
    from .mamba import MambaBlock
    from .model import ConditioningBundle, NoisePredictor
    from .diffusion import masked_loss, quadratic_schedule, forward_noise

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    adj = build_adjacency(rng.random((2, 2)), length_scale=1.0, threshold=0.0)

    def check(name, module, build):
        results[name] = check_gradients(build, module.parameters())

    x = rng.normal(0.0, 1.0, (1, 2, 6, 4))
    for name, bidir in (("mamba_uni", False), ("mamba_bi", True)):
        block = MambaBlock(4, np.random.default_rng(seed + 1), expansion=2,
                           conv_width=3, state_dim=4, dropout=0.0,
                           bidirectional=bidir)
        ww = rng.normal(0.0, 1.0, x.shape)
        check(name, block, lambda t, block=block, ww=ww: _weighted_sum(
            block.forward(Context(t), ad.constant(x)), ww))

    mpnn = MpnnLayer(4, np.random.default_rng(seed + 2))
    ww = rng.normal(0.0, 1.0, x.shape)
    check("mpnn", mpnn, lambda t: _weighted_sum(
        mpnn.forward(Context(t), ad.constant(x), adj.adjacency_norm), ww))

    attn = VirtualNodeAttention(4, n_nodes=2, virtual_nodes=2, heads=2,
                                rng=np.random.default_rng(seed + 3))
    ww = rng.normal(0.0, 1.0, x.shape)
    check("virtual_attention", attn, lambda t: _weighted_sum(
        attn.forward(Context(t), ad.constant(x)), ww))

    cfg = _tiny_model_config()
    model = NoisePredictor(cfg, seed=seed + 4)
    series = rng.normal(0.0, 1.0, (1, cfg.nodes, cfg.seq_len))
    ww = rng.normal(0.0, 1.0, series.shape + (cfg.channels,))
    check("prior_encoder", model.prior_encoder, lambda t: _weighted_sum(
        model.prior_encoder.forward(Context(t), series, adj.adjacency_norm), ww))

    block = model.blocks[0]
    h_in = rng.normal(0.0, 1.0, (1, cfg.nodes, cfg.seq_len, cfg.channels))
    prior = rng.normal(0.0, 1.0, h_in.shape)
    t_emb = rng.normal(0.0, 1.0, (1, model.emb_dim))
    ww1 = rng.normal(0.0, 1.0, h_in.shape)
    ww2 = rng.normal(0.0, 1.0, h_in.shape)

    def build_nem(t):
        ctx = Context(t)
        h_next, h_out = block.forward(ctx, ad.constant(h_in), ad.constant(prior),
                                      adj.adjacency_norm, ad.constant(t_emb))
        return ad.add(_weighted_sum(h_next, ww1), _weighted_sum(h_out, ww2))

    check("noise_block", block, build_nem)

    # end-to-end masked loss on the tiny model
    schedule = quadratic_schedule(cfg.diffusion_steps, 1e-4, 0.2)
    observed = rng.random(series.shape) < 0.8
    observed[..., 0] = True
    target = observed & (rng.random(series.shape) < 0.4)
    target.flat[np.flatnonzero(observed.flat)[0]] = True
    cond = observed & ~target
    eps = rng.standard_normal(series.shape)
    t_steps = rng.integers(1, cfg.diffusion_steps + 1, size=1)
    from .pipeline import linear_interpolate
    x_interp = linear_interpolate(series, cond)
    x_noisy = forward_noise(np.where(observed, series, 0.0), t_steps, eps,
                            schedule) * (1.0 - cond)
    bundle = ConditioningBundle(x_interp=x_interp,
                                adjacency_norm=adj.adjacency_norm, t=t_steps)

    def build_model_loss(t):
        ctx = Context(t)
        eps_hat = model.predict_noise(ctx, x_noisy, bundle,
                                      cond.astype(np.float64))
        return masked_loss(eps, eps_hat, target)

    results["model_masked_loss"] = check_gradients(build_model_loss,
                                                   model.parameters())
    return results


def run_full_suite(seed: int = 0) -> dict[str, float]:
    results = run_primitive_suite(seed)
    results.update(run_block_suite(seed))
    return results
