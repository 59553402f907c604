"""Dense float64 arrays with a tape-based reverse-mode gradient engine.

Every learnable computation in this package runs through the primitives
defined here. Forward values are plain numpy arrays wrapped in ``Tensor``;
when a ``Tape`` is active each primitive appends a backward rule, and
``Tape.backward`` replays the rules once, in reverse record order,
accumulating gradients additively into shared inputs.

Everything is double precision: the finite-difference tolerances used to
verify the engine require it, and desk-scale workloads do not need speed
beyond what vectorized float64 numpy gives.
"""
from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

# When True, every primitive asserts its output is finite. Cheap enough for
# tests and debugging; off by default in production runs.
FINITE_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes do not conform; message names the op and the shapes."""


class NonFiniteError(FloatingPointError):
    """A primitive produced a non-finite value while FINITE_CHECKS was on."""


def _check_finite(op: str, arr: np.ndarray) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value in output")


class Parameter:
    """A named learnable array, float64, updated in place by optimizers."""

    __slots__ = ("name", "value")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name or '<anon>'}, shape={self.value.shape})"


class Tensor:
    """An n-d array node. ``node`` is the tape id, None for untaped values."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def constant(x) -> Tensor:
    """Wrap a plain array or scalar as an untaped Tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


# Backward rules receive the output gradient and return one contribution per
# input, aligned with the recorded input ids (None = no gradient).
BackwardFn = Callable[[np.ndarray], tuple]


class Tape:
    """Execution-ordered record of primitive ops.

    Inputs are always recorded before the ops that consume them, so the
    backward pass is a single reverse sweep that visits each op exactly once.
    A tape is single-writer: one tape per training step per worker. ``reset``
    clears the record so the object can be reused across steps.
    """

    def __init__(self):
        self._ops: list[tuple[tuple[int | None, ...], int, BackwardFn]] = []
        self._next_id = 0
        self._leaves: dict[int, tuple[Parameter, Tensor]] = {}

    def new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def record(self, input_ids: tuple[int | None, ...], output_id: int,
               backward: BackwardFn) -> None:
        self._ops.append((input_ids, output_id, backward))

    def watch(self, param: Parameter) -> Tensor:
        """Return the leaf Tensor for ``param``, creating it on first use.

        Repeated watches of the same Parameter within one tape share a single
        leaf, so gradient contributions from every use accumulate together.
        """
        entry = self._leaves.get(id(param))
        if entry is None:
            leaf = Tensor(param.value, self, self.new_id())
            self._leaves[id(param)] = (param, leaf)
            return leaf
        return entry[1]

    def reset(self) -> None:
        self._ops.clear()
        self._leaves.clear()
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss. Returns node id -> gradient."""
        if loss.tape is not self or loss.node is None:
            raise ValueError("backward: loss was not computed on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for input_ids, out_id, fn in reversed(self._ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue  # output never reached the loss
            for node, contrib in zip(input_ids, fn(g)):
                if node is None or contrib is None:
                    continue
                acc = grads.get(node)
                grads[node] = contrib if acc is None else acc + contrib
        return grads

    def param_grads(self, grads: dict[int, np.ndarray]) -> list[tuple[Parameter, np.ndarray]]:
        """Pair each watched Parameter with its gradient (zeros if unreachable)."""
        out = []
        for param, leaf in self._leaves.values():
            g = grads.get(leaf.node)
            if g is None:
                g = np.zeros_like(param.value)
            out.append((param, np.asarray(g)))
        return out


class Context:
    """Per-call runtime: active tape (None in inference), RNG, train flag."""

    __slots__ = ("tape", "rng", "train")

    def __init__(self, tape: Tape | None = None,
                 rng: np.random.Generator | None = None, train: bool = False):
        self.tape = tape
        self.rng = rng
        self.train = train

    def p(self, param: Parameter) -> Tensor:
        """Wrap a parameter for use in the current call."""
        if self.tape is None:
            return Tensor(param.value)
        return self.tape.watch(param)


def inference_context() -> Context:
    return Context(tape=None, rng=None, train=False)


# ---------------------------------------------------------------------------
# primitive machinery


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward: BackwardFn) -> Tensor:
    """Finish a primitive: wrap the forward value and record the rule."""
    _check_finite(op, data)
    tape = None
    for t in inputs:
        if t.tape is not None:
            tape = t.tape
            break
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape, tape.new_id())
    tape.record(tuple(t.node for t in inputs), out.node, backward)
    return out


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor],
             backward: BackwardFn) -> Tensor:
    """Register a custom primitive (used by the scan's hand-written adjoint)."""
    return _make(op, data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    ash, bsh = a.shape, b.shape
    return _make("add", data, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    ash, bsh = a.shape, b.shape
    return _make("sub", data, (a, b),
                 lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad_, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return _make("mul", data, (a, b),
                 lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad_, bsh)))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad_, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return _make("div", data, (a, b),
                 lambda g: (_unbroadcast(g / bd, ash),
                            _unbroadcast(-g * ad_ / (bd * bd), bsh)))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad_, bd, ash, bsh = a.data, b.data, a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ash)
        gb = _unbroadcast(ad_.swapaxes(-1, -2) @ g, bsh)
        return ga, gb

    return _make("matmul", data, (a, b), backward)


# ---------------------------------------------------------------------------
# structural ops


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = constant(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", data, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    orig = a.shape
    return _make("reshape", data, (a,), lambda g: (g.reshape(orig),))


def flip(a, axis: int) -> Tensor:
    a = constant(a)
    data = np.flip(a.data, axis=axis)
    return _make("flip", data, (a,), lambda g: (np.flip(g, axis=axis),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}") from None
    sizes = [t.data.shape[axis] for t in ts]
    split_at = np.cumsum(sizes)[:-1]
    return _make("concat", data, ts, lambda g: tuple(np.split(g, split_at, axis=axis)))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = constant(a)
    ax = axis % a.ndim
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))
    data = a.data[idx]
    orig = a.shape

    def backward(g):
        full = np.zeros(orig)
        full[idx] = g
        return (full,)

    return _make("slice", data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = constant(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    orig = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, orig),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, orig),)

    return _make("sum", data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    orig = a.shape
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, orig),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, orig),)

    return _make("mean", data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = constant(a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def softplus(a) -> Tensor:
    a = constant(a)
    y = np.logaddexp(0.0, a.data)
    ad_ = a.data
    return _make("softplus", y, (a,), lambda g: (g * _sigmoid(ad_),))


def silu(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.data)
    y = a.data * s
    ad_ = a.data
    return _make("silu", y, (a,), lambda g: (g * s * (1.0 + ad_ * (1.0 - s)),))


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _make("softmax", y, (a,), backward)


# ---------------------------------------------------------------------------
# normalization, convolution, regularization


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learned scale and shift."""
    x, gain, bias = constant(x), constant(gain), constant(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    y = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        return dx, dgain, dbias

    return _make("layer_norm", y, (x, gain, bias), backward)


def depthwise_conv1d(x, kernel) -> Tensor:
    """Causal per-channel convolution along axis -2.

    ``x`` is [..., L, C]; ``kernel`` is [W, C]. The sequence start has no
    history, so the left edge is zero-padded with W-1 steps; kernel index
    W-1 multiplies the current step.
    """
    x, kernel = constant(x), constant(kernel)
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"depthwise_conv1d: x {x.shape} and kernel {kernel.shape} do not conform")
    w = kernel.shape[0]
    length = x.shape[-2]
    pad = np.zeros(x.shape[:-2] + (w - 1,) + x.shape[-1:])
    xp = np.concatenate([pad, x.data], axis=-2)
    data = np.zeros_like(x.data)
    for j in range(w):
        data += kernel.data[j] * xp[..., j:j + length, :]
    xsh = x.shape

    def backward(g):
        dxp = np.zeros(xsh[:-2] + (length + w - 1,) + xsh[-1:])
        dk = np.zeros((w, xsh[-1]))
        lead = tuple(range(g.ndim - 1))
        for j in range(w):
            dxp[..., j:j + length, :] += kernel.data[j] * g
            dk[j] = (xp[..., j:j + length, :] * g).sum(axis=lead)
        return dxp[..., w - 1:, :], dk

    return _make("depthwise_conv1d", data, (x, kernel), backward)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability {p} not in [0, 1)")
    x = constant(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode requires an RNG stream")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    data = x.data * keep
    return _make("dropout", data, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gather / select


def embedding_lookup(table, indices) -> Tensor:
    """Row gather: out[i] = table[indices[i]]; backward scatter-adds."""
    table = constant(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    data = table.data[idx]
    tsh = table.shape

    def backward(g):
        dt = np.zeros(tsh)
        np.add.at(dt, idx, g)
        return (dt,)

    return _make("embedding_lookup", data, (table,), backward)


def masked_select(x, mask) -> Tensor:
    """Flatten the entries of ``x`` where ``mask`` is true (1-D output)."""
    x = constant(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError(f"masked_select: mask {m.shape} does not match data {x.shape}")
    data = x.data[m]
    xsh = x.shape

    def backward(g):
        dx = np.zeros(xsh)
        dx[m] = g
        return (dx,)

    return _make("masked_select", data, (x,), backward)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b). Convenience composite, not a primitive."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Lightweight container of Parameters and sub-Modules.

    Attribute assignment order is preserved, which makes parameter
    iteration (and therefore optimizer state and checkpoints) deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} "
                           f"unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} "
                                 f"!= parameter shape {p.value.shape}")
            p.value = arr.copy()
