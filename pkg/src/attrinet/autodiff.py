"""Reverse-mode autodiff on dense float64 tensors.

A ``Graph`` is a tape: every primitive applied while a graph is active
appends one node (tag, input ids, output tensor, vjp closure). ``backward``
replays the tape in reverse, so each node is visited exactly once and
repeated backward passes over an untouched graph give identical gradients.

Primitives cover exactly what the model architecture needs: matmul,
add (with row-vector bias broadcast), elementwise multiply, scalar scale,
concat/slice on a chosen axis, reshape, transpose, row gather, sigmoid,
tanh, relu, log, negate, mean, binary cross-entropy, plus fused LSTM,
batch-norm and dropout ops used by the layer module. There is no general
N-d broadcasting.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeMismatchError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    """Raised when an input checked by ``op_forward`` contains NaN/inf."""


BCE_EPS = 1e-7  # probability clamp before logarithms


class Tensor:
    """Dense float64 array plus gradient bookkeeping.

    ``values`` is C-contiguous; ``grad`` (same shape) is populated by
    ``Graph.backward`` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("tag", "inputs", "output", "vjp")

    def __init__(self, tag, inputs, output, vjp):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Computation tape. Nodes are appended in construction order, which is
    therefore a topological order; backward walks it once in reverse.

    Use as a context manager::

        with Graph() as g:
            loss = model_loss(...)
        g.backward(loss)

    Graphs are single-owner: do not mutate one from several threads.
    """

    _active = []

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        Graph._active.append(self)
        return self

    def __exit__(self, *exc):
        Graph._active.pop()
        return False

    @staticmethod
    def current():
        return Graph._active[-1] if Graph._active else None

    def backward(self, loss: Tensor):
        """Populate ``.grad`` of every requires_grad tensor in the tape with
        d(loss)/d(tensor). Tensors with no path to the loss get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise ValueError("backward: loss tensor was not produced by this graph")
        grads: dict[int, np.ndarray] = {}
        for node in self.nodes:
            for t in node.inputs + (node.output,):
                if t.requires_grad:
                    grads.setdefault(id(t), np.zeros_like(t.data))
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out_grad = grads.get(id(node.output))
            if out_grad is None:
                continue
            for t, g in zip(node.inputs, node.vjp(out_grad)):
                if g is not None and t.requires_grad:
                    grads[id(t)] += g
        for node in self.nodes:
            for t in node.inputs + (node.output,):
                if t.requires_grad:
                    t.grad = grads[id(t)]


def _record(tag, inputs, out_data, vjp):
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    g = Graph.current()
    if g is not None:
        g.nodes.append(Node(tag, tuple(inputs), out, vjp))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-d bias broadcast over the rows of a
    2-d left operand (the only broadcast the architecture needs)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if not bias and a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)
    out = a.data + b.data

    def vjp(g):
        return g, g.sum(axis=0) if bias else g

    return _record("add", (a, b), out, vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("multiply", a.shape, b.shape)
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _record("multiply", (a, b), out, vjp)


def scale(a: Tensor, k: float) -> Tensor:
    a = _as_tensor(a)
    kf = float(k)
    return _record("scale", (a,), a.data * kf, lambda g: (g * kf,))


def negate(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("negate", (a,), -a.data, lambda g: (-g,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis if axis >= 0 else tensors[0].data.ndim + axis
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ShapeMismatchError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors))
        )

    return _record("concat", tuple(tensors), out, vjp)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.data.ndim + axis
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeMismatchError("slice", a.shape, (start, stop))
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record("slice", (a,), out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows (first axis) by integer index array; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", (a,), out, vjp)


# open-interval bounds: saturated activations are nudged off 0/1 (and -1/1)
# so downstream logs and the range invariants hold for any finite input
_ONE_BELOW = np.nextafter(1.0, 0.0)
_ZERO_ABOVE = np.nextafter(0.0, 1.0)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, _ZERO_ABOVE, _ONE_BELOW)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(np.tanh(a.data), -_ONE_BELOW, _ONE_BELOW)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (a.data > 0),))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return _record("log", (a,), out, lambda g: (g / a.data,))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _record("mean", (a,), out, lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy: (1/N) * sum(-(y*log p + (1-y)*log(1-p))).

    Probabilities are clamped into [BCE_EPS, 1-BCE_EPS] before the logs;
    the gradient is taken at the clamped value, so it stays bounded on
    saturated outputs.
    """
    p = _as_tensor(p)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if p.data.shape != yd.shape:
        raise ShapeMismatchError("bce_loss", p.shape, yd.shape)
    if p.data.size == 0:
        raise ValueError("bce_loss: empty batch")
    if not np.all((yd == 0.0) | (yd == 1.0)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    n = pc.size
    out = np.asarray(-(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)).mean())

    def vjp(g):
        return (g * (pc - yd) / (pc * (1.0 - pc) * n),)

    return _record("bce_loss", (p,), out, vjp)


# Tags accepted by ``op_forward``. Unary ops take one tensor, binary two;
# concat takes a variable number.
_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "negate": negate,
    "mean": mean,
}
_BINARY = {"matmul": matmul, "add": add, "multiply": multiply}


def op_forward(tag: str, *inputs, **kwargs) -> Tensor:
    """Validating dispatch over the primitive set.

    Unlike the direct functions (used on the training fast path), this
    checks every input for non-finite values before applying the op.
    """
    tensors = [_as_tensor(t) for t in inputs]
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{tag}: non-finite input")
    if tag in _UNARY:
        (a,) = tensors
        return _UNARY[tag](a)
    if tag in _BINARY:
        a, b = tensors
        return _BINARY[tag](a, b)
    if tag == "concat":
        return concat(tensors, **kwargs)
    if tag == "slice":
        (a,) = tensors
        return slice_axis(a, **kwargs)
    raise ValueError(f"op_forward: unknown primitive {tag!r}")


# ---------------------------------------------------------------------------
# fused layer ops


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """LSTM over a (B, T, F) batch with zero initial state; returns (B, T, H)
    hidden states aligned to input positions. ``reverse`` runs right-to-left.
    Forward and backward passes dispatch to the compiled kernels.
    """
    x, wx, wh, b = _as_tensor(x), _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    if x.data.ndim != 3 or x.shape[2] != wx.shape[0]:
        raise ShapeMismatchError("lstm", x.shape, wx.shape)
    if x.shape[1] < 1:
        raise ValueError("lstm: empty sequence")
    H = wh.shape[0]
    if wx.shape[1] != 4 * H or wh.shape[1] != 4 * H or b.shape != (4 * H,):
        raise ShapeMismatchError("lstm", wx.shape, wh.shape, b.shape)
    xt = np.ascontiguousarray(np.swapaxes(x.data, 0, 1))  # (T, B, F)
    if reverse:
        xt = np.ascontiguousarray(xt[::-1])
    h, i, f, g, o, c, tc = kernels.lstm_forward(xt, wx.data, wh.data, b.data)
    out = np.swapaxes(h[::-1] if reverse else h, 0, 1).copy()

    def vjp(grad):
        dh = np.ascontiguousarray(np.swapaxes(grad, 0, 1))
        if reverse:
            dh = np.ascontiguousarray(dh[::-1])
        dx, dwx, dwh, db = kernels.lstm_backward(
            xt, wx.data, wh.data, h, i, f, g, o, c, tc, dh
        )
        if reverse:
            dx = dx[::-1]
        return np.swapaxes(dx, 0, 1), dwx, dwh, db

    return _record("lstm", (x, wx, wh, b), out, vjp)


def batch_norm(
    x: Tensor,
    scale_t: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    train: bool,
    update_running: bool = True,
) -> Tensor:
    """Per-feature normalization of a (B, F) batch.

    Train mode normalizes with batch statistics (and optionally folds them
    into the running buffers in-place); inference mode uses the running
    statistics only, making the op a fixed affine map.
    """
    x, scale_t, shift = _as_tensor(x), _as_tensor(scale_t), _as_tensor(shift)
    if x.data.ndim != 2 or scale_t.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatchError("batch_norm", x.shape, scale_t.shape)
    if train:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = scale_t.data * xhat + shift.data

    if train:
        n = x.shape[0]

        def vjp(g):
            dxhat = g * scale_t.data
            dx = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:

        def vjp(g):
            return g * scale_t.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("batch_norm", (x, scale_t, shift), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: train mode zeroes units with probability ``rate``
    and rescales survivors by 1/(1-rate); inference mode is the identity."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return _record("dropout", (x,), x.data.copy(), lambda g: (g,))
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    return _record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# optimizer


class OptimizerState:
    """Adaptive-moment optimizer state: per-parameter first/second moment
    accumulators plus a shared step counter."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or eps <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
            raise ValueError("invalid optimizer hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


def adam_step(params, state: OptimizerState) -> None:
    """One bias-corrected adaptive update, in place. Parameters without a
    gradient (frozen or unused) are left untouched; their moments are not
    created. Raises on non-finite gradients.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_scale = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for p in params:
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeMismatchError("adam_step", p.data.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {p.name or 'parameter'}")
        key = id(p)
        m = state.m.setdefault(key, np.zeros_like(p.data))
        v = state.v.setdefault(key, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= step_scale * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2**t))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, params, h: float = 1e-5, max_coords: int | None = None, seed: int = 0):
    """Max relative error between analytic and central-difference gradients.

    ``f()`` must rebuild its graph from ``params`` (a list of Tensors) on
    every call and return a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|). ``max_coords`` caps the
    probed coordinates per parameter (sampled with ``seed``) so large
    models stay checkable.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    with Graph() as g:
        loss = f()
    g.backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            lp = float(f().data)
            flat[k] = orig - h
            lm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError("finite_diff_check: non-finite loss at probe point")
            numeric = (lp - lm) / (2.0 * h)
            err = abs(gflat[k] - numeric) / max(1.0, abs(gflat[k]))
            worst = max(worst, err)
    return worst
