"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors hold float64 numpy arrays. Operations executed while a GradTape is
active record vector-Jacobian pullbacks; replaying the tape in reverse
accumulates gradients into every tensor marked ``requires_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "conv1d_same",
    "apply_activation",
    "relu",
    "sigmoid",
    "tanh_",
    "elu",
    "softmax_lastdim",
    "layer_norm",
    "lstm_forward",
    "embedding_lookup",
    "dropout",
    "concat",
    "stack",
    "reshape",
    "slice_axis",
    "reduce_sum",
    "reduce_mean",
    "backward",
    "grad_check",
]


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --- tape ------------------------------------------------------------------

Pullback = Callable[[np.ndarray], np.ndarray]


class GradTape:
    """Ordered record of executed operations.

    Records are appended in execution order, which is already a topological
    order of the graph, so a single reversed pass propagates gradients.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, Pullback]]]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, pulls: list[tuple[Tensor, Pullback]]):
        self._records.append((out, pulls))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor
        with requires_grad set. Repeated calls accumulate additively."""
        if loss.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, pulls in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, pull in pulls:
                gi = pull(g)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        for key, t in holders.items():
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + grads[key]


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data: np.ndarray, pulls: list[tuple[Tensor, Pullback]]) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and pulls:
        tape.record(out, pulls)
    return out


def backward(loss: Tensor):
    """Run the active tape backward from a scalar loss."""
    tape = _active_tape()
    if tape is None:
        raise NumericError("backward called with no active GradTape")
    tape.backward(loss)


# --- broadcasting helpers --------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, [(a, lambda g: g * c)])


# --- matmul ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 2-D."""
    A, B = a.data, b.data
    if A.ndim < 1 or B.ndim != 2:
        raise ShapeError(f"matmul expects a.ndim>=1 and b.ndim==2, got {A.shape} x {B.shape}")
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {A.shape} x {B.shape}")
    data = A @ B

    def pull_a(g):
        return g @ B.T

    def pull_b(g):
        return A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1] if g.ndim > 1 else g.shape[0])

    return _make(data, [(a, pull_a), (b, pull_b)])


# --- convolution -----------------------------------------------------------

def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """1-D convolution along the second-to-last axis with 'same' zero padding.

    x: [..., l, c_in], kernel: [k, c_in, c_out], bias: [c_out].
    """
    X, K, B = x.data, kernel.data, bias.data
    if K.ndim != 3:
        raise ShapeError(f"kernel must be [k, c_in, c_out], got {K.shape}")
    k, c_in, c_out = K.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same requires odd kernel size, got k={k}")
    if X.shape[-1] != c_in:
        raise ShapeError(f"input channels {X.shape[-1]} != kernel c_in {c_in}")
    if B.shape != (c_out,):
        raise ShapeError(f"bias shape {B.shape} != ({c_out},)")
    pad = (k - 1) // 2
    length = X.shape[-2]
    widths = [(0, 0)] * (X.ndim - 2) + [(pad, pad), (0, 0)]
    Xp = np.pad(X, widths)
    out = np.broadcast_to(B, X.shape[:-1] + (c_out,)).copy()
    for j in range(k):
        out += Xp[..., j:j + length, :] @ K[j]

    def pull_x(g):
        gxp = np.zeros_like(Xp)
        for j in range(k):
            gxp[..., j:j + length, :] += g @ K[j].T
        return gxp[..., pad:pad + length, :]

    def pull_k(g):
        gk = np.empty_like(K)
        gf = g.reshape(-1, c_out)
        for j in range(k):
            xs = Xp[..., j:j + length, :].reshape(-1, c_in)
            gk[j] = xs.T @ gf
        return gk

    def pull_b(g):
        return g.reshape(-1, c_out).sum(axis=0)

    return _make(out, [(x, pull_x), (kernel, pull_k), (bias, pull_b)])


# --- activations -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)])


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, [(x, lambda g: g * y * (1.0 - y))])


def tanh_(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, [(x, lambda g: g * (1.0 - y * y))])


def elu(x: Tensor) -> Tensor:
    # alpha = 1
    neg_mask = x.data < 0
    y = np.where(neg_mask, np.expm1(x.data), x.data)
    dydx = np.where(neg_mask, y + 1.0, 1.0)
    return _make(y, [(x, lambda g: g * dydx)])


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "elu": elu, "tanh": tanh_}


def apply_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# --- softmax / layer norm --------------------------------------------------

def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; masked positions get zero weight.

    ``mask`` is a boolean array of x's shape, True = keep.
    """
    X = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != X.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {X.shape}")
        if not mask.any(axis=-1).all():
            raise DataError("softmax_lastdim: a slice has every entry masked")
        X = np.where(mask, X, -np.inf)
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def pull(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make(y, [(x, pull)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-last-axis standardization followed by an affine map."""
    X = x.data
    d = X.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def pull_x(g):
        gy = g * gain.data
        return inv * (gy - gy.mean(axis=-1, keepdims=True)
                      - y * (gy * y).mean(axis=-1, keepdims=True))

    def pull_gain(g):
        return (g * y).reshape(-1, d).sum(axis=0)

    def pull_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(out, [(x, pull_x), (gain, pull_gain), (bias, pull_bias)])


# --- structural ops --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.data.shape
    return _make(x.data.reshape(shape), [(x, lambda g: g.reshape(orig))])


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return pull

    return _make(data, [(t, make_pull(i)) for i, t in enumerate(tensors)])


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def make_pull(i):
        def pull(g):
            return np.take(g, i, axis=axis)

        return pull

    return _make(data, [(t, make_pull(i)) for i, t in enumerate(tensors)])


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def pull(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return gx

    return _make(x.data[idx], [(x, pull)])


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape).copy()

    return _make(data, [(x, pull)])


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- lookup / regularization ----------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index array ``ids``."""
    ids = np.asarray(ids)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise DataError(f"embedding id {bad} out of range [0, {n})")
    data = table.data[ids]

    def pull(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return gt

    return _make(data, [(table, pull)])


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, [(x, lambda g: g * keep)])


# --- LSTM ------------------------------------------------------------------

def lstm_forward(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
                 h0: Optional[Tensor] = None, c0: Optional[Tensor] = None) -> Tensor:
    """Unrolled LSTM over the second-to-last axis of ``x``.

    x: [..., l, d_in]; wx: [d_in, 4h]; wh: [h, 4h]; b: [4h].
    Gate layout along the last axis of the preactivation: input, forget,
    candidate, output. Returns all hidden states, shape [..., l, h].
    """
    if wx.data.shape[1] % 4 != 0:
        raise ShapeError(f"wx second dim must be 4*h, got {wx.data.shape}")
    h_dim = wx.data.shape[1] // 4
    if wh.data.shape != (h_dim, 4 * h_dim):
        raise ShapeError(f"wh shape {wh.data.shape} != ({h_dim}, {4 * h_dim})")
    length = x.data.shape[-2]
    lead = x.data.shape[:-2]
    h = h0 if h0 is not None else constant(np.zeros(lead + (h_dim,)))
    c = c0 if c0 is not None else constant(np.zeros(lead + (h_dim,)))
    outs = []
    for t in range(length):
        xt = reshape(slice_axis(x, -2, t, t + 1), lead + (x.data.shape[-1],))
        z = add(add(matmul(xt, wx), matmul(h, wh)), b)
        i_g = sigmoid(slice_axis(z, -1, 0, h_dim))
        f_g = sigmoid(slice_axis(z, -1, h_dim, 2 * h_dim))
        g_g = tanh_(slice_axis(z, -1, 2 * h_dim, 3 * h_dim))
        o_g = sigmoid(slice_axis(z, -1, 3 * h_dim, 4 * h_dim))
        c = add(mul(f_g, c), mul(i_g, g_g))
        h = mul(o_g, tanh_(c))
        outs.append(h)
    return stack(outs, axis=len(lead))


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_tensor: dict[str, float] = field(default_factory=dict)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments, reads ``params`` and returns a scalar Tensor.
    It must be deterministic; value drift between two evaluations is an
    error. ``max_coords`` caps the number of coordinates checked per tensor
    (seeded random subset) to bound runtime.
    """
    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise NumericError(f"grad_check: f is non-deterministic ({v1} != {v2})")

    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
        tape.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, True)
    for idx_p, p in enumerate(params):
        flat = p.data.ravel()
        g_ad = (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f().data)
            flat[c] = orig - eps
            fm = float(f().data)
            flat[c] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(g_ad[c]), abs(g_fd), 1e-8)
            rel = abs(g_ad[c] - g_fd) / denom
            worst = max(worst, rel)
        name = p.name or f"param{idx_p}"
        report.per_tensor[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    report.passed = report.max_rel_error <= tol
    return report
