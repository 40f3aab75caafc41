"""Dense-tensor reverse-mode autodiff on numpy arrays.

Deliberately small: only the ops the speech models need, each with an explicit
backward. Shapes are strict -- the one piece of implicit broadcasting allowed
is the trailing-axis gain/bias of the affine helpers (``add_bias``,
``layer_norm``). GELU uses the exact erf form so gradient checks carry no
approximation error. All ops are deterministic: identical inputs give
bit-identical outputs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes/dtypes violate an op's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional backward edge into the graph.

    Values are immutable once created (the optimizer mutates leaf ``data`` in
    place between steps, never mid-graph). ``grad`` mirrors ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        Tape(self).backward(seed)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # Same-shape arithmetic sugar; everything else goes through module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Reverse-topological schedule of the graph reachable from a root.

    Backward replay visits each recorded node exactly once, children before
    parents.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order  # leaves first, root last

    def backward(self, seed=None) -> None:
        root = self.nodes[-1]
        if seed is None:
            if root.data.shape != ():
                raise DimensionError("backward() without a seed needs a scalar root")
            seed = np.ones((), dtype=root.dtype)
        root.grad = np.asarray(seed, dtype=root.dtype)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Elementwise natural log; the caller guards the domain (e.g. adds eps)."""

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * a.dtype.type(c), (a,), backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g)

    return _make(a.data + a.dtype.type(c), (a,), backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors (fixed left-to-right reduction order)."""
    if not tensors:
        raise DimensionError("add_n: empty operand list")
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x), not the tanh approximation."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (phi_cdf + x * pdf))

    return _make((x * phi_cdf).astype(a.dtype, copy=False), (a,), backward)


def stop_grad(a: Tensor) -> Tensor:
    """Detach from the graph: same values, no backward edge."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# affine / matmul / conv
# ---------------------------------------------------------------------------

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., D] + b[D] (the one allowed trailing-axis broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")

    def backward(g):
        _accum(x, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched product with identical leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading axes differ {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """1-D convolution, x[C_in, T] * w[C_out, C_in/groups, K] -> [C_out, T'].

    T' = floor((T - K) / stride) + 1; no implicit padding (pad explicitly with
    ``pad_last`` when needed).
    """
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(f"conv1d: expected x[C,T], w[O,C/g,K]; got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, c_g, k = w.shape
    if stride < 1 or groups < 1:
        raise DimensionError("conv1d: stride and groups must be >= 1")
    if c_in % groups or c_out % groups:
        raise DimensionError(f"conv1d: channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_g != c_in // groups:
        raise DimensionError(f"conv1d: kernel channel dim {c_g} != C_in/groups = {c_in // groups}")
    if t < k:
        raise DimensionError(f"conv1d: input length {t} shorter than kernel {k} (empty output)")
    if x.dtype != w.dtype:
        raise DimensionError(f"conv1d: dtype mismatch {x.dtype} vs {w.dtype}")

    t_out = (t - k) // stride + 1
    o_g = c_out // groups
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride, :]
    win = win.reshape(groups, c_g, t_out, k)
    wg = w.data.reshape(groups, o_g, c_g, k)
    out = np.einsum("gctk,gock->got", win, wg, optimize=True).reshape(c_out, t_out)
    if b is not None:
        if b.shape != (c_out,):
            raise DimensionError(f"conv1d: bias {b.shape} != ({c_out},)")
        out = out + b.data[:, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        go = g.reshape(groups, o_g, t_out)
        if w.requires_grad:
            gw = np.einsum("got,gctk->gock", go, win, optimize=True)
            _accum(w, gw.reshape(c_out, c_g, k))
        if x.requires_grad:
            gwin = np.einsum("got,gock->gctk", go, wg, optimize=True).reshape(c_in, t_out, k)
            gx = np.zeros_like(x.data)
            pos = stride * np.arange(t_out)
            for j in range(k):
                gx[:, pos + j] += gwin[:, :, j]
            _accum(x, gx)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=1))

    return _make(out.astype(x.dtype, copy=False), parents, backward)


def pad_last(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    if before < 0 or after < 0:
        raise DimensionError("pad_last: negative padding")
    widths = [(0, 0)] * (x.ndim - 1) + [(before, after)]
    t = x.shape[-1]

    def backward(g):
        sl = [slice(None)] * (x.ndim - 1) + [slice(before, before + t)]
        _accum(x, g[tuple(sl)])

    return _make(np.pad(x.data, widths), (x,), backward)


# ---------------------------------------------------------------------------
# normalization / softmax
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance over the last axis, then gain * xhat + bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},); got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gxh = g * gain.data
            m1 = gxh.mean(axis=-1, keepdims=True)
            m2 = (gxh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gxh - m1 - xhat * m2))

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows land on the probability simplex."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * s)

    return _make(s.astype(x.dtype, copy=False), (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ls = z - lse

    def backward(g):
        _accum(x, g - np.exp(ls) * g.sum(axis=-1, keepdims=True))

    return _make(ls.astype(x.dtype, copy=False), (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm over the last axis (eps guards zero rows)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + x.dtype.type(eps))
    y = x.data / n

    def backward(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        _accum(x, g / n - x.data * (dot / (n * n * n)))

    return _make(y.astype(x.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, np.full_like(x.data, g))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accum(x, np.full_like(x.data, g / n))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def mean_axis0(x: Tensor) -> Tensor:
    n = x.shape[0]

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(x.data.mean(axis=0), (x,), backward)


# ---------------------------------------------------------------------------
# shape / indexing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty operand list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[i, ...] = x[idx[i], ...]; idx may be any integer array shape."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for first axis {x.shape[0]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(x.data[idx], (x,), backward)


def masked_fill_rows(x: Tensor, idx, v: Tensor) -> Tensor:
    """Replace rows ``idx`` of x[T, D] with the vector v[D]."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise DimensionError(f"masked_fill_rows: x {x.shape} / v {v.shape} mismatch")
    out = x.data.copy()
    out[idx] = v.data

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            gx[idx] = 0.0
            _accum(x, gx)
        if v.requires_grad:
            _accum(v, g[idx].sum(axis=0))

    return _make(out, (x, v), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _named_params(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Tensor):
        return [("theta", params)]
    if isinstance(params, dict):
        return list(params.items())
    return [(f"theta[{i}]", p) for i, p in enumerate(params)]


def grad_check(f, params, h: float = 1e-5, samples_per_param: int | None = None,
               rng: np.random.Generator | None = None, denom_floor: float = 1e-3) -> float:
    """Max relative error between reverse-mode grads and central differences.

    ``f(params)`` must return a scalar Tensor and be deterministic (freeze any
    sampling before calling). Coordinates with both gradients below
    ``denom_floor`` are compared at that scale, which turns the bound into an
    absolute tolerance for near-zero gradients. With ``samples_per_param`` set,
    only that many randomly chosen coordinates per tensor are probed.
    """
    named = _named_params(params)
    loss = f(params)
    if loss.data.shape != ():
        raise DimensionError("grad_check: f must return a scalar")
    for _, p in named:
        p.grad = None
    loss.backward()

    worst = 0.0
    for name, p in named:
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            if rng is None:
                raise ValueError("grad_check: sampling coordinates requires an rng")
            coords = rng.choice(n, size=samples_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = f(params).item()
            flat[c] = orig - h
            with no_grad():
                f_minus = f(params).item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[c])
            if not np.isfinite(numeric) or not np.isfinite(a):
                idx = [int(v) for v in np.unravel_index(c, p.shape)]
                raise NumericError(f"grad_check: non-finite gradient at {name}{idx}")
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, rel)
    return worst
