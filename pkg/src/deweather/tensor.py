"""Minimal reverse-mode autodiff engine.

Float64 numpy buffers, dynamic graph built from closures. Exactly the
operations the de-weathering losses and models need, nothing more. A
finite-difference checker (`grad_check`) is the oracle for everything
downstream.

Each op records a closure mapping the upstream gradient to per-parent
gradients; `backward` replays the creation-ordered graph in reverse, so
every node is visited once, after all of its consumers. Only leaf tensors
(no parents, requires_grad=True) keep a persistent `.grad` buffer.
"""

from __future__ import annotations

import collections
from contextlib import contextmanager

import numpy as np

EPS_DIV = 1e-12
EPS_COSINE = 1e-8

# counts of guarded numerical events (div-by-~0, log-of-~0, NaNs in sort)
WARNING_COUNTS: collections.Counter = collections.Counter()

_GRAD_ENABLED = [True]


def warning_counts() -> dict:
    return dict(WARNING_COUNTS)


def reset_warning_counts() -> None:
    WARNING_COUNTS.clear()


@contextmanager
def no_grad():
    """Disable graph recording; forwards run on raw buffers only."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; record the closure only when a graph is wanted."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    # broadcasting only across trivially-1 dims of equal-rank shapes, or scalars
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if len(a.shape) != len(b.shape):
        raise DimensionError(f"rank mismatch {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"incompatible shapes {a.shape} vs {b.shape}")


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g).sum().reshape(shape)
    axes = tuple(i for i, (ds, dg) in enumerate(zip(shape, g.shape)) if ds == 1 and dg != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise / arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data + b.data

    def backward(g):
        return (_reduce_to_shape(g, a.data.shape), _reduce_to_shape(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data - b.data

    def backward(g):
        return (_reduce_to_shape(g, a.data.shape), _reduce_to_shape(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data * b.data

    def backward(g):
        return (
            _reduce_to_shape(g * b.data, a.data.shape),
            _reduce_to_shape(g * a.data, b.data.shape),
        )

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    denom = b.data
    small = np.abs(denom) < EPS_DIV
    if np.any(small):
        WARNING_COUNTS["div_guard"] += int(np.count_nonzero(small))
        denom = np.where(small, np.where(denom < 0, -EPS_DIV, EPS_DIV), denom)
    out_data = a.data / denom

    def backward(g):
        return (
            _reduce_to_shape(g / denom, a.data.shape),
            _reduce_to_shape(-g * a.data / (denom * denom), b.data.shape),
        )

    return _make(out_data, (a, b), backward)


def absval(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.data
    small = x < EPS_DIV
    if np.any(small):
        WARNING_COUNTS["log_guard"] += int(np.count_nonzero(small))
        x = np.maximum(x, EPS_DIV)
    out_data = np.log(x)

    def backward(g):
        return (g / x,)

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / np.maximum(out_data, EPS_DIV),)

    return _make(out_data, (a,), backward)


def powc(a: Tensor, p: float) -> Tensor:
    """a**p for constant p; base clamped below at 0 with subgradient 0 there."""
    base = a.data
    pos = base > 0.0
    safe = np.maximum(base, EPS_DIV)
    out_data = np.where(pos, np.power(safe, p), 0.0)

    def backward(g):
        return (g * np.where(pos, p * np.power(safe, p - 1.0), 0.0),)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out_data, (a,), backward)


def clamp01(a: Tensor) -> Tensor:
    mask = (a.data > 0) & (a.data < 1)
    out_data = np.clip(a.data, 0.0, 1.0)

    def backward(g):
        return (g * mask,)

    return _make(out_data, (a,), backward)


# -- reductions / reshaping ----------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out_data = np.array(a.data.sum())

    def backward(g):
        return (np.full(a.data.shape, float(g)),)

    return _make(out_data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.array(a.data.mean())

    def backward(g):
        return (np.full(a.data.shape, float(g) / n),)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(out_data, (a,), backward)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate CHW tensors along the channel axis."""
    if not tensors:
        raise ContractError("concat_channels of empty list")
    base = tensors[0].data.shape[1:]
    for t in tensors[1:]:
        if t.data.shape[1:] != base:
            raise DimensionError("concat_channels: spatial dims differ")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(out_data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(out_data, (a, b), backward)


# -- spatial ops -----------------------------------------------------------------


def avgpool2(a: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, on a CHW tensor with even H and W."""
    c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out_data = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _make(out_data, (a,), backward)


def upsample_nearest2(a: Tensor) -> Tensor:
    out_data = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def backward(g):
        c, h, w = a.data.shape
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _make(out_data, (a,), backward)


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*k*k, Ho*Wo) patch matrix."""
    c = x.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, k, k)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int) -> np.ndarray:
    """Scatter-add adjoint of _im2col."""
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    x = np.zeros((c, hp, wp))
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            x[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return x


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of a CHW input with an OIkk kernel."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects CHW input and OIkk weight")
    c_out, c_in, k, k2 = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be odd square, got {k}x{k2}")
    ci, h, w = x.data.shape
    if ci != c_in:
        raise DimensionError(f"conv2d channels: input has {ci}, weight expects {c_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError("conv2d: padded input smaller than kernel")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[1:]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _im2col(xp, k, stride)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out_data = (wmat @ cols).reshape(c_out, ho, wo)

    def backward(g):
        gmat = g.reshape(c_out, ho * wo)
        dw = (gmat @ cols.T).reshape(weight.data.shape)
        dcols = wmat.T @ gmat
        dxp = _col2im(dcols, c_in, hp, wp, k, stride)
        dx = dxp[:, padding:-padding, padding:-padding] if padding else dxp
        return (dx, dw)

    return _make(out_data, (x, weight), backward)


def gaussian_blur(a: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Depthwise valid-mode Gaussian filtering (separable), differentiable in `a`."""
    c, h, w = a.data.shape
    if h < window or w < window:
        raise DimensionError(f"gaussian_blur needs H,W >= {window}, got {h}x{w}")
    k1 = _gaussian_kernel1d(window, sigma)
    out_data = _corr1d(_corr1d(a.data, k1, axis=1), k1, axis=2)

    def backward(g):
        # adjoint of valid correlation with a symmetric kernel: full convolution
        pad = window - 1
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        return (_corr1d(_corr1d(gp, k1, axis=1), k1, axis=2),)

    return _make(out_data, (a,), backward)


def _gaussian_kernel1d(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    xs = np.arange(window) - half
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _corr1d(x: np.ndarray, k1: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, len(k1), axis=axis)
    return win @ k1


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of flattened tensors: <a,b> / (|a||b| + eps)."""
    if a.data.size != b.data.size:
        raise DimensionError("cosine_similarity: size mismatch")
    af = reshape(a, (a.data.size,))
    bf = reshape(b, (b.data.size,))
    dot = tsum(mul(af, bf))
    na = sqrt(tsum(mul(af, af)))
    nb = sqrt(tsum(mul(bf, bf)))
    return div(dot, add(mul(na, nb), Tensor(EPS_COSINE)))


def sort_lastdim(a: Tensor) -> tuple[Tensor, np.ndarray]:
    """Ascending stable sort along the last dim; grads scatter through the perm."""
    if a.data.shape[-1] < 1:
        raise DimensionError("sort_lastdim: empty last dim")
    nan_count = int(np.count_nonzero(np.isnan(a.data)))
    if nan_count:
        WARNING_COUNTS["sort_nan"] += nan_count
    perm = np.argsort(a.data, axis=-1, kind="stable")
    out_data = np.take_along_axis(a.data, perm, axis=-1)

    def backward(g):
        scattered = np.zeros_like(a.data)
        np.put_along_axis(scattered, perm, g, axis=-1)
        return (scattered,)

    return _make(out_data, (a,), backward), perm


# -- backward / oracle ------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse replay from a scalar root; accumulates grads into leaf buffers."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._prev, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flowing.get(id(p))
            if acc is None:
                flowing[id(p)] = np.array(pg, dtype=np.float64, copy=True)
            else:
                acc += pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f, x: Tensor, h: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor deterministically. Large inputs
    can be spot-checked on a seeded random coordinate subset via `max_coords`.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ContractError(f"grad_check step h={h} outside [1e-6, 1e-4]")
    x = Tensor(x.data.copy(), requires_grad=True)
    y1 = f(x).item()
    y2 = f(Tensor(x.data.copy(), requires_grad=True)).item()
    if y1 != y2:
        raise ContractError("grad_check: f is nondeterministic, oracle unusable")
    x.zero_grad()
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)

    aflat = analytic.reshape(-1)
    max_rel = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x.data)).item()
            flat[i] = orig - h
            fm = f(Tensor(x.data)).item()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(cd), 1e-8)
            max_rel = max(max_rel, abs(aflat[i] - cd) / denom)
    return max_rel
