"""Reverse-mode automatic differentiation over 1D channel-by-length arrays.

Define-by-run tape: every operation returns a fresh node holding its forward
value and a closure that routes the upstream gradient to its parents.  The
graph is rebuilt on every forward pass and discarded afterwards, which is
the simplest correct design at the scale of the networks used here.  All
values are float64; gradients accumulate additively across fan-out and
across repeated backward calls (parameters are only cleared explicitly).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Graph node: forward value plus gradient plumbing."""

    __slots__ = ("values", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, values, parents=(), backward_fn=None, requires_grad=False):
        self.values = values
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)


class Parameter(Tensor):
    """Named leaf with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, values: np.ndarray):
        values = np.array(values, dtype=np.float64)
        super().__init__(values, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(values)

    def zero_grad(self):
        self.grad.fill(0.0)


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


def _node(values, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, parents, backward_fn, requires_grad=True)
    return Tensor(values)


def _accum(node: Tensor, contribution: np.ndarray):
    # Intermediate grads may alias upstream arrays, so fan-in allocates a new
    # array instead of mutating in place; parameter buffers are owned.
    if not node.requires_grad:
        return
    if isinstance(node, Parameter):
        node.grad += contribution
    elif node.grad is None:
        node.grad = contribution
    else:
        node.grad = node.grad + contribution


def backward(root: Tensor):
    """Accumulate d(root)/d(parameter) into every reachable parameter.

    Intermediate node gradients are reset on each call; parameter buffers are
    not, so repeated calls sum their gradients (gradient accumulation).
    """
    if root.values.shape != ():
        raise ValueError(f"backward requires a scalar node, got shape {root.values.shape}")
    order: list[Tensor] = []
    visited = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    root.grad = np.array(1.0)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# network operations
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Cross-correlation with kernel size 3 and zero padding of `dilation`
    on each side, preserving the length dimension."""
    xv = x.values
    wv = weight.values
    c_out, c_in, k = wv.shape
    if k != 3:
        raise ValueError(f"kernel size must be 3, got {k}")
    if xv.ndim != 2 or xv.shape[0] != c_in:
        raise ValueError(f"input shape {xv.shape} incompatible with weight {wv.shape}")
    d = dilation
    length = xv.shape[1]
    # tap-major im2col: rows [t*c_in, (t+1)*c_in) hold x shifted by (t-1)*d
    col = np.zeros((3 * c_in, length))
    col[:c_in, d:] = xv[:, : length - d]
    col[c_in : 2 * c_in] = xv
    col[2 * c_in :, : length - d] = xv[:, d:]
    w2 = wv.transpose(2, 1, 0).reshape(3 * c_in, c_out)
    out = w2.T @ col
    out += bias.values[:, None]

    def back(g):
        dw2 = col @ g.T  # (3*c_in, c_out)
        _accum(weight, dw2.reshape(3, c_in, c_out).transpose(2, 1, 0))
        _accum(bias, g.sum(axis=1))
        if x.requires_grad:
            dcol = (w2 @ g).reshape(3, c_in, length)
            dx = dcol[1].copy()
            dx[:, : length - d] += dcol[0][:, d:]
            dx[:, d:] += dcol[2][:, : length - d]
            _accum(x, dx)

    return _node(out, (x, weight, bias), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)

    def back(g):
        _accum(x, g * (x.values > 0.0))

    return _node(out, (x,), back)


def conv_block(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    dilation: int,
    dropout_p: float,
    rng: np.random.Generator | None,
    train: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Fused conv1d + instance_norm + relu + dropout.

    Mathematically identical to composing the four primitive ops; fusing
    them into one node keeps the per-artery training pass cheap, which is
    what bounds cross-validation runtime.
    """
    xv = x.values
    wv = weight.values
    c_out, c_in, k = wv.shape
    if k != 3:
        raise ValueError(f"kernel size must be 3, got {k}")
    if xv.ndim != 2 or xv.shape[0] != c_in:
        raise ValueError(f"input shape {xv.shape} incompatible with weight {wv.shape}")
    d = dilation
    length = xv.shape[1]
    if length < 2:
        raise ValueError("conv_block requires length >= 2")
    col = np.zeros((3 * c_in, length))
    col[:c_in, d:] = xv[:, : length - d]
    col[c_in : 2 * c_in] = xv
    col[2 * c_in :, : length - d] = xv[:, d:]
    w2 = wv.transpose(2, 1, 0).reshape(3 * c_in, c_out)
    z = w2.T @ col
    z += bias.values[:, None]

    mu = z.sum(axis=1, keepdims=True)
    mu /= length
    zc = z - mu
    var = np.einsum("cl,cl->c", zc, zc)[:, None] / length
    inv = 1.0 / np.sqrt(var + eps)
    y = zc * inv

    # relu and dropout collapse into one multiplicative mask
    eff = (y > 0.0).astype(np.float64)
    if train and dropout_p > 0.0:
        eff *= (rng.random(y.shape) >= dropout_p) / (1.0 - dropout_p)
    out = y * eff

    def back(g):
        dy = g * eff
        gm = dy.sum(axis=1, keepdims=True) / length
        gym = np.einsum("cl,cl->c", dy, y)[:, None] / length
        dz = inv * (dy - gm - y * gym)
        dw2 = col @ dz.T
        _accum(weight, dw2.reshape(3, c_in, c_out).transpose(2, 1, 0))
        _accum(bias, dz.sum(axis=1))
        if x.requires_grad:
            dcol = (w2 @ dz).reshape(3, c_in, length)
            dx = dcol[1].copy()
            dx[:, : length - d] += dcol[0][:, d:]
            dx[:, d:] += dcol[2][:, : length - d]
            _accum(x, dx)

    return _node(out, (x, weight, bias), back)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over the length dimension (no learned affine)."""
    xv = x.values
    length = xv.shape[1]
    if length < 2:
        raise ValueError("instance_norm requires length >= 2")
    mu = xv.sum(axis=1, keepdims=True)
    mu /= length
    xc = xv - mu
    var = np.einsum("cl,cl->c", xc, xc)[:, None] / length
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.sum(axis=1, keepdims=True) / length
        gym = np.einsum("cl,cl->c", g, y)[:, None] / length
        _accum(x, inv * (g - gm - y * gym))

    return _node(y, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode."""
    if not train or p == 0.0:
        return x
    keep = 1.0 - p
    scale = (rng.random(x.values.shape) >= p) / keep
    out = x.values * scale

    def back(g):
        _accum(x, g * scale)

    return _node(out, (x,), back)


def concat_channels(parts: list[Tensor]) -> Tensor:
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.values.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(part, g[lo:hi])

    return _node(out, tuple(parts), back)


def avg_pool1d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling along length; a trailing partial window
    is averaged over its actual length."""
    xv = x.values
    c, length = xv.shape
    n_full = length // kernel
    rem = length % kernel
    n_out = n_full + (1 if rem else 0)
    out = np.empty((c, n_out))
    if n_full:
        out[:, :n_full] = xv[:, : n_full * kernel].reshape(c, n_full, kernel).mean(axis=2)
    if rem:
        out[:, n_full] = xv[:, n_full * kernel :].mean(axis=1)

    def back(g):
        dx = np.empty_like(xv)
        if n_full:
            dx[:, : n_full * kernel] = np.repeat(g[:, :n_full] / kernel, kernel, axis=1)
        if rem:
            dx[:, n_full * kernel :] = g[:, n_full : n_full + 1] / rem
        _accum(x, dx)

    return _node(out, (x,), back)


def cumsum(x: Tensor) -> Tensor:
    out = np.cumsum(x.values, axis=-1)

    def back(g):
        _accum(x, np.flip(np.cumsum(np.flip(g, -1), -1), -1))

    return _node(out, (x,), back)


def rcumsum(x: Tensor) -> Tensor:
    """Suffix sums along length: out[i] = sum of x[i:]."""
    out = np.flip(np.cumsum(np.flip(x.values, -1), -1), -1)

    def back(g):
        _accum(x, np.cumsum(g, axis=-1))

    return _node(out, (x,), back)


# ---------------------------------------------------------------------------
# elementwise / reduction operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.values + b.values, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.values - b.values, (a, b), back)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    def back(g):
        _accum(x, g * c)

    return _node(x.values * c, (x,), back)


def mul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (masking, weighting)."""

    def back(g):
        _accum(x, g * m)

    return _node(x.values * m, (x,), back)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.values)

    def back(g):
        _accum(x, g * sign)

    return _node(np.abs(x.values), (x,), back)


def min_zero(x: Tensor) -> Tensor:
    """Elementwise min(x, 0)."""
    mask = x.values < 0.0

    def back(g):
        _accum(x, g * mask)

    return _node(np.where(mask, x.values, 0.0), (x,), back)


def sum_(x: Tensor) -> Tensor:
    def back(g):
        _accum(x, np.broadcast_to(g, x.values.shape))

    return _node(np.asarray(x.values.sum()), (x,), back)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar dot product with a constant weight array."""

    def back(g):
        _accum(x, g * w)

    return _node(np.asarray((x.values * w).sum()), (x,), back)


def soft_histogram_op(x: Tensor, centers: np.ndarray, sigma: float) -> Tensor:
    """Sum of Gaussian kernel responses per bin center: a differentiable
    surrogate for hard binning of the values in x."""
    flat = x.values.reshape(-1)
    diff = flat[None, :] - centers[:, None]
    kern = np.exp(diff * diff / (-2.0 * sigma * sigma))
    out = kern.sum(axis=1)

    def back(g):
        dx = (g[:, None] * kern * (-diff)).sum(axis=0) / (sigma * sigma)
        _accum(x, dx.reshape(x.values.shape))

    return _node(out, (x,), back)
