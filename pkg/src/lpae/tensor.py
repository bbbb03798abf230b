"""A small reverse-mode autodiff engine over numpy arrays.

Only the layer vocabulary the auto-encoders need is provided: strided
"same" convolution and its transpose, ReLU, batch normalisation,
nearest-neighbour upsampling, channel concatenation, grid max-pooling and two
losses.  Every op records its inputs and a closure computing their gradients;
:meth:`Tensor.backward` walks that graph in reverse topological order.

The dtype of the data decides the precision.  Training runs on float32 arrays;
gradient checks feed float64 arrays through the same code.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, NonFiniteError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict:
    """Run reverse mode from ``loss``; returns ``{id(leaf): grad}`` for convenience."""
    loss.backward()
    return {id(t): t.grad for t in _topological_order(loss) if t._backward is None and t.requires_grad}


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _check_finite(arr, opname):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {opname}")


def _result(data, parents, backward_fn, opname):
    _check_finite(data, opname)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = opname
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (batch, features) and ``w`` (features, out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = (g @ w.data.T, x.data.T @ g)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "linear")


# convolution ---------------------------------------------------------------

def _geometry(h, w, k, stride):
    pad = k // 2
    return pad, -(-h // stride), -(-w // stride)


def _columns(x, k, stride, pad, ho, wo):
    """im2col laid out as (C*k*k, N*Ho*Wo)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = x.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _conv_forward(x, w, stride):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad, ho, wo = _geometry(h, wd, k, stride)
    cols = _columns(x, k, stride, pad, ho, wo)
    out = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))


def _conv_input_grad(g, w, stride, h, wd):
    """Adjoint of :func:`_conv_forward` with respect to its input of size ``h x wd``."""
    n, o, ho, wo = g.shape
    _, c, k, _ = w.shape
    pad = k // 2
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dcols = (w.reshape(o, -1).T @ g2).reshape(c, k, k, n, ho, wo)
    hp = max(h + 2 * pad, stride * (ho - 1) + k)
    wp = max(wd + 2 * pad, stride * (wo - 1) + k)
    acc = np.zeros((c, n, hp, wp), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            acc[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += dcols[:, a, b]
    return np.ascontiguousarray(acc[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))


def _conv_weight_grad(x, g, k, stride):
    n, c, h, wd = x.shape
    o, ho, wo = g.shape[1:]
    pad = k // 2
    cols = _columns(x, k, stride, pad, ho, wo)
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g2 @ cols.T).reshape(o, c, k, k)


def _check_conv(x, w, b, stride, in_axis):
    if x.ndim != 4:
        raise ShapeError(f"expected (batch, channels, h, w), got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"expected square kernel weights, got {w.shape}")
    if w.shape[2] % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {w.shape[2]}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {w.shape[in_axis]}")
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(f"bias shape {b.shape} does not match {out_ch} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding ``k // 2``; output size ``ceil(input / stride)``.

    ``w`` has shape ``(out_ch, in_ch, k, k)``.
    """
    _check_conv(x, w, b, stride, in_axis=1)
    out = _conv_forward(x.data, w.data, stride)
    if b is not None:
        out += b.data[None, :, None, None]
    h, wd = x.shape[2:]
    k = w.shape[2]

    def bw(g):
        grads = (_conv_input_grad(g, w.data, stride, h, wd), _conv_weight_grad(x.data, g, k, stride))
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv2d")


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv2d` with the same weights.

    ``w`` has shape ``(in_ch, out_ch, k, k)``, i.e. the weights of the
    convolution mapping the output space back to the input space.  The output
    is ``stride`` times larger than the input.
    """
    _check_conv(x, w, b, stride, in_axis=0)
    n, _, h, wd = x.shape
    k = w.shape[2]
    oh, ow = h * stride, wd * stride
    out = _conv_input_grad(x.data, w.data, stride, oh, ow)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        grads = (_conv_forward(g, w.data, stride), _conv_weight_grad(g, x.data, k, stride))
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "deconv2d")


# normalisation -------------------------------------------------------------

@dataclass
class BNState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BNState, training: bool = True) -> Tensor:
    """Normalise each channel over (batch, h, w), then scale by gamma and shift by beta.

    In training mode the batch statistics are used and the running averages are
    updated as ``momentum * running + (1 - momentum) * batch``; in eval mode the
    running averages are used and the op is a fixed affine map.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm over {state.gamma.shape[0]} channels got input {x.shape}")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    bshape = (1, -1, 1, 1)
    dt = x.dtype
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise DegenerateInputError("batch_norm in training mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        unbiased = var * count / max(count - 1, 1)
        state.running_var = (m * state.running_var + (1 - m) * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat = centered * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std).reshape(bshape)
        if training:
            dx = scale * (g - dbeta.reshape(bshape) / count - xhat * (dgamma.reshape(bshape) / count))
        else:
            dx = scale * g
        return dx.astype(dt), dgamma, dbeta

    return _result(out.astype(dt), (x, gamma, beta), bw, "batch_norm")


# reshaping -----------------------------------------------------------------

def upsample_nn(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes."""
    if factor < 2:
        raise ValueError(f"upsampling factor must be at least 2, got {factor}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), bw, "upsample_nn")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), bw, "concat_channels")


GRID_FOR_VALUES = {4: (2, 2), 9: (3, 3), 16: (4, 4), 24: (4, 6)}


def grid_shape(values_per_map: int) -> tuple:
    """Grid rows and columns giving ``values_per_map`` pooled values."""
    try:
        return GRID_FOR_VALUES[values_per_map]
    except KeyError:
        raise ValueError(
            f"unsupported values per map {values_per_map}; choose from {sorted(GRID_FOR_VALUES)}") from None


def _edges(n, cells):
    return [int(np.floor(i * n / cells + 0.5)) for i in range(cells + 1)]


def grid_max_pool(x: Tensor, grid) -> Tensor:
    """Max over each cell of a ``rows x cols`` grid; returns (batch, channels * rows * cols).

    ``grid`` is either ``(rows, cols)`` or a values-per-map count (4, 9, 16, 24).
    Cell boundaries sit at ``round(i * H / rows)``; within a map, values are
    ordered row-major over cells.
    """
    rows, cols = grid_shape(grid) if isinstance(grid, (int, np.integer)) else grid
    n, c, h, w = x.shape
    if rows > h or cols > w:
        raise DegenerateInputError(f"a {rows}x{cols} grid does not fit a {h}x{w} map")
    re, ce = _edges(h, rows), _edges(w, cols)
    out = np.empty((n, c, rows, cols), dtype=x.dtype)
    argmax = np.empty((n, c, rows, cols), dtype=np.int64)
    for i in range(rows):
        for j in range(cols):
            cell = x.data[:, :, re[i]:re[i + 1], ce[j]:ce[j + 1]].reshape(n, c, -1)
            idx = cell.argmax(axis=2)
            argmax[:, :, i, j] = idx
            out[:, :, i, j] = np.take_along_axis(cell, idx[..., None], axis=2)[..., 0]

    def bw(g):
        g = g.reshape(n, c, rows, cols)
        dx = np.zeros_like(x.data)
        nn_, cc = np.indices((n, c))
        for i in range(rows):
            for j in range(cols):
                ch = ce[j + 1] - ce[j]
                r = re[i] + argmax[:, :, i, j] // ch
                q = ce[j] + argmax[:, :, i, j] % ch
                dx[nn_, cc, r, q] += g[:, :, i, j]
        return (dx,)

    return _result(out.reshape(n, c * rows * cols), (x,), bw, "grid_max_pool")


# losses --------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.astype(pred.dtype)
    count = diff.size

    def bw(g):
        return (g * (2.0 / count) * diff,)

    return _result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), bw, "mse_loss")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


# gradient checking ----------------------------------------------------------

def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Largest disagreement between backprop and central differences.

    ``f`` maps the list ``inputs`` (tensors with ``requires_grad``) to a scalar
    tensor.  Each coordinate's error is ``|a - n| / max(1, |a| + |n|)``.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    f(inputs).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(inputs).data)
                flat[i] = orig - h
                fm = float(f(inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(af[i] - num) / max(1.0, abs(af[i]) + abs(num))
                worst = max(worst, err)
    return worst

