"""A small reverse-mode autodiff engine sized for conv encoder-decoders.

Each differentiable op builds its output with a closure mapping the upstream
gradient to one gradient per parent.  ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into leaf ``grad`` buffers.

Shapes follow NCHW.  There is no general broadcasting; ops check their
operands and raise :class:`~slseg.errors.ShapeError`.
"""
import contextlib
import math
import threading

import numpy as np

from . import kernels
from .errors import GradientCheckError, GraphError, ShapeError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, MC sampling)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = ()
        self._backward = None
        self._released = False
        self.op = None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self._grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None, retain_graph=False):
        """Backpropagate from this tensor.

        The graph is released afterwards unless ``retain_graph`` is set; a
        second call on a released graph raises :class:`GraphError`.
        """
        if self._released:
            raise GraphError("backward through a released graph; rerun forward or pass retain_graph=True")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        order = self._topo()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._released = True


def _make(data, parents, backward, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: operand shapes differ", {"shape": (b.shape, a.shape)})


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        s = b
        return _make(a.data * s, (a,), lambda g: (g * s,), "scale")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(x):
    shape = x.shape
    return _make(x.data.sum(), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x):
    n = x.size
    shape = x.shape
    return _make(x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


# ------------------------------------------------------------------- spatial


def _check4(x, name):
    if x.data.ndim != 4:
        raise ShapeError(f"{name} expects NCHW input", {"ndim": (x.data.ndim, 4)})


def conv2d(x, weight, bias, stride=1, pad=0):
    """Zero-padded cross-correlation.

    x: [N, C, H, W], weight: [K, C, kh, kw], bias: [K].
    Output spatial size is ``(H + 2*pad - kh) // stride + 1``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError("conv2d weight must be [K, C, kh, kw]", {"weight.ndim": (weight.data.ndim, 4)})
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError("conv2d channel mismatch", {"weight.C": (Cw, C)})
    if bias.shape != (K,):
        raise ShapeError("conv2d bias mismatch", {"bias": (bias.shape, (K,))})
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1", {"stride": (stride, ">=1")})
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError("conv2d kernel larger than padded input",
                         {"kh": (kh, f"<={H + 2 * pad}"), "kw": (kw, f"<={W + 2 * pad}")})
    xd, wd = x.data, weight.data
    out = kernels.conv2d_forward(xd, wd, bias.data, stride, pad)

    def backward(g):
        dx, dw, db = kernels.conv2d_backward(g, xd, wd, stride, pad)
        return dx, dw, db

    return _make(out, (x, weight, bias), backward, "conv2d")


def avg_pool2d(x, factor=2):
    x = as_tensor(x)
    _check4(x, "avg_pool2d")
    N, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError("avg_pool2d needs spatial dims divisible by factor",
                         {"H": (H, f"multiple of {factor}"), "W": (W, f"multiple of {factor}")})
    out = x.data.reshape(N, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * inv,)

    return _make(out, (x,), backward, "avg_pool2d")


def nearest_upsample(x, factor=2):
    """Repeat each pixel into a ``factor`` x ``factor`` block; factor >= 2."""
    x = as_tensor(x)
    _check4(x, "nearest_upsample")
    if int(factor) != factor or factor < 2:
        raise ValueError(f"upsample factor must be an integer >= 2, got {factor}")
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample")


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check4(a, "concat")
    _check4(b, "concat")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat needs matching N, H, W", {"shape": (b.shape, a.shape)})
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def group_norm(x, gamma, beta, eps=1e-5):
    """Normalise each sample over all of (C, H, W), then per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "group_norm")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm affine mismatch", {"gamma": (gamma.shape, (C,)), "beta": (beta.shape, (C,))})
    xd = x.data
    mu = xd.mean(axis=(1, 2, 3), keepdims=True)
    var = xd.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        m1 = dxhat.mean(axis=(1, 2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
        return inv * (dxhat - m1 - xhat * m2), dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), backward, "group_norm")


# ------------------------------------------------------------ classification


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x):
    """Softmax over the channel axis of an NCHW tensor."""
    x = as_tensor(x)
    _check4(x, "softmax_channels")
    s = _softmax_np(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def _check_labels(labels, shape, ignore_index):
    N, C, H, W = shape
    labels = np.asarray(labels)
    if labels.shape != (N, H, W):
        raise ShapeError("labels must be [N, H, W]", {"labels": (labels.shape, (N, H, W))})
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {C}) and not ignore_index={ignore_index}")
    return labels, valid


def pixel_nll(logits, labels, ignore_index=255):
    """Per-pixel ``-log p(true class)`` as an [N, H, W] array (ignored pixels 0)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels, valid = _check_labels(labels, z.shape, ignore_index)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    return np.where(valid, nll, 0.0)


def weighted_cross_entropy(logits, labels, weights=None, ignore_index=255):
    """Mean over non-ignored pixels of ``weights * -log softmax[label]``.

    ``weights`` is an [N, H, W] constant; no gradient flows into it.
    """
    logits = as_tensor(logits)
    _check4(logits, "cross_entropy")
    z = logits.data
    labels, valid = _check_labels(labels, z.shape, ignore_index)
    if weights is None:
        w = np.ones(labels.shape, dtype=z.dtype)
    else:
        w = np.asarray(weights, dtype=z.dtype)
        if w.shape != labels.shape:
            raise ShapeError("pixel weights must match labels", {"weights": (w.shape, labels.shape)})
    w = np.where(valid, w, 0)
    n = int(valid.sum())
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    safe = np.where(valid, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = (w * nll).sum() / n if n else np.zeros((), dtype=z.dtype)

    def backward(g):
        if not n:
            return (np.zeros_like(z),)
        p = np.exp(logp)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * (w * (g / n))[:, None],)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


def cross_entropy(logits, labels, ignore_index=255):
    return weighted_cross_entropy(logits, labels, None, ignore_index)


# ----------------------------------------------------------------- checking


def grad_check(op, inputs, tolerance=None, eps=1e-5, seed=0):
    """Compare analytic gradients of ``op`` against central differences.

    ``op`` maps the input Tensors to one Tensor; a fixed random projection
    reduces it to a scalar.  Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.  With
    ``tolerance`` set, exceeding it raises :class:`GradientCheckError`.
    """
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()
    rng = np.random.default_rng(seed)
    out = op(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar():
        with no_grad():
            return float((op(*inputs).data * proj).sum())

    out.backward(proj)
    worst = 0.0
    for ti, t in enumerate(inputs):
        analytic = t.grad
        bad = ~np.isfinite(analytic)
        if bad.any():
            raise GradientCheckError("non-finite analytic gradient", (ti,) + tuple(np.argwhere(bad)[0]))
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = scalar()
            flat[k] = orig - eps
            fm = scalar()
            flat[k] = orig
            num = (fp - fm) / (2 * eps)
            if not math.isfinite(num):
                raise GradientCheckError("non-finite numeric gradient", (ti,) + np.unravel_index(k, t.shape))
            a = analytic.reshape(-1)[k]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            if err > worst:
                worst = err
                where = (ti,) + tuple(int(i) for i in np.unravel_index(k, t.shape))
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"relative error {worst:.3e} exceeds {tolerance:.1e}", where)
    return worst
