"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 by default, float64 for
gradient-check work) and record a dynamic graph as ops execute.  Calling
``backward()`` on a scalar walks the tape in reverse topological order,
accumulates gradients into every leaf marked ``requires_grad``, and frees
the graph.  The op set is exactly what a factorized video transformer
needs: batched matmul, masked softmax, layer norm, (grouped) convolution
and its transpose, and a handful of pointwise/shape ops.

Gradients of every op are validated against central finite differences;
see ``finite_diff_check``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen stages)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-d array that can participate in reverse-mode autodiff.

    Parameters
    ----------
    data : array-like
        Values; converted to ``dtype`` (float32 unless specified).
    requires_grad : bool
        Mark as a trainable leaf; ``backward()`` accumulates into ``.grad``.
    name : str, optional
        Used in optimizer/error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._grad_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    @property
    def _in_graph(self) -> bool:
        return self.requires_grad or self._grad_fn is not None

    # -- autodiff driver -----------------------------------------------------

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor.

        Requires a scalar unless an explicit output gradient is given.
        Gradients accumulate into ``.grad`` of requires-grad leaves; the
        recorded graph is released as the sweep consumes it.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {tuple(self.shape)}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._in_graph and id(p) not in seen:
                    stack.append((p, False))

        flows = {id(self): grad}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is not None:
                for parent, pg in zip(node._parents, node._grad_fn(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in flows:
                        flows[key] = flows[key] + pg
                    else:
                        flows[key] = pg
        for node in topo:
            node._grad_fn = None
            node._parents = ()

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result(data, parents, grad_fn):
    """Build the output tensor, recording the edge only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p._in_graph for p in parents):
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# pointwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)
    na, nb = a._in_graph, b._in_graph

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _result(a.data + b.data, (a, b), grad_fn)


def mul(a, b):
    if isinstance(b, (int, float)):
        a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
        s = float(b)

        def grad_scalar(g):
            return (g * s,)

        return _result(a.data * s, (a,), grad_scalar)

    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    a = _coerce(a, b)
    na, nb = a._in_graph, b._in_graph

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if na else None,
                _unbroadcast(g * a.data, b.shape) if nb else None)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    a = _coerce(a, b)
    na, nb = a._in_graph, b._in_graph
    inv = 1.0 / b.data

    def grad_fn(g):
        return (_unbroadcast(g * inv, a.shape) if na else None,
                _unbroadcast(-g * a.data * inv * inv, b.shape) if nb else None)

    return _result(a.data * inv, (a, b), grad_fn)


def power(x: Tensor, p: float):
    p = float(p)
    xd = x.data

    def grad_fn(g):
        return (g * (p * xd ** (p - 1.0)),)

    return _result(xd ** p, (x,), grad_fn)


def t_abs(x: Tensor):
    xd = x.data

    def grad_fn(g):
        return (g * np.sign(xd),)

    return _result(np.abs(xd), (x,), grad_fn)


def exp(x: Tensor):
    out_data = np.exp(x.data)

    def grad_fn(g):
        return (g * out_data,)

    return _result(out_data, (x,), grad_fn)


def log(x: Tensor):
    xd = x.data

    def grad_fn(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), grad_fn)


def sigmoid(x: Tensor):
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _result(out_data, (x,), grad_fn)


def tanh(x: Tensor):
    out_data = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _result(out_data, (x,), grad_fn)


def relu(x: Tensor):
    xd = x.data
    out_data = np.maximum(xd, 0)

    def grad_fn(g):
        return (g * (xd > 0),)

    return _result(out_data, (x,), grad_fn)


def leaky_relu(x: Tensor, alpha: float = 0.2):
    xd = x.data
    scale = np.where(xd > 0, 1.0, alpha).astype(xd.dtype)

    def grad_fn(g):
        return (g * scale,)

    return _result(xd * scale, (x,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor):
    """Gaussian error linear unit (tanh form)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(0.5 * xd * (1.0 + t), (x,), grad_fn)


def softplus(x: Tensor):
    xd = x.data
    out_data = np.logaddexp(np.zeros((), dtype=xd.dtype), xd)

    def grad_fn(g):
        pos = xd >= 0
        sig = np.empty_like(xd)
        sig[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return _result(out_data, (x,), grad_fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False):
    xd = x.data
    out_data = xd.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * xd.ndim), xd.shape).copy(),)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % xd.ndim for a in axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, xd.shape).copy(),)

    return _result(out_data, (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False):
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), grad_fn)


def transpose(x: Tensor, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), grad_fn)


def broadcast_to(x: Tensor, shape):
    shape = tuple(shape)
    old = x.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, old),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), grad_fn)


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    needs = [t._in_graph for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), grad_fn)


def take_slice(x: Tensor, key):
    """Basic (non-repeating) indexing with gradient scatter on backward."""
    xd = x.data

    def grad_fn(g):
        gx = np.zeros_like(xd)
        gx[key] = g
        return (gx,)

    return _result(xd[key].copy(), (x,), grad_fn)


def take_rows(table: Tensor, idx):
    """Row gather ``table[idx]``; backward scatter-adds (rows may repeat)."""
    idx = np.asarray(idx)
    td = table.data

    def grad_fn(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(td[idx].copy(), (table,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    """Batched matrix product with broadcastable batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims disagree: {a.data.shape} vs {b.data.shape}")
    na, nb = a._in_graph, b._in_graph
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        if nb:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return (ga, gb)

    return _result(ad @ bd, (a, b), grad_fn)


def softmax_last(x: Tensor, mask=None):
    """Softmax over the last axis.

    ``mask`` (optional, broadcastable, True = keep) is applied as additive
    -infinity before normalization; fully masked rows return zeros.
    """
    xd = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        xd = np.where(m, xd, -np.inf)
    mx = np.max(xd, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0)
    e = np.exp(xd - mx)
    s = e.sum(axis=-1, keepdims=True)
    out_data = e / np.where(s == 0, 1, s)

    def grad_fn(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return _result(out_data, (x,), grad_fn)


def logsumexp_last(x: Tensor):
    """log(sum(exp(x), last axis)), max-stabilized; backward is softmax."""
    xd = x.data
    mx = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - mx)
    s = e.sum(axis=-1, keepdims=True)
    out_data = (mx + np.log(s)).squeeze(-1)

    def grad_fn(g):
        return (np.expand_dims(g, -1) * (e / s),)

    return _result(out_data, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Normalize the trailing axis to mean 0 / variance 1, then affine."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    ng, ngain, nbias = x._in_graph, gain._in_graph, bias._in_graph
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        gx = ggain = gbias = None
        if ngain:
            ggain = (g * xhat).sum(axis=lead)
        if nbias:
            gbias = g.sum(axis=lead)
        if ng:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, OH, OW, kh, kw) sliding windows of a padded input."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, padded_hw, stride: int) -> np.ndarray:
    """Scatter-add (B, C, OH, OW, kh, kw) windows back onto a padded canvas."""
    b, c, oh, ow, kh, kw = cols.shape
    ph, pw = padded_hw
    out = np.zeros((b, c, ph, pw), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                cols[:, :, :, :, ki, kj]
    return out


def _check_conv_geometry(h, w, kh, kw, stride, padding):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1 or kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv geometry invalid: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    return oh, ow


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1):
    """2-d cross-correlation.

    ``x`` is (B, C_in, H, W); ``kernel`` is (C_out, C_in/groups, kh, kw).
    ``groups == C_in`` with matching C_out gives a depth-wise convolution.
    """
    b, cin, h, w = x.data.shape
    cout, cin_g, kh, kw = kernel.data.shape
    if cin_g * groups != cin or cout % groups != 0:
        raise ValueError(
            f"conv2d channel/groups mismatch: input C={cin}, kernel "
            f"{kernel.data.shape}, groups={groups}")
    oh, ow = _check_conv_geometry(h, w, kh, kw, stride, padding)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _conv_windows(xp, kh, kw, stride)  # (B, C_in, OH, OW, kh, kw)
    nx, nk = x._in_graph, kernel._in_graph

    depthwise = groups == cin and cout == cin
    if depthwise:
        out_data = np.einsum("bcxykl,ckl->bcxy", win, kernel.data[:, 0],
                             optimize=True)
    elif groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, cin * kh * kw)
        wm = kernel.data.reshape(cout, cin * kh * kw)
        out_data = (cols @ wm.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
        out_data = np.ascontiguousarray(out_data)
    else:
        out_data = np.empty((b, cout, oh, ow), dtype=x.data.dtype)
        co_g = cout // groups
        for gi in range(groups):
            wslice = kernel.data[gi * co_g:(gi + 1) * co_g].reshape(co_g, -1)
            wing = win[:, gi * cin_g:(gi + 1) * cin_g]
            cols = wing.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
            out_data[:, gi * co_g:(gi + 1) * co_g] = (
                (cols @ wslice.T).reshape(b, oh, ow, co_g).transpose(0, 3, 1, 2))

    def grad_fn(g):
        gx = gk = None
        if depthwise:
            if nk:
                gk = np.einsum("bcxykl,bcxy->ckl", win, g,
                               optimize=True)[:, None]
            if nx:
                cols = np.einsum("bcxy,ckl->bcxykl", g, kernel.data[:, 0],
                                 optimize=True)
                gxp = _col2im(cols, xp.shape[2:], stride)
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        elif groups == 1:
            gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
            wm = kernel.data.reshape(cout, cin * kh * kw)
            if nk:
                cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(
                    b * oh * ow, cin * kh * kw)
                gk = (gm.T @ cols).reshape(kernel.data.shape)
            if nx:
                gcols = (gm @ wm).reshape(b, oh, ow, cin, kh, kw)
                gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
                gxp = _col2im(np.ascontiguousarray(gcols), xp.shape[2:], stride)
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        else:
            co_g = cout // groups
            gk = np.zeros_like(kernel.data) if nk else None
            gxp = np.zeros_like(xp) if nx else None
            for gi in range(groups):
                gg = g[:, gi * co_g:(gi + 1) * co_g]
                gm = gg.transpose(0, 2, 3, 1).reshape(b * oh * ow, co_g)
                wslice = kernel.data[gi * co_g:(gi + 1) * co_g].reshape(co_g, -1)
                wing = win[:, gi * cin_g:(gi + 1) * cin_g]
                if nk:
                    cols = wing.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
                    gk[gi * co_g:(gi + 1) * co_g] = (gm.T @ cols).reshape(
                        co_g, cin_g, kh, kw)
                if nx:
                    gcols = (gm @ wslice).reshape(b, oh, ow, cin_g, kh, kw)
                    gcols = np.ascontiguousarray(gcols.transpose(0, 3, 1, 2, 4, 5))
                    gxp[:, gi * cin_g:(gi + 1) * cin_g] += _col2im(
                        gcols, xp.shape[2:], stride)
            if nx:
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gk)

    return _result(out_data, (x, kernel), grad_fn)


def conv2d_transposed(x: Tensor, kernel: Tensor, stride: int = 1,
                      padding: int = 0):
    """Transposed 2-d convolution (the adjoint of ``conv2d`` geometry).

    ``x`` is (B, C_in, H, W); ``kernel`` is (C_in, C_out, kh, kw); output
    spatial size is (H-1)*stride - 2*padding + k.
    """
    b, cin, h, w = x.data.shape
    kcin, cout, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d_transposed channel mismatch: input C={cin}, kernel "
            f"{kernel.data.shape}")
    p = padding
    oh = (h - 1) * stride - 2 * p + kh
    ow = (w - 1) * stride - 2 * p + kw
    if stride < 1 or p < 0 or oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d_transposed geometry invalid: input {h}x{w}, kernel "
            f"{kh}x{kw}, stride {stride}, padding {padding}")
    nx, nk = x._in_graph, kernel._in_graph

    xm = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    wm = kernel.data.reshape(cin, cout * kh * kw)
    cols = (xm @ wm).reshape(b, h, w, cout, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    canvas = _col2im(np.ascontiguousarray(cols), (oh + 2 * p, ow + 2 * p), stride)
    out_data = canvas[:, :, p:p + oh, p:p + ow] if p else canvas

    def grad_fn(g):
        gx = gk = None
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gwin = _conv_windows(gp, kh, kw, stride)  # (B, C_out, H, W, kh, kw)
        gwm = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, cout * kh * kw)
        if nx:
            gx = (gwm @ wm.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if nk:
            gk = (xm.T @ gwm).reshape(kernel.data.shape)
        return (gx, gk)

    return _result(out_data, (x, kernel), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar Tensor; ``x`` is that list (or a
    single Tensor).  Each input is checked coordinate by coordinate:
    |analytic - central| / (|analytic| + |central| + 1e-12).  Analytic
    gradients come from ``backward()`` on tensors marked requires-grad.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(xs[0])) if single else (lambda: f(xs))
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = call()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in xs]

    worst = 0.0
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = call().item()
            flat[i] = orig - h
            with no_grad():
                fm = call().item()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            a = float(analytic[ti].reshape(-1)[i])
            rel = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------

class Rng:
    """Counter-based deterministic random source (Philox).

    Identical (seed, stream, draw-count) reproduces identical values on any
    platform.  Separate streams are independent, so e.g. a training step can
    use ``Rng(seed, stream=step)`` and stay reproducible under resume.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % (1 << 64), self.stream % (1 << 64)],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0,
               dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0,
                dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
