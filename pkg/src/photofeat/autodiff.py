"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for the feature network, pattern optimization and the
per-texel appearance fit: a Tensor wrapping an ndarray, closure-based
backward functions, and a topologically ordered tape.  Training runs in
float32; gradient checks run the same graphs in float64.

Deterministic conventions, so tests can assert exact values:
  * max pooling breaks ties toward the lowest index,
  * clamp passes gradient only strictly inside the interval,
  * a backward pass can run once per root; a second call raises.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operands with incompatible shapes; message carries both."""


class TapeConsumed(RuntimeError):
    """backward() called twice on the same root without a new forward."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a_shape, b_shape, op):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- construction helpers --

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar root; accumulates into .grad of leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._done:
            raise TapeConsumed("backward() already ran for this root; rebuild the graph")
        self._done = True
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape, "add")
        out = Tensor._from_op(self.data + other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(-g)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape, "sub")
        out = Tensor._from_op(self.data - other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g, b.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape, "mul")
        out = Tensor._from_op(self.data * other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape, "div")
        out = Tensor._from_op(self.data / other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.data.ndim < 1 or other.data.ndim < 1:
            raise ShapeMismatch(f"matmul: shapes {self.shape} and {other.shape}")
        if self.shape[-1] != (other.shape[-2] if other.data.ndim > 1 else other.shape[0]):
            raise ShapeMismatch(f"matmul: shapes {self.shape} and {other.shape} do not align")
        out = Tensor._from_op(self.data @ other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                ad, bd = a.data, b.data
                if a.requires_grad:
                    if bd.ndim == 1:
                        a._accum(np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd)
                    else:
                        ga = g @ np.swapaxes(bd, -1, -2) if ad.ndim > 1 else bd @ g
                        a._accum(_unbroadcast(ga, a.shape) if ga.shape != a.shape else ga)
                if b.requires_grad:
                    if ad.ndim == 1 and bd.ndim == 1:
                        b._accum(g * ad)
                    elif bd.ndim == 1:
                        b._accum(np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1)))))
                    else:
                        ge = g[..., None, :] if ad.ndim == 1 else g
                        ae = ad[..., :, None] if ad.ndim == 1 else np.swapaxes(ad, -1, -2)
                        gb = ae @ ge
                        b._accum(_unbroadcast(gb, b.shape) if gb.shape != b.shape else gb)
            out._backward = bwd
        return out

    # -- elementwise nonlinearities --

    def relu(self):
        out = Tensor._from_op(np.maximum(self.data, 0), (self,), None)
        if out.requires_grad:
            mask = self.data > 0
            out._backward = lambda g, a=self, m=mask: a._accum(g * m)
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor._from_op(s, (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self, s=s: a._accum(g * s * (1 - s))
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accum(g * (1 - y * y))
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accum(g * y)
        return out

    def log(self):
        out = Tensor._from_op(np.log(self.data), (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g / a.data)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accum(g * 0.5 / y)
        return out

    def sin(self):
        out = Tensor._from_op(np.sin(self.data), (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g * np.cos(a.data))
        return out

    def cos(self):
        out = Tensor._from_op(np.cos(self.data), (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(-g * np.sin(a.data))
        return out

    def clamp(self, lo=None, hi=None):
        """Clip values; gradient flows only strictly inside (lo, hi)."""
        out_data = np.clip(self.data, lo, hi)
        out = Tensor._from_op(out_data, (self,), None)
        if out.requires_grad:
            mask = np.ones(self.shape, dtype=bool)
            if lo is not None:
                mask &= self.data > lo
            if hi is not None:
                mask &= self.data < hi
            out._backward = lambda g, a=self, m=mask: a._accum(g * m)
        return out

    # -- reductions / shape ops --

    def sum(self, axis=None, keepdims=False):
        out = Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)
        if out.requires_grad:
            def bwd(g, a=self, axis=axis, keepdims=keepdims):
                if axis is None:
                    a._accum(np.broadcast_to(g, a.shape).copy())
                    return
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max_pool_over_set(self, axis: int):
        """Max along ``axis``; backward routes gradient to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.max(self.data, axis=axis)
        out = Tensor._from_op(out_data, (self,), None)
        if out.requires_grad:
            def bwd(g, a=self, idx=idx, axis=axis):
                full = np.zeros(a.shape, dtype=g.dtype)
                np.put_along_axis(full, np.expand_dims(idx, axis),
                                  np.expand_dims(g, axis), axis)
                a._accum(full)
            out._backward = bwd
        return out

    def l2_normalize(self, axis: int, eps: float = 1e-8):
        """x / max(||x||_2, eps) along ``axis``."""
        norm = np.sqrt(np.sum(self.data**2, axis=axis, keepdims=True))
        denom = np.maximum(norm, eps)
        y = self.data / denom
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            live = norm > eps
            def bwd(g, a=self, y=y, denom=denom, live=live, axis=axis):
                dot = np.sum(g * y, axis=axis, keepdims=True)
                ga = np.where(live, (g - y * dot) / denom, g / denom)
                a._accum(ga)
            out._backward = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._from_op(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g.reshape(a.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor._from_op(self.data.transpose(axes), (self,), None)
        if out.requires_grad:
            out._backward = lambda g, a=self, inv=tuple(inv): a._accum(g.transpose(inv))
        return out

    def __getitem__(self, key):
        out = Tensor._from_op(self.data[key], (self,), None)
        if out.requires_grad:
            def bwd(g, a=self, key=key):
                full = np.zeros(a.shape, dtype=g.dtype)
                np.add.at(full, key, g)
                a._accum(full)
            out._backward = bwd
        return out

    def gather(self, index: np.ndarray, axis: int):
        """take_along_axis with scatter-add backward."""
        index = np.asarray(index)
        if index.ndim != self.data.ndim:
            raise ShapeMismatch(
                f"gather: index ndim {index.shape} must match tensor ndim {self.shape}")
        out = Tensor._from_op(np.take_along_axis(self.data, index, axis=axis), (self,), None)
        if out.requires_grad:
            def bwd(g, a=self, index=index, axis=axis):
                full = np.zeros(a.shape, dtype=g.dtype)
                if a.data.ndim == 2 and axis == 1:
                    # hot path: scatter via bincount on flattened row-major keys
                    rows = np.broadcast_to(np.arange(a.shape[0])[:, None], index.shape)
                    keys = rows.ravel() * a.shape[1] + index.ravel()
                    acc = np.bincount(keys, weights=g.ravel().astype(np.float64),
                                      minlength=a.data.size)
                    full += acc.reshape(a.shape).astype(g.dtype)
                else:
                    idx = [np.broadcast_to(np.arange(s).reshape([-1 if i == d else 1
                           for i in range(a.data.ndim)]), index.shape)
                           for d, s in enumerate(a.shape)]
                    idx[axis] = index
                    np.add.at(full, tuple(idx), g)
                a._accum(full)
            out._backward = bwd
        return out

    def conv1d(self, weight: "Tensor", stride: int = 1):
        """1D convolution: input (B, C_in, L), weight (C_out, C_in, K)."""
        if self.data.ndim != 3 or weight.data.ndim != 3:
            raise ShapeMismatch(f"conv1d: input {self.shape}, weight {weight.shape} must be 3D")
        if self.shape[1] != weight.shape[1]:
            raise ShapeMismatch(
                f"conv1d: input channels {self.shape} vs weight channels {weight.shape}")
        b, cin, length = self.shape
        cout, _, k = weight.shape
        lout = (length - k) // stride + 1
        if lout < 1:
            raise ShapeMismatch(f"conv1d: kernel {weight.shape} too long for input {self.shape}")
        # windows[b, j, c, t] = x[b, c, j*stride + t]
        windows = np.empty((b, lout, cin, k), dtype=self.data.dtype)
        for t in range(k):
            windows[:, :, :, t] = self.data[:, :, t:t + stride * lout:stride].transpose(0, 2, 1)
        out_data = np.einsum("bjct,oct->boj", windows, weight.data, optimize=True)
        out = Tensor._from_op(out_data, (self, weight), None)
        if out.requires_grad:
            def bwd(g, a=self, w=weight, windows=windows, stride=stride, k=k, lout=lout):
                if w.requires_grad:
                    gw = np.einsum("boj,bjct->oct", g, windows, optimize=True)
                    w._accum(gw)
                if a.requires_grad:
                    ga = np.zeros(a.shape, dtype=g.dtype)
                    gx = np.einsum("boj,oct->bjct", g, w.data, optimize=True)
                    for t in range(k):
                        ga[:, :, t:t + stride * lout:stride] += gx[:, :, :, t].transpose(0, 2, 1)
                    a._accum(ga)
            out._backward = bwd
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor._from_op(np.concatenate(datas, axis=axis), tuple(tensors), None)
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)
        def bwd(g, ts=tensors, offsets=offsets, axis=axis):
            for t, s0, s1 in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(s0, s1)
                    t._accum(g[tuple(sl)])
        out._backward = bwd
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor._from_op(np.stack(datas, axis=axis), tuple(tensors), None)
    if out.requires_grad:
        def bwd(g, ts=tensors, axis=axis):
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accum(np.take(g, i, axis=axis))
        out._backward = bwd
    return out


# -- initialization / optimization / checking --------------------------------

def xavier_init(shape: tuple, seed: int, dtype=np.float32) -> Tensor:
    """Uniform Xavier/Glorot init in +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) < 2:
        raise ValueError(f"xavier_init needs a 2D+ shape, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self):
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update with bias correction; mutates params in place."""
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def grad_check(f, x: Tensor, h: float = 1e-4, coords=None) -> float:
    """Max relative disagreement between backward() and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  Runs in the dtype of ``x``
    (use float64 for sharp checks).  ``coords`` optionally restricts the
    sweep to a list of flat indices.
    """
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    ana = analytic.reshape(-1)
    idx_iter = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx_iter:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]))
        worst = max(worst, err)
    return worst
