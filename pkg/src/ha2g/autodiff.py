"""Dense-tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array; primitive applications are recorded on the
active Tape and replayed in exact reverse order by backward().  The
primitive set is what the networks and losses in this package need: no
GPU, no dynamic gadgets.  Gradients are verified against central finite
differences (see gradient_check).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class UnknownPrimitive(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class Tensor:
    """A shaped value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # operator sugar; scalars are wrapped as constants of the same dtype
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    ctx: tuple = ()


class Tape:
    """Ordered record of primitive applications; single-owner while recording."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.remove(self)
        return False


_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@dataclass(frozen=True)
class Primitive:
    forward: callable  # (attrs, *arrays) -> (out_array, ctx)
    backward: callable  # (ctx, grad, inputs, acc) -> None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name):
    def deco(pair_factory):
        fwd, bwd = pair_factory()
        PRIMITIVES[name] = Primitive(fwd, bwd)
        return pair_factory
    return deco


def apply_primitive(op: str, inputs, attrs=None) -> Tensor:
    """Apply a registered primitive, recording it on the active tape."""
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise UnknownPrimitive(op)
    attrs = attrs or {}
    out_data, ctx = prim.forward(attrs, *[t.data for t in inputs])
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(Node(op, tuple(inputs), out, ctx))
    return out


class _Acc:
    """Per-backward gradient accumulator; buffers are always owned arrays."""

    def __init__(self):
        self.grads: dict[int, np.ndarray] = {}

    def add(self, t: Tensor, g: np.ndarray, fresh=False):
        if not t.requires_grad:
            return
        cur = self.grads.get(id(t))
        if cur is None:
            self.grads[id(t)] = g if fresh else g.copy()
        else:
            cur += g

    def buffer(self, t: Tensor) -> np.ndarray | None:
        """Owned zero-initialised buffer for in-place scatter accumulation."""
        if not t.requires_grad:
            return None
        buf = self.grads.get(id(t))
        if buf is None:
            buf = np.zeros_like(t.data)
            self.grads[id(t)] = buf
        return buf


def backward(tape: Tape, loss: Tensor, leaves=None) -> dict:
    """Reverse sweep: gradients of loss w.r.t. every requires_grad tensor.

    Gradients accumulate additively across fan-out.  Tensors listed in
    ``leaves`` always come back with a gradient (zeros when the loss does
    not depend on them).  Results are also stored on each leaf's ``.grad``.
    """
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    acc = _Acc()
    acc.grads[id(loss)] = np.ones((), dtype=loss.data.dtype)
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = acc.grads.pop(id(node.output), None)
        if g is None:
            continue
        PRIMITIVES[node.op].backward(node.ctx, g, node.inputs, acc)
    out = {}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen and id(t) not in produced:
                seen.add(id(t))
                t.grad = acc.grads.get(id(t))
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                out[t] = t.grad
    for t in leaves or ():
        if t not in out:
            t.grad = acc.grads.get(id(t), np.zeros_like(t.data))
            out[t] = t.grad
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc_unbroadcast(acc, t, g):
    red = _unbroadcast(g, t.shape)
    acc.add(t, red, fresh=red is not g)


# --- elementwise binary ------------------------------------------------------

@_register("add")
def _p_add():
    def fwd(attrs, a, b):
        return a + b, ()

    def bwd(ctx, g, inputs, acc):
        _acc_unbroadcast(acc, inputs[0], g)
        _acc_unbroadcast(acc, inputs[1], g)
    return fwd, bwd


@_register("sub")
def _p_sub():
    def fwd(attrs, a, b):
        return a - b, ()

    def bwd(ctx, g, inputs, acc):
        _acc_unbroadcast(acc, inputs[0], g)
        _acc_unbroadcast(acc, inputs[1], -g)
    return fwd, bwd


@_register("mul")
def _p_mul():
    def fwd(attrs, a, b):
        return a * b, ()

    def bwd(ctx, g, inputs, acc):
        a, b = inputs
        _acc_unbroadcast(acc, a, g * b.data)
        _acc_unbroadcast(acc, b, g * a.data)
    return fwd, bwd


@_register("div")
def _p_div():
    def fwd(attrs, a, b):
        return a / b, ()

    def bwd(ctx, g, inputs, acc):
        a, b = inputs
        _acc_unbroadcast(acc, a, g / b.data)
        _acc_unbroadcast(acc, b, -g * a.data / (b.data * b.data))
    return fwd, bwd


# --- elementwise unary -------------------------------------------------------

def _simple_unary(name, f, dfdx_from):
    """dfdx_from(x, out) -> local derivative array."""
    @_register(name)
    def _p():
        def fwd(attrs, x):
            out = f(x)
            return out, (x, out)

        def bwd(ctx, g, inputs, acc):
            x, out = ctx
            acc.add(inputs[0], g * dfdx_from(x, out), fresh=True)
        return fwd, bwd


_simple_unary("neg", lambda x: -x, lambda x, out: -np.ones_like(x))
_simple_unary("exp", np.exp, lambda x, out: out)
_simple_unary("log", np.log, lambda x, out: 1.0 / x)
_simple_unary("sqrt", np.sqrt, lambda x, out: 0.5 / out)
_simple_unary("tanh", np.tanh, lambda x, out: 1.0 - out * out)
_simple_unary("abs", np.abs, lambda x, out: np.sign(x))


@_register("sigmoid")
def _p_sigmoid():
    def fwd(attrs, x):
        z = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return out, (out,)

    def bwd(ctx, g, inputs, acc):
        (out,) = ctx
        acc.add(inputs[0], g * out * (1.0 - out), fresh=True)
    return fwd, bwd


@_register("leaky_relu")
def _p_leaky_relu():
    def fwd(attrs, x):
        alpha = attrs.get("alpha", 0.2)
        return np.where(x > 0, x, alpha * x), (x, alpha)

    def bwd(ctx, g, inputs, acc):
        x, alpha = ctx
        acc.add(inputs[0], g * np.where(x > 0, 1.0, alpha), fresh=True)
    return fwd, bwd


@_register("pow_const")
def _p_pow_const():
    def fwd(attrs, x):
        c = attrs["exponent"]
        return x ** c, (x, c)

    def bwd(ctx, g, inputs, acc):
        x, c = ctx
        acc.add(inputs[0], g * c * x ** (c - 1), fresh=True)
    return fwd, bwd


@_register("clip")
def _p_clip():
    # subgradient: passes through strictly inside [lo, hi], including at
    # the boundary values themselves
    def fwd(attrs, x):
        lo, hi = attrs.get("lo"), attrs.get("hi")
        return np.clip(x, lo, hi), (x, lo, hi)

    def bwd(ctx, g, inputs, acc):
        x, lo, hi = ctx
        mask = np.ones_like(x)
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        acc.add(inputs[0], g * mask, fresh=True)
    return fwd, bwd


@_register("arccos")
def _p_arccos():
    # input nudged inside (-1, 1) so the derivative stays finite
    def fwd(attrs, x):
        guard = attrs.get("guard", 1e-7)
        xc = np.clip(x, -1.0 + guard, 1.0 - guard)
        return np.arccos(xc), (xc,)

    def bwd(ctx, g, inputs, acc):
        (xc,) = ctx
        acc.add(inputs[0], -g / np.sqrt(1.0 - xc * xc), fresh=True)
    return fwd, bwd


@_register("huber")
def _p_huber():
    def fwd(attrs, x):
        delta = attrs.get("delta", 1.0)
        return _kernels.huber_forward(x, delta), (x, delta)

    def bwd(ctx, g, inputs, acc):
        x, delta = ctx
        acc.add(inputs[0], g * _kernels.huber_backward(x, delta), fresh=True)
    return fwd, bwd


# --- reductions --------------------------------------------------------------

def _restore_axes(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(in_shape) for a in axes)
        shape = [1 if i in axes else s for i, s in enumerate(in_shape)]
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


@_register("sum")
def _p_sum():
    def fwd(attrs, x):
        axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
        return x.sum(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)

    def bwd(ctx, g, inputs, acc):
        shape, axis, keepdims = ctx
        acc.add(inputs[0], _restore_axes(g, shape, axis, keepdims))
    return fwd, bwd


@_register("mean")
def _p_mean():
    def fwd(attrs, x):
        axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
        out = x.mean(axis=axis, keepdims=keepdims)
        count = x.size / max(out.size, 1)
        return out, (x.shape, axis, keepdims, count)

    def bwd(ctx, g, inputs, acc):
        shape, axis, keepdims, count = ctx
        acc.add(inputs[0], _restore_axes(g, shape, axis, keepdims) / count, fresh=True)
    return fwd, bwd


@_register("l1_norm")
def _p_l1():
    def fwd(attrs, x):
        return np.abs(x).sum(), (x,)

    def bwd(ctx, g, inputs, acc):
        (x,) = ctx
        acc.add(inputs[0], g * np.sign(x), fresh=True)
    return fwd, bwd


@_register("l2_norm")
def _p_l2():
    def fwd(attrs, x):
        out = np.sqrt((x * x).sum())
        return out, (x, out)

    def bwd(ctx, g, inputs, acc):
        x, out = ctx
        acc.add(inputs[0], g * x / max(out, np.finfo(x.dtype).tiny), fresh=True)
    return fwd, bwd


# --- shape -------------------------------------------------------------------

@_register("reshape")
def _p_reshape():
    def fwd(attrs, x):
        return x.reshape(attrs["shape"]), (x.shape,)

    def bwd(ctx, g, inputs, acc):
        (shape,) = ctx
        acc.add(inputs[0], g.reshape(shape))
    return fwd, bwd


@_register("transpose")
def _p_transpose():
    # returns a view; tensors are immutable while a tape is live
    def fwd(attrs, x):
        axes = attrs["axes"]
        return np.transpose(x, axes), (axes,)

    def bwd(ctx, g, inputs, acc):
        (axes,) = ctx
        acc.add(inputs[0], np.transpose(g, np.argsort(axes)))
    return fwd, bwd


@_register("slice")
def _p_slice():
    # basic (non-fancy) indexing only, so scatter-accumulation is exact;
    # the output is a view (tensors are immutable while a tape is live)
    def fwd(attrs, x):
        return x[attrs["key"]], (attrs["key"],)

    def bwd(ctx, g, inputs, acc):
        (key,) = ctx
        buf = acc.buffer(inputs[0])
        if buf is not None:
            buf[key] += g
    return fwd, bwd


@_register("concat")
def _p_concat():
    def fwd(attrs, *arrays):
        axis = attrs.get("axis", 0)
        return np.concatenate(arrays, axis=axis), (axis, [a.shape for a in arrays])

    def bwd(ctx, g, inputs, acc):
        axis, shapes = ctx
        start = 0
        for t, shape in zip(inputs, shapes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + shape[axis])
            acc.add(t, g[tuple(idx)])
            start += shape[axis]
    return fwd, bwd


@_register("pad_axis")
def _p_pad_axis():
    def fwd(attrs, x):
        axis, before, after = attrs["axis"], attrs["before"], attrs["after"]
        widths = [(0, 0)] * x.ndim
        widths[axis] = (before, after)
        return np.pad(x, widths), (axis, before, x.shape[axis])

    def bwd(ctx, g, inputs, acc):
        axis, before, size = ctx
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + size)
        acc.add(inputs[0], g[tuple(idx)])
    return fwd, bwd


# --- linear algebra ----------------------------------------------------------

@_register("matmul")
def _p_matmul():
    # a: (..., M, K) with <= 1 batch dim, b: (K, N)
    def fwd(attrs, a, b):
        if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    def bwd(ctx, g, inputs, acc):
        a, b = ctx
        acc.add(inputs[0], g @ b.T, fresh=True)
        acc.add(inputs[1], a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]),
                fresh=True)
    return fwd, bwd


@_register("bmm")
def _p_bmm():
    # batched matmul: a (K, M, D) @ b (K, D, P) -> (K, M, P)
    def fwd(attrs, a, b):
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] \
                or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"bmm {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    def bwd(ctx, g, inputs, acc):
        a, b = ctx
        acc.add(inputs[0], g @ b.transpose(0, 2, 1), fresh=True)
        acc.add(inputs[1], a.transpose(0, 2, 1) @ g, fresh=True)
    return fwd, bwd


@_register("softmax")
def _p_softmax():
    def fwd(attrs, x):
        axis = attrs.get("axis", -1)
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    def bwd(ctx, g, inputs, acc):
        out, axis = ctx
        inner = (g * out).sum(axis=axis, keepdims=True)
        acc.add(inputs[0], (g - inner) * out, fresh=True)
    return fwd, bwd


@_register("cosine_similarity")
def _p_cosine():
    # over the last axis; shapes broadcast
    def fwd(attrs, a, b):
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        dot = (a * b).sum(axis=-1)
        out = dot / (na * nb)
        return out, (a, b, na, nb, out)

    def bwd(ctx, g, inputs, acc):
        a, b, na, nb, out = ctx
        ge = g[..., None]
        da = ge * (b / (na * nb)[..., None] - (out / (na * na))[..., None] * a)
        db = ge * (a / (na * nb)[..., None] - (out / (nb * nb))[..., None] * b)
        _acc_unbroadcast(acc, inputs[0], da)
        _acc_unbroadcast(acc, inputs[1], db)
    return fwd, bwd


@_register("gather_rows")
def _p_gather_rows():
    def fwd(attrs, table):
        ids = attrs["ids"]
        return table[ids], (ids, table.shape)

    def bwd(ctx, g, inputs, acc):
        ids, shape = ctx
        buf = acc.buffer(inputs[0])
        if buf is not None:
            np.add.at(buf, ids.ravel(), g.reshape(-1, shape[-1]))
    return fwd, bwd


@_register("batchnorm")
def _p_batchnorm():
    # inference affine form: statistics are frozen attrs, never differentiated
    def fwd(attrs, x, gamma, beta):
        mean, var, eps = attrs["mean"], attrs["var"], attrs.get("eps", 1e-5)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        return xhat * gamma + beta, (xhat, gamma, inv)

    def bwd(ctx, g, inputs, acc):
        xhat, gamma, inv = ctx
        acc.add(inputs[0], g * gamma * inv, fresh=True)
        _acc_unbroadcast(acc, inputs[1], g * xhat)
        _acc_unbroadcast(acc, inputs[2], g)
    return fwd, bwd


# --- convolutions ------------------------------------------------------------

def _conv_windows(x, k, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    return win[:, :, ::stride]  # (B, C, To, K)


@_register("conv1d")
def _p_conv1d():
    # x: (B, C, T), w: (O, C, K), bias: (O,); valid (no padding)
    def fwd(attrs, x, w, bias):
        stride = attrs.get("stride", 1)
        b_, c, t = x.shape
        o, cw, k = w.shape
        if cw != c:
            raise ShapeMismatch(f"conv1d channels {c} vs weight {cw}")
        if t < k:
            raise ShapeMismatch(f"conv1d length {t} < kernel {k}")
        win = _conv_windows(x, k, stride)  # (B, C, To, K)
        to = win.shape[2]
        cols = win.transpose(0, 2, 1, 3).reshape(b_, to, c * k)
        out = cols @ w.reshape(o, c * k).T + bias
        return np.ascontiguousarray(out.transpose(0, 2, 1)), (cols, w, stride, x.shape)

    def bwd(ctx, g, inputs, acc):
        cols, w, stride, xshape = ctx
        o, c, k = w.shape
        b_, _, to = g.shape
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B, To, O)
        dw = gt.reshape(-1, o).T @ cols.reshape(-1, c * k)
        acc.add(inputs[1], dw.reshape(o, c, k), fresh=True)
        acc.add(inputs[2], g.sum(axis=(0, 2)), fresh=True)
        if inputs[0].requires_grad:
            buf = acc.buffer(inputs[0])
            for kk in range(k):
                contrib = np.tensordot(gt, w[:, :, kk], axes=([2], [0]))  # (B, To, C)
                buf[:, :, kk:kk + stride * to:stride] += contrib.transpose(0, 2, 1)
    return fwd, bwd


@_register("conv_transpose1d")
def _p_conv_transpose1d():
    # x: (B, C, T), w: (C, O, K), bias: (O,); output length (T-1)*stride + K
    def fwd(attrs, x, w, bias):
        stride = attrs.get("stride", 1)
        b_, c, t = x.shape
        cw, o, k = w.shape
        if cw != c:
            raise ShapeMismatch(f"conv_transpose1d channels {c} vs weight {cw}")
        to = (t - 1) * stride + k
        out = np.zeros((b_, o, to), dtype=x.dtype)
        out += bias[None, :, None]
        for kk in range(k):
            contrib = np.tensordot(x, w[:, :, kk], axes=([1], [0]))  # (B, T, O)
            out[:, :, kk:kk + stride * t:stride] += contrib.transpose(0, 2, 1)
        return out, (x, w, stride)

    def bwd(ctx, g, inputs, acc):
        x, w, stride = ctx
        b_, c, t = x.shape
        _, o, k = w.shape
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for kk in range(k):
            gk = g[:, :, kk:kk + stride * t:stride]  # (B, O, T)
            dx += np.tensordot(gk, w[:, :, kk], axes=([1], [1])).transpose(0, 2, 1)
            dw[:, :, kk] = np.tensordot(x, gk, axes=([0, 2], [0, 2]))
        acc.add(inputs[0], dx, fresh=True)
        acc.add(inputs[1], dw, fresh=True)
        acc.add(inputs[2], g.sum(axis=(0, 2)), fresh=True)
    return fwd, bwd


# --- recurrent ---------------------------------------------------------------

@_register("gru_cell")
def _p_gru_cell():
    # gx: (B, 3H) precomputed input pre-activation, h_prev: (B, H),
    # wh: (H, 3H), bh: (3H,); gates laid out [reset | update | candidate]
    def fwd(attrs, gx, h_prev, wh, bh):
        h = h_prev.shape[-1]
        if gx.shape != (h_prev.shape[0], 3 * h) or wh.shape != (h, 3 * h):
            raise ShapeMismatch(f"gru_cell gx{gx.shape} h{h_prev.shape} wh{wh.shape}")
        gh = h_prev @ wh + bh
        h_new, r, z, n = _kernels.gru_gates_forward(gx, gh, h_prev)
        return h_new, (h_prev, r, z, n, np.ascontiguousarray(gh[:, 2 * h:]), wh)

    def bwd(ctx, g, inputs, acc):
        h_prev, r, z, n, gh_n, wh = ctx
        d_gx, d_gh, d_hprev = _kernels.gru_gates_backward(
            np.ascontiguousarray(g), h_prev, r, z, n, gh_n)
        acc.add(inputs[0], d_gx, fresh=True)
        acc.add(inputs[1], d_hprev + d_gh @ wh.T, fresh=True)
        acc.add(inputs[2], h_prev.T @ d_gh, fresh=True)
        acc.add(inputs[3], d_gh.sum(axis=0), fresh=True)
    return fwd, bwd


@_register("gru_sequence")
def _p_gru_sequence():
    # whole recurrent pass fused into one node: gx_all (B, N, 3H) is the
    # precomputed input-side pre-activation; internal loop works time-major
    def fwd(attrs, gx_all, wh, bh):
        reverse = attrs.get("reverse", False)
        b, n, h3 = gx_all.shape
        h = h3 // 3
        if wh.shape != (h, h3):
            raise ShapeMismatch(f"gru_sequence gx{gx_all.shape} wh{wh.shape}")
        gx_t = np.ascontiguousarray(gx_all.transpose(1, 0, 2))
        out = np.empty((n, b, h), dtype=gx_all.dtype)
        hs_prev = np.empty((n, b, h), dtype=gx_all.dtype)
        rs = np.empty((n, b, h), dtype=gx_all.dtype)
        zs = np.empty((n, b, h), dtype=gx_all.dtype)
        ns = np.empty((n, b, h), dtype=gx_all.dtype)
        ghn = np.empty((n, b, h), dtype=gx_all.dtype)
        state = np.zeros((b, h), dtype=gx_all.dtype)
        order = range(n - 1, -1, -1) if reverse else range(n)
        for t in order:
            gh = state @ wh
            gh += bh
            h_new, r, z, cand = _kernels.gru_gates_forward(gx_t[t], gh, state)
            hs_prev[t] = state
            rs[t], zs[t], ns[t], ghn[t] = r, z, cand, gh[:, 2 * h:]
            out[t] = h_new
            state = h_new
        ctx = (hs_prev, rs, zs, ns, ghn, wh, reverse)
        return np.ascontiguousarray(out.transpose(1, 0, 2)), ctx

    def bwd(ctx, g, inputs, acc):
        hs_prev, rs, zs, ns, ghn, wh, reverse = ctx
        n, b, h = hs_prev.shape
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2))
        d_gx = np.empty((n, b, 3 * h), dtype=g.dtype)
        d_gh = np.empty((n, b, 3 * h), dtype=g.dtype)
        d_state = np.zeros((b, h), dtype=g.dtype)
        wh_t = wh.T.copy()
        order = range(n - 1, -1, -1) if reverse else range(n)
        for t in reversed(list(order)):
            gt = g_t[t] + d_state
            dgx, dgh, d_hprev = _kernels.gru_gates_backward(
                gt, hs_prev[t], rs[t], zs[t], ns[t], ghn[t])
            d_gx[t] = dgx
            d_gh[t] = dgh
            d_state = d_hprev + dgh @ wh_t
        acc.add(inputs[0], np.ascontiguousarray(d_gx.transpose(1, 0, 2)), fresh=True)
        acc.add(inputs[1], hs_prev.reshape(-1, h).T @ d_gh.reshape(-1, 3 * h),
                fresh=True)
        acc.add(inputs[2], d_gh.sum(axis=(0, 1)), fresh=True)
    return fwd, bwd


# --- functional wrappers -----------------------------------------------------

def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    if not isinstance(b, Tensor):
        b = _wrap(b, a)
    return a, b


def add(a, b):
    return apply_primitive("add", _pair(a, b))


def sub(a, b):
    return apply_primitive("sub", _pair(a, b))


def mul(a, b):
    return apply_primitive("mul", _pair(a, b))


def div(a, b):
    return apply_primitive("div", _pair(a, b))


def neg(x):
    return apply_primitive("neg", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def abs_(x):
    return apply_primitive("abs", [x])


def leaky_relu(x, alpha=0.2):
    return apply_primitive("leaky_relu", [x], {"alpha": alpha})


def square(x):
    return apply_primitive("pow_const", [x], {"exponent": 2})


def pow_const(x, c):
    return apply_primitive("pow_const", [x], {"exponent": c})


def clip(x, lo=None, hi=None):
    return apply_primitive("clip", [x], {"lo": lo, "hi": hi})


def arccos(x, guard=1e-7):
    return apply_primitive("arccos", [x], {"guard": guard})


def huber(x, delta=1.0):
    return apply_primitive("huber", [x], {"delta": delta})


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def l1_norm(x):
    return apply_primitive("l1_norm", [x])


def l2_norm(x):
    return apply_primitive("l2_norm", [x])


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": shape})


def transpose(x, axes):
    return apply_primitive("transpose", [x], {"axes": axes})


def tslice(x, key):
    return apply_primitive("slice", [x], {"key": key})


def concat(tensors, axis=0):
    return apply_primitive("concat", list(tensors), {"axis": axis})


def pad_axis(x, axis, before, after):
    return apply_primitive("pad_axis", [x], {"axis": axis, "before": before, "after": after})


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def bmm(a, b):
    return apply_primitive("bmm", [a, b])


def softmax(x, axis=-1):
    return apply_primitive("softmax", [x], {"axis": axis})


def cosine_similarity(a, b):
    return apply_primitive("cosine_similarity", [a, b])


def gather_rows(table, ids):
    return apply_primitive("gather_rows", [table], {"ids": np.asarray(ids)})


def batchnorm(x, gamma, beta, mean_arr, var_arr, eps=1e-5):
    return apply_primitive("batchnorm", [x, gamma, beta],
                           {"mean": mean_arr, "var": var_arr, "eps": eps})


def conv1d(x, w, bias, stride=1):
    return apply_primitive("conv1d", [x, w, bias], {"stride": stride})


def conv_transpose1d(x, w, bias, stride=1):
    return apply_primitive("conv_transpose1d", [x, w, bias], {"stride": stride})


def gru_cell(gx, h_prev, wh, bh):
    return apply_primitive("gru_cell", [gx, h_prev, wh, bh])


def gru_cell_step(x, h_prev, wx, wh, bx, bh):
    """The full GRU cell step from raw input: gx = x @ wx + bx, then the gates."""
    return gru_cell(add(matmul(x, wx), bx), h_prev, wh, bh)


def gru_sequence(gx_all, wh, bh, reverse=False):
    return apply_primitive("gru_sequence", [gx_all, wh, bh], {"reverse": reverse})


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], t=0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place on the parameters."""
    state.t += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        _kernels.adam_update(p.data, g.astype(p.data.dtype, copy=False),
                             m, v, state.t, lr, beta1, beta2, eps)


# --- verification ------------------------------------------------------------

def gradient_check(f, x: Tensor, eps=1e-5, max_components=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be evaluated in fp64.
    The error for each component is |analytic - fd| / max(1, |fd|); when
    ``max_components`` is given, a seeded subset of components is checked.
    """
    x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(x64)
    backward(tape, loss, leaves=[x64])
    analytic = x64.grad.ravel()
    flat = x64.data.ravel()
    idx = np.arange(flat.size)
    if max_components is not None and flat.size > max_components:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_components, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x64.detach()).data)
        flat[i] = orig - eps
        fm = float(f(x64.detach()).data)
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
