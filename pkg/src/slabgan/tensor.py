"""Dense tensors with reverse-mode automatic differentiation.

Everything in this library runs on top of a single Tensor type: a numpy
array plus an optional gradient buffer, linked into a global gradient
tape. Ops record a backward closure on the tape; ``backward(loss)`` walks
the tape in reverse creation order (which is a reverse topological order)
and accumulates gradients into every reachable leaf with
``requires_grad=True``.

Volumetric data is channels-first ``(C, D, H, W)``. Training runs in
float32; gradient tests switch to float64 where finite-difference
tolerances are actually reachable.

Memory accounting: every Tensor registers its payload bytes (and, when
allocated, its gradient buffer bytes) with a global meter so that the
memory model can measure real peaks of a training / inference step.
Raw numpy temporaries inside ops are intentionally not counted.
"""

from __future__ import annotations

import contextlib
import warnings
import weakref

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class GraphError(RuntimeError):
    """Backward called on a detached or non-scalar node."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


DEFAULT_DTYPE = np.float32

# Opt-in per-op finite checks (tests switch this on; the trainer checks
# losses every step instead, which is cheap).
_FINITE_CHECKS = False


def set_finite_checks(on: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(on)


# ---------------------------------------------------------------------------
# live payload meter


class MemoryMeter:
    """Counts live bytes of Tensor payloads, split by kind.

    ``data`` bytes are split into parameter vs activation by the
    ``is_param`` flag on the owning Tensor; gradient buffers and optimizer
    moments are tracked separately. ``peak_total`` is the running peak of
    the sum, updated on every allocation.
    """

    def __init__(self):
        self.param_bytes = 0
        self.act_bytes = 0
        self.grad_bytes = 0
        self.opt_bytes = 0
        self.peak_total = 0

    def current_total(self) -> int:
        return self.param_bytes + self.act_bytes + self.grad_bytes + self.opt_bytes

    def reset_peak(self) -> None:
        self.peak_total = self.current_total()

    def _bump(self) -> None:
        tot = self.current_total()
        if tot > self.peak_total:
            self.peak_total = tot

    # cell layout: [data_bytes, grad_bytes, is_param]
    def register_data(self, cell, nbytes: int) -> None:
        cell[0] += nbytes
        if cell[2]:
            self.param_bytes += nbytes
        else:
            self.act_bytes += nbytes
        self._bump()

    def register_grad(self, cell, nbytes: int) -> None:
        cell[1] += nbytes
        self.grad_bytes += nbytes
        self._bump()

    def release_grad(self, cell) -> None:
        self.grad_bytes -= cell[1]
        cell[1] = 0

    def register_opt(self, nbytes: int) -> None:
        self.opt_bytes += nbytes
        self._bump()

    def release_opt(self, nbytes: int) -> None:
        self.opt_bytes -= nbytes

    def release_cell(self, cell) -> None:
        if cell[2]:
            self.param_bytes -= cell[0]
        else:
            self.act_bytes -= cell[0]
        self.grad_bytes -= cell[1]
        cell[0] = cell[1] = 0


METER = MemoryMeter()


# ---------------------------------------------------------------------------
# tape


class GradientTape:
    """Ordered record of op outputs for one backward pass.

    Reverse creation order is a reverse topological order, so one sweep
    visits every node exactly once. ``clear`` drops parent references and
    backward closures, releasing all retained activations.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True

    def record(self, t: "Tensor") -> None:
        self.nodes.append(t)

    def clear(self) -> None:
        for t in self.nodes:
            t._parents = ()
            t._bwd = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = GradientTape()


def active_tape() -> GradientTape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable taping: ops produce plain tensors, nothing is retained."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return _tape.enabled


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_param", "_parents",
                 "_bwd", "_meter_cell", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, is_param: bool = False,
                 dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarray or scalar, not Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_param = bool(is_param)
        self._parents: tuple = ()
        self._bwd = None
        cell = [0, 0, is_param]
        self._meter_cell = cell
        METER.register_data(cell, arr.nbytes)
        weakref.finalize(self, METER.release_cell, cell)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------
    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            if g.base is not None or not g.flags.owndata:
                g = g.copy()
            self.grad = g
            METER.register_grad(self._meter_cell, g.nbytes)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            METER.release_grad(self._meter_cell)
            self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _finite_check(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values out of op '{op}'")


def _make(data: np.ndarray, parents, bwd, op: str) -> Tensor:
    """Create an op output, recording it on the tape when gradients flow."""
    _finite_check(data, op)
    need = _tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = tuple(parents)
        out._bwd = bwd
        _tape.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The tape is consumed: after the sweep all retained activations are
    released, and only leaf gradients survive.
    """
    if loss.data.size != 1:
        raise GraphError("backward needs a scalar loss")
    if loss._bwd is None:
        raise GraphError("loss is detached from the gradient tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    try:
        for node in reversed(_tape.nodes):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)
            # interior grads are complete here (reverse topological order);
            # free them eagerly so backward's live set stays small
            node.zero_grad()
    finally:
        _tape.clear()


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def _coerce(a, like: Tensor):
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a, dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g if b.data.shape == g.shape else g.sum())
    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g if b.data.shape == g.shape else -g.sum())
    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if b.data.shape not in ((), a.data.shape):
            raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * bd)
            if b.requires_grad:
                gb = g * ad
                b.accumulate_grad(gb if b.data.shape == g.shape else gb.sum())
        return _make(ad * bd, (a, b), bwd, "mul")
    s = float(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)
    return _make(a.data * s, (a,), bwd, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(2.0 * g * ad)
    return _make(ad * ad, (a,), bwd, "square")


def tabs(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(ad))
    return _make(np.abs(ad), (a,), bwd, "abs")


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bwd, "mean")


def mean_axes(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    axes = tuple(axes)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(gg / n, a.data.shape).copy())
    return _make(out, (a,), bwd, "mean_axes")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    shapes = [p.data.shape for p in parts]
    ref = list(shapes[0])
    for s in shapes[1:]:
        t = list(s)
        t[axis] = ref[axis]
        if t != ref:
            raise ShapeError(f"concat shape mismatch: {shapes}")
    sizes = [s[axis] for s in shapes]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                p.accumulate_grad(g[tuple(idx)])
    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), bwd, "concat")


def slice_axis(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous window along one axis; gradient is zero outside it."""
    n = a.data.shape[axis]
    if start < 0 or start + length > n:
        raise ShapeError(f"window [{start}, {start + length}) out of bounds for extent {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            gx[idx] = g
            a.accumulate_grad(gx)
    return _make(a.data[idx].copy(), (a,), bwd, "slice")


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (ad > 0))
    return _make(np.maximum(ad, 0), (a,), bwd, "relu")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(ad > 0, 1.0, alpha).astype(ad.dtype))
    return _make(np.where(ad > 0, ad, alpha * ad), (a,), bwd, "leaky_relu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    ad = a.data
    neg = alpha * np.expm1(np.minimum(ad, 0))
    out = np.where(ad > 0, ad, neg)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(ad > 0, 1.0, neg + alpha).astype(ad.dtype))
    return _make(out, (a,), bwd, "elu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))
    return _make(out, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))
    return _make(out, (a,), bwd, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / (1.0 + np.exp(-ad)))
    return _make(out, (a,), bwd, "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - dot) * out)
    return _make(out, (a,), bwd, "softmax")


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def activation(a: Tensor, kind: str, **kw) -> Tensor:
    if kind == "softmax":
        return softmax(a, **kw)
    try:
        return ACTIVATIONS[kind](a, **kw)
    except KeyError:
        raise ValueError(f"unknown activation '{kind}'") from None


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of a single-sample logit vector against a class index."""
    x = logits.data.reshape(-1)
    k = x.size
    if not 0 <= target < k:
        raise IndexError(f"class index {target} out of range for {k} classes")
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.asarray(lse - x[target], dtype=x.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(x - lse)
            p[target] -= 1.0
            logits.accumulate_grad((float(g) * p).reshape(logits.data.shape))
    return _make(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# dense / conv / norm / interp primitives


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map. x: (N, F_in) or (F_in,), w: (F_out, F_in), b: (F_out,)."""
    xd = x.data
    vec = xd.ndim == 1
    x2 = xd[None, :] if vec else xd
    if x2.ndim != 2 or w.data.ndim != 2 or x2.shape[1] != w.data.shape[1]:
        raise ShapeError(f"dense: x {xd.shape} w {w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"dense: bias {b.data.shape} vs F_out {w.data.shape[0]}")
    out = x2 @ w.data.T + b.data

    def bwd(g):
        g2 = g[None, :] if vec else g
        if w.requires_grad:
            w.accumulate_grad(g2.T @ x2)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 @ w.data
            x.accumulate_grad(gx[0] if vec else gx)
    return _make(out[0] if vec else out, (x, w, b), bwd, "dense")


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected int triple, got {v}")
    return t


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0) -> Tensor:
    """3D cross-correlation with zero padding.

    x: (C_in, D, H, W), w: (C_out, C_in, kd, kh, kw), b: (C_out,).
    Output extent per axis: floor((n + 2*pad - k) / stride) + 1.
    """
    stride = _triple(stride)
    pad = _triple(pad)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ShapeError(f"conv3d: x {xd.shape}, w {wd.shape}")
    cin, d, h, wdt = xd.shape
    cout, cin_w, kd, kh, kw = wd.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d channel mismatch: input {cin}, weight {cin_w}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv3d bias shape {b.data.shape}")
    outs = []
    for n, k, s, p in zip((d, h, wdt), (kd, kh, kw), stride, pad):
        o = (n + 2 * p - k) // s + 1
        if o <= 0:
            raise ShapeError(f"conv3d non-positive output extent: n={n} k={k} s={s} p={p}")
        outs.append(o)
    od, oh, ow = outs

    def _pad(arr):
        if pad == (0, 0, 0):
            return arr
        return np.pad(arr, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))

    xp = _pad(xd)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2]]
    win = win[:, :od, :oh, :ow]
    out = np.tensordot(wd, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += b.data[:, None, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def bwd(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if w.requires_grad:
            xp2 = _pad(xd)
            win2 = sliding_window_view(xp2, (kd, kh, kw), axis=(1, 2, 3))
            win2 = win2[:, ::stride[0], ::stride[1], ::stride[2]][:, :od, :oh, :ow]
            gw = np.tensordot(g, win2, axes=([1, 2, 3], [1, 2, 3]))
            w.accumulate_grad(np.ascontiguousarray(gw, dtype=wd.dtype))
        if x.requires_grad:
            if stride == (1, 1, 1) and min(kd - 1 - pad[0], kh - 1 - pad[1],
                                           kw - 1 - pad[2]) >= 0:
                # full correlation of g with the flipped kernel
                wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = np.pad(g, ((0, 0),
                                (kd - 1 - pad[0],) * 2,
                                (kh - 1 - pad[1],) * 2,
                                (kw - 1 - pad[2],) * 2))
                gwin = sliding_window_view(gp, (kd, kh, kw), axis=(1, 2, 3))
                gx = np.tensordot(wf, gwin, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
                x.accumulate_grad(np.ascontiguousarray(gx, dtype=xd.dtype))
            else:
                gxp = np.zeros((cin, d + 2 * pad[0], h + 2 * pad[1], wdt + 2 * pad[2]),
                               dtype=xd.dtype)
                big = np.tensordot(wd, g, axes=([0], [0]))  # (Ci,kd,kh,kw,od,oh,ow)
                for i in range(kd):
                    for j in range(kh):
                        for k in range(kw):
                            gxp[:,
                                i:i + od * stride[0]:stride[0],
                                j:j + oh * stride[1]:stride[1],
                                k:k + ow * stride[2]:stride[2]] += big[:, i, j, k]
                gx = gxp[:, pad[0]:pad[0] + d, pad[1]:pad[1] + h, pad[2]:pad[2] + wdt]
                x.accumulate_grad(np.ascontiguousarray(gx))
    return _make(out, (x, w, b), bwd, "conv3d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5, per_depth_slice: bool = False) -> Tensor:
    """Group normalization over (C/groups, D, H, W) plus per-channel affine.

    With ``per_depth_slice`` the statistics are computed per (group, depth
    slice) over (C/groups, H, W) only. That variant is translation
    covariant along depth, which is what lets a decoder trained on depth
    windows run on the full volume with identical interior output.
    """
    xd = x.data
    c, d, h, w = xd.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("group_norm affine parameters must have shape (C,)")
    if per_depth_slice:
        xg = xd.reshape(groups, c // groups, d, h * w)
        axes = (1, 3)          # stats over (channels-in-group, H*W) per slice
    else:
        xg = xd.reshape(groups, -1)
        axes = (1,)
    mu = xg.mean(axis=axes, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(c, d, h, w)
    out = gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None]
    n_stat = int(np.prod([xg.shape[ax] for ax in axes]))

    def bwd(g):
        xh = ((xg - mu) * inv).reshape(c, d, h, w)
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xh).sum(axis=(1, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            gh = (g * gamma.data[:, None, None, None])
            if per_depth_slice:
                gh = gh.reshape(groups, c // groups, d, h * w)
                xhg = xh.reshape(groups, c // groups, d, h * w)
            else:
                gh = gh.reshape(groups, -1)
                xhg = xh.reshape(groups, -1)
            s1 = gh.sum(axis=axes, keepdims=True)
            s2 = (gh * xhg).sum(axis=axes, keepdims=True)
            gx = inv / n_stat * (n_stat * gh - s1 - xhg * s2)
            x.accumulate_grad(np.ascontiguousarray(gx.reshape(c, d, h, w), dtype=xd.dtype))
    return _make(np.ascontiguousarray(out, dtype=xd.dtype), (x, gamma, beta), bwd, "group_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization by running statistics.

    Samples pass through one at a time here, so there are no mini-batch
    statistics: normalization always uses the running estimates (treated
    as constants by the gradient), and training mode folds the current
    sample's spatial statistics into the running buffers afterwards.
    """
    xd = x.data
    mu = running_mean.copy()
    var = running_var.copy()
    if training:
        running_mean *= (1.0 - momentum)
        running_mean += momentum * xd.mean(axis=(1, 2, 3))
        running_var *= (1.0 - momentum)
        running_var += momentum * xd.var(axis=(1, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None, None]) * inv[:, None, None, None]
    out = gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(1, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            gx = g * (gamma.data * inv)[:, None, None, None]
            x.accumulate_grad(np.ascontiguousarray(gx, dtype=xd.dtype))
    return _make(np.ascontiguousarray(out, dtype=xd.dtype), (x, gamma, beta), bwd, "batch_norm")


# -- trilinear interpolation -------------------------------------------------


def interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype=np.float64) -> np.ndarray:
    """Row-stochastic 1D linear interpolation matrix (n_out x n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for v in range(n_out):
        if n_out == 1:
            src = 0.5 * (n_in - 1)
        elif align_corners:
            src = v * (n_in - 1) / (n_out - 1)
        else:
            src = (v + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[v, i0] += 1.0 - t
        m[v, i1] += t
    return m.astype(dtype)


def _apply_axis_matrix(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    res = m @ flat
    res = res.reshape((m.shape[0],) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(res, 0, axis))


def resize3d(x: Tensor, mats) -> Tensor:
    """Apply per-axis linear resampling matrices to the D, H, W axes."""
    md, mh, mw = mats

    def fwd(arr, transpose=False):
        out = arr
        for ax, m in zip((1, 2, 3), (md, mh, mw)):
            out = _apply_axis_matrix(out, m.T if transpose else m, ax)
        return out

    out = fwd(x.data).astype(x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(fwd(g, transpose=True).astype(x.dtype))
    return _make(out, (x,), bwd, "resize3d")


def trilinear_interp(x: Tensor, scale, align_corners: bool = False) -> Tensor:
    """Trilinear resampling by a positive rational scale.

    ``scale * extent`` must be integral on every spatial axis. Constant
    fields are preserved exactly (the interpolation weights sum to one).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"trilinear_interp expects (C, D, H, W), got {x.shape}")
    scale = float(scale)
    if scale <= 0:
        raise ValueError("scale must be positive")
    mats = []
    for ax in (1, 2, 3):
        n = x.data.shape[ax]
        target = n * scale
        n_out = int(round(target))
        if abs(target - n_out) > 1e-9 or n_out < 1:
            raise ShapeError(f"scale {scale} gives non-integral extent for axis size {n}")
        mats.append(interp_matrix(n, n_out, align_corners, dtype=x.dtype))
    return resize3d(x, mats)


# -- spectral normalization ---------------------------------------------------


def power_iterate(wmat: np.ndarray, u: np.ndarray, iters: int):
    """Run power iteration; returns (u, v, sigma). Degenerate -> sigma 0."""
    eps = 1e-12
    v = None
    for _ in range(max(1, iters)):
        wv = wmat.T @ u
        nv = np.linalg.norm(wv)
        if nv < eps:
            return u, None, 0.0
        v = wv / nv
        wu = wmat @ v
        nu = np.linalg.norm(wu)
        if nu < eps:
            return u, v, 0.0
        u = wu / nu
    sigma = float(u @ wmat @ v)
    return u, v, abs(sigma)


def spectral_norm(w: Tensor, u: np.ndarray, power_iters: int = 1, update: bool = True):
    """Divide a weight by its estimated top singular value.

    The weight is viewed as a matrix (first axis = output channels, rest
    flattened). ``u`` is the persisted left singular vector estimate and is
    updated in place across steps; with ``update=False`` (eval mode) sigma
    is estimated from the stored ``u`` without touching it. Returns
    ``(w_normalized, u)``. A zero weight is returned unchanged with a
    warning.

    Gradient treats u, v as constants: d(W/sigma) with sigma = u^T W v.
    """
    wmat = w.data.reshape(w.data.shape[0], -1)
    if update:
        u_new, v, sigma = power_iterate(wmat, u, power_iters)
        u[:] = u_new
    else:
        u_new = u
        wv = wmat.T @ u
        nv = np.linalg.norm(wv)
        if nv < 1e-12:
            v, sigma = None, 0.0
        else:
            v = wv / nv
            sigma = abs(float(u @ wmat @ v))
    if sigma == 0.0:
        warnings.warn("spectral_norm: degenerate (zero) weight, returned unchanged")

        def bwd_id(g):
            if w.requires_grad:
                w.accumulate_grad(g)
        return _make(w.data.copy(), (w,), bwd_id, "spectral_norm"), u
    inv = 1.0 / sigma
    out = w.data * inv
    uv = np.outer(u_new, v).reshape(w.data.shape).astype(w.dtype)
    wbar = out

    def bwd(g):
        if w.requires_grad:
            coef = float((g * wbar).sum())
            w.accumulate_grad((g - coef * uv) * inv)
    return _make(out.astype(w.dtype), (w,), bwd, "spectral_norm"), u


# ---------------------------------------------------------------------------
# oracles for tests (kept here so they stay next to the ops they check)


def conv3d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride=1, pad=0) -> np.ndarray:
    """Nested-loop direct convolution; the correctness oracle for conv3d."""
    stride = _triple(stride)
    pad = _triple(pad)
    cin, d, h, wdt = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    od = (d + 2 * pad[0] - kd) // stride[0] + 1
    oh = (h + 2 * pad[1] - kh) // stride[1] + 1
    ow = (wdt + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((cout, od, oh, ow), dtype=np.float64)
    for co in range(cout):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    z0, y0, x0 = z * stride[0], y * stride[1], xx * stride[2]
                    patch = xp[:, z0:z0 + kd, y0:y0 + kh, x0:x0 + kw]
                    out[co, z, y, xx] = float((patch * w[co]).sum()) + float(b[co])
    return out.astype(x.dtype)
