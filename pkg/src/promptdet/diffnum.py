"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the operations the detector needs are provided. Every op builds a
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks the graph in reverse
topological order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-5


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def tensor(value, requires_grad=False, dtype=None, name=None) -> Tensor:
    arr = np.array(value, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(value, parents, backward_fn, op):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    out = a.value + b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    out = a.value - b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    av, bv = a.value, b.value
    out = av * bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def power(x: Tensor, p: float) -> Tensor:
    xv = x.value
    out = xv ** p
    return _make(out, (x,), lambda g: (g * p * xv ** (p - 1),), "power")


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return relu(x)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def _sigmoid(v):
    return np.exp(-np.logaddexp(0, -v)).astype(v.dtype, copy=False)


def _dt(x):
    return x.value.dtype if isinstance(x, Tensor) else None


# ---------------------------------------------------------------- structural

def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; the result is a constant, so nothing flows back to ``x``."""
    return Tensor(x.value, requires_grad=False, op="stop_gradient")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.value[index], (x,), back, "take_rows")


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Row means per segment; every segment must own at least one row."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(x.dtype)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment {empty} has no rows")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, seg, x.value)
    out /= counts.reshape((-1,) + (1,) * (x.value.ndim - 1))

    def back(g):
        scaled = g / counts.reshape((-1,) + (1,) * (g.ndim - 1))
        return (scaled[seg],)

    return _make(out, (x,), back, "segment_mean")


# ---------------------------------------------------------------- layers

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for ``x`` of shape [N, Cin] and ``W`` of shape [Cin, Cout]."""
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: cannot multiply x{tuple(x.shape)} by W{tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias {tuple(b.shape)} does not match W{tuple(W.shape)}")
    xv, wv = x.value, W.value
    out = xv @ wv
    if b is not None:
        out = out + b.value

    def back(g):
        grads = (g @ wv.T, xv.T @ g)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, back, "linear")


def _im2col(x, k, stride, pad):
    """Columns laid out as [C*k*k, N*Ho*Wo] so each tap copies contiguous rows."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(cols, shape, k, stride, pad, ho, wo):
    n, c, h, w = shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, K: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | str = 0) -> Tensor:
    """Cross-correlation of [N, C, H, W] input with [Cout, C, k, k] kernels."""
    cout, cin, k, k2 = K.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if x.value.ndim != 4 or x.shape[1] != cin:
        got = x.shape[1] if x.value.ndim == 4 else tuple(x.shape)
        raise ValueError(f"conv2d: input has {got} channels, kernel expects {cin}")
    if pad == "same":
        pad = k // 2
    n = x.shape[0]
    cols, ho, wo = _im2col(x.value, k, stride, pad)
    wmat = K.value.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.value[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    xshape = x.shape

    def back(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = _col2im(wmat.T @ gm, xshape, k, stride, pad, ho, wo) if x.requires_grad else None
        grads = (gx, (gm @ cols.T).reshape(K.shape))
        if b is not None:
            grads += (gm.sum(axis=1),)
        return grads

    parents = (x, K) if b is None else (x, K, b)
    return _make(out, parents, back, "conv2d")


def group_max_pool(x: Tensor, groups) -> Tensor:
    """Per-group, per-channel max over rows of ``x``.

    ``groups`` is a list of row-index lists. Gradient goes to the first row
    holding the max within each group.
    """
    rows, seg = [], []
    for gi, idx in enumerate(groups):
        if len(idx) == 0:
            raise ValueError(f"group {gi} is empty")
        rows.extend(idx)
        seg.extend([gi] * len(idx))
    return segment_max(x, np.asarray(rows, dtype=np.int64), np.asarray(seg, dtype=np.int64), len(groups))


def segment_max(x: Tensor, rows, segment_ids, num_segments: int) -> Tensor:
    """Vectorized group max; ``segment_ids`` must be sorted ascending and cover 0..num_segments-1."""
    rows = np.asarray(rows, dtype=np.int64)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if num_segments == 0:
        out = np.zeros((0, x.shape[1]), dtype=x.dtype)
        return _make(out, (x,), lambda g: (np.zeros_like(x.value),), "segment_max")
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    if len(starts) != num_segments:
        raise ValueError("segment ids must be sorted and every segment nonempty")
    vals = x.value[rows]
    out = np.maximum.reduceat(vals, starts, axis=0)
    # first row attaining the max, per segment and channel
    pos = np.arange(len(rows))[:, None]
    hit = np.where(vals == out[seg], pos, len(rows))
    first = np.minimum.reduceat(hit, starts, axis=0)
    arg_rows = rows[first]
    nrows = x.shape[0]

    def back(g):
        gx = np.zeros((nrows, x.shape[1]), dtype=g.dtype)
        cols = np.broadcast_to(np.arange(x.shape[1]), arg_rows.shape)
        np.add.at(gx, (arg_rows, cols), g)
        return (gx,)

    return _make(out, (x,), back, "segment_max")


def scatter_rows(x: Tensor, flat_index, size: int) -> Tensor:
    """Place rows of ``x`` [G, C] at distinct positions of a zero [size, C] array."""
    flat_index = np.asarray(flat_index, dtype=np.int64)
    out = np.zeros((size, x.shape[1]), dtype=x.dtype)
    out[flat_index] = x.value
    return _make(out, (x,), lambda g: (g[flat_index],), "scatter_rows")


def bilinear_sample(x: Tensor, batch_index, u, v) -> Tensor:
    """Sample [N, C, H, W] features at continuous (u, v) = (row, col) positions.

    Integer coordinates hit cell centers exactly. Out-of-grid neighbours read
    zero. Returns [P, C].
    """
    n, c, h, w = x.shape
    bi = np.asarray(batch_index, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    corners = []
    for du, dv, wgt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < h) & (vv >= 0) & (vv < w)
        corners.append((np.clip(uu, 0, h - 1), np.clip(vv, 0, w - 1), (wgt * ok).astype(x.dtype)))
    xv = x.value
    out = np.zeros((len(u), c), dtype=x.dtype)
    for uu, vv, wgt in corners:
        out += xv[bi, :, uu, vv] * wgt[:, None]

    def back(g):
        gx = np.zeros_like(xv)
        for uu, vv, wgt in corners:
            np.add.at(gx, (bi, slice(None), uu, vv), g * wgt[:, None])
        return (gx,)

    return _make(out, (x,), back, "bilinear_sample")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {k})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    scale = 1.0 / max(n, 1) if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g * scale),)

    return _make(out, (logits,), back, "softmax_cross_entropy")


def sigmoid_bce(logits: Tensor, targets, weights=None) -> Tensor:
    """Summed binary cross-entropy on logits, optionally weighted per element."""
    t = np.asarray(targets, dtype=logits.dtype)
    wts = np.ones_like(t) if weights is None else np.asarray(weights, dtype=logits.dtype)
    xv = logits.value
    loss = np.maximum(xv, 0) - xv * t + np.log1p(np.exp(-np.abs(xv)))
    out = np.asarray((loss * wts).sum(), dtype=logits.dtype)
    return _make(out, (logits,), lambda g: (g * wts * (_sigmoid(xv) - t),), "sigmoid_bce")


def smooth_l1(pred: Tensor, target, weights=None, beta: float = 1.0 / 9.0) -> Tensor:
    """Summed smooth-L1 (Huber with transition ``beta``)."""
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.value - t
    ad = np.abs(d)
    wts = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, dtype=pred.dtype), d.shape)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray((loss * wts).sum(), dtype=pred.dtype)
    grad = np.where(ad < beta, d / beta, np.sign(d)) * wts
    return _make(out, (pred,), lambda g: (g * grad,), "smooth_l1")


# ---------------------------------------------------------------- backward

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaf gradients accumulate across calls; interior nodes get the gradient
    of the latest call.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    lr: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place, with decoupled weight decay."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.value -= lr * state.weight_decay * p.value
        p.value -= update.astype(p.value.dtype, copy=False)


def onecycle_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.3,
                start_div: float = 10.0, final_div: float = 1000.0) -> float:
    """Linear warmup from ``base_lr/start_div`` then cosine decay to ``base_lr/final_div``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lo, hi = base_lr / start_div, base_lr
    final = base_lr / final_div
    warm = warmup_frac * total_steps
    if step <= warm and warm > 0:
        return lo + (hi - lo) * step / warm
    t = (step - warm) / (total_steps - warm)
    return final + (hi - final) * 0.5 * (1 + math.cos(math.pi * t))


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    near_kink: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    kink_mask: np.ndarray = field(repr=False)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_err < tol


def relative_error(analytic, numeric, floor_frac: float = 1e-3, abs_floor: float = 1e-7):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor is ``floor_frac`` of the largest gradient magnitude, and never
    below ``abs_floor`` so that exactly-zero gradients compare against noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    floor = max(floor_frac * scale, abs_floor)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(fn: Callable[[], Tensor], x: Tensor, tol: float = 1e-4, h: float = 1e-3,
                      indices: Iterable[int] | None = None, kink_tol: float = 1e-2,
                      numeric_fn: Callable[[], Tensor] | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn()`` w.r.t. leaf ``x`` with central differences.

    ``fn`` is re-evaluated after in-place perturbation of ``x.value``. An entry
    is flagged near-kink when its one-sided differences disagree by more than
    ``kink_tol`` relative; such entries are excluded from ``max_rel_err``.
    ``numeric_fn`` (default ``fn``) is what gets differenced; graphs with
    stop-gradients pass a surrogate whose stopped inputs are held constant.
    """
    numeric_fn = numeric_fn or fn
    x.grad = None
    out = fn()
    backward(out)
    base = float(numeric_fn().value)
    analytic_full = np.zeros_like(x.value, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    flat = x.value.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    numeric = np.zeros(len(idx))
    kink = np.zeros(len(idx), dtype=bool)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(numeric_fn().value)
        flat[i] = old - h
        fm = float(numeric_fn().value)
        flat[i] = old
        numeric[k] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - base) / h, (base - fm) / h
        kink[k] = abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-8)
    analytic = analytic_full.reshape(-1)[idx]
    err = relative_error(analytic, numeric)
    ok = ~kink
    max_err = float(err[ok].max()) if ok.any() else float("nan")
    x.grad = None
    return GradCheckReport(max_err, int(ok.sum()), int(kink.sum()), analytic, numeric, kink)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, then row-major float64 values."""
    names = sorted(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "params": [{"name": n, "shape": list(_value(params[n]).shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(_value(params[n]), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            params[entry["name"]] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return params, header.get("meta", {})


def _value(p):
    return p.value if isinstance(p, Tensor) else np.asarray(p)
