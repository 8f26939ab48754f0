"""Dense 5-axis tensor kernels with hand-written backward passes.

Every activation is a numpy array laid out as (batch, channel, depth,
height, width).  Production code runs in float32; the gradient-check
harness feeds float64 arrays through the very same functions, so no op
hard-codes a dtype.

Forward functions return ``(output, cache)``; the matching ``*_backward``
function consumes the cache.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    KernelExceedsInput,
    LabelOutOfRange,
    NonFiniteTensor,
    ParityMismatch,
    ShapeMismatch,
)

Tensor5 = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25

# upper bound on im2col buffer size (elements); larger lowerings are split into slabs
_COLS_BUDGET = 1 << 20

_debug = os.environ.get("FDFCN_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf audit run after every op."""
    global _debug
    _debug = bool(enabled)


def audit(name: str, arr: np.ndarray) -> np.ndarray:
    if _debug and not np.all(np.isfinite(arr)):
        raise NonFiniteTensor(f"non-finite values produced by {name}")
    return arr


def check_tensor5(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 5:
        raise ShapeMismatch(f"{name} must have 5 axes (n, c, d, h, w), got shape {x.shape}")


def dilated_kernel_size(k: int, r: int) -> int:
    """Edge length of a k-tap kernel once r-1 zeros sit between taps."""
    return k + (k - 1) * (r - 1)


@dataclass(frozen=True)
class ConvSpec:
    k: int
    c_in: int
    c_out: int
    s: int = 1
    p: int = 0
    r: int = 1

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.p < 0 or self.r < 1:
            raise ValueError(f"invalid convolution spec {self}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"channel counts must be positive: {self}")

    @property
    def kd(self) -> int:
        return dilated_kernel_size(self.k, self.r)


def conv_out_size(i: int, spec: ConvSpec) -> int:
    kd = spec.kd
    if i + 2 * spec.p < kd:
        raise KernelExceedsInput(
            f"input edge {i} with padding {spec.p} is smaller than dilated kernel {kd}"
        )
    return (i + 2 * spec.p - kd) // spec.s + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


_scratch: dict = {}


def _buffer(tag, size, dtype):
    # reused scratch memory; avoids first-touch page faults on every call
    key = (tag, np.dtype(dtype).str)
    buf = _scratch.get(key)
    if buf is None or buf.size < size:
        buf = _scratch[key] = np.empty(size, dtype=dtype)
    return buf[:size]


def _im2col(xp, k, s, taps, out_shape):
    """Lower a padded input into columns.

    ``taps`` lists ``(offset, rate)`` per fused branch; rows are ordered
    (branch, ci, a, b, c) and columns (sample, od, oh, ow).
    """
    nb, ci = xp.shape[:2]
    od, oh, ow = out_shape
    cols = _buffer("cols", len(taps) * ci * k**3 * nb * od * oh * ow, xp.dtype)
    cols = cols.reshape((len(taps), ci, k, k, k, nb) + tuple(out_shape))
    xt = xp.transpose(1, 0, 2, 3, 4)
    for t, (off, r) in enumerate(taps):
        for a in range(k):
            d0 = off + a * r
            sd = slice(d0, d0 + s * (od - 1) + 1, s)
            for b in range(k):
                h0 = off + b * r
                sh = slice(h0, h0 + s * (oh - 1) + 1, s)
                for c in range(k):
                    w0 = off + c * r
                    cols[t, :, a, b, c] = xt[:, :, sd, sh, slice(w0, w0 + s * (ow - 1) + 1, s)]
    return cols.reshape(len(taps) * ci * k**3, -1)


def _col2im(dcols, dxp, k, s, taps, out_shape):
    nb, ci = dxp.shape[:2]
    od, oh, ow = out_shape
    dcols = dcols.reshape((len(taps), ci, k, k, k, nb) + tuple(out_shape))
    dxt = dxp.transpose(1, 0, 2, 3, 4)
    for t, (off, r) in enumerate(taps):
        for a in range(k):
            d0 = off + a * r
            sd = slice(d0, d0 + s * (od - 1) + 1, s)
            for b in range(k):
                h0 = off + b * r
                sh = slice(h0, h0 + s * (oh - 1) + 1, s)
                for c in range(k):
                    w0 = off + c * r
                    dxt[:, :, sd, sh, slice(w0, w0 + s * (ow - 1) + 1, s)] += dcols[t, :, a, b, c]


def _slabs(n, out_shape, per_voxel):
    """(sample slice, first plane, plane count) chunks within the columns budget."""
    od, oh, ow = out_shape
    plane = per_voxel * oh * ow
    sample = plane * od
    if sample <= _COLS_BUDGET:
        step = max(1, _COLS_BUDGET // max(sample, 1))
        for start in range(0, n, step):
            yield slice(start, min(n, start + step)), 0, od
        return
    planes = max(1, _COLS_BUDGET // max(plane, 1))
    for i in range(n):
        for z in range(0, od, planes):
            yield slice(i, i + 1), z, min(planes, od - z)


def _check_branches(x, ws, bs, specs):
    check_tensor5(x)
    ref = specs[0]
    if x.shape[1] != ref.c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, convolution expects {ref.c_in}")
    out_shape = None
    for w, b, spec in zip(ws, bs, specs):
        if (spec.k, spec.s, spec.c_in, spec.c_out) != (ref.k, ref.s, ref.c_in, ref.c_out):
            raise ShapeMismatch("parallel convolutions must share kernel, stride and channels")
        k = spec.k
        if w.shape != (spec.c_out, spec.c_in, k, k, k):
            raise ShapeMismatch(f"weight shape {w.shape} does not match {spec}")
        if b.shape != (spec.c_out,):
            raise ShapeMismatch(f"bias shape {b.shape} does not match {spec.c_out} outputs")
        shape = tuple(conv_out_size(e, spec) for e in x.shape[2:])
        if out_shape is not None and shape != out_shape:
            raise ShapeMismatch(f"parallel branch output {shape} differs from {out_shape}")
        out_shape = shape
    return out_shape


def conv3d_sum(x: Tensor5, ws, bs, specs):
    """Sum of parallel convolutions of one input, lowered jointly.

    All branches share kernel size, stride and channel counts; each has its
    own dilation rate and padding, and all must produce the same output
    shape.  With a single branch this is a plain (dilated) convolution.
    """
    specs = list(specs)
    out_shape = _check_branches(x, ws, bs, specs)
    pmax = max(sp.p for sp in specs)
    taps = [(pmax - sp.p, sp.r) for sp in specs]
    k, s = specs[0].k, specs[0].s
    xp = _pad(x, pmax)
    wf = np.concatenate([w.reshape(w.shape[0], -1) for w in ws], axis=1)
    co = wf.shape[0]
    n = x.shape[0]
    out = np.empty((n, co) + out_shape, dtype=x.dtype)
    kd_max = max(sp.kd for sp in specs)
    for sl, z0, nz in _slabs(n, out_shape, wf.shape[1]):
        xs = xp[sl, :, z0 * s:(z0 + nz - 1) * s + kd_max + max(o for o, _ in taps)]
        cols = _im2col(xs, k, s, taps, (nz,) + out_shape[1:])
        y = (wf @ cols).reshape((co, -1, nz) + out_shape[1:])
        out[sl, :, z0:z0 + nz] = y.transpose(1, 0, 2, 3, 4)
    out += sum(bs).reshape(1, -1, 1, 1, 1)
    cache = (x.shape, xp, [w.shape for w in ws], wf, taps, k, s, pmax, kd_max, out_shape)
    return audit("conv3d", out), cache


def conv3d_sum_backward(dy: Tensor5, cache, input_grad: bool = True):
    """Returns (dx, [dw per branch], [db per branch]); dx is None without ``input_grad``."""
    x_shape, xp, w_shapes, wf, taps, k, s, pmax, kd_max, out_shape = cache
    n, co = x_shape[0], wf.shape[0]
    if dy.shape != (n, co) + tuple(out_shape):
        raise ShapeMismatch(f"output gradient shape {dy.shape} does not match forward output")
    db = dy.sum(axis=(0, 2, 3, 4))
    dw = np.zeros_like(wf)
    # stride-1 input gradient is a full correlation with flipped kernels
    transposed = input_grad and s == 1 and all(o >= 0 for o, _ in taps)
    scatter = input_grad and not transposed
    dxp = np.zeros_like(xp) if scatter else None
    reach = kd_max + max(o for o, _ in taps)
    for sl, z0, nz in _slabs(n, out_shape, wf.shape[1]):
        zs = slice(z0 * s, (z0 + nz - 1) * s + reach)
        cols = _im2col(xp[sl, :, zs], k, s, taps, (nz,) + out_shape[1:])
        dyf = dy[sl, :, z0:z0 + nz].transpose(1, 0, 2, 3, 4).reshape(co, -1)
        dw += dyf @ cols.T
        if scatter:
            dcols = _buffer("dcols", cols.size, cols.dtype).reshape(cols.shape)
            np.matmul(wf.T, dyf, out=dcols)
            _col2im(dcols, dxp[sl, :, zs], k, s, taps, (nz,) + out_shape[1:])
    dx = None
    if transposed:
        ci = x_shape[1]
        flipped, specs = [], []
        per = wf.shape[1] // len(w_shapes)
        for i, (off, r) in enumerate(taps):
            w = wf[:, i * per:(i + 1) * per].reshape(co, ci, k, k, k)
            flipped.append(np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)))
            kd = dilated_kernel_size(k, r)
            specs.append(ConvSpec(k, co, ci, 1, kd - 1 - (pmax - off), r))
        zero = np.zeros(ci, dtype=dy.dtype)
        dx, _ = conv3d_sum(np.ascontiguousarray(dy), flipped, [zero] * len(taps), specs)
        dx = audit("conv3d_backward", dx)
    elif scatter:
        p = pmax
        d, h, w = x_shape[2:]
        dx = audit("conv3d_backward", np.ascontiguousarray(dxp[:, :, p:p + d, p:p + h, p:p + w]))
    per = wf.shape[1] // len(w_shapes)
    dws = [dw[:, i * per:(i + 1) * per].reshape(shape) for i, shape in enumerate(w_shapes)]
    return dx, dws, [db] * len(w_shapes)


def conv3d(x: Tensor5, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """Dilated, strided, zero-padded 3D cross-correlation."""
    return conv3d_sum(x, [w], [b], [spec])


def conv3d_backward(dy: Tensor5, cache, input_grad: bool = True):
    """Returns (dx, dw, db); dx is None when ``input_grad`` is false."""
    dx, dws, dbs = conv3d_sum_backward(dy, cache, input_grad)
    return dx, dws[0], dbs[0]


def batch_norm(x: Tensor5, gamma, beta, running_mean, running_var, train: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization over (n, d, h, w).

    In train mode the running statistics are updated in place.
    """
    check_tensor5(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeMismatch(f"batch norm {name} has shape {arr.shape}, expected ({c},)")
    axes = (0, 2, 3, 4)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // c
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    shape = (1, c, 1, 1, 1)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return audit("batch_norm", y), (xhat, inv, gamma, train)


def batch_norm_backward(dy: Tensor5, cache):
    xhat, inv, gamma, train = cache
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if train:
        dx = (dxhat - dxhat.mean(axis=axes).reshape(shape)
              - xhat * (dxhat * xhat).mean(axis=axes).reshape(shape))
        dx *= inv.reshape(shape)
    else:
        dx = dxhat * inv.reshape(shape)
    return audit("batch_norm_backward", dx), dgamma, dbeta


def prelu(x: Tensor5, slopes: np.ndarray):
    check_tensor5(x)
    if slopes.shape != (x.shape[1],):
        raise ShapeMismatch(f"{slopes.shape[0] if slopes.ndim else 0} slopes for {x.shape[1]} channels")
    neg = x < 0
    y = np.where(neg, x * slopes.reshape(1, -1, 1, 1, 1).astype(x.dtype), x)
    return audit("prelu", y), (x, neg, slopes)


def prelu_backward(dy: Tensor5, cache):
    x, neg, slopes = cache
    a = slopes.reshape(1, -1, 1, 1, 1).astype(dy.dtype)
    dx = np.where(neg, dy * a, dy)
    dslopes = np.where(neg, dy * x, 0).sum(axis=(0, 2, 3, 4))
    return dx, dslopes


def concat_channels(inputs):
    if not inputs:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    ref = inputs[0].shape
    for t in inputs:
        check_tensor5(t)
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeMismatch(f"cannot concatenate shapes {ref} and {t.shape}")
    sizes = [t.shape[1] for t in inputs]
    return np.concatenate(inputs, axis=1), sizes


def concat_channels_backward(dy: Tensor5, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)


def _edges(target, ndim=3):
    if np.isscalar(target):
        return (int(target),) * ndim
    return tuple(int(t) for t in target)


def center_crop(x: Tensor5, target):
    """Centered sub-block with spatial edge(s) ``target``."""
    check_tensor5(x)
    edges = _edges(target)
    starts = []
    for src, dst in zip(x.shape[2:], edges):
        if dst > src or dst < 1:
            raise ShapeMismatch(f"cannot crop edge {src} to {dst}")
        if (src - dst) % 2:
            raise ParityMismatch(f"no centered crop from {src} to {dst}")
        starts.append((src - dst) // 2)
    sl = tuple(slice(s, s + e) for s, e in zip(starts, edges))
    return x[(slice(None), slice(None)) + sl], (x.shape, sl)


def center_crop_backward(dy: Tensor5, cache):
    src_shape, sl = cache
    dx = np.zeros(src_shape, dtype=dy.dtype)
    dx[(slice(None), slice(None)) + sl] = dy
    return dx


def elementwise_sum(inputs):
    if not inputs:
        raise ShapeMismatch("elementwise_sum needs at least one tensor")
    out = inputs[0].copy()
    for t in inputs[1:]:
        if t.shape != out.shape:
            raise ShapeMismatch(f"cannot sum shapes {out.shape} and {t.shape}")
        out += t
    return out, len(inputs)


def elementwise_sum_backward(dy: Tensor5, count: int):
    return [dy] * count


def softmax(logits: Tensor5) -> Tensor5:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor5, targets: np.ndarray):
    """Mean voxel-wise cross-entropy; targets have shape (n, d, h, w)."""
    check_tensor5(logits)
    n, classes = logits.shape[:2]
    if targets.shape != (n,) + logits.shape[2:]:
        raise ShapeMismatch(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, targets[:, None].astype(np.intp), axis=1)[:, 0]
    loss = float((lse - picked).mean())
    return loss, (z, lse, targets)


def softmax_cross_entropy_backward(cache, dloss: float = 1.0):
    z, lse, targets = cache
    p = np.exp(z - lse[:, None])
    np.put_along_axis(p, targets[:, None].astype(np.intp),
                      np.take_along_axis(p, targets[:, None].astype(np.intp), axis=1) - 1, axis=1)
    count = targets.size
    return p * (dloss / count)
