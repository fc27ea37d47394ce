"""Structured NCHW ops: convolution, batch norm, resize, pooling, concat.

Convolution runs as im2col + one GEMM per group; the column layout keeps each
channel's k*k block contiguous so group slices are plain column ranges.
Backward uses the transposed GEMMs plus a k*k strided scatter (col2im).
All reduction orders are fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericsError, ShapeError, Tensor, make_op


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with OIkk weights."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OIkk, got shape {weight.shape}")
    n, c_in, h, w = x.data.shape
    c_out, c_in_g, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    if c_in % groups != 0:
        raise ShapeError(
            f"conv2d: input channels ({c_in}) not divisible by groups ({groups})"
        )
    if c_out % groups != 0:
        raise ShapeError(
            f"conv2d: output channels ({c_out}) not divisible by groups ({groups})"
        )
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv2d: weight in-channel dim ({c_in_g}) != input channels/groups "
            f"({c_in // groups})"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} != ({c_out},)"
        )
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: kernel {k} with padding {padding} does not fit input "
            f"{h}x{w}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows iterate (c, ki, kj) so group slices are contiguous row ranges and
    # the copy walks memory along the contiguous w_out axis
    m = n * h_out * w_out
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c_in * k * k, m
    )

    cg = c_in // groups
    og = c_out // groups
    w_mat = weight.data.reshape(c_out, cg * k * k)
    out_mat = np.empty((c_out, m), dtype=np.float32)
    for g in range(groups):
        out_mat[g * og : (g + 1) * og] = (
            w_mat[g * og : (g + 1) * og] @ cols[g * cg * k * k : (g + 1) * cg * k * k]
        )
    out = np.ascontiguousarray(out_mat.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(gout):
        g_mat = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(c_out, m)
        dw = np.empty_like(w_mat)
        dcols = np.empty_like(cols)
        for g in range(groups):
            gs = g_mat[g * og : (g + 1) * og]
            dw[g * og : (g + 1) * og] = gs @ cols[g * cg * k * k : (g + 1) * cg * k * k].T
            dcols[g * cg * k * k : (g + 1) * cg * k * k] = (
                w_mat[g * og : (g + 1) * og].T @ gs
            )
        dwin = dcols.reshape(c_in, k, k, n, h_out, w_out)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[
                    :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
                ] += dwin[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw.reshape(weight.data.shape)]
        if bias is not None:
            grads.append(g_mat.sum(axis=1, dtype=np.float64).astype(np.float32))
        return tuple(grads)

    return make_op(out, parents, backward, "conv2d")


class BatchNormState:
    """Per-channel running statistics plus the learnable affine pair.

    Buffers update only in train mode: new = (1 - momentum) * old +
    momentum * batch_stat, with the biased batch variance.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"batch norm momentum must be in (0, 1], got {momentum}")
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def copy_buffers_from(self, other: "BatchNormState") -> None:
        self.running_mean = other.running_mean.copy()
        self.running_var = other.running_var.copy()


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if c != state.channels:
        raise ShapeError(
            f"batch_norm: channel count {c} != state channels {state.channels}"
        )
    gamma, beta = state.gamma, state.beta
    gshape = (1, c, 1, 1)

    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if not np.all(np.isfinite(var)):
            raise NumericsError("batch_norm: non-finite batch variance")
        rho = state.momentum
        state.running_mean = ((1.0 - rho) * state.running_mean + rho * mu).astype(
            np.float32
        )
        state.running_var = ((1.0 - rho) * state.running_var + rho * var).astype(
            np.float32
        )
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(gshape)) * inv_std.reshape(gshape)
        out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
        m = n * h * w

        def backward(g):
            dxhat = g * gamma.data.reshape(gshape)
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (
                (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)
                * inv_std.reshape(gshape)
            ).astype(np.float32)
            dgamma = (g * xhat).sum(axis=(0, 2, 3)).astype(np.float32)
            dbeta = g.sum(axis=(0, 2, 3)).astype(np.float32)
            return dx, dgamma, dbeta

        return make_op(out.astype(np.float32), (x, gamma, beta), backward, "batch_norm")

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(gshape)) * inv_std.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward_eval(g):
        dx = (g * (gamma.data * inv_std).reshape(gshape)).astype(np.float32)
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).astype(np.float32)
        dbeta = g.sum(axis=(0, 2, 3)).astype(np.float32)
        return dx, dgamma, dbeta

    return make_op(out.astype(np.float32), (x, gamma, beta), backward_eval, "batch_norm")


_INTERP_CACHE: dict[Tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix, align-corners=false."""
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    _INTERP_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected NCHW, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output dims must be >= 1, got {out_h}x{out_w}")
    _, _, h, w = x.data.shape
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw).astype(np.float32),)

    return make_op(out, (x,), backward, "bilinear_resize")


def _boxsum3(a: np.ndarray) -> np.ndarray:
    """3x3 same-size box sum with zero padding (separable)."""
    ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s = ap[:, :, :-2, :] + ap[:, :, 1:-1, :] + ap[:, :, 2:, :]
    return s[:, :, :, :-2] + s[:, :, :, 1:-1] + s[:, :, :, 2:]


_COUNT_CACHE: dict[Tuple[int, int], np.ndarray] = {}


def _neighbor_counts(h: int, w: int) -> np.ndarray:
    key = (h, w)
    cached = _COUNT_CACHE.get(key)
    if cached is None:
        ones = np.ones((1, 1, h, w), dtype=np.float32)
        cached = _boxsum3(ones)
        _COUNT_CACHE[key] = cached
    return cached


def avg_pool_3x3_same(x: Tensor) -> Tensor:
    """Stride-1 3x3 mean pool; border cells average their in-bounds neighbors."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool_3x3_same: expected NCHW, got shape {x.shape}")
    _, _, h, w = x.data.shape
    cnt = _neighbor_counts(h, w)
    out = _boxsum3(x.data) / cnt

    def backward(g):
        return (_boxsum3(g / cnt).astype(np.float32),)

    return make_op(out.astype(np.float32), (x,), backward, "avg_pool_3x3_same")


def concat_channels(parts: List[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    base = parts[0].data.shape
    for i, p in enumerate(parts):
        if p.data.ndim != 4:
            raise ShapeError(f"concat_channels: part {i} must be NCHW, got {p.shape}")
        if (p.data.shape[0],) + p.data.shape[2:] != (base[0],) + base[2:]:
            raise ShapeError(
                f"concat_channels: part {i} shape {p.shape} mismatches {base} "
                "outside the channel dim"
            )
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts))
        )

    return make_op(
        np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward, "concat"
    )


def slice_interleave(a: Tensor, b: Tensor) -> Tensor:
    """Channel interleave [a0, b0, a1, b1, ...] of two NCHW tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"slice_interleave: shapes {a.shape} and {b.shape} must match"
        )
    n, c, h, w = a.data.shape
    out = np.empty((n, 2 * c, h, w), dtype=np.float32)
    out[:, 0::2] = a.data
    out[:, 1::2] = b.data

    def backward(g):
        return g[:, 0::2], g[:, 1::2]

    return make_op(out, (a, b), backward, "slice_interleave")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Differentiable slice along the channel axis of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels: expected NCHW, got shape {x.shape}")
    c = x.data.shape[1]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) out of bounds for C={c}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_op(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Differentiable slice along the batch axis."""
    if x.data.ndim != 4:
        raise ShapeError(f"slice_batch: expected NCHW, got shape {x.shape}")
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_batch: range [{start}, {stop}) out of bounds for N={n}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return make_op(x.data[start:stop].copy(), (x,), backward, "slice_batch")


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    pixel_weight: np.ndarray,
    denom: float,
) -> Tensor:
    """Weighted pixel-wise cross-entropy from raw NCHW logits.

    ``targets`` holds class indices (N,H,W); ``pixel_weight`` is a constant
    (N,H,W) weight map (zeros drop pixels). The per-pixel NLL values are
    accumulated in float64 and divided by ``denom``.
    """
    if logits.data.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: expected NCHW logits, got {logits.shape}")
    n, c, h, w = logits.data.shape
    if targets.shape != (n, h, w):
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {targets.shape} != {(n, h, w)}"
        )
    if pixel_weight.shape != (n, h, w):
        raise ShapeError(
            f"softmax_cross_entropy: weight shape {pixel_weight.shape} != {(n, h, w)}"
        )
    t = targets.astype(np.int64)
    if t.min() < 0 or t.max() >= c:
        raise ShapeError(
            f"softmax_cross_entropy: target index out of range [0, {c})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    sum_e = e.sum(axis=1)
    z_t = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    nll = np.log(sum_e) - z_t
    loss = np.float32((nll * pixel_weight).sum(dtype=np.float64) / denom)

    def backward(g):
        p = e / sum_e[:, None]
        scale = (pixel_weight / denom * g.reshape(-1)[0]).astype(np.float32)
        d = p * scale[:, None]
        np.subtract.at(
            d,
            (
                np.arange(n)[:, None, None],
                t,
                np.arange(h)[None, :, None],
                np.arange(w)[None, None, :],
            ),
            scale,
        )
        return (d.astype(np.float32),)

    return make_op(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")
