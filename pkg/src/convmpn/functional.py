"""Differentiable layer primitives on :class:`~convmpn.tensor.Tensor`.

Convolution uses an im2col lowering so the heavy lifting is a single BLAS
matrix product per call. The input gradient of a stride-1 convolution is
itself a correlation (flipped, channel-transposed kernel); strided layers
scatter column gradients back tap by tap in a fixed order. Neither path
depends on thread count for its summation order outside BLAS.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, is_grad_enabled

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _channels_last(a: np.ndarray) -> np.ndarray:
    """(N,C,H,W) logical array -> contiguous (N,H,W,C) buffer (free when already channels-last)."""
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded channels-last input (N,Hp,Wp,C) -> (N*Ho*Wo, kh*kw*C) columns."""
    n, hp, wp, c = xh.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c), ho, wo


def _pad_hw(xh: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if not (top or bottom or left or right):
        return xh
    return np.pad(xh, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _wmat(weight: np.ndarray) -> np.ndarray:
    """(O,C,kh,kw) -> (O, kh*kw*C) matching the column layout."""
    o = weight.shape[0]
    return np.ascontiguousarray(weight.transpose(0, 2, 3, 1)).reshape(o, -1)


def _correlate(xh: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int):
    """Valid correlation of padded channels-last input.

    Returns the output as a logical (N,O,Ho,Wo) view over channels-last memory,
    plus the column matrix for reuse in the weight gradient.
    """
    n = xh.shape[0]
    cols, ho, wo = _im2col(xh, kh, kw, stride)
    out = cols @ wmat.T
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), cols


def _input_grad(g: np.ndarray, weight: np.ndarray, stride: int, padding: int, h: int, w: int) -> np.ndarray:
    """Gradient w.r.t. the conv input (logical NCHW result)."""
    n, o, ho, wo = g.shape
    c, kh, kw = weight.shape[1:]
    gh = _channels_last(g)
    if stride > 1:
        # strided layers: scatter column gradients tap by tap (fixed order)
        dcols = (gh.reshape(-1, o) @ _wmat(weight)).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros((n, h + 2 * padding + stride, w + 2 * padding + stride, c), dtype=g.dtype)
        he = (ho - 1) * stride + 1
        we = (wo - 1) * stride + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + he : stride, j : j + we : stride, :] += dcols[:, :, :, i, j, :]
        return dxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
    # stride 1: correlation of the padded gradient with the flipped, channel-transposed kernel
    ph, pw = kh - 1 - padding, kw - 1 - padding
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d backward: padding {padding} exceeds kernel {weight.shape}")
    extra_h = h - (ho + 2 * ph - kh + 1)
    extra_w = w - (wo + 2 * pw - kw + 1)
    gp = _pad_hw(gh, ph, ph + extra_h, pw, pw + extra_w)
    wrot = _wmat(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx, _ = _correlate(gp, wrot, kh, kw, 1)
    return gx


def _check_conv(x: Tensor, weight: Tensor, bias, stride: int, padding: int) -> None:
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, kH, kW), got {weight.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    c, h, w = x.shape[-3:]
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} does not fit input {x.shape} with padding {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (C,H,W) or (N,C,H,W) input.

    Outputs are logical NCHW arrays backed by channels-last memory, which is
    what the next convolution wants to read.
    """
    _check_conv(x, weight, bias, stride, padding)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    o, _, kh, kw = weight.shape

    xh = _pad_hw(_channels_last(xd), padding, padding, padding, padding)
    out, cols = _correlate(xh, _wmat(weight.data), kh, kw, stride)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    if single:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not (is_grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor._from_op(out, parents, None, "conv2d")
    if not weight.requires_grad:
        cols = None

    def backward(g):
        gd = g[None] if single else g
        gw = gb = gx = None
        if weight.requires_grad:
            gmat = _channels_last(gd).reshape(-1, o)
            gw = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gd.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = _input_grad(gd, weight.data, stride, padding, h, w)
            if single:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward, "conv2d")


def conv2d_shared(image: np.ndarray, extra: np.ndarray, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """``conv2d`` of ``concat(image broadcast over N, extra)`` without materializing the concat.

    ``image`` is a constant (C1,H,W) array shared by every batch row and
    ``extra`` a constant (N,C2,H,W) array. Convolution is linear in its input
    channels, so the shared part is computed once and added to each row.
    """
    n, c2, h, w = extra.shape
    c1 = image.shape[0]
    o, ci, kh, kw = weight.shape
    if ci != c1 + c2 or image.shape[1:] != (h, w):
        raise ShapeError(f"conv2d_shared: image {image.shape} + extra {extra.shape} vs weight {weight.shape}")
    wd = weight.data
    ih = _pad_hw(_channels_last(image[None].astype(wd.dtype)), padding, padding, padding, padding)
    eh = _pad_hw(_channels_last(extra.astype(wd.dtype)), padding, padding, padding, padding)
    shared, cols_i = _correlate(ih, _wmat(wd[:, :c1]), kh, kw, stride)
    per_row, cols_e = _correlate(eh, _wmat(wd[:, c1:]), kh, kw, stride)
    out = per_row + shared
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gh = _channels_last(g)
        gw = np.empty_like(wd)
        gi = gh.sum(axis=0).reshape(-1, o)
        gw[:, :c1] = (gi.T @ cols_i).reshape(o, kh, kw, c1).transpose(0, 3, 1, 2)
        gw[:, c1:] = (gh.reshape(-1, o).T @ cols_e).reshape(o, kh, kw, c2).transpose(0, 3, 1, 2)
        if bias is None:
            return (gw,)
        return gw, g.sum(axis=(0, 2, 3))

    parents = (weight,) if bias is None else (weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d_shared")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map (N, D_in) -> (N, D_out) with weight (D_out, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return Tensor._from_op(out, (x,), lambda g: (g * (xd > 0),), "relu")


def _rows(a: np.ndarray) -> np.ndarray:
    """(N,C) or logical (N,C,H,W) -> (M, C) rows, channels-last."""
    if a.ndim == 2:
        return a
    return _channels_last(a).reshape(-1, a.shape[1])


def _unrows(r: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 2:
        return r
    n, c, h, w = shape
    return r.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of (N,C) or (N,C,H,W) input.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as is conventional).
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: input must be (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} do not match input {x.shape}")
    xd = _rows(x.data)
    m = xd.shape[0]
    if m == 0:
        raise ShapeError(f"batch_norm: empty channel slab in input {x.shape}")
    # fold k rows into one so elementwise work runs over rows of width k*c
    k = next(k for k in range(max(64 // c, 1), 0, -1) if m % k == 0)
    xw = xd.reshape(m // k, k * c)
    ones = np.ones(m // k, dtype=xd.dtype)

    def colsum(a):
        return (ones @ a).reshape(k, c).sum(axis=0)

    def wide(v):
        return np.tile(v.astype(xd.dtype, copy=False), k)

    if training:
        mean = colsum(xw) / m
        centered = xw - wide(mean)
        var = colsum(centered * centered) / m
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        var = running_var.astype(xd.dtype)
        centered = xw - wide(running_mean)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * wide(inv_std)
    gd = gamma.data
    out = _unrows((xhat * wide(gd) + wide(beta.data)).reshape(m, c), x.shape)

    def backward(g):
        gr = _rows(g).reshape(m // k, k * c)
        ggamma = colsum(gr * xhat)
        gbeta = colsum(gr)
        gx = None
        if x.requires_grad:
            if training:
                # batch statistics depend on x too; their contribution is folded in here
                gx = wide(gd * inv_std / m) * (m * gr - wide(gbeta) - xhat * wide(ggamma))
            else:
                gx = gr * wide(gd * inv_std)
            gx = _unrows(gx.reshape(m, c), x.shape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Window maximum over the last two axes; no padding.

    Gradients flow to the first maximal element of each window in row-major
    order.
    """
    stride = window if stride is None else stride
    if x.ndim < 3:
        raise ShapeError(f"max_pool2d: input needs (..., H, W) with a channel axis, got {x.shape}")
    h, w = x.shape[-2:]
    if window < 1 or stride < 1 or h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ShapeError(f"max_pool2d: input {x.shape} not divisible by window {window} / stride {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    lead = x.shape[:-2]
    xd = x.data.reshape((-1, h, w))
    win = sliding_window_view(xd, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(xd.shape[0], ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].reshape(lead + (ho, wo))

    def backward(g):
        gd = g.reshape(-1, ho, wo)
        dr, dc = np.divmod(arg, window)
        rows = np.arange(ho)[None, :, None] * stride + dr
        cols = np.arange(wo)[None, None, :] * stride + dc
        b = np.broadcast_to(np.arange(xd.shape[0])[:, None, None], arg.shape)
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        if stride >= window:
            gx[b, rows, cols] = gd
        else:
            np.add.at(gx, (b, rows, cols), gd)
        return (gx.reshape(x.shape),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 (channels for (N,C,...) tensors)."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one input")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)), "concat_channels")


def neighbor_pool(x: Tensor, neighbors: Sequence[Sequence[int]], mode: str = "max") -> Tensor:
    """Pool rows of ``x`` over each node's neighbor list.

    ``x`` has shape (N, ...); ``neighbors[v]`` lists row indices (duplicates
    allowed). Nodes with an empty list receive zeros. Neighbor lists are
    visited in sorted order so sum/mean reductions do not depend on list order.
    """
    n = x.shape[0]
    if len(neighbors) != n:
        raise ShapeError(f"neighbor_pool: {len(neighbors)} neighbor lists for {n} rows")
    if mode not in ("max", "sum", "mean"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    deg = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    feat = x.shape[1:]
    xd = x.data
    out = np.zeros(x.shape, dtype=xd.dtype)
    dmax = int(deg.max()) if n else 0
    if dmax == 0:
        return Tensor._from_op(out, (x,), lambda g: (np.zeros_like(xd),), "neighbor_pool")
    idx = np.zeros((n, dmax), dtype=np.int64)
    valid = np.zeros((n, dmax), dtype=bool)
    for v, nb in enumerate(neighbors):
        if len(nb):
            s = np.sort(np.asarray(nb, dtype=np.int64))
            if s[0] < 0 or s[-1] >= n:
                raise IndexError(f"neighbor_pool: neighbor index out of range for node {v}")
            idx[v, : len(s)] = s
            valid[v, : len(s)] = True
    gathered = xd[idx]  # (N, D, ...)
    vmask = valid.reshape((n, dmax) + (1,) * len(feat))
    has = deg > 0
    if mode == "max":
        filled = np.where(vmask, gathered, -np.inf)
        arg = filled.argmax(axis=1)
        best = np.take_along_axis(filled, arg[:, None], axis=1)[:, 0]
        out[has] = best[has]
    else:
        total = np.where(vmask, gathered, 0).sum(axis=1)
        if mode == "mean":
            total = total / np.maximum(deg, 1).reshape((n,) + (1,) * len(feat)).astype(xd.dtype)
        out[has] = total[has]
    del gathered

    def backward(g):
        gx = np.zeros(xd.shape, dtype=xd.dtype)  # C order: the reshape below must be a view
        if mode == "max":
            src = np.take_along_axis(idx, arg.reshape(n, -1), axis=1).reshape(arg.shape)
            gflat = g.reshape(n, -1)
            sflat = src.reshape(n, -1)
            cols = np.broadcast_to(np.arange(gflat.shape[1]), sflat.shape)
            gm = np.where(has[:, None], gflat, 0)
            np.add.at(gx.reshape(n, -1), (sflat, cols), gm)
        else:
            rows = np.repeat(np.arange(n), deg)
            contrib = g[rows]
            if mode == "mean":
                contrib = contrib / deg[rows].reshape((-1,) + (1,) * len(feat)).astype(xd.dtype)
            np.add.at(gx, idx[valid], contrib)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "neighbor_pool")


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data), dtype=x.dtype)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward, "softmax")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor._from_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(weights * x)`` for a constant weight array of x's shape."""
    wd = np.asarray(weights, dtype=x.dtype)
    if wd.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {wd.shape} vs input {x.shape}")
    return Tensor._from_op(np.asarray((x.data * wd).sum(), dtype=x.dtype), (x,), lambda g: (g * wd,), "weighted_sum")
