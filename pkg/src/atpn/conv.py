"""Convolution, transposed convolution and batch normalisation primitives (NCHW)."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DegenerateBatchError, InvalidShapeError, Tensor, _make, record_macs


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (output size, pad before, pad after); odd totals put the extra cell after."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pads(h, w, kh, kw, stride, padding):
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise InvalidShapeError(f"valid conv: input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _win(kh_i, kw_j, ho, wo, stride):
    return (
        slice(kh_i, kh_i + stride * (ho - 1) + 1, stride),
        slice(kw_j, kw_j + stride * (wo - 1) + 1, stride),
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation; ``weight`` is [out, in/groups, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg != c // groups:
        raise InvalidShapeError(
            f"conv2d channel/group mismatch: in={c}, out={o}, weight in/group={cg}, groups={groups}"
        )
    if bias is not None and bias.shape != (o,):
        raise InvalidShapeError(f"conv2d bias {bias.shape} for {o} output channels")
    if stride < 1:
        raise InvalidShapeError("stride must be >= 1")
    ho, wo, (pt, pb, pl, pr) = _pads(h, w, kh, kw, stride, padding)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    hp, wp = xp.shape[2], xp.shape[3]
    record_macs(n * o * ho * wo * cg * kh * kw)

    depthwise = groups == c and cg == 1 and o == c
    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                si, sj = _win(i, j, ho, wo, stride)
                out += xp[:, :, si, sj] * wd[:, 0, i, j][None, :, None, None]
        cols = None
    elif kh == 1 and kw == 1 and stride == 1 and groups == 1:
        cols = xp.reshape(n, c, hp * wp)
        out = np.matmul(wd.reshape(o, c), cols).reshape(n, o, ho, wo)
    else:
        og = o // groups
        cols = np.empty((n, groups, cg, kh, kw, ho, wo), dtype=xd.dtype)
        xg = xp.reshape(n, groups, cg, hp, wp)
        for i in range(kh):
            for j in range(kw):
                si, sj = _win(i, j, ho, wo, stride)
                cols[:, :, :, i, j] = xg[:, :, :, si, sj]
        cols = cols.reshape(n, groups, cg * kh * kw, ho * wo)
        wg = wd.reshape(groups, og, cg * kh * kw)
        out = np.matmul(wg[None], cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gw = None
        gx = None
        if depthwise:
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _win(i, j, ho, wo, stride)
                    gxp[:, :, si, sj] += g * wd[:, 0, i, j][None, :, None, None]
                    gw[:, 0, i, j] = (g * xp[:, :, si, sj]).sum(axis=(0, 2, 3))
        elif kh == 1 and kw == 1 and stride == 1 and groups == 1:
            g2 = g.reshape(n, o, ho * wo)
            w2 = wd.reshape(o, c)
            gw = np.einsum("nop,ncp->oc", g2, cols, optimize=True).reshape(wd.shape)
            gxp = np.matmul(w2.T, g2).reshape(n, c, hp, wp)
        else:
            og = o // groups
            g2 = g.reshape(n, groups, og, ho * wo)
            wg = wd.reshape(groups, og, cg * kh * kw)
            gw = np.matmul(g2, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(wg.transpose(0, 2, 1)[None], g2).reshape(n, groups, cg, kh, kw, ho, wo)
            gxp = np.zeros((n, groups, cg, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _win(i, j, ho, wo, stride)
                    gxp[:, :, :, si, sj] += gcols[:, :, :, i, j]
            gxp = gxp.reshape(n, c, hp, wp)
        gx = gxp[:, :, pt : pt + h, pl : pl + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of a valid, unpadded conv2d sharing ``weight`` ([in, out, k, k]).

    Output extent is (in - 1) * stride + k, so kernel 2 / stride 2 doubles it.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"conv_transpose2d: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise InvalidShapeError("stride must be >= 1")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    if bias is not None and bias.shape != (o,):
        raise InvalidShapeError(f"conv_transpose2d bias {bias.shape} for {o} output channels")
    hout, wout = (h - 1) * stride + kh, (w - 1) * stride + kw
    xd, wd = x.data, weight.data
    x2 = xd.reshape(n, c, h * w)
    record_macs(n * c * h * w * o * kh * kw)
    out = np.zeros((n, o, hout, wout), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            si, sj = _win(i, j, h, w, stride)
            out[:, :, si, sj] += np.matmul(wd[:, :, i, j].T, x2).reshape(n, o, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = np.zeros((n, c, h * w), dtype=xd.dtype)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                si, sj = _win(i, j, h, w, stride)
                gs = g[:, :, si, sj].reshape(n, o, h * w)
                gx += np.matmul(wd[:, :, i, j], gs)
                gw[:, :, i, j] = np.einsum("ncp,nop->co", x2, gs, optimize=True)
        gx = gx.reshape(n, c, h, w)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over N, H, W.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, exponential moving average).
    """
    if x.ndim != 4:
        raise InvalidShapeError(f"batch_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(f"batch_norm params {gamma.shape}/{beta.shape} for {c} channels")
    xd = x.data
    dt = xd.dtype.type
    gd = gamma.data[None, :, None, None]
    if training:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs batch >= 2, got {n}")
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + dt(eps))
        xhat = xc * invstd
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var.reshape(c) * m / max(m - 1, 1)).astype(running_var.dtype)

        def bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd
            gx = invstd / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, gg, gb

    else:
        rm = running_mean.astype(xd.dtype)[None, :, None, None]
        invstd = (1.0 / np.sqrt(running_var.astype(xd.dtype) + dt(eps)))[None, :, None, None]
        xhat = (xd - rm) * invstd

        def bw(g):
            return g * gd * invstd, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data[None, :, None, None]
    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")
