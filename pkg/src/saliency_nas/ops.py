"""Differentiable operators used by the supernet.

Convolutions are cross-correlations on NCHW data. Dense convolutions use an
im2col matrix product; depthwise convolutions accumulate one kernel tap at a
time in a fixed (row, column) order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, make_node


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: Tensor, w: Tensor, bias, stride: int, padding: int, groups: int):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (B, C, H, W), got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (Cout, Cin/groups, K, K), got rank {w.ndim}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"invalid stride={stride}, padding={padding}, groups={groups}")
    _, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if cin % groups:
        raise ShapeError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ShapeError(f"weight input-channel dim is {cg}, expected Cin/groups = {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match output channels {cout}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"kernel {kh} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Ho, Wo, K, K) strided view over a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    _check_conv(x, weight, bias, stride, padding, groups)
    b, cin, h, wd = x.shape
    cout, cg, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xd, wdata = x.data, weight.data
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xd, pad) if padding else xd

    depthwise = groups == cin and cg == 1 and cout == cin
    pointwise = k == 1 and stride == 1 and padding == 0 and groups == 1

    if pointwise:
        out = np.matmul(wdata.reshape(cout, cin), xd.reshape(b, cin, h * wd)).reshape(b, cout, ho, wo)
        cols = None
    elif depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                tap = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                out += tap * wdata[:, 0, i, j][None, :, None, None]
        cols = None
    else:
        win = _windows(xp, k, stride, ho, wo)  # B, C, Ho, Wo, K, K
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, groups, cg * k * k, ho * wo)
        wmat = wdata.reshape(groups, cout // groups, cg * k * k)
        out = np.matmul(wmat[None], cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            g2 = g.reshape(b, cout, ho * wo)
            if weight.requires_grad:
                gw = np.einsum("bol,bcl->oc", g2, xd.reshape(b, cin, h * wd)).reshape(weight.shape)
            if x.requires_grad:
                gx = np.matmul(wdata.reshape(cout, cin).T, g2).reshape(x.shape)
        elif depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wdata)
            gxp = np.zeros_like(xp) if x.requires_grad else None
            for i in range(k):
                for j in range(k):
                    sl = (slice(None), slice(None),
                          slice(i, i + stride * (ho - 1) + 1, stride),
                          slice(j, j + stride * (wo - 1) + 1, stride))
                    if gw is not None:
                        gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                    if gxp is not None:
                        gxp[sl] += g * wdata[:, 0, i, j][None, :, None, None]
            if gxp is not None:
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        else:
            g2 = g.reshape(b, groups, cout // groups, ho * wo)
            wmat = wdata.reshape(groups, cout // groups, cg * k * k)
            if weight.requires_grad:
                gw = np.einsum("bgol,bgcl->goc", g2, cols).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.matmul(wmat.transpose(0, 2, 1)[None], g2)  # B, G, cg*k*k, L
                gcols = gcols.reshape(b, cin, k, k, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                            j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _bw)


def bilinear_matrix(n_in: int, factor: int, n_out: int | None = None, dtype=np.float64) -> np.ndarray:
    """Row-stochastic interpolation matrix, half-pixel centres (align_corners=False).

    Output coordinate ``o`` samples source position ``(o + 0.5) / factor - 0.5``
    clamped at the borders. ``n_out`` crops the ``factor * n_in`` rows.
    """
    n_full = factor * n_in
    n_out = n_full if n_out is None else n_out
    if n_out > n_full:
        raise ShapeError(f"crop size {n_out} exceeds upsampled size {n_full}")
    mat = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        mat[o, i0] += 1.0 - lam
        mat[o, i1] += lam
    return mat


def bilinear_upsample(x: Tensor, factor: int, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear ``factor``-times upsampling, optionally cropped to ``size``."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects 4-D input, got rank {x.ndim}")
    b, c, h, w = x.shape
    ho, wo = size if size is not None else (factor * h, factor * w)
    uh = bilinear_matrix(h, factor, ho, x.dtype)
    uw = bilinear_matrix(w, factor, wo, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make_node(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * mask,))


def hswish(x: Tensor) -> Tensor:
    d = x.data
    gate = np.clip(d + 3.0, 0.0, 6.0) / 6.0
    out = d * gate

    def _bw(g):
        inner = (d > -3.0) & (d < 3.0)
        return (g * (gate + d * inner / 6.0),)

    return make_node(out.astype(x.dtype), (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


ACTIVATIONS = {"relu": relu, "hswish": hswish, "sigmoid": sigmoid}


def elementwise(kind: str, x: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got rank {x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode the running buffers are updated in place, so slices of a
    shared buffer write through. The running variance uses the unbiased
    estimator; normalization uses the biased one.
    """
    b, c, h, w = x.shape
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm running stats must have shape ({c},)")
    xd = x.data
    if training:
        m = b * h * w
        if m < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel (B*H*W >= 2)")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = (xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]).astype(x.dtype)

    def _bw(g):
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * weight.data[None, :, None, None]
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gw, gb

    return make_node(out, (x, weight, bias), _bw)
