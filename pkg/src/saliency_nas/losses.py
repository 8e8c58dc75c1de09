"""Differentiable saliency losses: KLD, CC, sigmoid-scaled NSS and their sum.

All losses accept maps shaped (B, 1, H, W), (B, H, W) or (H, W), reduce per
image and return the batch mean as a scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor, log, sqrt, where_mask


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-8
    std_guard: float = 1e-8
    nss_fixated_only: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0 and self.std_guard > 0):
            raise ValueError("epsilon and std_guard must be strictly positive")


DEFAULT = LossConfig()


def _flat(x, ref: Tensor | None = None) -> Tensor:
    """View a map batch as (B, N)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=ref.dtype if ref is not None else None))
    if x.ndim == 2:
        return x.reshape(1, x.size)
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def _pair(p, g) -> tuple[Tensor, Tensor]:
    p = as_tensor(p)
    pf, gf = _flat(p), _flat(g, p)
    if pf.shape != gf.shape:
        raise ShapeError(f"map shapes differ: {np.shape(p.data)} vs {np.shape(getattr(g, 'data', g))}")
    return pf, gf


def _centre(x: Tensor) -> tuple[Tensor, Tensor]:
    """Deviation from the per-row mean and the population variance."""
    d = x - x.mean(axis=1, keepdims=True)
    return d, (d * d).mean(axis=1, keepdims=True)


def _varies(x: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Rows whose spread is not just rounding noise around a constant."""
    scale = np.abs(x).max(axis=1, keepdims=True)
    return var > (1e-6 * scale) ** 2


def kld_loss(p, g, cfg: LossConfig = DEFAULT) -> Tensor:
    """sum_i G_i log(eps + G_i / (P_i + eps)), averaged over the batch."""
    pf, gf = _pair(p, g)
    if (pf.data < 0).any() or (gf.data < 0).any():
        raise ValueError("kld_loss requires non-negative maps")
    eps = cfg.epsilon
    per_image = (gf * log(eps + gf / (pf + eps))).sum(axis=1)
    return per_image.mean()


def cc_loss(p, g, cfg: LossConfig = DEFAULT) -> Tensor:
    """1 - Pearson correlation; a constant map on either side scores 1."""
    pf, gf = _pair(p, g)
    dp, vp = _centre(pf)
    dg, vg = _centre(gf)
    cov = (dp * dg).mean(axis=1, keepdims=True)
    live = _varies(pf.data, vp.data) & _varies(gf.data, vg.data)
    den = sqrt(where_mask(live, vp * vg, 1.0))
    r = where_mask(live, cov / den, 0.0)
    return (1.0 - r).mean()


def _zscore_rows(pf: Tensor, guard: float) -> Tensor:
    d, v = _centre(pf)
    return d / (sqrt(v) + guard)


def normalize_map(p, cfg: LossConfig = DEFAULT) -> Tensor:
    """(P - mean) / (std + std_guard), per image, flattened to (B, H*W)."""
    return _zscore_rows(_flat(as_tensor(p)), cfg.std_guard)


def nss_loss(p, f, cfg: LossConfig = DEFAULT) -> Tensor:
    """1 - mean sigmoid of the normalized map at fixated pixels.

    With ``cfg.nss_fixated_only=False`` every pixel contributes
    sigmoid(P_bar_i * F_i) to the sum, still divided by the fixation count.
    """
    pf, ff = _pair(p, f)
    fd = ff.data
    if not np.isin(fd, (0, 1)).all():
        raise ValueError("fixation map must be binary")
    n = fd.sum(axis=1, keepdims=True)
    if (n < 1).any():
        raise ValueError("fixation map has no fixations")
    z = _zscore_rows(pf, cfg.std_guard)
    if cfg.nss_fixated_only:
        s = (ops.sigmoid(z) * ff).sum(axis=1, keepdims=True)
    else:
        s = ops.sigmoid(z * ff).sum(axis=1, keepdims=True)
    return (1.0 - s / n).mean()


def combined_loss(p, g, f, cfg: LossConfig = DEFAULT) -> Tensor:
    return kld_loss(p, g, cfg) + cc_loss(p, g, cfg) + nss_loss(p, f, cfg)


def loss_components(p, g, f, cfg: LossConfig = DEFAULT) -> dict[str, float]:
    return {"kld": float(kld_loss(p, g, cfg).data), "cc": float(cc_loss(p, g, cfg).data),
            "nss": float(nss_loss(p, f, cfg).data)}
