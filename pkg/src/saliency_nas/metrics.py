"""Evaluation metrics on raw prediction maps (NumPy, float64)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

METRIC_KEYS = ("cc", "kld", "nss", "sim", "auc")


def _as_map(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64).reshape(-1)


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    pa, ga = np.asarray(getattr(p, "data", p)), np.asarray(getattr(g, "data", g))
    if pa.size != ga.size or (pa.squeeze().shape != ga.squeeze().shape):
        raise ValueError(f"map shapes differ: {pa.shape} vs {ga.shape}")
    return _as_map(pa), _as_map(ga)


def _fixations(f, n: int) -> np.ndarray:
    fa = _as_map(f)
    if fa.size != n:
        raise ValueError(f"fixation map has {fa.size} pixels, prediction has {n}")
    mask = fa > 0.5
    if not mask.any():
        raise ValueError("fixation map has no fixations")
    return mask


def _normalize(x: np.ndarray) -> np.ndarray:
    s = x.sum()
    if s <= 0:
        raise ValueError("map has no positive mass")
    return x / s


def eval_cc(p, g) -> float:
    """Pearson correlation (population statistics); 0 if either map is constant."""
    pa, ga = _pair(p, g)
    dp, dg = pa - pa.mean(), ga - ga.mean()
    sp, sg = np.sqrt((dp * dp).mean()), np.sqrt((dg * dg).mean())
    if sp == 0 or sg == 0:
        return 0.0
    return float((dp * dg).mean() / (sp * sg))


def eval_kld(p, g, eps: float = 1e-8) -> float:
    pa, ga = _pair(p, g)
    if (pa < 0).any() or (ga < 0).any():
        raise ValueError("eval_kld requires non-negative maps")
    pa, ga = _normalize(pa), _normalize(ga)
    return float(np.sum(ga * np.log(eps + ga / (pa + eps))))


def eval_nss(p, f) -> float:
    """Mean z-scored saliency at fixated pixels; 0 for a constant map."""
    pa = _as_map(p)
    mask = _fixations(f, pa.size)
    sd = pa.std()
    if sd == 0:
        return 0.0
    return float(((pa - pa.mean()) / sd)[mask].mean())


def eval_sim(p, g) -> float:
    """Histogram intersection of the two maps after normalizing each to sum 1."""
    pa, ga = _pair(p, g)
    return float(np.minimum(_normalize(pa), _normalize(ga)).sum())


def roc_curve(p, f) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) sweeping a threshold down through every distinct map value.

    Positives are fixated pixels, negatives all other pixels. Tied values
    enter the curve together, giving a diagonal segment (ties count half).
    """
    pa = _as_map(p)
    mask = _fixations(f, pa.size)
    n_pos, n_neg = int(mask.sum()), int((~mask).sum())
    if n_neg == 0:
        raise ValueError("every pixel is fixated; AUC needs at least one negative")
    order = np.argsort(-pa, kind="stable")
    vals, labels = pa[order], mask[order]
    cut = np.flatnonzero(np.diff(vals) != 0)
    ends = np.concatenate([cut, [vals.size - 1]])
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(~labels)[ends]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return fpr, tpr


def eval_auc(p, f) -> float:
    fpr, tpr = roc_curve(p, f)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate_pair(p, g, f) -> dict[str, float]:
    return {"cc": eval_cc(p, g), "kld": eval_kld(p, g), "nss": eval_nss(p, f),
            "sim": eval_sim(p, g), "auc": eval_auc(p, f)}


@dataclass
class MetricReport:
    per_image: list[dict[str, float]] = field(default_factory=list)

    def add(self, values: dict[str, float]) -> None:
        self.per_image.append({k: float(values[k]) for k in METRIC_KEYS})

    def __len__(self) -> int:
        return len(self.per_image)

    @property
    def mean(self) -> dict[str, float]:
        if not self.per_image:
            raise ValueError("empty report")
        return {k: float(np.mean([r[k] for r in self.per_image])) for k in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps({k: self.mean[k] for k in METRIC_KEYS} | {"n_images": len(self)}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("image",) + METRIC_KEYS)
        for i, r in enumerate(self.per_image):
            writer.writerow([i] + [repr(r[k]) for k in METRIC_KEYS])
        return buf.getvalue()


def evaluate_maps(preds, densities, fixations) -> MetricReport:
    report = MetricReport()
    for p, g, f in zip(preds, densities, fixations):
        report.add(evaluate_pair(p, g, f))
    return report
