"""Per-slice anomaly scores.

``s_r`` is the scaled mean squared reconstruction error. ``s_g`` comes from
the transform head: each slice is pushed through all 20 transforms and the
head's probability for the transform actually applied is averaged
(``meanprob``: ``s_g = 1 - mean p``; ``nll``: mean cross-entropy). Both
channels are min-max normalized on validation normals and blended as
``(1 - lam) * s_g + lam * s_r``.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import AnomalyMask, SliceImage
from .geoxform import NUM_CLASSES, transform_batch

log = logging.getLogger(__name__)

GEO_SCORE_MODES = ("meanprob", "nll")
DEFAULT_LAMBDA = 0.5
DEFAULT_DSC_QUANTILE = 0.98


def _as_batch(images, dtype) -> torch.Tensor:
    if isinstance(images, SliceImage):
        images = [images]
    arr = np.stack([getattr(x, "pixels", x) for x in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype).unsqueeze(1)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def reconstruction_scores(model, images, alpha: float = 1.0, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``s_r`` and per-pixel squared residual maps for ``(N, S, S)`` slices."""
    x = _as_batch(images, _dtype(model))
    model.eval()
    maps = []
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        rec = model(xb, mode="eval").reconstruction
        maps.append(((xb - rec) ** 2).squeeze(1).double().numpy())
    residual = np.concatenate(maps)
    return alpha * residual.mean(axis=(1, 2)), residual


def score_reconstruction(model, x: SliceImage, alpha: float = 1.0) -> tuple[float, np.ndarray]:
    s_r, residual = reconstruction_scores(model, x, alpha)
    return float(s_r[0]), residual[0]


def geo_score_from_logits(logits_per_class, mode: str = "meanprob") -> float:
    """Collapse a ``(K, K)`` array, row k = head logits for the slice under transform k."""
    logits = torch.as_tensor(logits_per_class, dtype=torch.float64)
    k = logits.shape[0]
    log_p = F.log_softmax(logits, dim=1)[torch.arange(k), torch.arange(k)]
    if mode == "meanprob":
        return float(1.0 - log_p.exp().mean())
    if mode == "nll":
        return float(-log_p.mean())
    raise ValueError(f"geo score mode must be one of {GEO_SCORE_MODES}")


@torch.no_grad()
def geometric_scores(model, images, mode: str = "meanprob") -> np.ndarray:
    x = _as_batch(images, _dtype(model))
    model.eval()
    labels = list(range(NUM_CLASSES))
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        variants = transform_batch(x[i:i + 1].expand(NUM_CLASSES, -1, -1, -1), labels)
        out[i] = geo_score_from_logits(model(variants, mode="eval").geo_logits, mode)
    return out


def score_geometric(model, x: SliceImage, mode: str = "meanprob") -> float:
    return float(geometric_scores(model, x, mode)[0])


def combined_score(s_g_norm, s_r_norm, lam: float = DEFAULT_LAMBDA):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * s_g_norm + lam * s_r_norm


def _minmax(values, lo: float, hi: float):
    if hi <= lo:
        return np.zeros_like(np.asarray(values, dtype=np.float64))
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class Calibration:
    g_min: float
    g_max: float
    r_min: float
    r_max: float
    alpha: float = 1.0
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.g_max < self.g_min or self.r_max < self.r_min:
            raise ValueError("calibration max must be >= min")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")

    def normalize_g(self, s_g):
        return _minmax(s_g, self.g_min, self.g_max)

    def normalize_r(self, s_r):
        return _minmax(s_r, self.r_min, self.r_max)

    def combine(self, s_g, s_r):
        return combined_score(self.normalize_g(s_g), self.normalize_r(s_r), self.lam)


def calibrate(s_g, s_r, alpha: float = 1.0, lam: float = DEFAULT_LAMBDA) -> Calibration:
    """Fit per-channel min-max ranges on validation normals.

    ``s_r`` values must already include ``alpha``; it is stored only so that
    test scores are known to share the same scale.
    """
    s_g = np.asarray(s_g, dtype=np.float64)
    s_r = np.asarray(s_r, dtype=np.float64)
    if s_g.size < 2 or s_r.size < 2:
        raise ValueError("calibration needs at least 2 validation records")
    cal = Calibration(float(s_g.min()), float(s_g.max()), float(s_r.min()), float(s_r.max()), alpha, lam)
    for name, lo, hi in (("s_g", cal.g_min, cal.g_max), ("s_r", cal.r_min, cal.r_max)):
        if hi == lo:
            warnings.warn(f"{name} is constant on the validation split; it will normalize to 0")
    return cal


def residual_threshold(residual_maps, quantile: float = DEFAULT_DSC_QUANTILE) -> float:
    """Pixel-residual quantile over validation normals."""
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    return float(np.quantile(np.asarray(residual_maps, dtype=np.float64), quantile))


def segment_anomaly(residual_map, threshold: float) -> AnomalyMask:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return AnomalyMask(np.asarray(residual_map) > threshold)


@dataclass(frozen=True)
class ScoreRecord:
    slice_id: str
    label: str
    s_g: float
    s_r: float
    s_g_norm: float
    s_r_norm: float
    combined: float


def make_records(ids, labels, s_g, s_r, cal: Calibration) -> list[ScoreRecord]:
    g_norm, r_norm = cal.normalize_g(s_g), cal.normalize_r(s_r)
    comb = combined_score(g_norm, r_norm, cal.lam)
    return [
        ScoreRecord(str(i), str(lab), float(g), float(r), float(gn), float(rn), float(c))
        for i, lab, g, r, gn, rn, c in zip(ids, labels, s_g, s_r, g_norm, r_norm, comb)
    ]


def write_scores(records, path: str | os.PathLike) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("slice_id\tlabel\ts_g\ts_r\ts_g_norm\ts_r_norm\tcombined\n")
        for r in records:
            fh.write(
                f"{r.slice_id}\t{r.label}\t{r.s_g!r}\t{r.s_r!r}\t{r.s_g_norm!r}\t{r.s_r_norm!r}\t{r.combined!r}\n"
            )


def read_scores(path: str | os.PathLike) -> list[ScoreRecord]:
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            f = line.rstrip("\n").split("\t")
            out.append(ScoreRecord(f[0], f[1], *map(float, f[2:])))
    return out
