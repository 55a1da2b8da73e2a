"""Score a trained model on a manifest and build the comparison report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, scoring
from .datamodel import DatasetManifest, load_mask, load_slice


@dataclass(frozen=True)
class EvalSettings:
    alpha: float = 1.0
    lam: float = scoring.DEFAULT_LAMBDA
    geo_score: str = "meanprob"
    dsc_quantile: float = scoring.DEFAULT_DSC_QUANTILE

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.geo_score not in scoring.GEO_SCORE_MODES:
            raise ValueError(f"geo_score must be one of {scoring.GEO_SCORE_MODES}")
        if not 0 <= self.dsc_quantile <= 1:
            raise ValueError("dsc_quantile must lie in [0, 1]")


@dataclass
class EvalResult:
    name: str
    records: list[scoring.ScoreRecord]
    calibration: scoring.Calibration
    threshold: float
    auroc: float
    aupr: float
    dsc_values: np.ndarray
    dsc_mean: float
    dsc_std: float


@dataclass
class _Scored:
    ids: list[str]
    labels: list[str]
    s_g: np.ndarray
    s_r: np.ndarray
    residuals: np.ndarray
    masks: list


def _score_split(model, manifest: DatasetManifest, split: str, settings: EvalSettings) -> _Scored:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"the {split} split is empty")
    images = np.stack([load_slice(e.image_path).pixels for e in entries])
    s_r, residuals = scoring.reconstruction_scores(model, images, settings.alpha)
    s_g = scoring.geometric_scores(model, images, settings.geo_score)
    masks = [load_mask(e.mask_path).bits if e.mask_path is not None else None for e in entries]
    return _Scored(
        [e.image_path.stem for e in entries], [e.label for e in entries], s_g, s_r, residuals, masks
    )


def evaluate(model, manifest: DatasetManifest, settings: EvalSettings | None = None, name: str = "model") -> EvalResult:
    """Calibrate on validation normals, then score and measure the test split.

    DSC is averaged over abnormal test slices only.
    """
    settings = settings or EvalSettings()
    val = _score_split(model, manifest, "validation", settings)
    cal = scoring.calibrate(val.s_g, val.s_r, settings.alpha, settings.lam)
    threshold = scoring.residual_threshold(val.residuals, settings.dsc_quantile)

    test = _score_split(model, manifest, "test", settings)
    records = scoring.make_records(test.ids, test.labels, test.s_g, test.s_r, cal)
    y = np.array([lab == "abnormal" for lab in test.labels], dtype=int)
    combined = np.array([r.combined for r in records])
    dsc_values = np.array(
        [
            metrics.dsc(scoring.segment_anomaly(res, threshold), mask)
            for res, mask, lab in zip(test.residuals, test.masks, test.labels)
            if lab == "abnormal"
        ]
    )
    dsc_mean, dsc_std = metrics.summarize(dsc_values) if dsc_values.size else (float("nan"), float("nan"))
    return EvalResult(
        name=name,
        records=records,
        calibration=cal,
        threshold=threshold,
        auroc=metrics.auroc(combined, y),
        aupr=metrics.aupr(combined, y),
        dsc_values=dsc_values,
        dsc_mean=dsc_mean,
        dsc_std=dsc_std,
    )


def format_report(results: list[EvalResult]) -> str:
    width = max([len("method")] + [len(r.name) for r in results])
    lines = [f"{'method':<{width}}  AUROC   AUPR    DSC"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.auroc:.3f}   {r.aupr:.3f}   {r.dsc_mean:.3f} ± {r.dsc_std:.3f}")
    return "\n".join(lines) + "\n"
