"""Seeded pseudo-brain phantoms with injected lesions.

A normal slice is an elliptical head, taller than wide, with a bright skull
ring, mid-gray tissue carrying a faint smooth texture, and a pair of dark
ventricles above the centre, tilted apart at the top. The elongation separates
quarter turns; only the ventricles separate a slice from its half-turn. Abnormal slices add one lesion inside the
tissue: a bright blob, a dark blob, or an erosion of tissue down to
fluid-like intensity. Every pixel under the lesion mask changes by at least
``MIN_PIXEL_CHANGE`` and nothing outside it changes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datamodel import (
    AnomalyMask,
    DatasetManifest,
    ManifestEntry,
    SliceImage,
    SplitSpec,
    quantize,
    save_mask,
    save_slice,
    write_manifest,
)
from .errors import ConfigError

LESION_KINDS = ("bright", "dark", "erosion")
MIN_PIXEL_CHANGE = 0.05
MIN_MEAN_CHANGE = 0.2
SLICES_PER_VOLUME = 20
_SPLIT_CODE = {"train": 1, "validation": 2, "test_normal": 3, "test_abnormal": 4}


@dataclass(frozen=True)
class PhantomConfig:
    side: int = 128
    splits: SplitSpec = field(default_factory=SplitSpec)
    lesion_kinds: tuple[str, ...] = LESION_KINDS
    # lesion radius range as a fraction of the side
    lesion_radius: tuple[float, float] = (0.05, 0.11)
    lesion_contrast: tuple[float, float] = (0.35, 0.5)
    texture_amplitude: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.side < 16 or self.side % 8:
            raise ConfigError("phantom side must be a multiple of 8, at least 16")
        if not self.lesion_kinds or any(k not in LESION_KINDS for k in self.lesion_kinds):
            raise ConfigError(f"lesion kinds must be a non-empty subset of {LESION_KINDS}")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi or 2 * hi * self.side >= self.side / 2:
            raise ConfigError("lesion diameter must be positive and below side/2")
        c_lo, c_hi = self.lesion_contrast
        if not MIN_MEAN_CHANGE <= c_lo <= c_hi <= 1:
            raise ConfigError(f"lesion contrast must lie in [{MIN_MEAN_CHANGE}, 1]")


@dataclass(frozen=True)
class _Phantom:
    pixels: np.ndarray
    tissue: np.ndarray  # boolean interior region, excludes the skull ring
    ventricles: np.ndarray


def _phantom(config: PhantomConfig, rng: np.random.Generator) -> _Phantom:
    s = config.side
    u = s / 128.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = s / 2 + rng.uniform(-3, 3) * u
    cx = s / 2 + rng.uniform(-3, 3) * u
    ry = rng.uniform(0.35, 0.40) * s
    rx = rng.uniform(0.27, 0.31) * s
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)

    skull_w = rng.uniform(4.0, 6.0) * u / ry
    head = d <= 1.0
    tissue = d <= 1.0 - skull_w
    img = np.zeros((s, s))
    img[head] = rng.uniform(0.85, 0.95)

    noise = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=6 * u)
    noise /= noise.std() + 1e-12
    img[tissue] = rng.uniform(0.40, 0.50) + config.texture_amplitude * noise[tissue]

    vy = cy - rng.uniform(0.12, 0.20) * ry
    gap = rng.uniform(0.10, 0.16) * rx
    v_ry, v_rx = rng.uniform(0.16, 0.22) * ry, rng.uniform(0.06, 0.09) * rx
    tilt = rng.uniform(0.15, 0.35)
    ventricles = np.zeros((s, s), dtype=bool)
    for side_sign in (-1, 1):
        vx = cx + side_sign * gap
        dy, dx = yy - vy, xx - vx
        # tilt the lobes outwards at the top
        a = side_sign * tilt
        ry_rot = dy * np.cos(a) + dx * np.sin(a)
        rx_rot = -dy * np.sin(a) + dx * np.cos(a)
        ventricles |= (ry_rot / v_ry) ** 2 + (rx_rot / v_rx) ** 2 <= 1.0
    ventricles &= tissue
    img[ventricles] = rng.uniform(0.10, 0.16)

    img = ndimage.gaussian_filter(img, sigma=0.8 * u)
    img[~ndimage.binary_dilation(head, iterations=max(1, int(round(3 * u))))] = 0.0
    return _Phantom(quantize(np.clip(img, 0.0, 1.0)), tissue, ventricles)


def generate_normal(config: PhantomConfig, rng: np.random.Generator) -> SliceImage:
    return SliceImage(_phantom(config, rng).pixels)


def _lesion_profile(config, phantom: _Phantom, rng) -> tuple[np.ndarray, float, float]:
    s = config.side
    core = ndimage.binary_erosion(phantom.tissue, iterations=max(1, int(0.04 * s)))
    rows, cols = np.nonzero(core)
    k = rng.integers(rows.size)
    cy, cx = rows[k], cols[k]
    r = rng.uniform(*config.lesion_radius) * s
    aspect = rng.uniform(0.6, 1.0)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(angle) + dx * np.sin(angle)) / r
    v = (-dy * np.sin(angle) + dx * np.cos(angle)) / (r * aspect)
    return np.exp(-(u**2 + v**2)), cy, cx


def inject_lesion(
    normal: np.ndarray, tissue: np.ndarray, kind: str, config: PhantomConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, mask)``; ``mask`` is exactly the set of changed pixels."""
    phantom = _Phantom(normal, tissue, np.zeros_like(tissue))
    for _ in range(100):
        profile, _, _ = _lesion_profile(config, phantom, rng)
        region = (profile > 0.4) & tissue
        amp = rng.uniform(*config.lesion_contrast)
        out = normal.copy()
        if kind == "bright":
            out[region] = normal[region] + amp * profile[region] / profile[region].max()
        elif kind == "dark":
            out[region] = normal[region] - amp * profile[region] / profile[region].max()
        elif kind == "erosion":
            out[region] = rng.uniform(0.05, 0.12)
        else:
            raise ValueError(f"unknown lesion kind {kind!r}")
        out = quantize(np.clip(out, 0.0, 1.0))
        change = np.abs(out - normal)
        mask = region & (change >= MIN_PIXEL_CHANGE)
        out = np.where(mask, out, normal)
        if mask.any() and change[mask].mean() >= MIN_MEAN_CHANGE and mask.sum() < 0.25 * normal.size:
            return out, mask
    raise RuntimeError("could not place a lesion meeting the contrast floor")


def generate_abnormal(config: PhantomConfig, rng: np.random.Generator) -> tuple[SliceImage, AnomalyMask]:
    img, mask, _ = generate_abnormal_with_normal(config, rng)
    return img, mask


def generate_abnormal_with_normal(config: PhantomConfig, rng: np.random.Generator):
    """Like ``generate_abnormal`` but also returns the underlying normal slice."""
    phantom = _phantom(config, rng)
    kind = config.lesion_kinds[int(rng.integers(len(config.lesion_kinds)))]
    img, mask = inject_lesion(phantom.pixels, phantom.tissue, kind, config, rng)
    return SliceImage(img), AnomalyMask(mask), SliceImage(phantom.pixels)


def slice_rng(config: PhantomConfig, group: str, index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _SPLIT_CODE[group], index])


def emit_dataset(config: PhantomConfig, output_dir: str | os.PathLike) -> DatasetManifest:
    """Write ``images/``, ``masks/`` and ``manifest.tsv`` under ``output_dir``."""
    out = Path(output_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    sp = config.splits
    plan = [
        ("train", "train", "normal", sp.train),
        ("validation", "validation", "normal", sp.validation),
        ("test_normal", "test", "normal", sp.test_normal),
        ("test_abnormal", "test", "abnormal", sp.test_abnormal),
    ]
    entries = []
    for group, split, label, count in plan:
        for i in range(count):
            rng = slice_rng(config, group, i)
            name = f"{group}_{i:04d}"
            image_path = out / "images" / f"{name}.pgm"
            mask_path = None
            if label == "normal":
                save_slice(generate_normal(config, rng), image_path)
            else:
                img, mask = generate_abnormal(config, rng)
                save_slice(img, image_path)
                mask_path = out / "masks" / f"{name}.pgm"
                save_mask(mask, mask_path)
            entries.append(
                ManifestEntry(image_path, label, mask_path, split, f"{group}_v{i // SLICES_PER_VOLUME:03d}")
            )
    manifest = DatasetManifest(tuple(entries), root=out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
