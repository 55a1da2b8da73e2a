"""Slices, masks, dataset manifests and their on-disk formats.

Slices are stored as single-channel PGM files (8- or 16-bit). On load the
stored integer range is mapped linearly onto [0, 1]; no per-image statistics
are used. Manifests are tab-separated text::

    # image_path  label  mask_path|-  split  volume_id
    images/train_0000.pgm  normal  -  train  vol000

Relative paths in a manifest are resolved against the manifest's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import (
    BadSliceSize,
    ConfigError,
    ManifestError,
    MissingMask,
    NormalsOnlyViolation,
    NotSquare,
    SliceFormatError,
)

LABELS = ("normal", "abnormal")
SPLITS = ("train", "validation", "test")
DEFAULT_SIDE = 128


def _check_side(height: int, width: int) -> None:
    if height != width:
        raise NotSquare(f"slice is {height}x{width}, expected a square image")
    if height % 8 != 0 or height == 0:
        raise BadSliceSize(f"slice side {height} is not a positive multiple of 8")


@dataclass(frozen=True, eq=False)
class SliceImage:
    """Square grayscale slice with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise SliceFormatError(f"expected a 2D array, got shape {px.shape}")
        _check_side(*px.shape)
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise SliceFormatError("pixel values must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class AnomalyMask:
    """Binary mask, 1 marks an anomalous pixel."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise SliceFormatError(f"expected a 2D mask, got shape {bits.shape}")
        bits = (bits != 0).astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def popcount(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    label: str
    mask_path: Path | None
    split: str
    volume_id: str


@dataclass(frozen=True)
class SplitSpec:
    """Slice counts per split; defaults keep Table-1-like proportions at desk scale."""

    train: int = 400
    validation: int = 100
    test_normal: int = 100
    test_abnormal: int = 100

    def __post_init__(self):
        for name in ("train", "validation", "test_normal", "test_abnormal"):
            if getattr(self, name) < 1:
                raise ConfigError(f"split count {name} must be >= 1")

    @property
    def test(self) -> int:
        return self.test_normal + self.test_abnormal


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."))

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        validate_entries(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def validate_entries(entries) -> None:
    seen: dict[Path, str] = {}
    for e in entries:
        if e.label not in LABELS:
            raise ManifestError(f"{e.image_path}: unknown label {e.label!r}")
        if e.split not in SPLITS:
            raise ManifestError(f"{e.image_path}: unknown split {e.split!r}")
        if e.label == "abnormal" and e.split != "test":
            raise NormalsOnlyViolation(
                f"{e.image_path}: abnormal slice in the {e.split} split; "
                "train and validation must contain normal slices only"
            )
        if e.label == "abnormal" and e.mask_path is None:
            raise MissingMask(f"{e.image_path}: abnormal test slice has no mask")
        key = Path(e.image_path)
        if key in seen and seen[key] != e.split:
            raise ManifestError(f"{key} appears in both {seen[key]} and {e.split}")
        seen[key] = e.split


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse and validate a tab-separated manifest.

    Raises ``ManifestError`` (or a subclass) on a missing file, malformed row,
    split/label invariant violations, or references to files that do not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ManifestError(
                    f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}"
                )
            image, label, mask, split, volume = (f.strip() for f in fields)
            if not image or not volume:
                raise ManifestError(f"{path}:{lineno}: empty image path or volume id")
            entries.append(
                ManifestEntry(
                    image_path=root / image,
                    label=label,
                    mask_path=None if mask in ("", "-") else root / mask,
                    split=split,
                    volume_id=volume,
                )
            )
    manifest = DatasetManifest(tuple(entries), root=root)
    for e in manifest:
        if not e.image_path.is_file():
            raise ManifestError(f"referenced image does not exist: {e.image_path}")
        if e.mask_path is not None and not e.mask_path.is_file():
            raise ManifestError(f"referenced mask does not exist: {e.mask_path}")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    root = path.parent

    def rel(p: Path) -> str:
        try:
            return Path(p).relative_to(root).as_posix()
        except ValueError:
            return Path(p).as_posix()

    lines = ["# image_path\tlabel\tmask_path\tsplit\tvolume_id"]
    for e in manifest:
        mask = rel(e.mask_path) if e.mask_path is not None else "-"
        lines.append("\t".join([rel(e.image_path), e.label, mask, e.split, e.volume_id]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_gray(path: Path) -> tuple[np.ndarray, int]:
    try:
        with Image.open(path) as im:
            mode = im.mode
            data = np.array(im)
    except (OSError, ValueError) as exc:
        raise SliceFormatError(f"cannot read image {path}: {exc}") from exc
    if mode == "L":
        maxval = 255
    elif mode in ("I", "I;16", "I;16B", "I;16L"):
        maxval = 65535
    else:
        raise SliceFormatError(f"{path}: unsupported image mode {mode!r}, need 8/16-bit grayscale")
    if data.ndim != 2:
        raise SliceFormatError(f"{path}: not a single-channel image")
    return data, maxval


def load_slice(path: str | os.PathLike) -> SliceImage:
    data, maxval = _read_gray(Path(path))
    _check_side(*data.shape)
    return SliceImage(data.astype(np.float64) / maxval)


def save_slice(image: SliceImage | np.ndarray, path: str | os.PathLike, bits: int = 16) -> None:
    """Quantize to ``bits`` (8 or 16) and write a binary PGM."""
    px = image.pixels if isinstance(image, SliceImage) else np.asarray(image, dtype=np.float64)
    if bits == 16:
        arr = np.rint(np.clip(px, 0.0, 1.0) * 65535).astype(np.uint16)
    elif bits == 8:
        arr = np.rint(np.clip(px, 0.0, 1.0) * 255).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    Image.fromarray(arr).save(Path(path), format="PPM")


def quantize(pixels: np.ndarray, bits: int = 16) -> np.ndarray:
    """Values exactly as they will read back after ``save_slice``."""
    top = (1 << bits) - 1
    return np.rint(np.clip(pixels, 0.0, 1.0) * top) / top


def load_mask(path: str | os.PathLike) -> AnomalyMask:
    data, _ = _read_gray(Path(path))
    return AnomalyMask(data)


def save_mask(mask: AnomalyMask | np.ndarray, path: str | os.PathLike) -> None:
    bits = mask.bits if isinstance(mask, AnomalyMask) else np.asarray(mask)
    Image.fromarray(((bits != 0) * 255).astype(np.uint8)).save(Path(path), format="PPM")
