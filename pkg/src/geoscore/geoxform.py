"""Geometric pretext transforms and the patch-swap corruption.

There are 4 rotations x 5 translations = 20 transform classes. A class index
is ``5 * rotation_idx + translation_idx``:

* rotation_idx 0..3 is a counter-clockwise rotation by 0, 90, 180, 270 degrees
  (``np.rot90`` convention);
* translation_idx 0..4 is none, +x, -x, +y, -y. ``+x`` moves content towards
  larger column indices, ``+y`` towards larger row indices. The shift is
  side/8 pixels and the vacated band is zero-filled.

Rotation is applied first, then translation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .datamodel import SliceImage
from .errors import InsufficientForeground

ROTATIONS = (0, 90, 180, 270)
TRANSLATIONS = ("none", "+x", "-x", "+y", "-y")
NUM_CLASSES = len(ROTATIONS) * len(TRANSLATIONS)

# (row shift sign, column shift sign) per translation index
_SHIFT_DIRS = ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0))


class TransformClass(NamedTuple):
    rotation_idx: int
    translation_idx: int

    @property
    def index(self) -> int:
        return len(TRANSLATIONS) * self.rotation_idx + self.translation_idx

    @property
    def rotation(self) -> int:
        return ROTATIONS[self.rotation_idx]

    @property
    def translation(self) -> str:
        return TRANSLATIONS[self.translation_idx]

    @classmethod
    def from_index(cls, index: int) -> "TransformClass":
        index = int(index)
        if not 0 <= index < NUM_CLASSES:
            raise ValueError(f"transform index {index} outside [0, {NUM_CLASSES})")
        return cls(*divmod(index, len(TRANSLATIONS)))


def enumerate_classes() -> list[TransformClass]:
    return [TransformClass.from_index(i) for i in range(NUM_CLASSES)]


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = a[..., src_r, src_c]
    return out


def transform_array(a: np.ndarray, t: TransformClass | int) -> np.ndarray:
    """Apply a transform class to the last two axes of ``a``."""
    if not isinstance(t, TransformClass):
        t = TransformClass.from_index(t)
    side = a.shape[-1]
    out = np.rot90(a, k=t.rotation_idx, axes=(-2, -1))
    sy, sx = _SHIFT_DIRS[t.translation_idx]
    if sy or sx:
        step = side // 8
        out = _shift(out, sy * step, sx * step)
    return np.ascontiguousarray(out)


def apply_transform(x: SliceImage, t: TransformClass | int) -> SliceImage:
    return SliceImage(transform_array(x.pixels, t))


def transform_batch(x: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample transform of an ``(N, 1, S, S)`` tensor; ``labels`` are class indices."""
    labels = [int(k) for k in labels]
    if len(labels) != x.shape[0]:
        raise ValueError("one label per sample is required")
    side = x.shape[-1]
    step = side // 8
    out = torch.empty_like(x)
    for i, k in enumerate(labels):
        t = TransformClass.from_index(k)
        y = torch.rot90(x[i], t.rotation_idx, dims=(-2, -1))
        sy, sx = _SHIFT_DIRS[t.translation_idx]
        if sy or sx:
            shifted = torch.zeros_like(y)
            dy, dx = sy * step, sx * step
            shifted[..., max(0, dy):side - max(0, -dy), max(0, dx):side - max(0, -dx)] = y[
                ..., max(0, -dy):side - max(0, dy), max(0, -dx):side - max(0, dx)
            ]
            y = shifted
        out[i] = y
    return out


def sample_random_class(rng: np.random.Generator) -> TransformClass:
    return TransformClass.from_index(int(rng.integers(NUM_CLASSES)))


@dataclass(frozen=True)
class PatchSwapSpec:
    """Two patch centres (row, col) after border clamping, and the patch side."""

    point_a: tuple[int, int]
    point_b: tuple[int, int]
    patch_side: int

    def corner(self, point: tuple[int, int]) -> tuple[int, int]:
        half = self.patch_side // 2
        return point[0] - half, point[1] - half

    def overlaps(self) -> bool:
        (ra, ca), (rb, cb) = self.corner(self.point_a), self.corner(self.point_b)
        s = self.patch_side
        return abs(ra - rb) < s and abs(ca - cb) < s


def _clamp_center(p: int, side: int, patch: int) -> int:
    half = patch // 2
    return int(min(max(p, half), side - patch + half))


def swap_patches(pixels: np.ndarray, spec: PatchSwapSpec) -> np.ndarray:
    """Exchange the two patches described by ``spec``; an involution."""
    if spec.overlaps():
        raise ValueError("patches overlap")
    out = np.array(pixels, copy=True)
    s = spec.patch_side
    (ra, ca), (rb, cb) = spec.corner(spec.point_a), spec.corner(spec.point_b)
    pa = pixels[ra:ra + s, ca:ca + s].copy()
    out[ra:ra + s, ca:ca + s] = pixels[rb:rb + s, cb:cb + s]
    out[rb:rb + s, cb:cb + s] = pa
    return out


def sample_patch_swap(pixels: np.ndarray, rng: np.random.Generator, max_attempts: int = 100) -> PatchSwapSpec:
    side = pixels.shape[-1]
    patch = side // 8
    rows, cols = np.nonzero(pixels)
    if rows.size < 2 * patch * patch:
        raise InsufficientForeground(
            f"{rows.size} non-zero pixels, need at least {2 * patch * patch}"
        )
    for _ in range(max_attempts):
        i, j = rng.integers(rows.size, size=2)
        spec = PatchSwapSpec(
            (_clamp_center(rows[i], side, patch), _clamp_center(cols[i], side, patch)),
            (_clamp_center(rows[j], side, patch), _clamp_center(cols[j], side, patch)),
            patch,
        )
        if not spec.overlaps():
            return spec
    raise InsufficientForeground(f"no disjoint patch pair found in {max_attempts} attempts")


def patch_swap(x: SliceImage, rng: np.random.Generator) -> tuple[SliceImage, PatchSwapSpec]:
    """Swap two side/8 patches centred on random foreground pixels."""
    spec = sample_patch_swap(x.pixels, rng)
    return SliceImage(swap_patches(x.pixels, spec)), spec
