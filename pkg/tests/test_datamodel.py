import numpy as np
import pytest
from PIL import Image

from geoscore.datamodel import (
    AnomalyMask,
    DatasetManifest,
    ManifestEntry,
    SliceImage,
    load_manifest,
    load_mask,
    load_slice,
    save_mask,
    save_slice,
)
from geoscore.errors import (
    BadSliceSize,
    ManifestError,
    MissingMask,
    NormalsOnlyViolation,
    NotSquare,
    SliceFormatError,
)


def _write_pgm16(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint16)).save(path, format="PPM")


def _manifest(tmp_path, rows):
    for name in ("a.pgm", "b.pgm", "c.pgm", "m.pgm"):
        _write_pgm16(tmp_path / name, np.zeros((8, 8)))
    text = "# header comment\n" + "\n".join("\t".join(r) for r in rows) + "\n"
    path = tmp_path / "manifest.tsv"
    path.write_text(text, encoding="utf-8")
    return path


def test_load_slice_rescales_16bit_endpoints(tmp_path):
    arr = np.zeros((128, 128), dtype=np.uint16)
    arr[3, 5] = 65535
    _write_pgm16(tmp_path / "x.pgm", arr)
    x = load_slice(tmp_path / "x.pgm")
    assert x.pixels[3, 5] == 1.0
    assert x.pixels[0, 0] == 0.0
    assert x.side == 128


def test_load_slice_8bit(tmp_path):
    arr = np.full((16, 16), 255, dtype=np.uint8)
    arr[0, 0] = 0
    Image.fromarray(arr).save(tmp_path / "x.pgm", format="PPM")
    x = load_slice(tmp_path / "x.pgm")
    assert x.pixels.max() == 1.0 and x.pixels[0, 0] == 0.0


def test_load_slice_rejects_non_square(tmp_path):
    _write_pgm16(tmp_path / "x.pgm", np.zeros((100, 128)))
    with pytest.raises(NotSquare):
        load_slice(tmp_path / "x.pgm")


def test_load_slice_rejects_side_not_multiple_of_8(tmp_path):
    _write_pgm16(tmp_path / "x.pgm", np.zeros((12, 12)))
    with pytest.raises(BadSliceSize):
        load_slice(tmp_path / "x.pgm")


def test_load_slice_rejects_unsupported(tmp_path):
    Image.new("RGB", (16, 16)).save(tmp_path / "x.png")
    with pytest.raises(SliceFormatError):
        load_slice(tmp_path / "x.png")
    (tmp_path / "junk.pgm").write_bytes(b"not an image")
    with pytest.raises(SliceFormatError):
        load_slice(tmp_path / "junk.pgm")


def test_slice_invariants():
    with pytest.raises(SliceFormatError):
        SliceImage(np.full((8, 8), 1.5))
    with pytest.raises(SliceFormatError):
        SliceImage(np.full((8, 8), -0.1))
    x = SliceImage(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        x.pixels[0, 0] = 1.0


def test_load_save_load_roundtrip(tmp_path, rng):
    x = SliceImage(rng.random((32, 32)))
    save_slice(x, tmp_path / "a.pgm")
    first = load_slice(tmp_path / "a.pgm")
    save_slice(first, tmp_path / "b.pgm")
    second = load_slice(tmp_path / "b.pgm")
    assert np.array_equal(first.pixels, second.pixels)
    assert np.abs(first.pixels - x.pixels).max() <= 0.5 / 65535 + 1e-15


def test_mask_roundtrip(tmp_path, rng):
    bits = rng.random((16, 16)) > 0.7
    save_mask(AnomalyMask(bits), tmp_path / "m.pgm")
    assert np.array_equal(load_mask(tmp_path / "m.pgm").bits, bits.astype(np.uint8))


def test_load_manifest_valid(tmp_path):
    path = _manifest(
        tmp_path,
        [
            ("a.pgm", "normal", "-", "train", "v0"),
            ("b.pgm", "normal", "-", "validation", "v1"),
            ("c.pgm", "abnormal", "m.pgm", "test", "v2"),
        ],
    )
    m = load_manifest(path)
    assert len(m) == 3
    assert m.counts() == {"train": 1, "validation": 1, "test": 1}
    assert m.split("test")[0].mask_path == tmp_path / "m.pgm"
    assert m.split("train")[0].mask_path is None


def test_abnormal_in_train_rejected(tmp_path):
    path = _manifest(tmp_path, [("a.pgm", "abnormal", "m.pgm", "train", "v0")])
    with pytest.raises(NormalsOnlyViolation):
        load_manifest(path)


def test_abnormal_in_validation_rejected(tmp_path):
    path = _manifest(tmp_path, [("a.pgm", "abnormal", "m.pgm", "validation", "v0")])
    with pytest.raises(NormalsOnlyViolation):
        load_manifest(path)


def test_abnormal_without_mask_rejected(tmp_path):
    path = _manifest(tmp_path, [("a.pgm", "abnormal", "-", "test", "v0")])
    with pytest.raises(MissingMask):
        load_manifest(path)


@pytest.mark.parametrize(
    "row",
    [
        ("a.pgm", "normal", "-", "train"),
        ("a.pgm", "weird", "-", "train", "v0"),
        ("a.pgm", "normal", "-", "holdout", "v0"),
        ("missing.pgm", "normal", "-", "train", "v0"),
    ],
)
def test_malformed_rows_rejected(tmp_path, row):
    path = _manifest(tmp_path, [row])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.tsv")


def test_split_membership_is_a_partition(tmp_path):
    path = _manifest(
        tmp_path,
        [("a.pgm", "normal", "-", "train", "v0"), ("a.pgm", "normal", "-", "test", "v0")],
    )
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_type_enforces_invariants(tmp_path):
    with pytest.raises(NormalsOnlyViolation):
        DatasetManifest((ManifestEntry(tmp_path / "a", "abnormal", tmp_path / "m", "train", "v"),))
