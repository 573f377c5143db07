import numpy as np
import pytest

from petkit.io import (
    load_image,
    load_sinogram,
    save_image,
    save_png,
    save_sinogram,
)
from petkit.types import Sinogram


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 5, size=(16, 16))
    path = tmp_path / "img.petk"
    save_image(path, img)
    back = load_image(path)
    assert back.shape == (16, 16)
    np.testing.assert_array_equal(back, img.astype(np.float32))


def test_sinogram_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    active = rng.uniform(size=37) > 0.3
    vals = np.where(active, rng.poisson(4.0, size=37).astype(float), 0.0)
    path = tmp_path / "sino.petk"
    save_sinogram(path, Sinogram(vals, active))
    back = load_sinogram(path)
    assert np.array_equal(back.active, active)
    np.testing.assert_array_equal(back.values, vals.astype(np.float32))


def test_kind_mismatch_raises(tmp_path):
    path = tmp_path / "img.petk"
    save_image(path, np.zeros((8, 8)))
    with pytest.raises(ValueError, match="expected a sinogram"):
        load_sinogram(path)


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "junk.petk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_image(path)


def test_png_export(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    path = tmp_path / "preview.png"
    save_png(path, img)
    assert path.exists() and path.stat().st_size > 0
    save_png(tmp_path / "flat.png", np.zeros((8, 8)))  # degenerate window
