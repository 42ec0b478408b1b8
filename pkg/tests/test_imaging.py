import hashlib
import struct

import numpy as np
import pytest

from prosima.errors import (
    DimensionMismatch,
    ImageTooSmall,
    InconsistentShard,
    LedgerFormatError,
    MissingShard,
)
from prosima.imaging import (
    Image,
    Shard,
    ShardGrid,
    corrupt_gaussian,
    fragment,
    psnr,
    read_pgm,
    read_pimg,
    reaggregate,
    ssim,
    write_pgm,
    write_pimg,
)


def rand_image(rng, h=32, w=32):
    return Image(width=w, height=h, pixels=rng.uniform(0, 1, size=(h, w)))


def test_fragment_reaggregate_roundtrip_exact():
    """Reaggregating all shards must reproduce the raster bit-for-bit."""
    rng = np.random.default_rng(7)
    for rows, cols, h, w in [(2, 2, 16, 16), (4, 4, 32, 32), (1, 1, 8, 8), (2, 4, 64, 32)]:
        img = rand_image(rng, h, w)
        grid = ShardGrid(rows=rows, cols=cols)
        shards = fragment(img, grid)
        assert len(shards) == grid.count
        back = reaggregate(shards, grid)
        assert back.raster_equal(img)
        assert back.image_id == img.image_id


def test_fragment_reaggregate_shuffled_order():
    rng = np.random.default_rng(8)
    img = rand_image(rng)
    grid = ShardGrid(rows=4, cols=4)
    shards = fragment(img, grid)
    order = rng.permutation(len(shards))
    back = reaggregate([shards[i] for i in order], grid)
    assert back.raster_equal(img)


def test_fragment_grid_must_divide():
    img = rand_image(np.random.default_rng(0), 30, 30)
    with pytest.raises(DimensionMismatch):
        fragment(img, ShardGrid(rows=4, cols=4))


def test_reaggregate_missing_and_duplicate():
    img = rand_image(np.random.default_rng(1))
    grid = ShardGrid(rows=2, cols=2)
    shards = fragment(img, grid)
    with pytest.raises(MissingShard):
        reaggregate(shards[:3], grid)
    with pytest.raises(InconsistentShard):
        reaggregate(shards + [shards[0]], grid)


def test_reaggregate_rejects_foreign_shard():
    rng = np.random.default_rng(2)
    a, b = rand_image(rng), rand_image(rng)
    grid = ShardGrid(rows=2, cols=2)
    mixed = fragment(a, grid)[:3] + [fragment(b, grid)[3]]
    with pytest.raises(InconsistentShard):
        reaggregate(mixed, grid)


def test_shard_key_definition():
    # key must equal SHA-256(image_id || row || col), u32 little-endian
    img = rand_image(np.random.default_rng(3), 16, 16)
    s = fragment(img, ShardGrid(rows=2, cols=2))[3]
    expect = hashlib.sha256(img.image_id + struct.pack("<II", 1, 1)).digest()
    assert s.key == expect
    assert s.row == 1 and s.col == 1


def test_image_id_sensitivity():
    rng = np.random.default_rng(4)
    px = rng.uniform(0, 1, size=(16, 16))
    a = Image(width=16, height=16, pixels=px)
    px2 = px.copy()
    px2[5, 5] = min(1.0, px2[5, 5] + 1.0 / 255.0)
    b = Image(width=16, height=16, pixels=px2)
    assert a.image_id != b.image_id
    assert len(a.image_id) == 32


def test_psnr_identical_is_capped():
    img = rand_image(np.random.default_rng(5))
    assert psnr(img, img) == 100.0


def test_psnr_twenty_db_offset():
    """Constant 0.1 offset on unit-range images gives exactly 20 dB."""
    a = Image(width=16, height=16, pixels=np.full((16, 16), 0.5))
    b = Image(width=16, height=16, pixels=np.full((16, 16), 0.6))
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_dimension_mismatch():
    a = rand_image(np.random.default_rng(6), 16, 16)
    b = rand_image(np.random.default_rng(6), 16, 32)
    with pytest.raises(DimensionMismatch):
        psnr(a, b)


def test_corrupt_gaussian_deterministic_and_clipped():
    img = rand_image(np.random.default_rng(9), 64, 64)
    n1 = corrupt_gaussian(img, sigma=0.3, seed=42)
    n2 = corrupt_gaussian(img, sigma=0.3, seed=42)
    n3 = corrupt_gaussian(img, sigma=0.3, seed=43)
    assert n1.raster_equal(n2)
    assert not n1.raster_equal(n3)
    assert n1.pixels.min() >= 0.0 and n1.pixels.max() <= 1.0


def test_corrupt_gaussian_noise_scale():
    # mid-gray base avoids clipping, so the residual std tracks sigma
    base = Image(width=128, height=128, pixels=np.full((128, 128), 0.5))
    for sigma in (0.02, 0.05):
        noisy = corrupt_gaussian(base, sigma=sigma, seed=11)
        resid = noisy.pixels - base.pixels
        assert abs(float(resid.std()) - sigma) < 0.1 * sigma
        assert abs(float(resid.mean())) < 3 * sigma / 128


def test_corrupt_gaussian_sigma_zero_identity():
    img = rand_image(np.random.default_rng(10))
    assert corrupt_gaussian(img, sigma=0.0, seed=1).raster_equal(img)


def test_ssim_identical_is_one():
    img = rand_image(np.random.default_rng(12))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_single_window_oracle():
    """One 8x8 window, checked against a hand-computed formula evaluation.

    The reference value was produced by evaluating mu/var/cov with plain
    Python loops and plugging into the SSIM formula (C1=0.01^2, C2=0.03^2).
    """
    rng = np.random.default_rng(1234)
    a = rng.uniform(0.2, 0.8, size=(8, 8))
    b = np.clip(a + rng.normal(0, 0.05, size=(8, 8)), 0, 1)
    val = ssim(Image(width=8, height=8, pixels=a), Image(width=8, height=8, pixels=b))
    assert val == pytest.approx(0.959164121812, abs=1e-9)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(13)
    a, b = rand_image(rng), rand_image(rng)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    for _ in range(10):
        x, y = rand_image(rng), rand_image(rng)
        assert -1.0 <= ssim(x, y) <= 1.0 + 1e-12


def test_ssim_rejects_small_images():
    img = rand_image(np.random.default_rng(14), 4, 4)
    with pytest.raises(ImageTooSmall):
        ssim(img, img)


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    # quantize first so the round trip is exact
    px = np.rint(rng.uniform(0, 1, size=(24, 16)) * 255) / 255.0
    img = Image(width=16, height=24, pixels=px)
    p = tmp_path / "x.pgm"
    write_pgm(img, p)
    back = read_pgm(p)
    assert back.raster_equal(img)


def test_pgm_rejects_malformed():
    with pytest.raises(LedgerFormatError):
        read_pgm(b"P6\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(LedgerFormatError):
        read_pgm(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(LedgerFormatError):
        read_pgm(b"P5\n4 4\n255\n" + b"\x00" * 7)  # short payload


def test_pgm_header_comments():
    raw = b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64])
    img = read_pgm(raw)
    assert img.width == 2 and img.height == 2
    assert img.pixels[0, 1] == pytest.approx(128 / 255)


def test_pimg_roundtrip_and_id(tmp_path):
    rng = np.random.default_rng(16)
    img = rand_image(rng, 8, 8)
    p = tmp_path / "x.pimg"
    write_pimg(img, p)
    back = read_pimg(p)
    # storage is float32, so the reread image equals the f32 quantization
    assert back.pixels == pytest.approx(img.pixels, abs=1e-6)
    assert back.canonical_bytes() == img.canonical_bytes()
    assert back.image_id == img.image_id


def test_pimg_rejects_malformed():
    good = Image(width=2, height=2, pixels=np.zeros((2, 2))).canonical_bytes()
    with pytest.raises(LedgerFormatError):
        read_pimg(b"XIMG1" + good[5:])
    with pytest.raises(LedgerFormatError):
        read_pimg(good[:-2])
    bad = bytearray(good)
    bad[13:17] = struct.pack("<f", 2.5)  # out-of-range intensity
    with pytest.raises(LedgerFormatError):
        read_pimg(bytes(bad))
