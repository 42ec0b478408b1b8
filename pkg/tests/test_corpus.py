import numpy as np
import pytest

from prosima.corpus import load_pgm_dir, make_corpus, make_phantom
from prosima.errors import NotFound
from prosima.imaging import write_pgm


def test_phantom_deterministic():
    a = make_phantom(123)
    b = make_phantom(123)
    assert a.image_id == b.image_id
    assert a.raster_equal(b)
    assert make_phantom(124).image_id != a.image_id


def test_phantom_is_8bit_quantized_unit_range():
    img = make_phantom(5)
    assert img.width == img.height == 64
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
    scaled = img.pixels * 255.0
    assert np.allclose(scaled, np.rint(scaled), atol=1e-9)


def test_phantom_has_structure():
    # a useful phantom is neither flat nor pure noise: some contrast,
    # strong row-to-row correlation
    img = make_phantom(6)
    assert img.pixels.std() > 0.05
    rows = img.pixels
    corr = np.corrcoef(rows[:-1].ravel(), rows[1:].ravel())[0, 1]
    assert corr > 0.8


def test_corpus_count_and_distinct_ids():
    imgs = make_corpus(8, seed=2)
    assert len(imgs) == 8
    assert len({im.image_id for im in imgs}) == 8
    again = make_corpus(8, seed=2)
    assert [im.image_id for im in again] == [im.image_id for im in imgs]


def test_corpus_custom_size():
    imgs = make_corpus(2, seed=3, size=32)
    assert all(im.width == im.height == 32 for im in imgs)


def test_load_pgm_dir_round_trip(tmp_path):
    imgs = make_corpus(3, seed=4)
    for i, im in enumerate(imgs):
        write_pgm(im, tmp_path / f"img_{i}.pgm")
    loaded = load_pgm_dir(tmp_path)
    assert [name for name, _ in loaded] == ["img_0", "img_1", "img_2"]
    # 8-bit quantized phantoms survive the PGM byte format exactly
    for (name, got), want in zip(loaded, imgs):
        assert got.raster_equal(want), name


def test_load_pgm_dir_empty_raises(tmp_path):
    with pytest.raises(NotFound):
        load_pgm_dir(tmp_path)
