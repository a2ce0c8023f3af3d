import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matalign.camera import SphericalPose
from matalign.exemplar import (DEFAULT_SIZE, Exemplar, NoForegroundError, dedup, dedup_descriptor, foreground_mask,
                               standardize)
from matalign.fixtures import random_assembly
from matalign.raster import render_flat_color


def white(h=64, w=64):
    return np.full((h, w, 3), 255, dtype=np.uint8)


def chair_photo(seed, theta=0.8, phi=1.2, res=96):
    mesh = random_assembly(np.random.default_rng(seed))
    colors = [(0.7, 0.3, 0.2), (0.2, 0.5, 0.7), (0.3, 0.3, 0.3)]
    return render_flat_color(mesh, SphericalPose(theta, phi), res, colors)


def second_moment_ratio(mask):
    ys, xs = np.nonzero(mask)
    return float(np.std(ys) / np.std(xs))


def test_white_image_has_no_foreground():
    with pytest.raises(NoForegroundError):
        foreground_mask(white())


def test_black_square_mask_exact():
    img = white()
    img[10:30, 20:50] = 0
    expected = np.zeros((64, 64), dtype=bool)
    expected[10:30, 20:50] = True
    assert np.array_equal(foreground_mask(img, 250), expected)


def test_speck_removed():
    img = white(100, 100)
    img[20:70, 20:60] = 40
    img[90:92, 90:92] = 0   # 4 px, below 0.1% of 10^4
    mask = foreground_mask(img)
    assert mask[20:70, 20:60].all()
    assert not mask[90:92, 90:92].any()
    assert mask.sum() == 50 * 40


def test_near_white_counts_as_background():
    img = white()
    img[:] = 250
    img[5:15, 5:15] = 100
    assert foreground_mask(img, 247).sum() == 100


def test_standardize_default_and_custom_size():
    img = white(300, 200)
    img[50:250, 60:140] = 30
    mask = foreground_mask(img)
    ex = standardize(img, mask)
    assert ex.image.shape == (DEFAULT_SIZE, DEFAULT_SIZE, 3)
    small = standardize(img, mask, 256)
    assert small.image.shape == (256, 256, 3) and small.mask.shape == (256, 256)
    assert small.mask.dtype == bool


def test_standardize_preserves_aspect():
    img = chair_photo(3)
    mask = foreground_mask(img)
    ex = standardize(img, mask, 256)
    before, after = second_moment_ratio(mask), second_moment_ratio(ex.mask)
    assert abs(after / before - 1) < 0.02


def test_standardize_idempotent():
    img = chair_photo(5, res=128)
    ex = standardize(img, foreground_mask(img), 128)
    again = standardize(ex.image, ex.mask, 128)
    diff = np.abs(again.image.astype(int) - ex.image.astype(int))
    assert diff.max() <= 1


def test_exemplar_invariants():
    with pytest.raises(ValueError):
        Exemplar("a", np.zeros((4, 4, 3)), np.ones((5, 5), bool))
    with pytest.raises(NoForegroundError):
        Exemplar("a", np.zeros((4, 4, 3)), np.zeros((4, 4), bool))


def _exemplar(i, img):
    return Exemplar(f"e{i}", img, foreground_mask(img))


def test_dedup_exact_duplicate_removed_first_kept():
    a, b = chair_photo(1), chair_photo(2, theta=2.5, phi=0.7)
    exs = [_exemplar(0, a), _exemplar(1, b), _exemplar(2, a.copy())]
    kept, removed = dedup(exs)
    assert [e.id for e in kept] == ["e0", "e1"]
    assert removed == [("e2", "e0", 0.0)]


def test_dedup_unrelated_kept():
    a, b = chair_photo(1), chair_photo(2, theta=2.5, phi=0.7)
    d = np.linalg.norm(dedup_descriptor(a) - dedup_descriptor(b))
    assert d > 0.1
    kept, removed = dedup([_exemplar(0, a), _exemplar(1, b)])
    assert len(kept) == 2 and not removed


@settings(max_examples=15)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=8), st.floats(0.05, 0.8))
def test_dedup_no_close_pairs_survive(choices, threshold):
    # draws repeat images from a small pool, so duplicates and near pairs both occur
    pool = [chair_photo(s % 3, theta=0.8 + 0.15 * (s // 3)) for s in range(6)]
    exs = [_exemplar(i, pool[c]) for i, c in enumerate(choices)]
    kept, removed = dedup(exs, threshold)
    desc = [dedup_descriptor(e.image) for e in kept]
    for i in range(len(desc)):
        for j in range(i + 1, len(desc)):
            assert np.linalg.norm(desc[i] - desc[j]) >= threshold
    assert len(kept) + len(removed) == len(exs)
    assert kept[0].id == "e0"
