import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from matalign.camera import SphericalPose
from matalign.fixtures import random_assembly
from matalign.hogindex import (HogConfig, RenderingSet, build_reverse_index, coarse_match, hog, invert_index,
                               load_index, save_index)
from matalign.raster import render_flat_color


def render(seed, theta=0.9, phi=1.1, res=128):
    mesh = random_assembly(np.random.default_rng(seed))
    return render_flat_color(mesh, SphericalPose(theta, phi), res, [(0.55, 0.55, 0.55)] * 3)


def random_set(rng, n, dim=12, n_shapes=5, n_poses=40):
    poses = tuple(SphericalPose(2 * math.pi * i / n_poses, 1.0) for i in range(n_poses))
    shape_ids = tuple(f"s{int(rng.integers(n_shapes))}" for _ in range(n))
    return RenderingSet(rng.random((n, dim)), shape_ids, rng.integers(0, n_poses, n), poses)


def brute_top_k(q, rs, k):
    rows = [(float(np.sqrt(((rs.descriptors[i] - q) ** 2).sum())), rs.shape_ids[i], int(rs.pose_indices[i]))
            for i in range(len(rs))]
    return sorted(rows)[:k]


# --- descriptor -----------------------------------------------------------------------

def test_default_length_1352():
    d = hog(render(0))
    assert len(d) == 1352 == HogConfig().length
    assert (d.values >= 0).all()


def test_constant_image_zero_descriptor():
    assert not hog(np.full((64, 64), 0.4)).values.any()


def test_translation_stability():
    img = render(1)
    shifted = np.full_like(img, 255)
    shifted[:, 1:] = img[:, :-1]
    other = render(2, theta=2.6, phi=0.6)
    d_shift = np.linalg.norm(hog(img).values - hog(shifted).values)
    d_other = np.linalg.norm(hog(img).values - hog(other).values)
    assert d_shift < 0.15 * d_other


def test_hog_deterministic_and_config():
    img = render(3)
    assert np.array_equal(hog(img).values, hog(img).values)
    cfg = HogConfig(cells_x=4, cells_y=6, orientation_bins=9, cell_size=4, signed=True)
    assert len(hog(img, cfg)) == 4 * 6 * 9
    with pytest.raises(ValueError):
        hog(np.zeros((5, 5)))


# --- retrieval ------------------------------------------------------------------------

def test_coarse_match_identity_and_order():
    rs = RenderingSet(np.array([[5.0, 0.0], [3.0, 0.0], [7.0, 0.0]]), ("a", "b", "c"), [0, 1, 2],
                      tuple(SphericalPose(i, 1.0) for i in range(3)))
    m = coarse_match(np.zeros(2), rs)
    assert (m.shape_id, m.distance) == ("b", 3.0)
    m = coarse_match(rs.descriptors[2], rs)
    assert (m.shape_id, m.pose_index, m.distance) == ("c", 2, 0.0)
    with pytest.raises(ValueError):
        coarse_match(np.zeros(2), RenderingSet(np.zeros((0, 2)), (), [], ()))


def test_coarse_match_ties_by_shape_then_pose():
    rs = RenderingSet(np.ones((3, 2)), ("b", "a", "a"), [0, 5, 2], tuple(SphericalPose(i, 1.0) for i in range(6)))
    m = coarse_match(np.zeros(2), rs)
    assert (m.shape_id, m.pose_index) == ("a", 2)


@given(st.integers(0, 2 ** 31))
def test_coarse_match_equals_linear_scan(seed):
    rng = np.random.default_rng(seed)
    rs = random_set(rng, 100)
    q = rng.random(12)
    m = coarse_match(q, rs)
    d, s, p = brute_top_k(q, rs, 1)[0]
    assert (m.shape_id, m.pose_index) == (s, p)
    assert m.distance == pytest.approx(d)


def test_reverse_index_k1_is_coarse_match():
    rng = np.random.default_rng(7)
    rs = random_set(rng, 60)
    ex = {f"x{i}": rng.random(12) for i in range(10)}
    idx = build_reverse_index(ex, rs, 1)
    for e, q in ex.items():
        m = coarse_match(q, rs)
        (entry,) = idx.entries[e]
        assert (entry.shape_id, entry.pose_index, entry.distance) == (m.shape_id, m.pose_index, m.distance)


def test_reverse_index_k_exceeds_size():
    rng = np.random.default_rng(8)
    rs = random_set(rng, 15)
    idx = build_reverse_index({"x": rng.random(12)}, rs, 50)
    d = [e.distance for e in idx.entries["x"]]
    assert len(d) == 15 and d == sorted(d)


def test_reverse_index_matches_full_sort():
    rng = np.random.default_rng(9)
    rs = random_set(rng, 200, dim=32)
    ex = {f"x{i:02d}": rng.random(32) for i in range(50)}
    k = 7
    idx = build_reverse_index(ex, rs, k)
    for e, q in ex.items():
        got = [(e_.shape_id, e_.pose_index) for e_ in idx.entries[e]]
        want = [(s, p) for _, s, p in brute_top_k(q, rs, k)]
        assert got == want
        np.testing.assert_allclose([e_.distance for e_ in idx.entries[e]], [d for d, _, _ in brute_top_k(q, rs, k)])


def test_identity_retrieval_on_renderings():
    imgs = {(f"s{s}", p): render(s, theta=0.5 * p) for s in range(3) for p in range(4)}
    keys = sorted(imgs)
    poses = tuple(SphericalPose(0.5 * p, 1.1) for p in range(4))
    rs = RenderingSet([hog(imgs[k]).values for k in keys], tuple(k[0] for k in keys), [k[1] for k in keys], poses)
    for key in keys:
        m = coarse_match(hog(imgs[key]), rs)
        assert (m.shape_id, m.pose_index, m.distance) == (key[0], key[1], 0.0)


def test_build_rejects_bad_k():
    with pytest.raises(ValueError):
        build_reverse_index({}, random_set(np.random.default_rng(0), 3), 0)


# --- inversion ------------------------------------------------------------------------

def test_invert_single_exemplar():
    rs = RenderingSet(np.array([[0.0], [4.0]]), ("A", "B"), [3, 1], tuple(SphericalPose(i, 1.0) for i in range(4)))
    inv = invert_index(build_reverse_index({"x": np.array([1.0])}, rs, 1))
    assert list(inv) == ["A"]
    assert [(c.exemplar_id, c.pose_index, c.distance) for c in inv["A"]] == [("x", 3, 1.0)]
    assert "B" not in inv


@given(st.integers(0, 2 ** 31), st.integers(1, 12))
def test_inversion_pair_set_and_order(seed, k):
    rng = np.random.default_rng(seed)
    rs = random_set(rng, 40, dim=6, n_shapes=6)
    ex = {f"x{i}": rng.random(6) for i in range(8)}
    idx = build_reverse_index(ex, rs, k)
    inv = invert_index(idx)
    # oracle: closest pose per (shape, exemplar) among surviving entries
    best = {}
    for e in ex:
        for entry in idx.entries[e]:
            key = (entry.shape_id, e)
            best[key] = min(best.get(key, (math.inf, -1)), (entry.distance, entry.pose_index))
    got = {(s, c.exemplar_id): (c.distance, c.pose_index) for s, cands in inv.items() for c in cands}
    assert got == best
    for cands in inv.values():
        d = [c.distance for c in cands]
        assert d == sorted(d)


def test_index_binary_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    rs = random_set(rng, 30, dim=5)
    idx = build_reverse_index({f"x{i}": rng.random(5) for i in range(4)}, rs, 3, HogConfig(cells_x=5))
    path = tmp_path / "i.maidx"
    save_index(idx, path)
    back = load_index(path)
    assert back.to_json() == idx.to_json()
    assert np.array_equal(back.renderings.descriptors, rs.descriptors)
    assert back.renderings.shape_ids == rs.shape_ids
    save_index(back, tmp_path / "j.maidx")
    assert (tmp_path / "j.maidx").read_bytes() == path.read_bytes()
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_index(tmp_path / "bad")
