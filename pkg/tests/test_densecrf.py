import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matalign.densecrf import (CrfParams, dump_marginals, load_marginals, map_labels, mean_field, softmax_neg,
                               unary_from_labels)
from matalign.raster import LabelMap


def random_instance(rng, h, w, n_labels, n_colors=None):
    unary = rng.uniform(0, 3, (h, w, n_labels))
    if n_colors is None:
        guide = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    else:
        palette = rng.integers(0, 256, (n_colors, 3))
        guide = palette[rng.integers(0, n_colors, (h, w))].astype(np.uint8)
    return unary, guide


def loop_mean_field(unary, guide, p: CrfParams):
    """Per-pixel double loop over the Potts update; independent of both library paths."""
    h, w, n = unary.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    q = np.exp(-unary) / np.exp(-unary).sum(-1, keepdims=True)
    for _ in range(p.iterations):
        new = np.empty_like(q)
        for (y, x) in pix:
            msg = np.zeros(n)
            for (yy, xx) in pix:
                if (yy, xx) == (y, x):
                    continue
                dp = (y - yy) ** 2 + (x - xx) ** 2
                dc = float(((guide[y, x].astype(float) - guide[yy, xx]) ** 2).sum())
                k = (p.w_appearance * math.exp(-dp / (2 * p.theta_alpha ** 2) - dc / (2 * p.theta_beta ** 2))
                     + p.w_smoothness * math.exp(-dp / (2 * p.theta_gamma ** 2)))
                msg += k * (1 - q[yy, xx])
            e = np.exp(-(unary[y, x] + msg) - (-(unary[y, x] + msg)).max())
            new[y, x] = e / e.sum()
        q = new
    return q


def test_unary_formula():
    lm = LabelMap(np.array([[0, 1], [2, 1]]), 2)
    u = unary_from_labels(lm, 0.2)
    np.testing.assert_allclose(u[0, 1], [-math.log(0.1), -math.log(0.8), -math.log(0.1)])
    assert np.array_equal(u.argmin(-1), lm.labels)
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            unary_from_labels(lm, bad)


def test_params_validation():
    with pytest.raises(ValueError):
        CrfParams(theta_alpha=0)
    with pytest.raises(ValueError):
        CrfParams(iterations=0)
    with pytest.raises(ValueError):
        CrfParams(w_smoothness=-1)


def test_brute_matches_loop_oracle():
    rng = np.random.default_rng(0)
    unary, guide = random_instance(rng, 4, 5, 3)
    p = CrfParams(w_appearance=0.8, theta_alpha=3.0, theta_beta=40.0, w_smoothness=0.5, theta_gamma=1.5,
                  iterations=3)
    np.testing.assert_allclose(mean_field(unary, guide, p, method="brute"), loop_mean_field(unary, guide, p),
                               atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31), st.integers(4, 32), st.integers(4, 32), st.sampled_from([None, 3, 12]))
def test_fast_matches_brute(seed, h, w, n_colors):
    rng = np.random.default_rng(seed)
    unary, guide = random_instance(rng, h, w, int(rng.integers(2, 5)), n_colors)
    p = CrfParams(w_appearance=float(rng.uniform(0, 2)), theta_alpha=float(rng.uniform(2, 40)),
                  theta_beta=float(rng.uniform(5, 60)), w_smoothness=float(rng.uniform(0, 2)),
                  theta_gamma=float(rng.uniform(0.5, 4)), iterations=int(rng.integers(1, 6)))
    fast = mean_field(unary, guide, p, method="fast")
    brute = mean_field(unary, guide, p, method="brute")
    assert np.abs(fast - brute).max() <= 1e-3


@given(st.integers(0, 2 ** 31))
def test_marginals_normalized_every_iteration(seed):
    rng = np.random.default_rng(seed)
    unary, guide = random_instance(rng, 12, 10, 4)
    seen = []

    def check(it, q):
        seen.append(it)
        assert (q >= 0).all()
        assert np.abs(q.sum(-1) - 1).max() <= 1e-6

    mean_field(unary, guide, CrfParams(iterations=5), callback=check)
    assert seen == list(range(6))


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_zero_pairwise_is_unary_argmax(seed, iters):
    rng = np.random.default_rng(seed)
    labels = LabelMap(rng.integers(0, 4, (9, 7)), 3)
    unary = unary_from_labels(labels, 0.3)
    p = CrfParams(w_appearance=0.0, w_smoothness=0.0, iterations=iters)
    q = mean_field(unary, rng.integers(0, 256, (9, 7, 3)), p)
    np.testing.assert_array_equal(q, softmax_neg(unary))
    assert np.array_equal(map_labels(q).labels, labels.labels)


def test_two_region_purity():
    guide = np.zeros((16, 16, 3), dtype=np.uint8)
    guide[:, 8:] = 255
    unary = np.zeros((16, 16, 2))
    unary[3, 2, 1] = -2.0   # a few seeds; otherwise uniform
    unary[12, 13, 0] = -2.0
    p = CrfParams(w_appearance=5.0, theta_alpha=20.0, theta_beta=10.0, w_smoothness=1.0, theta_gamma=3.0)
    labels = map_labels(mean_field(unary, guide, p, method="brute")).labels
    assert len(np.unique(labels[:, :8])) == 1 and len(np.unique(labels[:, 8:])) == 1


def test_mean_field_deterministic_and_errors():
    rng = np.random.default_rng(5)
    unary, guide = random_instance(rng, 20, 20, 3)
    a = mean_field(unary, guide)
    assert np.array_equal(a, mean_field(unary, guide))
    with pytest.raises(ValueError):
        mean_field(unary, guide[:10])
    with pytest.raises(ValueError):
        mean_field(unary, guide, method="lattice")


def test_map_labels_rules():
    onehot = np.eye(3)[np.array([[0, 2], [1, 1]])]
    assert np.array_equal(map_labels(onehot).labels, [[0, 2], [1, 1]])
    assert (map_labels(np.full((3, 3, 4), 0.25)).labels == 0).all()
    rng = np.random.default_rng(2)
    q = rng.random((5, 5, 3))
    assert np.array_equal(map_labels(q).labels, map_labels(q * rng.uniform(0.1, 10, (5, 5, 1))).labels)


def test_marginals_dump_round_trip(tmp_path):
    q = softmax_neg(np.random.default_rng(3).random((4, 6, 3)))
    dump_marginals(tmp_path / "q.bin", q)
    np.testing.assert_allclose(load_marginals(tmp_path / "q.bin"), q, atol=1e-7)
