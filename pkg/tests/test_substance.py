import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from matalign.raster import LabelMap
from matalign.substance import (CHANNELS, SUBSTANCES, UNKNOWN, ColorPriorClassifier, FixtureClassifier,
                                SubprocessClassifier, SubstanceError, SubstanceMap, SubstanceSet,
                                aggregate_part_substance, classifier_from_spec, crop_substance_map,
                                load_substance_map, one_hot_substance_map, remap_substances, save_substance_map,
                                substance_distribution)


def as_dict(vec):
    return {s: float(v) for s, v in zip(SUBSTANCES, vec) if v > 0}


def random_smap(rng, h, w):
    p = rng.dirichlet(np.ones(len(CHANNELS)), size=(h, w))
    return SubstanceMap(p)


# --- remapping --------------------------------------------------------------------------

def test_remap_examples():
    assert as_dict(substance_distribution({"carpet": 0.6, "wood": 0.4})) == pytest.approx({"fabric": 0.6, "wood": 0.4})
    got = as_dict(substance_distribution({"wood": 0.3, "sky": 0.4, "metal": 0.3}))
    assert got == pytest.approx({"wood": 0.5, "metal": 0.5})
    smap, flagged = remap_substances(np.array([1.0]), ["sky"])
    assert flagged
    np.testing.assert_allclose(smap.probs[0, 0, 1:], np.full(5, 0.2))


def test_remap_rejects_bad_rows_and_aliases():
    with pytest.raises(ValueError):
        remap_substances(np.array([0.5, 0.2]), ["wood", "metal"])
    with pytest.raises(ValueError):
        SubstanceSet(aliases={"rubber": "tire"})


@given(st.integers(0, 2 ** 31))
def test_remap_folds_mass(seed):
    rng = np.random.default_rng(seed)
    labels = list(SUBSTANCES) + ["carpet", "steel", "sky", "grass", "suede"]
    raw = rng.dirichlet(np.ones(len(labels)), size=(3, 4))
    smap, flagged = remap_substances(raw, labels)
    assert not flagged.any()
    fold = {"carpet": "fabric", "steel": "metal", "suede": "leather"}
    expected = np.zeros((3, 4, len(SUBSTANCES)))
    for k, name in enumerate(labels):
        target = fold.get(name, name)
        if target in SUBSTANCES:
            expected[..., SUBSTANCES.index(target)] += raw[..., k]
    np.testing.assert_allclose(smap.probs[..., 1:], expected / expected.sum(-1, keepdims=True), atol=1e-12)
    assert (smap.probs[..., 0] == 0).all()


def test_remap_background_channel():
    smap, _ = remap_substances(np.array([[[0.5, 0.5]]]), ["bg", "wood"], background_label="bg")
    np.testing.assert_allclose(smap.probs[0, 0], [0.5, 0, 0, 0, 0.5, 0])


# --- part aggregation ----------------------------------------------------------------

def test_majority_vote():
    parts = LabelMap(np.ones((10, 10), dtype=int), 1)
    labels = np.full((10, 10), 1 + SUBSTANCES.index("wood"))
    labels[:3] = 1 + SUBSTANCES.index("metal")
    out = aggregate_part_substance(parts, one_hot_substance_map(labels))
    assert out.labels == {0: "wood"}
    assert out.counts[0]["wood"] == 70 and out.counts[0]["metal"] == 30


def test_part_outside_foreground_unknown():
    parts = np.zeros((6, 6), dtype=int)
    parts[:3] = 1
    parts[3:] = 2
    sub = np.zeros((6, 6), dtype=int)
    sub[:3] = 1 + SUBSTANCES.index("fabric")
    out = aggregate_part_substance(LabelMap(parts, 3), one_hot_substance_map(sub))
    assert out.labels == {0: "fabric", 1: UNKNOWN, 2: UNKNOWN}
    assert out.unknown_parts == (1, 2)


def test_tie_breaks_by_mass_then_name():
    parts = LabelMap(np.ones((1, 2), dtype=int), 1)
    probs = np.zeros((1, 2, 6))
    probs[0, 0, 1 + SUBSTANCES.index("wood")] = 0.9
    probs[0, 0, 1 + SUBSTANCES.index("metal")] = 0.1
    probs[0, 1, 1 + SUBSTANCES.index("metal")] = 0.6
    probs[0, 1, 1 + SUBSTANCES.index("wood")] = 0.4
    # one vote each; wood has more summed mass (1.3 vs 0.7)
    assert aggregate_part_substance(parts, SubstanceMap(probs)).labels[0] == "wood"
    sym = one_hot_substance_map(np.array([[1 + SUBSTANCES.index("wood"), 1 + SUBSTANCES.index("metal")]]))
    assert aggregate_part_substance(parts, sym).labels[0] == "metal"


@given(st.integers(0, 2 ** 31))
def test_aggregate_matches_tally_oracle(seed):
    rng = np.random.default_rng(seed)
    parts = LabelMap(rng.integers(0, 5, (32, 32)), 4)
    smap = random_smap(rng, 32, 32)
    out = aggregate_part_substance(parts, smap)
    for part in range(4):
        tally = {s: 0 for s in SUBSTANCES}
        mass = {s: 0.0 for s in SUBSTANCES}
        for y in range(32):
            for x in range(32):
                top = int(np.argmax(smap.probs[y, x]))
                if parts.labels[y, x] == part + 1 and top > 0:
                    tally[SUBSTANCES[top - 1]] += 1
                    for k, s in enumerate(SUBSTANCES):
                        mass[s] += smap.probs[y, x, k + 1]
        assert out.counts[part] == tally
        if sum(tally.values()) == 0:
            assert out.labels[part] == UNKNOWN
        else:
            best = max(tally.values())
            tied = [s for s in SUBSTANCES if tally[s] == best]
            assert out.labels[part] == sorted(tied, key=lambda s: (-mass[s], s))[0]


@given(st.integers(0, 2 ** 31))
def test_aggregate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    parts = rng.integers(0, 4, (12, 12))
    smap = random_smap(rng, 12, 12)
    perm = rng.permutation(144)
    p2 = parts.reshape(-1)[perm].reshape(12, 12)
    s2 = smap.probs.reshape(144, -1)[perm].reshape(12, 12, -1)
    a = aggregate_part_substance(LabelMap(parts, 3), smap)
    b = aggregate_part_substance(LabelMap(p2, 3), SubstanceMap(s2))
    assert a.labels == b.labels and a.counts == b.counts
    assert set(a.labels) == {0, 1, 2}


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        aggregate_part_substance(LabelMap(np.zeros((3, 3), int), 1), one_hot_substance_map(np.zeros((3, 4), int)))


# --- classifiers and files ------------------------------------------------------------

def test_map_file_round_trip(tmp_path):
    smap = random_smap(np.random.default_rng(0), 7, 9)
    save_substance_map(tmp_path / "e.subst", smap)
    assert np.array_equal(load_substance_map(tmp_path / "e.subst").probs, smap.probs)
    out = FixtureClassifier(tmp_path).classify(np.zeros((7, 9, 3)), np.ones((7, 9), bool), "e")
    assert np.array_equal(out.probs, smap.probs)
    with pytest.raises(SubstanceError) as err:
        FixtureClassifier(tmp_path).classify(np.zeros((7, 9, 3)), np.ones((7, 9), bool), "missing")
    assert err.value.exemplar_id == "missing"


def test_fixture_classifier_applies_crop(tmp_path):
    labels = np.zeros((20, 20), dtype=int)
    labels[5:15, 8:12] = 1 + SUBSTANCES.index("wood")
    save_substance_map(tmp_path / "e.subst", one_hot_substance_map(labels))
    box = (5, 5, 10)
    out = FixtureClassifier(tmp_path, {"e": box}).classify(None, np.ones((10, 10), bool), "e")
    assert out.shape == (10, 10)
    assert np.array_equal(out.argmax(), labels[5:15, 5:15])
    assert crop_substance_map(one_hot_substance_map(labels), box, 20).shape == (20, 20)


def test_color_prior_wood_swatch():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    img[:] = (150, 100, 50)   # hue 30 deg, saturation 0.67, value 0.59: inside the wood rule
    mask = np.ones((8, 8), bool)
    mask[0] = False
    smap = ColorPriorClassifier().classify(img, mask)
    assert (smap.argmax()[1:] == 1 + SUBSTANCES.index("wood")).all()
    assert (smap.argmax()[0] == 0).all()
    np.testing.assert_allclose(smap.probs.sum(-1), 1.0)


def test_subprocess_plugin(tmp_path):
    script = tmp_path / "plugin.py"
    script.write_text(
        "import sys\n"
        "import numpy as np\n"
        "from matalign.imageops import read_image\n"
        "from matalign.substance import one_hot_substance_map, save_substance_map\n"
        "img = read_image(sys.argv[1])\n"
        "save_substance_map(sys.argv[3], one_hot_substance_map(np.full(img.shape[:2], 2)))\n")
    clf = classifier_from_spec(f"cmd:{sys.executable} {script}")
    assert not clf.reentrant
    out = clf.classify(np.zeros((6, 5, 3), np.uint8), np.ones((6, 5), bool), "x")
    assert (out.argmax() == 2).all()
    bad = SubprocessClassifier([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(SubstanceError, match="exit code 3"):
        bad.classify(np.zeros((4, 4, 3), np.uint8), np.ones((4, 4), bool), "y")


def test_classifier_spec_errors():
    with pytest.raises(ValueError):
        classifier_from_spec("neural")
    with pytest.raises(ValueError):
        classifier_from_spec("fixture")
