import json
import logging
import shutil

import pytest

from matalign.hogindex import ShapeCandidate
from matalign.material import MaterialLibrary, classifier_metrics, load_material_library
from matalign.pipeline import (PipelineConfig, SystemicError, evaluate, funnel_counts, load_descriptors,
                               run_pipeline, select_candidates)
from matalign.fixtures import write_closed_loop

from conftest import CLOSED_LOOP_CONFIG


def cand(exemplar, distance, pose=0):
    return ShapeCandidate(exemplar_id=exemplar, pose_index=pose, distance=distance)


# --- candidate selection --------------------------------------------------------------------

def test_top_n_per_shape():
    inverted = {"a": [cand(f"e{i:02d}", 20 - i) for i in range(20)], "b": [cand("x", 1.0)]}
    out = select_candidates(inverted, top_n=12, distance_cutoff=100.0)
    a = [c for c in out if c.shape_id == "a"]
    assert len(a) == 12
    assert [c.hog_distance for c in a] == sorted(c.hog_distance for c in a) == list(range(1, 13))
    assert [c.shape_id for c in out].count("b") == 1


def test_cutoff_applied_after_top_n():
    inverted = {"a": [cand("e0", 1.0), cand("e1", 2.0), cand("e2", 9.0)]}
    assert [c.exemplar_id for c in select_candidates(inverted, 12, 8.0)] == ["e0", "e1"]
    # top_n first: only e0 and e1 are considered, so "min" keeps neither
    assert select_candidates(inverted, 2, 8.0, "min") == []
    assert [c.exemplar_id for c in select_candidates(inverted, 3, 8.0, "min")] == ["e2"]


def test_all_beyond_cutoff_logged(caplog):
    inverted = {"lonely": [cand("e0", 50.0), cand("e1", 60.0)]}
    with caplog.at_level(logging.INFO, logger="matalign"):
        assert select_candidates(inverted, 12, 8.0) == []
    assert "lonely" in caplog.text


def test_order_is_stable_on_ties():
    inverted = {"s": [cand("b", 1.0), cand("a", 1.0), cand("c", 0.5)],
                "r": [{"exemplar_id": "z", "pose_index": 3, "distance": 0.1}]}
    out = select_candidates(inverted)
    assert [(c.shape_id, c.exemplar_id) for c in out] == [("r", "z"), ("s", "c"), ("s", "a"), ("s", "b")]
    assert out[0].pose_index == 3 and out[0].key == "r__z"


def test_bad_direction():
    with pytest.raises(ValueError):
        select_candidates({}, direction="between")


# --- config ---------------------------------------------------------------------------------

def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"top_k": 3})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"cutoff_direction": "sideways"})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"matcher": "neural"})
    with pytest.raises(TypeError):
        PipelineConfig.from_dict({"flow": {"bogus": 1}})


def test_config_hash_stable_and_partial_nested_merge():
    a = PipelineConfig.from_dict({"flow": {"iterations": 3}})
    b = PipelineConfig.from_dict(json.loads(a.canonical_json()))
    assert a.hash == b.hash and a.flow_params.iterations == 3
    assert a.hash != PipelineConfig().hash
    assert PipelineConfig(workers=4).hash == PipelineConfig().hash


# --- small end-to-end runs -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_loop(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_loop")
    write_closed_loop(root, n_shapes=3, seed=1)
    return root


def _run(root, run_dir, **overrides):
    cfg = PipelineConfig.from_dict({**CLOSED_LOOP_CONFIG, **overrides})
    return run_pipeline(root / "shapes", root / "exemplars", run_dir, root / "library.json", cfg,
                        substance_dir=root / "substance", truth=root / "truth.json")


def test_empty_exemplar_dir(small_loop, tmp_path):
    (tmp_path / "none").mkdir()
    cfg = PipelineConfig.from_dict(CLOSED_LOOP_CONFIG)
    report = run_pipeline(small_loop / "shapes", tmp_path / "none", tmp_path / "run", small_loop / "library.json",
                          cfg, substance_dir=small_loop / "substance")
    assert report["funnel"] == {"candidates": 0, "refined": 0, "substance": 0, "assigned": 0}
    assert report["ingest"]["kept"] == 0 and report["failures"] == []
    assert (tmp_path / "run" / "report.json").exists()


def test_empty_library_is_systemic(small_loop, tmp_path):
    (tmp_path / "empty.json").write_text(MaterialLibrary(()).to_json())
    with pytest.raises(SystemicError):
        run_pipeline(small_loop / "shapes", small_loop / "exemplars", tmp_path / "run", tmp_path / "empty.json")
    with pytest.raises(SystemicError):
        run_pipeline(small_loop / "shapes", small_loop / "exemplars", tmp_path / "run", tmp_path / "nope.json")


def test_failures_are_isolated(small_loop, tmp_path):
    root = tmp_path / "broken"
    shutil.copytree(small_loop, root)
    (root / "shapes" / "zzbroken.obj").write_text("v 0 0 0\nf 1 2 3\n")
    (root / "substance" / "exemplar01.subst").unlink()
    report = _run(root, tmp_path / "run")
    assert [f["shape_id"] for f in report["index"]["shape_failures"]] == ["zzbroken"]
    by_key = {f"{r['candidate']['shape_id']}__{r['candidate']['exemplar_id']}": r for r in report["candidates"]}
    bad = by_key["shape01__exemplar01"]
    assert bad["status"] == {"align": "ok", "substance": "failed", "assign": "pending"}
    assert report["failures"] == [dict(bad["failure"], key="shape01__exemplar01")]
    assert by_key["shape00__exemplar00"]["status"]["assign"] == "ok"
    assert by_key["shape02__exemplar02"]["status"]["assign"] == "ok"
    names = sorted(p.name for p in (tmp_path / "run" / "descriptors").iterdir())
    assert names == ["shape00__exemplar00.json", "shape02__exemplar02.json"]


def test_render_to_exemplar_direction(small_loop, tmp_path):
    report = _run(small_loop, tmp_path / "fwd", flow_direction="render-to-exemplar")
    assert report["funnel"]["assigned"] == 3
    assert report["metrics"]["pose_recovery"] == 1.0
    for rec in report["candidates"]:
        assert rec["alignment"]["silhouette_iou_refined"] >= 0.9
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"flow_direction": "sideways"})


def test_parallel_matches_sequential(small_loop, tmp_path):
    _run(small_loop, tmp_path / "seq")
    _run(small_loop, tmp_path / "par", workers=2)
    for rel in ["report.json", "align.json", "assign.json", "index.maidx"]:
        assert (tmp_path / "seq" / rel).read_bytes() == (tmp_path / "par" / rel).read_bytes(), rel
    seq = sorted((tmp_path / "seq" / "descriptors").iterdir())
    par = sorted((tmp_path / "par" / "descriptors").iterdir())
    assert [p.name for p in seq] == [p.name for p in par] and len(seq) == 3
    for a, b in zip(seq, par):
        assert a.read_bytes() == b.read_bytes()


# --- the ten-shape closed loop ----------------------------------------------------------------------

def test_closed_loop_recovers_everything(closed_loop_run):
    m = closed_loop_run["report"]["metrics"]
    assert m["pose_recovery"] == 1.0
    assert m["mtl@1"] == 1.0 and m["assigned@1"] == 1.0
    assert m["n_unmatched"] == 0


def test_funnel_monotone_and_consistent(closed_loop_run):
    report = closed_loop_run["report"]
    f = report["funnel"]
    assert f["candidates"] >= f["refined"] >= f["substance"] >= f["assigned"]
    assert f == funnel_counts(report["candidates"])
    order = ["align", "substance", "assign"]
    for r in report["candidates"]:
        states = [r["status"][s] for s in order]
        # nothing runs after a failure or a pending stage
        for i, s in enumerate(states[:-1]):
            if s != "ok":
                assert all(t == "pending" for t in states[i + 1:])


def test_evaluate_matches_direct_metrics(closed_loop_run, closed_loop):
    run_dir, truth = closed_loop_run["run_dir"], closed_loop_run["truth"]
    lib = load_material_library(closed_loop / "library.json")
    descs = load_descriptors(run_dir)
    m = evaluate(descs, truth, lib)
    # independent tally: one ranked list per visible truth part
    truth_parts = {(p["shape_id"], p["exemplar_id"], int(k)): t for p in truth["pairs"]
                   for k, t in p["parts"].items() if t["visible"]}
    hits1 = total = 0
    for d in descs:
        for part in d["parts"]:
            t = truth_parts[(d["shape_id"], d["exemplar_id"], part["part_id"])]
            order = sorted(range(len(lib)), key=lambda i: (-part["scores"][i], lib.ids[i]))
            hits1 += lib.ids[order[0]] == t["material_id"]
            total += 1
    assert total == len(truth_parts)
    assert m["mtl@1"] == hits1 / total
    assert m["pose_recovery"] == closed_loop_run["report"]["metrics"]["pose_recovery"]
    assert classifier_metrics([], [], lib)["n"] == 0
