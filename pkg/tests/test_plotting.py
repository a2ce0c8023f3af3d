import csv

from matalign.camera import build_viewpoint_grid
from matalign.plotting import CANDIDATE_HEADER, FUNNEL_STAGES, grid_figure, write_report_artifacts, write_table


def read_tsv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f, delimiter="\t"))


def record(shape, ex, align="ok", substance="ok", assign="ok", failure=None):
    rec = {"candidate": {"shape_id": shape, "exemplar_id": ex, "pose_index": 3, "hog_distance": 1.5},
           "status": {"align": align, "substance": substance, "assign": assign}, "failure": failure}
    if align == "ok":
        rec["alignment"] = {"flow_energy": 12.0, "flow_saturated": False, "silhouette_iou_coarse": 0.9,
                            "silhouette_iou_refined": 0.95}
    return rec


def test_table_round_trip_with_awkward_text(tmp_path):
    rows = [["a\tb", 1], ['quote "x"', 2.5], ["new\nline", None]]
    write_table(tmp_path / "t.tsv", ["text", "value"], rows)
    got = read_tsv(tmp_path / "t.tsv")
    assert got[0] == ["text", "value"]
    assert [r[0] for r in got[1:]] == ["a\tb", 'quote "x"', "new\nline"]


def test_report_artifacts(tmp_path):
    report = {
        "funnel": {"assigned": 1, "candidates": 3, "refined": 2, "substance": 1},
        "candidates": [record("s0", "e0"),
                       record("s0", "e1", substance="failed", assign="pending",
                              failure={"stage": "substance", "reason": "no map for e1"}),
                       record("s1", "e0", align="failed", substance="pending", assign="pending",
                              failure={"stage": "align", "reason": "ValueError: empty"})],
        "metrics": {"n": 4, "mtl@1": 0.75, "mtl@5": 1.0, "sub@1": None, "pose_recovery": 1.0,
                    "unmatched_truth": []},
    }
    paths = write_report_artifacts(report, tmp_path / "fig")
    names = sorted(p.name for p in paths)
    assert names == ["candidates.tsv", "funnel.png", "funnel.tsv", "iou.png", "metrics.png", "metrics.tsv"]
    for p in paths:
        if p.suffix == ".png":
            assert p.read_bytes()[:4] == b"\x89PNG"
    cands = read_tsv(tmp_path / "fig" / "candidates.tsv")
    assert cands[0] == CANDIDATE_HEADER and len(cands) == 4
    assert cands[2][-2:] == ["substance", "no map for e1"]
    assert cands[3][4] == "" and cands[3][7] == "failed"
    assert read_tsv(tmp_path / "fig" / "funnel.tsv")[1:] == [[s, str(report["funnel"][s])] for s in FUNNEL_STAGES]
    metrics = dict(read_tsv(tmp_path / "fig" / "metrics.tsv")[1:])
    assert metrics["mtl@1"] == "0.75" and "unmatched_truth" not in metrics


def test_report_without_alignments_or_metrics(tmp_path):
    paths = write_report_artifacts({"funnel": {s: 0 for s in FUNNEL_STAGES}, "candidates": []}, tmp_path)
    assert sorted(p.name for p in paths) == ["candidates.tsv", "funnel.png", "funnel.tsv"]
    assert read_tsv(tmp_path / "candidates.tsv") == [CANDIDATE_HEADER]


def test_grid_figure(tmp_path):
    p = grid_figure(build_viewpoint_grid("paper456").poses, tmp_path / "grid.png")
    assert p.stat().st_size > 1000
