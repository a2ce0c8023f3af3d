import csv
import json
import subprocess
import sys

import pytest

from matalign.cli import main
from matalign.fixtures import write_closed_loop
from matalign.material import MaterialLibrary


def read_tsv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f, delimiter="\t"))


def test_grid_table_and_figure(tmp_path, capsys):
    assert main(["grid", "--out", str(tmp_path / "g.tsv"), "--figure", str(tmp_path / "g.png")]) == 0
    assert "456 poses" in capsys.readouterr().out
    rows = read_tsv(tmp_path / "g.tsv")
    assert rows[0] == ["index", "theta", "phi", "r", "fov_x"] and len(rows) == 457
    assert (tmp_path / "g.png").read_bytes()[:4] == b"\x89PNG"


def test_loss_check(capsys):
    assert main(["loss", "check", "--fd", "--states", "20"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and len(out.strip().splitlines()) == 6
    # an impossible tolerance reports failure through the exit code
    assert main(["loss", "check", "--fd", "--states", "5", "--tolerance", "0"]) == 1


def test_synthgen_sample(tmp_path):
    loop = tmp_path / "loop"
    write_closed_loop(loop, n_shapes=1, seed=3)
    out = tmp_path / "synth"
    argv = ["synthgen", "sample", "--count", "4", "--seed", "9", "--library", str(loop / "library.json"),
            "--shape", str(loop / "shapes" / "shape00.obj"), "--part-substances", '{"0": "wood", "1": "metal"}',
            "--env", "studio", "--out", str(out), "--emit", "--resolution", "32", "--holdout", "0.5"]
    assert main(argv) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["count"] == 4 and len(manifest["configs"]) == 4
    assert len(list(out.glob("*_scene.json"))) == 4 and len(list(out.glob("*_material.png"))) == 4
    first = (out / "manifest.json").read_bytes()
    assert main(argv) == 0
    assert (out / "manifest.json").read_bytes() == first


def test_bad_library_exit_code_2(tmp_path, capsys):
    (tmp_path / "empty.json").write_text(MaterialLibrary(()).to_json())
    (tmp_path / "ex").mkdir()
    (tmp_path / "shapes").mkdir()
    code = main(["run", str(tmp_path / "shapes"), str(tmp_path / "ex"), str(tmp_path / "run"),
                 "--library", str(tmp_path / "empty.json"), "--no-figures"])
    assert code == 2 and "error" in capsys.readouterr().err
    assert main(["evaluate", str(tmp_path / "run"), str(tmp_path / "t.json"),
                 "--library", str(tmp_path / "missing.json")]) == 2


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(ValueError):
        main(["ingest", str(tmp_path), str(tmp_path / "run"), "--set", "nonsense=1"])


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_loop")
    assert main(["fixtures", "closed-loop", str(root / "loop"), "--shapes", "2", "--seed", "4"]) == 0
    loop, run = root / "loop", root / "run"
    code = main(["run", str(loop / "shapes"), str(loop / "exemplars"), str(run), "--library",
                 str(loop / "library.json"), "--substance-dir", str(loop / "substance"), "--truth",
                 str(loop / "truth.json"), "--set", "index_k=1", "--set", "substance_classifier=fixture",
                 "--set", "distance_cutoff=100"])
    assert code == 0
    return loop, run


def test_run_writes_report_and_figures(cli_run):
    _, run = cli_run
    report = json.loads((run / "report.json").read_text())
    assert report["funnel"]["assigned"] == 2
    figs = run / "figures"
    for name in ("candidates.tsv", "funnel.tsv", "metrics.tsv", "funnel.png", "iou.png", "metrics.png"):
        assert (figs / name).exists(), name
    rows = read_tsv(figs / "candidates.tsv")
    assert len(rows) == 3 and all(len(r) == len(rows[0]) for r in rows)


def test_staged_evaluate_and_index_verbs(cli_run, capsys):
    loop, run = cli_run
    assert main(["evaluate", str(run), str(loop / "truth.json"), "--library", str(loop / "library.json")]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert float(out["pose_recovery"]) == 1.0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics == json.loads((run / "report.json").read_text())["metrics"]
    assert main(["index", "query", str(run), "exemplar00"]) == 0
    assert capsys.readouterr().out.startswith("shape00\t")
    assert main(["index", "query", str(run), "nobody"]) == 1
    assert main(["report", str(run), "--out", str(run / "again")]) == 0
    assert (run / "again" / "funnel.tsv").read_text() == (run / "figures" / "funnel.tsv").read_text()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "matalign.cli", "grid", "--preset", "paper456"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("paper456\t456")
