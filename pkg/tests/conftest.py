import json
import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def closed_loop(tmp_path_factory):
    """Ten self-rendered shape/exemplar pairs with known poses and materials."""
    from matalign.fixtures import write_closed_loop

    root = tmp_path_factory.mktemp("closed_loop")
    write_closed_loop(root, n_shapes=10, seed=0)
    return root


CLOSED_LOOP_CONFIG = {"index_k": 1, "substance_classifier": "fixture", "distance_cutoff": 100.0}


@pytest.fixture(scope="session")
def closed_loop_run(closed_loop, tmp_path_factory):
    """One full pipeline run over the closed-loop fixture, plus its wall time."""
    import time

    from matalign.pipeline import PipelineConfig, run_pipeline

    run_dir = tmp_path_factory.mktemp("run_a")
    cfg = PipelineConfig.from_dict(CLOSED_LOOP_CONFIG)
    t0 = time.perf_counter()
    report = run_pipeline(closed_loop / "shapes", closed_loop / "exemplars", run_dir,
                          closed_loop / "library.json", cfg, substance_dir=closed_loop / "substance",
                          truth=closed_loop / "truth.json")
    elapsed = time.perf_counter() - t0
    return {"run_dir": run_dir, "report": report, "elapsed": elapsed, "config": cfg,
            "truth": json.loads((closed_loop / "truth.json").read_text())}


# --- acceptance report ------------------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record_criterion(number: int, clause: str, ok: bool, detail: str) -> bool:
    """Log one clause of a numbered acceptance criterion; returns ``ok``."""
    ACCEPTANCE.setdefault(number, []).append((clause, bool(ok), detail))
    print(f"criterion {number} [{clause}]: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        clauses = ACCEPTANCE[number]
        ok = all(c[1] for c in clauses)
        parts = "; ".join(f"{name} {'ok' if good else 'FAILED'}: {detail}" for name, good, detail in clauses)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {parts}")
