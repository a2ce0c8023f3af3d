"""Command-line entry point: ``matalign <verb> ...``.

Exit status is 0 when the run as a whole succeeded (individual candidates may
still have failed; see the report) and 2 on systemic errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .camera import build_viewpoint_grid
from .material import LibraryError

log = logging.getLogger("matalign")


def _config(args) -> pl.PipelineConfig:
    data = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        head, _, sub = key.partition(".")
        if sub:
            data.setdefault(head, {})[sub] = value
        else:
            data[head] = value
    if getattr(args, "flow_direction", None):
        data["flow_direction"] = args.flow_direction
    return pl.PipelineConfig.from_dict(data)


def _add_config(p):
    p.add_argument("--config", help="pipeline config JSON (missing keys take defaults)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value, e.g. --set flow.window=9 (repeatable)")


def _add_flow_direction(p):
    p.add_argument("--flow-direction", choices=pl.FLOW_DIRECTIONS,
                   help="grid the silhouette flow is computed on (default: exemplar-to-render)")


# --- verbs ----------------------------------------------------------------------------

def cmd_grid(args) -> int:
    from .plotting import grid_figure, write_table

    grid = build_viewpoint_grid(args.preset)
    print(f"{args.preset}\t{len(grid)} poses")
    if args.out:
        rows = [[i, f"{p.theta:.9f}", f"{p.phi:.9f}", p.r, p.fov_x] for i, p in enumerate(grid.poses)]
        write_table(args.out, ["index", "theta", "phi", "r", "fov_x"], rows)
    if args.figure:
        grid_figure(grid.poses, args.figure)
    return 0


def cmd_ingest(args) -> int:
    m = pl.ingest(args.exemplars, args.run_dir, _config(args))
    print(f"kept {len(m['exemplars'])}, rejected {len(m['rejected'])}, duplicates {len(m['duplicates'])}")
    return 0


def cmd_index(args) -> int:
    from .hogindex import invert_index, load_index

    if args.index_cmd == "build":
        cfg = _config(args)
        pl.lock_config(args.run_dir, cfg)
        s = pl.build_index(args.shapes, args.run_dir, cfg)
        print(f"{len(s['shapes'])} shapes, {s['renderings']} renderings, {s['exemplars']} exemplars")
        return 0
    index = load_index(Path(args.run_dir) / "index.maidx")
    if args.index_cmd == "query":
        if args.exemplar not in index.entries:
            print(f"unknown exemplar {args.exemplar!r}", file=sys.stderr)
            return 1
        for e in index.entries[args.exemplar]:
            print(f"{e.shape_id}\t{e.pose_index}\t{e.distance:.6f}")
        return 0
    inverted = invert_index(index)
    for shape, cands in inverted.items():
        for c in cands:
            print(f"{shape}\t{c.exemplar_id}\t{c.pose_index}\t{c.distance:.6f}")
    return 0


def cmd_align(args) -> int:
    records = pl.align_stage(args.shapes, args.run_dir, _config(args))
    ok = sum(r["status"]["align"] == "ok" for r in records)
    print(f"aligned {ok} of {len(records)} candidates")
    return 0


def cmd_assign(args) -> int:
    lib = pl.resolve_library(args.library)
    res = pl.assign_stage(args.shapes, args.run_dir, lib, _config(args), args.substance_dir)
    print(json.dumps(res["funnel"], sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    lib = pl.resolve_library(args.library)
    truth = json.loads(Path(args.truth).read_text())
    top1 = pl.index_top1(args.run_dir) if (Path(args.run_dir) / "index.maidx").exists() else None
    metrics = pl.evaluate(pl.load_descriptors(args.run_dir), truth, lib, top1)
    Path(args.run_dir, "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    for k, v in metrics.items():
        if not isinstance(v, list):
            print(f"{k}\t{v}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = pl.run_pipeline(args.shapes, args.exemplars, args.run_dir, args.library, cfg,
                             args.substance_dir, args.truth)
    print(json.dumps(report["funnel"], sort_keys=True))
    if "metrics" in report:
        print(json.dumps({k: v for k, v in report["metrics"].items() if not isinstance(v, list)},
                         sort_keys=True))
    if not args.no_figures:
        from .plotting import write_report_artifacts

        for p in write_report_artifacts(report, Path(args.run_dir) / "figures"):
            log.info("wrote %s", p)
    return 0


def cmd_report(args) -> int:
    from .plotting import write_report_artifacts

    report = json.loads(Path(args.run_dir, "report.json").read_text())
    for p in write_report_artifacts(report, args.out or Path(args.run_dir) / "figures"):
        print(p)
    return 0


def cmd_synthgen(args) -> int:
    from .imageops import write_png
    from .shapelib import load_obj, prepare_mesh
    from .synthgen import (derive_seeds, emit_scene, sample_render_config, scene_bytes,
                           split_train_validation, training_manifest, validate_scene)

    lib = pl.resolve_library(args.library)
    mesh = prepare_mesh(load_obj(Path(args.shape).read_text()))
    part_substances = {int(k): v for k, v in json.loads(args.part_substances).items()}
    poses = build_viewpoint_grid(args.grid).poses
    envs = args.env or ["env-000"]
    shape_id = Path(args.shape).stem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = []
    for i, seed in enumerate(derive_seeds(args.seed, args.count)):
        cfg = sample_render_config(shape_id, poses, part_substances, lib, envs, seed)
        configs.append(cfg)
        if args.emit:
            prefix = f"{i:06d}_"
            scene, mat, sub = emit_scene(cfg, mesh, lib, args.resolution, map_prefix=prefix)
            validate_scene(scene)
            (out / f"{prefix}scene.json").write_bytes(scene_bytes(scene))
            write_png(out / f"{prefix}material.png", mat.labels.astype(np.uint16))
            write_png(out / f"{prefix}substance.png", sub.labels.astype(np.uint8))
    manifest = {"master_seed": args.seed, "count": args.count,
                "configs": [json.loads(c.to_json()) for c in configs]}
    if args.holdout is not None:
        split = split_train_validation([shape_id], envs, args.holdout, np.random.default_rng(args.seed))
        manifest["split"] = split
        manifest["partition"] = training_manifest(configs, split)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"{args.count} configs written to {out}")
    return 0


def cmd_loss(args) -> int:
    from .multitask import fd_suite

    worst = fd_suite(args.states, args.seed)
    bad = {k: v for k, v in worst.items() if v > args.tolerance}
    for k, v in sorted(worst.items()):
        print(f"{k}\t{v:.3e}\t{'ok' if v <= args.tolerance else 'FAIL'}")
    return 1 if bad else 0


def cmd_fixtures(args) -> int:
    from .fixtures import write_closed_loop, write_reference_manifest

    if args.fixture_cmd == "closed-loop":
        m = write_closed_loop(args.out, args.shapes, args.seed)
        print(f"{len(m['pairs'])} closed-loop pairs in {args.out}")
    else:
        print(write_reference_manifest(args.out))
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matalign", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("grid", help="print or export the viewpoint grid")
    p.add_argument("--preset", default="paper456")
    p.add_argument("--out", help="write poses as TSV")
    p.add_argument("--figure", help="write a PNG of the grid")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ingest", help="standardize and deduplicate exemplar images")
    p.add_argument("exemplars")
    p.add_argument("run_dir")
    _add_config(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build, query or invert the HOG reverse index")
    isub = p.add_subparsers(dest="index_cmd", required=True)
    q = isub.add_parser("build")
    q.add_argument("shapes")
    q.add_argument("run_dir")
    _add_config(q)
    q = isub.add_parser("query")
    q.add_argument("run_dir")
    q.add_argument("exemplar")
    q = isub.add_parser("invert")
    q.add_argument("run_dir")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("align", help="select candidates and refine their part maps")
    p.add_argument("shapes")
    p.add_argument("run_dir")
    _add_config(p)
    _add_flow_direction(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("assign", help="assign substances and materials to aligned pairs")
    p.add_argument("shapes")
    p.add_argument("run_dir")
    p.add_argument("--library", help="material manifest (default: bundled reference)")
    p.add_argument("--substance-dir", help="directory of precomputed substance maps (fixture classifier)")
    _add_config(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("evaluate", help="score descriptors against a truth manifest")
    p.add_argument("run_dir")
    p.add_argument("truth")
    p.add_argument("--library")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="all stages end to end")
    p.add_argument("shapes")
    p.add_argument("exemplars")
    p.add_argument("run_dir")
    p.add_argument("--library")
    p.add_argument("--substance-dir")
    p.add_argument("--truth", help="truth manifest; adds metrics to the report")
    p.add_argument("--no-figures", action="store_true")
    _add_config(p)
    _add_flow_direction(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render figures and TSV tables from report.json")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synthgen", help="sample randomized render configurations")
    ssub = p.add_subparsers(dest="synth_cmd", required=True)
    q = ssub.add_parser("sample")
    q.add_argument("--count", type=int, required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--library", required=True)
    q.add_argument("--shape", required=True, help="OBJ file")
    q.add_argument("--part-substances", required=True, help='JSON object, e.g. \'{"0": "wood"}\'')
    q.add_argument("--env", action="append", help="environment map id (repeatable)")
    q.add_argument("--grid", default="paper456", help="grid preset used as the empirical pose prior")
    q.add_argument("--out", required=True)
    q.add_argument("--emit", action="store_true", help="also write scene JSON and label maps")
    q.add_argument("--resolution", type=int, default=128)
    q.add_argument("--holdout", type=float, help="validation fraction for the shape/env split")
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("loss", help="multitask loss utilities")
    lsub = p.add_subparsers(dest="loss_cmd", required=True)
    q = lsub.add_parser("check")
    q.add_argument("--fd", action="store_true", required=True, help="finite-difference gradient check")
    q.add_argument("--states", type=int, default=1000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("fixtures", help="generate synthetic fixtures")
    fsub = p.add_subparsers(dest="fixture_cmd", required=True)
    q = fsub.add_parser("closed-loop")
    q.add_argument("out")
    q.add_argument("--shapes", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q = fsub.add_parser("reference")
    q.add_argument("--out")
    p.set_defaults(func=cmd_fixtures)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pl.SystemicError, LibraryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
