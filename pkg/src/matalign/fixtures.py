"""Synthetic fixtures: box-assembly shapes, isoluminant swatch libraries, closed-loop datasets.

A closed-loop dataset renders each shape with known materials at a known grid
pose and reuses the rendering as its exemplar, so every alignment and
assignment outcome has exact ground truth.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .camera import build_viewpoint_grid
from .imageops import LUMA, write_png
from .material import MaterialLibrary, build_reference_records, make_record, reference_library_path
from .raster import render_flat_color, render_part_ids
from .shapelib import SegmentedMesh, load_obj, prepare_mesh, write_obj
from .substance import SUBSTANCES, one_hot_substance_map, save_substance_map

INDEX_ALBEDO = 0.55   # gray used for index renderings; fixture swatches share its luma

# outward-wound unit cube: 8 corners, 12 triangles
_CUBE_V = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
_CUBE_F = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                    [3, 7, 6], [3, 6, 2], [0, 4, 7], [0, 7, 3], [1, 2, 6], [1, 6, 5]])


def box_assembly(boxes, part_names=None, name: str = "") -> SegmentedMesh:
    """Mesh from axis-aligned boxes ``(lo, hi, part)``; each box is its own object part."""
    verts, faces, mparts, oparts = [], [], [], []
    for k, (lo, hi, part) in enumerate(boxes):
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        verts.append(lo + _CUBE_V * (hi - lo))
        faces.append(_CUBE_F + 8 * k)
        mparts += [part] * 12
        oparts += [k] * 12
    n_parts = max(p for _, _, p in boxes) + 1
    names = tuple(part_names) if part_names else tuple(f"part{i}" for i in range(n_parts))
    return SegmentedMesh(np.concatenate(verts), np.concatenate(faces), mparts, oparts,
                         material_names=names, object_names=tuple(f"box{k}" for k in range(len(boxes))),
                         meta={"name": name})


def random_assembly(rng: np.random.Generator, name: str = "") -> SegmentedMesh:
    """Three-part chair-like assembly with randomized, asymmetric proportions.

    Part 0 is a seat slab, part 1 a back panel on one edge, part 2 two legs
    of unequal height under one side, which breaks mirror symmetries.
    """
    w, d = rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.9)
    seat_y, seat_t = rng.uniform(0.35, 0.55), rng.uniform(0.06, 0.14)
    back_h, back_t = rng.uniform(0.35, 0.6), rng.uniform(0.06, 0.15)
    leg = rng.uniform(0.08, 0.16)
    lean = rng.uniform(0.05, 0.3) * w
    boxes = [
        ((0, seat_y, 0), (w, seat_y + seat_t, d), 0),
        ((lean, seat_y + seat_t, 0), (w, seat_y + seat_t + back_h, back_t), 1),
        ((0, 0, 0), (leg, seat_y, leg), 2),
        ((w - leg, seat_y * rng.uniform(0.3, 0.6), d - leg), (w, seat_y, d), 2),
    ]
    return box_assembly(boxes, ("seat", "back", "legs"), name)


# --- swatch libraries ------------------------------------------------------------------

def isoluminant_albedo(hue_deg: float, luma: float = INDEX_ALBEDO, chroma: float = 0.45) -> np.ndarray:
    """RGB with the given Rec. 601 luma and hue; chroma shrinks until it fits in [0, 1]."""
    base = hsv_to_rgb([hue_deg / 360.0, 1.0, 1.0])
    direction = base - LUMA @ base   # zero luma since the weights sum to 1
    k = chroma
    while True:
        rgb = luma + k * direction / np.abs(direction).max()
        if np.all((rgb >= 0) & (rgb <= 1)):
            return np.round(rgb, 6)
        k *= 0.9


def swatch_library(n: int = 5) -> tuple[MaterialLibrary, dict]:
    """``n`` isoluminant swatches with evenly spaced hues; substances cycle through Q.

    Returns the library and a map from material id to albedo.
    """
    records, albedos = [], {}
    for i in range(n):
        subst = SUBSTANCES[i % len(SUBSTANCES)]
        albedo = isoluminant_albedo(360.0 * i / n)
        mid = f"swatch-{i:02d}"
        records.append(make_record(mid, subst, albedo, scale=2.0, name=f"swatch {i}",
                                   brdf_meta={"albedo": [float(c) for c in albedo]}))
        albedos[mid] = albedo
    return MaterialLibrary(tuple(records)), albedos


def write_reference_manifest(path=None) -> Path:
    """Regenerate the bundled reference material manifest."""
    path = Path(path) if path is not None else reference_library_path()
    path.write_text(MaterialLibrary(tuple(build_reference_records())).to_json())
    return path


# --- closed-loop dataset ---------------------------------------------------------------

def write_closed_loop(root, n_shapes: int = 10, seed: int = 0, resolution: int = 128,
                      grid: str = "paper456", n_materials: int = 5) -> dict:
    """Write shapes, self-rendered exemplars, substance maps, a swatch library and a truth manifest.

    Layout under ``root``: ``shapes/*.obj``, ``exemplars/*.png``,
    ``substance/*.subst``, ``library.json``, ``truth.json``.
    """
    root = Path(root)
    for sub in ("shapes", "exemplars", "substance"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    library, albedos = swatch_library(n_materials)
    (root / "library.json").write_text(library.to_json())
    poses = build_viewpoint_grid(grid).poses
    truth = []
    for i in range(n_shapes):
        shape_id, ex_id = f"shape{i:02d}", f"exemplar{i:02d}"
        (root / "shapes" / f"{shape_id}.obj").write_text(write_obj(random_assembly(rng, shape_id)))
        # render the mesh exactly as the pipeline will see it after loading
        mesh = prepare_mesh(load_obj((root / "shapes" / f"{shape_id}.obj").read_text()))
        pose_index = int(rng.integers(len(poses)))
        mats = [library.ids[j] for j in rng.choice(len(library), size=mesh.n_parts, replace=False)]
        image = render_flat_color(mesh, poses[pose_index], resolution, [albedos[m] for m in mats])
        write_png(root / "exemplars" / f"{ex_id}.png", image)
        parts = render_part_ids(mesh, poses[pose_index], resolution).part_ids.labels
        lut = np.zeros(mesh.n_parts + 1, dtype=np.int64)
        for p, m in enumerate(mats):
            lut[p + 1] = SUBSTANCES.index(library.get(m).substance) + 1
        save_substance_map(root / "substance" / f"{ex_id}.subst", one_hot_substance_map(lut[parts]))
        visible = sorted(int(v) - 1 for v in np.unique(parts) if v > 0)
        truth.append({
            "shape_id": shape_id, "exemplar_id": ex_id, "pose_index": pose_index,
            "parts": {str(p): {"material_id": mats[p], "substance": library.get(mats[p]).substance,
                               "visible": p in visible} for p in range(mesh.n_parts)},
        })
    manifest = {"grid": grid, "resolution": resolution, "seed": seed, "pairs": truth}
    (root / "truth.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
