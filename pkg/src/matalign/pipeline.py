"""End-to-end orchestration: ingest, index, align, assign, evaluate.

Every stage reads and writes plain files under a run directory, so stages can
be rerun individually from the CLI. Outputs that feed the determinism hash
(descriptors, report, config lock) contain no timestamps; wall-clock data
lives only in ``run_meta.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import SphericalPose, build_viewpoint_grid
from .densecrf import CrfParams, map_labels, mean_field, unary_from_labels
from .exemplar import NoForegroundError, dedup, foreground_mask, standardize
from .fixtures import INDEX_ALBEDO
from .flowrefine import (FlowField, FlowParams, compute_flow, encode_coordinate_silhouette, splat_labels,
                         warp_labels)
from .hogindex import (HogConfig, RenderingSet, ShapeCandidate, build_reverse_index, hog, invert_index,
                       load_index, save_index)
from .imageops import read_image, resize_nearest, write_png
from .material import (MATCHERS, MaterialLibrary, MaterialScores, classifier_metrics, load_material_library,
                       reference_library_path, substance_weighted_ranking)
from .raster import LabelMap, render_flat_color, render_flat_color_hits, render_part_ids, square_crop_to_mask
from .shapelib import SegmentedMesh, load_obj, mesh_from_json, prepare_mesh
from .substance import (SUBSTANCES, SubstanceError, SubstanceMap, aggregate_part_substance,
                        classifier_from_spec, crop_substance_map)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
EXECUTION_KEYS = frozenset({"workers"})
FLOW_DIRECTIONS = ("exemplar-to-render", "render-to-exemplar")
UNASSIGNED_NOT_VISIBLE = "not visible in the refined part map"


class SystemicError(RuntimeError):
    """A failure that invalidates the whole run (as opposed to one candidate)."""


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    grid: str = "paper456"
    exemplar_size: int = 128
    render_resolution: int = 128
    align_size: int = 64
    white_threshold: int = 247
    dedup_threshold: float = 0.1
    index_k: int = 5
    top_n: int = 12
    distance_cutoff: float = 8.0
    cutoff_direction: str = "max"     # "max": drop d > cutoff; "min": drop d < cutoff
    flow_direction: str = "exemplar-to-render"
    substance_classifier: str = "color-prior"
    matcher: str = "histogram"
    alternatives: int = 5
    workers: int = 1
    hog: dict = field(default_factory=lambda: asdict(HogConfig()))
    flow: dict = field(default_factory=lambda: _flow_defaults())
    crf: dict = field(default_factory=lambda: asdict(CrfParams()))

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if self.cutoff_direction not in ("max", "min"):
            raise ValueError("cutoff_direction must be 'max' or 'min'")
        if self.flow_direction not in FLOW_DIRECTIONS:
            raise ValueError(f"flow_direction must be one of {FLOW_DIRECTIONS}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"unknown matcher {self.matcher!r}; known: {sorted(MATCHERS)}")
        if min(self.index_k, self.top_n, self.workers, self.alternatives) < 1:
            raise ValueError("index_k, top_n, workers and alternatives must be >= 1")
        # fail early on bad nested parameters
        HogConfig(**self.hog)
        FlowParams(**self.flow)
        CrfParams(**self.crf)

    @property
    def hog_config(self) -> HogConfig:
        return HogConfig(**self.hog)

    @property
    def flow_params(self) -> FlowParams:
        return FlowParams(**self.flow)

    @property
    def crf_params(self) -> CrfParams:
        return CrfParams(**self.crf)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        """Result-affecting settings only; execution knobs such as ``workers`` are left out."""
        d = {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k, v in d.items():
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) else v
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flow_defaults() -> dict:
    return asdict(FlowParams())


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load(path: Path):
    return json.loads(Path(path).read_text())


# --- ingest -------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def ingest(exemplars_dir, run_dir, config: PipelineConfig) -> dict:
    """Standardize every image in ``exemplars_dir`` and drop near-duplicates.

    Writes ``exemplars/<id>.png``, ``exemplars/<id>.mask.png`` and
    ``ingest.json`` (kept ids with crop boxes, rejected and duplicate ids).
    """
    run_dir = Path(run_dir)
    out_dir = run_dir / "exemplars"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in Path(exemplars_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) \
        if Path(exemplars_dir).is_dir() else []
    standardized, rejected = [], []
    for p in paths:
        try:
            image = read_image(p)
            mask = foreground_mask(image, config.white_threshold)
            standardized.append(standardize(image, mask, config.exemplar_size, p.stem, p.name))
        except (NoForegroundError, OSError, ValueError) as exc:
            rejected.append({"id": p.stem, "reason": str(exc)})
    kept, removed = dedup(standardized, config.dedup_threshold)
    records = []
    for ex in kept:
        write_png(out_dir / f"{ex.id}.png", ex.image)
        write_png(out_dir / f"{ex.id}.mask.png", ex.mask.astype(np.uint8) * 255)
        records.append({"id": ex.id, "source": ex.source_uri, "crop_box": list(ex.crop_box),
                        "source_shape": list(ex.source_shape)})
    manifest = {
        "exemplars": records,
        "rejected": rejected,
        "duplicates": [{"id": a, "duplicate_of": b, "distance": d} for a, b, d in removed],
    }
    _dump(run_dir / "ingest.json", manifest)
    log.info("ingest: %d kept, %d rejected, %d duplicates", len(records), len(rejected), len(removed))
    return manifest


def load_exemplar(run_dir, exemplar_id: str) -> tuple[np.ndarray, np.ndarray]:
    d = Path(run_dir) / "exemplars"
    image = read_image(d / f"{exemplar_id}.png")
    mask = read_image(d / f"{exemplar_id}.mask.png")
    return image, (mask[..., 0] if mask.ndim == 3 else mask) > 127


# --- index ---------------------------------------------------------------------------

def load_shapes(shapes_dir) -> tuple[dict[str, SegmentedMesh], list[dict]]:
    """Prepared meshes keyed by file stem, plus per-file load failures."""
    shapes, failures = {}, []
    d = Path(shapes_dir)
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".obj", ".json")) if d.is_dir() else []
    for p in paths:
        try:
            text = p.read_text()
            mesh = load_obj(text) if p.suffix.lower() == ".obj" else mesh_from_json(text)
            shapes[p.stem] = prepare_mesh(mesh)
        except (OSError, ValueError) as exc:
            failures.append({"shape_id": p.stem, "reason": f"{type(exc).__name__}: {exc}"})
    return shapes, failures


def index_view(mesh: SegmentedMesh, pose: SphericalPose, config: PipelineConfig) -> np.ndarray:
    """Gray flat-shaded rendering, cropped and resized like an ingested exemplar.

    The crop follows the pixels the shaded render covers, as an exemplar's
    crop follows its non-white pixels.
    """
    image, hit = render_flat_color_hits(mesh, pose, config.render_resolution,
                                        np.full((mesh.n_parts, 3), INDEX_ALBEDO))
    return square_crop_to_mask(image, hit, config.exemplar_size)


def build_index(shapes_dir, run_dir, config: PipelineConfig) -> dict:
    """Render every shape over the grid, index the ingested exemplars, and invert."""
    run_dir = Path(run_dir)
    shapes, failures = load_shapes(shapes_dir)
    poses = build_viewpoint_grid(config.grid).poses
    hog_cfg = config.hog_config
    descriptors, shape_ids, pose_idx = [], [], []
    for sid, mesh in shapes.items():
        try:
            rows = [hog(index_view(mesh, pose, config), hog_cfg).values for pose in poses]
        except ValueError as exc:
            failures.append({"shape_id": sid, "reason": f"render failed: {exc}"})
            continue
        descriptors += rows
        shape_ids += [sid] * len(poses)
        pose_idx += list(range(len(poses)))
    dim = hog_cfg.length
    renderings = RenderingSet(np.asarray(descriptors).reshape(-1, dim), tuple(shape_ids),
                              np.asarray(pose_idx, dtype=np.int64), poses)
    ingest_m = _load(run_dir / "ingest.json")
    exemplars = {}
    for rec in ingest_m["exemplars"]:
        image, _ = load_exemplar(run_dir, rec["id"])
        exemplars[rec["id"]] = hog(image, hog_cfg).values
    index = build_reverse_index(exemplars, renderings, config.index_k, hog_cfg)
    save_index(index, run_dir / "index.maidx")
    inverted = invert_index(index)
    _dump(run_dir / "inverted.json", {s: [asdict(c) for c in cands] for s, cands in inverted.items()})
    summary = {"shapes": sorted(shapes), "shape_failures": failures, "renderings": len(renderings),
               "exemplars": len(exemplars)}
    _dump(run_dir / "index.json", summary)
    return summary


# --- candidate selection ------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateStub:
    shape_id: str
    exemplar_id: str
    pose_index: int
    hog_distance: float

    @property
    def key(self) -> str:
        return f"{self.shape_id}__{self.exemplar_id}"


def select_candidates(inverted: dict, top_n: int = 12, distance_cutoff: float = 8.0,
                      direction: str = "max") -> list[CandidateStub]:
    """Per shape: the ``top_n`` closest exemplars, then the distance cutoff.

    ``direction="max"`` discards pairs farther than the cutoff;
    ``direction="min"`` discards pairs closer than it.
    """
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    out = []
    for shape in sorted(inverted):
        cands = [c if isinstance(c, ShapeCandidate) else ShapeCandidate(**c) for c in inverted[shape]]
        cands = sorted(cands, key=lambda c: (c.distance, c.exemplar_id))[:top_n]
        if direction == "max":
            keep = [c for c in cands if c.distance <= distance_cutoff]
        else:
            keep = [c for c in cands if c.distance >= distance_cutoff]
        if not keep:
            log.info("shape %s: no candidates survive the distance cutoff", shape)
        out += [CandidateStub(shape, c.exemplar_id, c.pose_index, c.distance) for c in keep]
    return out


# --- alignment ----------------------------------------------------------------------------

def coarse_part_map(mesh: SegmentedMesh, pose: SphericalPose, config: PipelineConfig) -> LabelMap:
    """Part ids at ``pose`` resampled exactly like an ingested exemplar mask.

    Cropped to the silhouette square at the exemplar size, then resized to the
    alignment size, so a self-rendered exemplar lines up pixel for pixel.
    """
    parts = render_part_ids(mesh, pose, config.render_resolution).part_ids
    crop = square_crop_to_mask(parts, parts.labels > 0, config.exemplar_size)
    s = config.align_size
    return LabelMap(resize_nearest(crop.labels, s, s), crop.n_labels, crop.kind)


def align_pair(mesh: SegmentedMesh, pose: SphericalPose, image: np.ndarray, mask: np.ndarray,
               config: PipelineConfig) -> dict:
    """Coarse map, silhouette flow, CRF cleanup; all maps at the alignment size."""
    s = config.align_size
    coarse = coarse_part_map(mesh, pose, config)
    ex_mask = resize_nearest(mask.astype(np.uint8), s, s) > 0
    guide = resize_nearest(image, s, s)
    ex_enc, render_enc = encode_coordinate_silhouette(ex_mask), encode_coordinate_silhouette(coarse.labels > 0)
    if config.flow_direction == "exemplar-to-render":
        # flow on the exemplar grid: exemplar(p) matches render(p + w(p)); pull labels back
        flow = compute_flow(ex_enc, render_enc, config.flow_params)
        warped = warp_labels(coarse, FlowField(-flow.u, -flow.v, flow.energy, flow.saturated))
    else:
        # flow on the render grid: render(p) matches exemplar(p + w(p)); push labels forward
        flow = compute_flow(render_enc, ex_enc, config.flow_params)
        warped = splat_labels(coarse, flow)
    crf = config.crf_params
    q = mean_field(unary_from_labels(warped, crf.unary_confidence), guide, crf)
    refined = map_labels(q, "material_part")
    return {"coarse": coarse, "flow": flow, "warped": warped, "refined": refined,
            "guide": guide, "mask": ex_mask}


def _label_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# --- assignment -----------------------------------------------------------------------------

def _substance_at(smap: SubstanceMap, size: int) -> SubstanceMap:
    if smap.shape == (size, size):
        return smap
    return crop_substance_map(smap, (0, 0, smap.shape[0]), size)


def assign_parts(refined: LabelMap, guide: np.ndarray, smap: SubstanceMap, library: MaterialLibrary,
                 config: PipelineConfig, part_names=()) -> tuple[list[dict], dict]:
    """Per-part substance vote and substance-weighted material ranking."""
    labeling = aggregate_part_substance(refined, smap)
    matcher = MATCHERS[config.matcher]
    parts = []
    for part in range(refined.n_labels):
        sel = refined.labels == part + 1
        entry = {"part_id": part, "name": part_names[part] if part < len(part_names) else f"part{part}",
                 "pixels": int(sel.sum()), "substance": labeling.labels[part]}
        if not sel.any():
            entry.update(material_id=None, unassigned=UNASSIGNED_NOT_VISIBLE, alternatives=[], scores=None)
            parts.append(entry)
            continue
        scores = matcher(guide, sel, library)
        counts = np.array([labeling.counts[part][q] for q in SUBSTANCES], dtype=np.float64)
        conf = counts / counts.sum() if counts.sum() > 0 else np.full(len(SUBSTANCES), 1.0 / len(SUBSTANCES))
        ranked = substance_weighted_ranking(scores, conf, library)
        entry.update(
            material_id=ranked[0][0],
            unassigned=None,
            substance_confidence=[float(c) for c in conf],
            alternatives=[{"material_id": m, "p": p} for m, p in ranked[:config.alternatives]],
            scores=[float(v) for v in scores.materials],
        )
        parts.append(entry)
    return parts, labeling.to_dict()


def preview_colors(parts: list[dict], library: MaterialLibrary, n_parts: int) -> np.ndarray:
    colors = np.full((n_parts, 3), 0.5)
    for p in parts:
        if p["material_id"] is not None:
            colors[p["part_id"]] = library.get(p["material_id"]).median
    return colors


# --- align and assign stages -------------------------------------------------------------------

def align_candidate(stub: CandidateStub, run_dir, mesh: SegmentedMesh, pose: SphericalPose,
                    config: PipelineConfig) -> tuple[dict, np.ndarray | None]:
    """Alignment record and refined labels; failures are captured, never raised."""
    record = {"candidate": asdict(stub), "status": {"align": "pending", "substance": "pending",
                                                    "assign": "pending"}, "failure": None}
    try:
        image, mask = load_exemplar(run_dir, stub.exemplar_id)
        al = align_pair(mesh, pose, image, mask, config)
    except Exception as exc:  # noqa: BLE001 - isolation boundary
        record["status"]["align"] = "failed"
        record["failure"] = {"stage": "align", "reason": f"{type(exc).__name__}: {exc}"}
        return record, None
    record["status"]["align"] = "ok"
    record["alignment"] = {
        "flow_energy": float(al["flow"].energy),
        "flow_saturated": bool(al["flow"].saturated),
        "silhouette_iou_coarse": _label_iou(al["coarse"].labels > 0, al["mask"]),
        "silhouette_iou_refined": _label_iou(al["refined"].labels > 0, al["mask"]),
    }
    return record, al["refined"].labels


def _align_worker(args):
    return align_candidate(*args)


def align_stage(shapes_dir, run_dir, config: PipelineConfig) -> list[dict]:
    """Select candidates from the index and align each; writes ``align.json`` and ``partmaps/``."""
    run_dir = Path(run_dir)
    index = load_index(run_dir / "index.maidx")
    stubs = select_candidates(invert_index(index), config.top_n, config.distance_cutoff,
                              config.cutoff_direction)
    shapes, _ = load_shapes(shapes_dir)
    jobs = [(s, str(run_dir), shapes[s.shape_id], index.pose(s.pose_index), config) for s in stubs]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_align_worker, jobs))
    else:
        results = [_align_worker(j) for j in jobs]
    map_dir = run_dir / "partmaps"
    map_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for stub, (record, labels) in zip(stubs, results):
        if labels is not None:
            np.save(map_dir / f"{stub.key}.npy", labels.astype(np.int32))
        records.append(record)
    _dump(run_dir / "align.json", records)
    return records


def assign_candidate(record: dict, run_dir, mesh: SegmentedMesh, pose: SphericalPose,
                     library: MaterialLibrary, config: PipelineConfig, classifier) -> dict | None:
    """Substance and material assignment for one aligned candidate; updates ``record`` in place.

    Returns the descriptor, or None when a stage failed (recorded in ``record``).
    """
    stub = CandidateStub(**record["candidate"])
    status = record["status"]
    if status["align"] != "ok":
        return None
    try:
        image, mask = load_exemplar(run_dir, stub.exemplar_id)
        smap = _substance_at(classifier.classify(image, mask, stub.exemplar_id), config.align_size)
        status["substance"] = "ok"
    except (SubstanceError, ValueError, OSError) as exc:
        status["substance"] = "failed"
        record["failure"] = {"stage": "substance", "reason": str(exc)}
        return None
    try:
        s = config.align_size
        labels = np.load(Path(run_dir) / "partmaps" / f"{stub.key}.npy")
        refined = LabelMap(labels, mesh.n_parts, "material_part")
        parts, labeling = assign_parts(refined, resize_nearest(image, s, s), smap, library, config,
                                       mesh.material_names)
    except Exception as exc:  # noqa: BLE001 - isolation boundary
        status["assign"] = "failed"
        record["failure"] = {"stage": "assign", "reason": f"{type(exc).__name__}: {exc}"}
        return None
    status["assign"] = "ok"
    return {
        "shape_id": stub.shape_id,
        "exemplar_id": stub.exemplar_id,
        "pose_index": stub.pose_index,
        "pose": pose.to_dict(),
        "hog_distance": stub.hog_distance,
        "parts": parts,
        "part_substances": labeling,
        "provenance": {"classifier": classifier.id, "matcher": config.matcher, "config_hash": config.hash},
    }


def _make_classifier(config: PipelineConfig, run_dir: Path, substance_dir):
    boxes = {r["id"]: tuple(r["crop_box"]) for r in _load(run_dir / "ingest.json")["exemplars"]}
    return classifier_from_spec(config.substance_classifier, substance_dir, boxes)


def assign_stage(shapes_dir, run_dir, library: MaterialLibrary, config: PipelineConfig,
                 substance_dir=None) -> dict:
    """Assign materials to every aligned candidate; writes descriptors, previews and ``assign.json``."""
    run_dir = Path(run_dir)
    index = load_index(run_dir / "index.maidx")
    records = _load(run_dir / "align.json")
    shapes, _ = load_shapes(shapes_dir)
    classifier = _make_classifier(config, run_dir, substance_dir)
    desc_dir, prev_dir = run_dir / "descriptors", run_dir / "previews"
    for d in (desc_dir, prev_dir):
        d.mkdir(parents=True, exist_ok=True)
    for record in records:
        stub = CandidateStub(**record["candidate"])
        mesh, pose = shapes[stub.shape_id], index.pose(stub.pose_index)
        desc = assign_candidate(record, run_dir, mesh, pose, library, config, classifier)
        if desc is None:
            continue
        _dump(desc_dir / f"{stub.key}.json", desc)
        colors = preview_colors(desc["parts"], library, mesh.n_parts)
        write_png(prev_dir / f"{stub.key}.png", render_flat_color(mesh, pose, config.render_resolution, colors))
    result = {"candidates": records, "funnel": funnel_counts(records), "n_selected": len(records)}
    _dump(run_dir / "assign.json", result)
    return result


def align_and_assign(shapes_dir, run_dir, library: MaterialLibrary, config: PipelineConfig,
                     substance_dir=None) -> dict:
    align_stage(shapes_dir, run_dir, config)
    return assign_stage(shapes_dir, run_dir, library, config, substance_dir)


def funnel_counts(records: list[dict]) -> dict:
    """Candidates entering, refined (alignment ok), with substances, and assigned."""
    return {
        "candidates": len(records),
        "refined": sum(r["status"]["align"] == "ok" for r in records),
        "substance": sum(r["status"]["substance"] == "ok" for r in records),
        "assigned": sum(r["status"]["assign"] == "ok" for r in records),
    }


# --- evaluation ------------------------------------------------------------------------------

def load_descriptors(run_dir) -> list[dict]:
    d = Path(run_dir) / "descriptors"
    return [_load(p) for p in sorted(d.glob("*.json"))] if d.is_dir() else []


def evaluate(descriptors: list[dict], truth: dict, library: MaterialLibrary, index_top1: dict | None = None) -> dict:
    """Per-part metrics against a truth manifest keyed by (shape, exemplar, part).

    Returns material/substance precision via :func:`classifier_metrics`, the
    accuracy of the final (substance-weighted) assignment, pose recovery,
    and the unmatched keys on either side. Pose recovery uses
    ``index_top1`` (exemplar id -> (shape id, pose index)) when given, else
    the lowest-distance descriptor per exemplar.
    """
    truth_parts, truth_pose = {}, {}
    for pair in truth["pairs"]:
        truth_pose[(pair["shape_id"], pair["exemplar_id"])] = pair["pose_index"]
        for part, t in pair["parts"].items():
            if t.get("visible", True):
                truth_parts[(pair["shape_id"], pair["exemplar_id"], int(part))] = t
    preds, truths, sub_preds, assigned_hits, matched = [], [], [], 0, set()
    unmatched_pred = []
    for desc in descriptors:
        for part in desc["parts"]:
            key = (desc["shape_id"], desc["exemplar_id"], part["part_id"])
            if key not in truth_parts:
                unmatched_pred.append(list(key))
                continue
            matched.add(key)
            t = truth_parts[key]
            if part["scores"] is None:
                scores = MaterialScores(np.append(np.full(len(library), -1e300), -np.inf), "none")
                sub = np.zeros(len(SUBSTANCES))
            else:
                scores = MaterialScores(np.append(part["scores"], -np.inf), desc["provenance"]["matcher"])
                sub = np.asarray(part["substance_confidence"])
            preds.append(scores)
            truths.append((t["material_id"], t["substance"]))
            sub_preds.append(sub)
            assigned_hits += part["material_id"] == t["material_id"]
    metrics = classifier_metrics(preds, truths, library, sub_preds)
    metrics["assigned@1"] = assigned_hits / len(truths) if truths else None
    if index_top1 is None:
        index_top1 = {}
        best = {}
        for desc in descriptors:
            cur = best.get(desc["exemplar_id"])
            if cur is None or (desc["hog_distance"], desc["shape_id"]) < (cur["hog_distance"], cur["shape_id"]):
                best[desc["exemplar_id"]] = desc
        index_top1 = {e: (d["shape_id"], d["pose_index"]) for e, d in best.items()}
    hits = sum(1 for (s, e), pi in truth_pose.items() if tuple(index_top1.get(e, ())) == (s, pi))
    metrics["pose_recovery"] = hits / len(truth_pose) if truth_pose else None
    missing = sorted(set(truth_parts) - matched)
    metrics["unmatched_predictions"] = unmatched_pred
    metrics["unmatched_truth"] = [list(k) for k in missing]
    metrics["n_unmatched"] = len(unmatched_pred) + len(missing)
    return metrics


# --- whole run ---------------------------------------------------------------------------

def index_top1(run_dir) -> dict:
    """Exemplar id -> (shape id, pose index) of its nearest rendering."""
    index = load_index(Path(run_dir) / "index.maidx")
    return {e: (index.entries[e][0].shape_id, index.entries[e][0].pose_index)
            for e in index.exemplar_ids if index.entries[e]}


def lock_config(run_dir, config: PipelineConfig) -> None:
    _dump(Path(run_dir) / "config.lock.json", {"config": config.to_dict(), "config_hash": config.hash})


def resolve_library(library) -> MaterialLibrary:
    if isinstance(library, MaterialLibrary):
        return library
    try:
        return load_material_library(reference_library_path() if library is None else library)
    except (OSError, ValueError) as exc:
        raise SystemicError(f"material library unusable: {exc}") from exc


def run_pipeline(shapes_dir, exemplars_dir, run_dir, library=None, config: PipelineConfig = PipelineConfig(),
                 substance_dir=None, truth=None) -> dict:
    """All stages. Returns the report, also written to ``report.json``."""
    started = time.time()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lib = resolve_library(library)
    if len(lib) == 0:
        raise SystemicError("material library is empty")
    lock_config(run_dir, config)
    timings = {}
    t0 = time.time()
    ingest_m = ingest(exemplars_dir, run_dir, config)
    timings["ingest"] = time.time() - t0
    t0 = time.time()
    index_m = build_index(shapes_dir, run_dir, config)
    timings["index"] = time.time() - t0
    t0 = time.time()
    aligned = align_and_assign(shapes_dir, run_dir, lib, config, substance_dir)
    timings["align_assign"] = time.time() - t0
    report = {
        "config_hash": config.hash,
        "library": {"size": len(lib), "counts": lib.counts()},
        "ingest": {"kept": len(ingest_m["exemplars"]), "rejected": ingest_m["rejected"],
                   "duplicates": ingest_m["duplicates"]},
        "index": {"shapes": len(index_m["shapes"]), "shape_failures": index_m["shape_failures"],
                  "renderings": index_m["renderings"]},
        "funnel": aligned["funnel"],
        "candidates": aligned["candidates"],
        "failures": [dict(r["failure"], key=f"{r['candidate']['shape_id']}__{r['candidate']['exemplar_id']}")
                     for r in aligned["candidates"] if r["failure"]],
    }
    if truth is not None:
        truth_m = truth if isinstance(truth, dict) else _load(truth)
        report["metrics"] = evaluate(load_descriptors(run_dir), truth_m, lib, index_top1(run_dir))
    _dump(run_dir / "report.json", report)
    timings["total"] = time.time() - started
    _dump(run_dir / "run_meta.json", {"started_unix": started, "timings_s": timings})
    return report


def artifact_digest(run_dir) -> str:
    """sha256 over descriptors, report and config lock (previews excluded)."""
    run_dir = Path(run_dir)
    h = hashlib.sha256()
    files = sorted((run_dir / "descriptors").glob("*.json")) + [run_dir / "report.json",
                                                               run_dir / "config.lock.json"]
    for p in files:
        h.update(p.relative_to(run_dir).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()
