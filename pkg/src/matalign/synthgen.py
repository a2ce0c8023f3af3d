"""Randomized render configurations and renderer-agnostic scene descriptions."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .camera import SphericalPose, sample_pose_jitter
from .material import MaterialLibrary
from .raster import LabelMap, mesh_target, render_part_ids
from .shapelib import SegmentedMesh, uv_density
from .substance import SUBSTANCES

SCHEMA_VERSION = 1
FOV_RANGE = (50.0, 60.0)
DISTANCE_RANGE = (1.3, 1.75)
ENV_SCALE_RANGE = (0.9, 1.2)
UV_LOG2_SCALE_RANGE = (-1.0, 0.5)
UV_ROTATION_RANGE = (0.0, 2 * math.pi)
UV_TRANSLATION_RANGE = (0.0, 1.0)
UV_ORDER = ["density", "material", "scale", "rotate", "translate"]


class EmptyPoolError(ValueError):
    def __init__(self, part, substance):
        super().__init__(f"part {part!r} has substance {substance!r}, which has no library materials")
        self.part = part
        self.substance = substance


@dataclass(frozen=True)
class UvTransform:
    log2_scale: float
    rotation: float
    dx: float
    dy: float

    @property
    def scale(self) -> float:
        return 2.0 ** self.log2_scale


@dataclass(frozen=True)
class RenderConfig:
    shape_id: str
    exemplar_id: str | None
    pose: SphericalPose
    env_map_id: str
    env_scale: float
    materials: tuple[tuple[int, str], ...]          # (part id, material id), sorted by part
    uv_transforms: tuple[tuple[int, UvTransform], ...]
    rng_seed: int
    d_theta: float = 0.0
    d_phi: float = 0.0

    @property
    def fov_x(self) -> float:
        return self.pose.fov_x

    @property
    def r(self) -> float:
        return self.pose.r

    def material_of(self, part: int) -> str:
        return dict(self.materials)[part]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)


def sample_render_config(shape_id: str, empirical_poses, part_substances: dict, library: MaterialLibrary,
                         env_maps, rng_seed: int, exemplar_id: str | None = None) -> RenderConfig:
    """Draw one configuration; the same ``rng_seed`` always gives the same result.

    ``part_substances`` maps part id to a substance. Each part's material is
    uniform over the library materials of that substance.
    """
    env_maps = list(env_maps)
    if not env_maps:
        raise ValueError("need at least one environment map id")
    pools = {}
    for part, subst in sorted(part_substances.items()):
        pool = [r.id for r in library.pool(subst)] if subst in SUBSTANCES else []
        if not pool:
            raise EmptyPoolError(part, subst)
        pools[part] = pool
    rng = np.random.default_rng(rng_seed)
    draw = sample_pose_jitter(empirical_poses, rng)
    fov = float(rng.uniform(*FOV_RANGE))
    r = float(rng.uniform(*DISTANCE_RANGE))
    env = env_maps[int(rng.integers(len(env_maps)))]
    env_scale = float(rng.uniform(*ENV_SCALE_RANGE))
    materials, transforms = [], []
    for part, pool in pools.items():
        materials.append((int(part), pool[int(rng.integers(len(pool)))]))
        transforms.append((int(part), UvTransform(float(rng.uniform(*UV_LOG2_SCALE_RANGE)),
                                                  float(rng.uniform(*UV_ROTATION_RANGE)),
                                                  float(rng.uniform(*UV_TRANSLATION_RANGE)),
                                                  float(rng.uniform(*UV_TRANSLATION_RANGE)))))
    pose = SphericalPose(draw.pose.theta, draw.pose.phi, r, fov)
    return RenderConfig(shape_id, exemplar_id, pose, str(env), env_scale, tuple(materials), tuple(transforms),
                        int(rng_seed), draw.d_theta, draw.d_phi)


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Per-sample seeds that depend only on (master seed, sample index)."""
    return [int(np.random.SeedSequence([master_seed, i]).generate_state(1, dtype=np.uint32)[0])
            for i in range(count)]


def apply_uv_transform(uv: np.ndarray, density_factor: float, material_log_scale: float,
                       t: UvTransform) -> np.ndarray:
    """Density normalization, material scale, then scale, rotate, translate."""
    uv = np.asarray(uv, dtype=np.float64) * density_factor * material_log_scale * t.scale
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    rot = np.array([[c, -s], [s, c]])
    return uv @ rot.T + np.array([t.dx, t.dy])


def _rounded(x):
    """Stable float text: 12 significant digits keeps files byte-identical across platforms."""
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, (list, tuple)):
        return [_rounded(v) for v in x]
    if isinstance(x, dict):
        return {k: _rounded(v) for k, v in x.items()}
    return x


def emit_scene(config: RenderConfig, mesh: SegmentedMesh, library: MaterialLibrary, resolution: int = 128,
               map_prefix: str = "") -> tuple[dict, LabelMap, LabelMap]:
    """Scene description plus ground-truth material and substance label maps.

    Material maps store ``library index + 1``; substance maps store
    ``substance index + 1``; 0 is background in both.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no UV coordinates; prepare it first")
    assigned = dict(config.materials)
    transforms = dict(config.uv_transforms)
    target = mesh_target(mesh)
    parts = []
    for part, mid in sorted(assigned.items()):
        rec = library.get(mid)
        density = uv_density(mesh, part).density
        t = transforms[part]
        parts.append({
            "part_id": part,
            "name": mesh.material_names[part] if part < len(mesh.material_names) else f"part{part}",
            "substance": rec.substance,
            "material_id": mid,
            "brdf_meta": rec.brdf_meta,
            "uv_transform": {
                "order": UV_ORDER,
                "density_factor": 1.0 / math.sqrt(density),
                "material_log_scale": math.log(rec.scale),
                "log2_scale": t.log2_scale,
                "scale": t.scale,
                "rotation": t.rotation,
                "translation": [t.dx, t.dy],
            },
        })
    pose = config.pose
    scene = {
        "schema_version": SCHEMA_VERSION,
        "shape_id": config.shape_id,
        "exemplar_id": config.exemplar_id,
        "rng_seed": config.rng_seed,
        "camera": {
            "theta": pose.theta, "phi": pose.phi, "r": pose.r, "fov_x": pose.fov_x,
            "target": [float(v) for v in target],
            "position": [float(v) for v in pose.position(target)],
            "up": [0.0, 1.0, 0.0],
            "resolution": int(resolution),
        },
        "environment": {"id": config.env_map_id, "scale": config.env_scale},
        "parts": parts,
        "label_maps": {"material": f"{map_prefix}material.png", "substance": f"{map_prefix}substance.png"},
    }
    scene = _rounded(scene)
    render = render_part_ids(mesh, pose, resolution, target=target)
    part_labels = render.part_ids.labels
    mat_lut = np.zeros(mesh.n_parts + 1, dtype=np.int32)
    sub_lut = np.zeros(mesh.n_parts + 1, dtype=np.int32)
    for part, mid in assigned.items():
        mat_lut[part + 1] = library.index(mid) + 1
        sub_lut[part + 1] = SUBSTANCES.index(library.get(mid).substance) + 1
    mat_map = LabelMap(mat_lut[part_labels], len(library), "material")
    sub_map = LabelMap(sub_lut[part_labels], len(SUBSTANCES), "substance")
    return scene, mat_map, sub_map


def scene_bytes(scene: dict) -> bytes:
    return (json.dumps(scene, indent=2, sort_keys=True) + "\n").encode()


def scene_schema() -> dict:
    return json.loads((Path(__file__).parent / "data" / "scene_schema.json").read_text())


def validate_scene(scene: dict) -> None:
    import jsonschema

    jsonschema.validate(scene, scene_schema())


def split_train_validation(shapes, env_maps, holdout_fraction: float, rng: np.random.Generator) -> dict:
    """Hold out whole shapes and whole environment maps; never individual renderings."""
    shapes, env_maps = sorted(shapes), sorted(env_maps)
    if not shapes or not env_maps:
        raise ValueError("shape and environment lists must be nonempty")
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in [0, 1)")

    def split(items):
        n_val = int(math.floor(holdout_fraction * len(items) + 0.5))
        perm = rng.permutation(len(items))
        val = sorted(items[i] for i in perm[:n_val])
        train = sorted(items[i] for i in perm[n_val:])
        return train, val

    train_s, val_s = split(shapes)
    train_e, val_e = split(env_maps)
    return {"train": {"shapes": train_s, "env_maps": train_e},
            "validation": {"shapes": val_s, "env_maps": val_e},
            "holdout_fraction": holdout_fraction}


def training_manifest(configs, split: dict) -> dict:
    """Partition configs by the split; configs mixing train and validation assets are dropped."""
    tr, va = split["train"], split["validation"]
    out = {"train": [], "validation": [], "dropped": []}
    for c in configs:
        if c.shape_id in tr["shapes"] and c.env_map_id in tr["env_maps"]:
            out["train"].append(c.rng_seed)
        elif c.shape_id in va["shapes"] and c.env_map_id in va["env_maps"]:
            out["validation"].append(c.rng_seed)
        else:
            out["dropped"].append(c.rng_seed)
    return out
