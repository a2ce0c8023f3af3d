"""Segmented triangle meshes: OBJ loading, welding, normalization and UV density."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

MESH_SCHEMA_VERSION = 1


class ObjParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SegmentedMesh:
    """Triangle mesh whose faces carry material-part and object-part ids.

    ``uv`` holds per-face-corner coordinates with shape ``(F, 3, 2)`` or is
    ``None`` when the source had no texture coordinates (``needs_uv``).
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_material_part: np.ndarray
    face_object_part: np.ndarray
    uv: np.ndarray | None = None
    material_names: tuple[str, ...] = ()
    object_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_material_part", np.asarray(self.face_material_part, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "face_object_part", np.asarray(self.face_object_part, dtype=np.int64).reshape(-1))
        if self.uv is not None:
            object.__setattr__(self, "uv", np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2))
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if len(self.face_material_part) != len(f) or len(self.face_object_part) != len(f):
            raise MeshError("every face needs a material part and an object part id")
        if self.uv is not None and len(self.uv) != len(f):
            raise MeshError("uv array must have one entry per face")

    @property
    def n_parts(self) -> int:
        return len(self.material_names) if self.material_names else (
            int(self.face_material_part.max()) + 1 if len(self.faces) else 0)

    @property
    def needs_uv(self) -> bool:
        return self.uv is None

    @property
    def normals(self) -> np.ndarray:
        """Per-vertex unit normals (area weighted)."""
        fn = np.cross(*_edges(self.vertices, self.faces))
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.divide(vn, norm, out=np.zeros_like(vn), where=norm > 0)

    def face_normals(self) -> np.ndarray:
        fn = np.cross(*_edges(self.vertices, self.faces))
        norm = np.linalg.norm(fn, axis=1, keepdims=True)
        return np.divide(fn, norm, out=np.zeros_like(fn), where=norm > 0)

    def face_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices[self.faces])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def to_json(self) -> str:
        return json.dumps(mesh_to_dict(self), sort_keys=True)


def _edges(vertices, faces):
    tri = vertices[faces]
    return tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]


def triangle_areas(tri: np.ndarray) -> np.ndarray:
    """Areas of triangles given as ``(F, 3, 2)`` or ``(F, 3, 3)`` corner arrays."""
    tri = np.asarray(tri, dtype=np.float64)
    a = tri[:, 1] - tri[:, 0]
    b = tri[:, 2] - tri[:, 0]
    if tri.shape[-1] == 2:
        return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


# --- OBJ ---------------------------------------------------------------------

_UNSUPPORTED = {"curv", "curv2", "surf", "parm", "trim", "hole", "scrv", "sp", "end",
                "cstype", "deg", "bmat", "step", "con"}
_IGNORED = {"vp", "s", "mtllib", "l", "p", "o", "usemap", "lod", "shadow_obj", "trace_obj",
            "mg", "bevel", "c_interp", "d_interp", "ctech", "stech"}


def _resolve(tok: str, count: int, line_no: int, what: str) -> int:
    try:
        idx = int(tok)
    except ValueError:
        raise ObjParseError(line_no, f"bad {what} index {tok!r}") from None
    if idx == 0:
        raise ObjParseError(line_no, f"{what} index 0 is invalid (OBJ indices are 1-based)")
    resolved = idx - 1 if idx > 0 else count + idx
    if not 0 <= resolved < count:
        raise ObjParseError(line_no, f"{what} index {idx} out of range")
    return resolved


def load_obj(data: bytes | str) -> SegmentedMesh:
    """Parse the OBJ subset ``v``/``vt``/``vn``/``f``/``usemtl``/``g``.

    Material parts come from ``usemtl`` statements and object parts from ``g``
    statements, numbered by first use. Polygons are fan-triangulated.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    verts, texcoords = [], []
    faces, face_uv, mat_ids, obj_ids = [], [], [], []
    materials: dict[str, int] = {}
    objects: dict[str, int] = {}
    cur_mat, cur_obj = "default", "default"
    has_all_uv = True

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        key, args = toks[0], toks[1:]
        if key == "v":
            if len(args) < 3:
                raise ObjParseError(line_no, "vertex needs 3 coordinates")
            try:
                verts.append([float(a) for a in args[:3]])
            except ValueError:
                raise ObjParseError(line_no, "bad vertex coordinate") from None
        elif key == "vt":
            try:
                texcoords.append([float(args[0]), float(args[1]) if len(args) > 1 else 0.0])
            except (ValueError, IndexError):
                raise ObjParseError(line_no, "bad texture coordinate") from None
        elif key == "vn":
            pass  # normals are recomputed from geometry
        elif key == "usemtl":
            cur_mat = args[0] if args else "default"
        elif key == "g":
            cur_obj = " ".join(args) if args else "default"
        elif key == "f":
            if len(args) < 3:
                raise ObjParseError(line_no, "face needs at least 3 vertices")
            corners = []
            for tok in args:
                parts = tok.split("/")
                vi = _resolve(parts[0], len(verts), line_no, "vertex")
                ti = None
                if len(parts) > 1 and parts[1]:
                    ti = _resolve(parts[1], len(texcoords), line_no, "texture")
                corners.append((vi, ti))
            m = materials.setdefault(cur_mat, len(materials))
            o = objects.setdefault(cur_obj, len(objects))
            for k in range(1, len(corners) - 1):
                tri = (corners[0], corners[k], corners[k + 1])
                faces.append([c[0] for c in tri])
                if any(c[1] is None for c in tri):
                    has_all_uv = False
                    face_uv.append(None)
                else:
                    face_uv.append([texcoords[c[1]] for c in tri])
                mat_ids.append(m)
                obj_ids.append(o)
        elif key in _UNSUPPORTED:
            raise ObjParseError(line_no, f"unsupported free-form statement {key!r}")
        elif key in _IGNORED:
            continue
        else:
            raise ObjParseError(line_no, f"unknown statement {key!r}")

    uv = np.asarray(face_uv, dtype=np.float64) if faces and has_all_uv else None
    return SegmentedMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        face_material_part=np.asarray(mat_ids, dtype=np.int64),
        face_object_part=np.asarray(obj_ids, dtype=np.int64),
        uv=uv,
        material_names=tuple(materials),
        object_names=tuple(objects),
    )


def write_obj(mesh: SegmentedMesh) -> str:
    """Serialize back to OBJ, one ``usemtl`` block per material part."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uv is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uv.reshape(-1, 2).tolist()]
    for part in range(mesh.n_parts):
        sel = np.flatnonzero(mesh.face_material_part == part)
        if not len(sel):
            continue
        lines.append(f"usemtl {mesh.material_names[part] if mesh.material_names else part}")
        for fi in sel:
            g = mesh.face_object_part[fi]
            name = mesh.object_names[g] if mesh.object_names else str(g)
            lines.append(f"g {name}")
            a, b, c = mesh.faces[fi] + 1
            if mesh.uv is not None:
                t = 3 * fi + 1
                lines.append(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}")
            else:
                lines.append(f"f {a} {b} {c}")
    return "\n".join(lines) + "\n"


# --- JSON hand-off format ---------------------------------------------------

def mesh_to_dict(mesh: SegmentedMesh) -> dict:
    return {
        "schema_version": MESH_SCHEMA_VERSION,
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "face_material_part": mesh.face_material_part.tolist(),
        "face_object_part": mesh.face_object_part.tolist(),
        "uv": None if mesh.uv is None else mesh.uv.tolist(),
        "material_names": list(mesh.material_names),
        "object_names": list(mesh.object_names),
        "meta": mesh.meta,
    }


def mesh_from_dict(d: dict) -> SegmentedMesh:
    if d.get("schema_version") != MESH_SCHEMA_VERSION:
        raise MeshError(f"unsupported mesh schema version {d.get('schema_version')!r}")
    return SegmentedMesh(
        vertices=np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
        face_material_part=d["face_material_part"],
        face_object_part=d["face_object_part"],
        uv=None if d.get("uv") is None else np.asarray(d["uv"], dtype=np.float64).reshape(-1, 3, 2),
        material_names=tuple(d.get("material_names", ())),
        object_names=tuple(d.get("object_names", ())),
        meta=dict(d.get("meta", {})),
    )


def mesh_from_json(text: str) -> SegmentedMesh:
    return mesh_from_dict(json.loads(text))


# --- geometry operations -------------------------------------------------------

def weld_vertices(mesh: SegmentedMesh, eps: float = 1e-6) -> SegmentedMesh:
    """Merge vertices closer than ``eps`` and drop faces that become degenerate.

    Each cluster of transitively-close vertices collapses onto its lowest-index
    member. Zero-area faces are removed along with their uv and part ids.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    v = mesh.vertices
    n = len(v)
    if n == 0:
        return mesh
    if eps == 0:
        _, labels = np.unique(v, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
    else:
        pairs = cKDTree(v).query_pairs(eps, output_type="ndarray")
        if len(pairs):
            graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        else:
            graph = coo_matrix((n, n))
        _, labels = connected_components(graph, directed=False)
    # representative = lowest original index in each cluster, clusters ordered by it
    rep = np.full(labels.max() + 1, n, dtype=np.int64)
    np.minimum.at(rep, labels, np.arange(n))
    order = np.argsort(rep)
    new_id = np.empty_like(order)
    new_id[order] = np.arange(len(order))
    remap = new_id[labels]
    new_vertices = v[rep[order]]
    faces = remap[mesh.faces]

    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    areas = triangle_areas(new_vertices[faces])
    lo, hi = new_vertices.min(axis=0), new_vertices.max(axis=0)
    tiny = 1e-14 * max(float(np.sum((hi - lo) ** 2)), 1e-300)
    keep &= areas > tiny

    used = np.unique(faces[keep])
    compact = np.full(len(new_vertices), -1, dtype=np.int64)
    compact[used] = np.arange(len(used))
    return replace(
        mesh,
        vertices=new_vertices[used],
        faces=compact[faces[keep]],
        face_material_part=mesh.face_material_part[keep],
        face_object_part=mesh.face_object_part[keep],
        uv=None if mesh.uv is None else mesh.uv[keep],
    )


def normalize_to_unit_cube(mesh: SegmentedMesh) -> SegmentedMesh:
    """Uniformly scale and center so the longest AABB side spans exactly [0, 1]."""
    if len(mesh.vertices) == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    center = 0.5 * (lo + hi)
    return replace(mesh, vertices=(mesh.vertices - center) / extent + 0.5)


@dataclass(frozen=True)
class PartSurfaceStats:
    part_id: int
    area_world: float
    area_uv: float

    @property
    def density(self) -> float:
        return self.area_uv / self.area_world


def uv_density(mesh: SegmentedMesh, part_id: int) -> PartSurfaceStats:
    """UV-to-world area ratio over the faces of one material part."""
    if mesh.uv is None:
        raise MeshError("mesh has no UV coordinates")
    sel = mesh.face_material_part == part_id
    area_world = float(triangle_areas(mesh.vertices[mesh.faces[sel]]).sum())
    if area_world <= 0:
        raise MeshError(f"part {part_id} has zero world-space area")
    area_uv = float(triangle_areas(mesh.uv[sel]).sum())
    return PartSurfaceStats(part_id, area_world, area_uv)


def normalize_uv_scale(mesh: SegmentedMesh) -> SegmentedMesh:
    """Rescale each part's UVs so that its UV density becomes 1.

    Density is an area ratio, so coordinates are scaled by ``1/sqrt(D)``.
    """
    if mesh.uv is None:
        raise MeshError("mesh has no UV coordinates")
    uv = mesh.uv.copy()
    for part in np.unique(mesh.face_material_part):
        stats = uv_density(mesh, int(part))
        if stats.area_uv <= 0:
            raise MeshError(f"part {part} has zero UV area")
        sel = mesh.face_material_part == part
        uv[sel] *= 1.0 / math.sqrt(stats.density)
    return replace(mesh, uv=uv)


def apply_material_uv_scale(mesh: SegmentedMesh, part_id: int, material_scale: float) -> SegmentedMesh:
    """Multiply a part's UVs by ``ln(material_scale)``; requires ``material_scale > 1``."""
    if mesh.uv is None:
        raise MeshError("mesh has no UV coordinates")
    if not material_scale > 1:
        raise ValueError(f"material scale must exceed 1 (got {material_scale}); log factor would be <= 0")
    uv = mesh.uv.copy()
    uv[mesh.face_material_part == part_id] *= math.log(material_scale)
    return replace(mesh, uv=uv)


def generate_planar_uvs(mesh: SegmentedMesh) -> SegmentedMesh:
    """Planar projection per material part along its dominant normal.

    Stand-in for an external unwrapper; marks ``meta['uv_generated']``.
    """
    fn = np.cross(*_edges(mesh.vertices, mesh.faces))  # area-weighted
    uv = np.zeros((len(mesh.faces), 3, 2))
    for part in np.unique(mesh.face_material_part):
        sel = mesh.face_material_part == part
        # orient normals consistently before summing so opposite faces don't cancel
        n_sum = np.abs(fn[sel]).sum(axis=0)
        axis = np.zeros(3)
        axis[int(np.argmax(n_sum))] = 1.0
        helper = np.array([0.0, 1.0, 0.0]) if axis[1] == 0 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, axis)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        tri = mesh.vertices[mesh.faces[sel]]
        uv[sel] = np.stack([tri @ e1, tri @ e2], axis=-1)
    meta = dict(mesh.meta, uv_generated="planar")
    return replace(mesh, uv=uv, meta=meta)


def prepare_mesh(mesh: SegmentedMesh, weld_eps: float = 1e-6) -> SegmentedMesh:
    """Weld, normalize to the unit cube, and generate UVs when missing."""
    mesh = normalize_to_unit_cube(weld_vertices(mesh, weld_eps))
    if mesh.uv is None:
        mesh = generate_planar_uvs(mesh)
    return mesh
