"""HOG descriptors and the exemplar -> rendering reverse index.

The default configuration resizes to a 104 x 104 working image and pools
unsigned gradients into 13 x 13 cells of 8 x 8 pixels with 8 orientation
bins, giving 13 * 13 * 8 = 1352 values per image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import SphericalPose
from .imageops import gaussian_blur, resize_bilinear, to_gray

INDEX_MAGIC = b"MAIDX\0"
INDEX_VERSION = 1


@dataclass(frozen=True)
class HogConfig:
    cells_x: int = 13
    cells_y: int = 13
    orientation_bins: int = 8
    cell_size: int = 8
    signed: bool = False
    blur_sigma: float = 0.1
    clip: float = 0.2

    @property
    def working_size(self) -> tuple[int, int]:
        return self.cells_y * self.cell_size, self.cells_x * self.cell_size

    @property
    def length(self) -> int:
        return self.cells_x * self.cells_y * self.orientation_bins


@dataclass(frozen=True, eq=False)
class HogDescriptor:
    values: np.ndarray
    config: HogConfig

    def __len__(self) -> int:
        return len(self.values)


def _cell_histograms(gray: np.ndarray, cfg: HogConfig) -> np.ndarray:
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
    mag = np.hypot(gx, gy)
    period = 2 * np.pi if cfg.signed else np.pi
    ang = np.mod(np.arctan2(gy, gx), period)

    nb = cfg.orientation_bins
    pos = ang / (period / nb) - 0.5
    b0 = np.floor(pos).astype(int)
    wb1 = pos - b0
    b1 = (b0 + 1) % nb
    b0 %= nb

    h, w = gray.shape
    # orientation votes per pixel, then a separable bilinear spread onto cell centers
    base = np.arange(h * w) * nb
    votes = np.bincount(np.concatenate([base + b0.ravel(), base + b1.ravel()]),
                        np.concatenate([(mag * (1 - wb1)).ravel(), (mag * wb1).ravel()]), minlength=h * w * nb)
    ay = _cell_weights(h, cfg.cell_size, cfg.cells_y)
    ax = _cell_weights(w, cfg.cell_size, cfg.cells_x)
    return np.einsum("ch,hwb,dw->cdb", ay, votes.reshape(h, w, nb), ax, optimize=True)


def _cell_weights(n: int, cell_size: int, n_cells: int) -> np.ndarray:
    """(n_cells, n) bilinear weights from pixel centers to the two nearest cell centers."""
    c = (np.arange(n) + 0.5) / cell_size - 0.5
    c0 = np.floor(c).astype(int)
    w1 = c - c0
    out = np.zeros((n_cells + 2, n))
    cols = np.arange(n)
    np.add.at(out, (c0 + 1, cols), 1 - w1)
    np.add.at(out, (c0 + 2, cols), w1)
    return out[1:-1]


def _block_normalize(hist: np.ndarray, clip: float, eps: float = 1e-4) -> np.ndarray:
    """Normalize each cell by its four covering 2x2 blocks, clip, and average."""
    energy = np.pad((hist ** 2).sum(axis=2), 1, mode="edge")
    out = np.zeros_like(hist)
    hy, hx = hist.shape[:2]
    for oy in (0, 1):
        for ox in (0, 1):
            block = (energy[oy:oy + hy, ox:ox + hx] + energy[oy + 1:oy + hy + 1, ox:ox + hx]
                     + energy[oy:oy + hy, ox + 1:ox + hx + 1] + energy[oy + 1:oy + hy + 1, ox + 1:ox + hx + 1])
            out += np.minimum(hist / np.sqrt(block + eps)[..., None], clip)
    return 0.5 * out


def hog(image: np.ndarray, config: HogConfig = HogConfig()) -> HogDescriptor:
    """HOG descriptor of an RGB or grayscale image (uint8 or float in [0, 1])."""
    img = np.asarray(image)
    if img.shape[0] < config.cell_size or img.shape[1] < config.cell_size:
        raise ValueError(f"image {img.shape[:2]} smaller than one {config.cell_size}px cell")
    gray = to_gray(img)
    if img.dtype == np.uint8:
        gray = gray / 255.0
    gray = resize_bilinear(gray, *config.working_size)
    gray = gaussian_blur(gray, config.blur_sigma)
    hist = _block_normalize(_cell_histograms(gray, config), config.clip)
    return HogDescriptor(hist.reshape(-1), config)


def l2_normalized(values: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(values)
    return values / norm if norm > 0 else np.zeros_like(values)


# --- retrieval ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RenderingSet:
    """Descriptors of rendered views; row ``i`` is ``shape_ids[i]`` at ``poses[pose_indices[i]]``."""

    descriptors: np.ndarray
    shape_ids: tuple[str, ...]
    pose_indices: np.ndarray
    poses: tuple[SphericalPose, ...]

    def __post_init__(self):
        object.__setattr__(self, "descriptors", np.asarray(self.descriptors, dtype=np.float64))
        object.__setattr__(self, "pose_indices", np.asarray(self.pose_indices, dtype=np.int64))
        if not (len(self.descriptors) == len(self.shape_ids) == len(self.pose_indices)):
            raise ValueError("descriptor, shape and pose tables must align")

    def __len__(self) -> int:
        return len(self.shape_ids)

    def tie_order(self) -> np.ndarray:
        """Rank of each row under the (shape_id, pose_index) tie-break."""
        order = sorted(range(len(self)), key=lambda i: (self.shape_ids[i], int(self.pose_indices[i])))
        rank = np.empty(len(self), dtype=np.int64)
        rank[order] = np.arange(len(self))
        return rank


@dataclass(frozen=True)
class CoarseMatch:
    shape_id: str
    pose_index: int
    pose: SphericalPose
    distance: float
    exemplar_id: str | None = None


def _exact_distances(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return np.sqrt(((rows - query) ** 2).sum(axis=1))


def _ranked(query: np.ndarray, renderings: RenderingSet, k: int, tie_rank: np.ndarray,
            approx_d2: np.ndarray | None = None) -> list[tuple[int, float]]:
    n = len(renderings)
    if approx_d2 is None or k >= n:
        cand = np.arange(n)
    else:
        # Gram-matrix distances may carry rounding error; re-check a safe superset exactly
        kth = np.partition(approx_d2, k - 1)[k - 1]
        slack = 1e-9 * (np.abs(approx_d2).max() + 1.0)
        cand = np.flatnonzero(approx_d2 <= kth + slack)
    d = _exact_distances(query, renderings.descriptors[cand])
    order = np.lexsort((tie_rank[cand], d))[:k]
    return [(int(cand[i]), float(d[i])) for i in order]


def coarse_match(query, renderings: RenderingSet) -> CoarseMatch:
    """Nearest rendering by L2 distance; ties go to the lowest (shape_id, pose index)."""
    if len(renderings) == 0:
        raise ValueError("rendering set is empty")
    q = np.asarray(getattr(query, "values", query), dtype=np.float64)
    (i, d), = _ranked(q, renderings, 1, renderings.tie_order())
    pi = int(renderings.pose_indices[i])
    return CoarseMatch(renderings.shape_ids[i], pi, renderings.poses[pi], d)


@dataclass(frozen=True)
class IndexEntry:
    shape_id: str
    pose_index: int
    distance: float


@dataclass(frozen=True, eq=False)
class ReverseIndex:
    """Per-exemplar top-k renderings, ascending by distance."""

    k: int
    exemplar_ids: tuple[str, ...]
    entries: dict[str, list[IndexEntry]]
    poses: tuple[SphericalPose, ...]
    config: HogConfig = field(default_factory=HogConfig)
    renderings: RenderingSet | None = None

    def pose(self, index: int) -> SphericalPose:
        return self.poses[index]

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "k": self.k,
            "hog_config": asdict(self.config),
            "poses": [p.to_dict() for p in self.poses],
            "entries": {
                ex: [{"shape_id": e.shape_id, "pose_index": e.pose_index, "distance": e.distance}
                     for e in self.entries[ex]]
                for ex in self.exemplar_ids
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def build_reverse_index(exemplars: dict[str, np.ndarray], renderings: RenderingSet, k: int,
                        config: HogConfig = HogConfig(), chunk: int = 256) -> ReverseIndex:
    """Exact top-k renderings per exemplar (exemplar id -> descriptor)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = tuple(exemplars)
    entries: dict[str, list[IndexEntry]] = {}
    if ids and len(renderings):
        rows = renderings.descriptors
        row_sq = (rows ** 2).sum(axis=1)
        tie_rank = renderings.tie_order()
        queries = np.asarray([np.asarray(getattr(exemplars[e], "values", exemplars[e]), dtype=np.float64)
                              for e in ids])
        for start in range(0, len(ids), chunk):
            block = queries[start:start + chunk]
            approx = (block ** 2).sum(axis=1)[:, None] + row_sq[None, :] - 2.0 * block @ rows.T
            for qi, q in enumerate(block):
                ranked = _ranked(q, renderings, k, tie_rank, approx[qi])
                entries[ids[start + qi]] = [
                    IndexEntry(renderings.shape_ids[i], int(renderings.pose_indices[i]), d) for i, d in ranked]
    else:
        entries = {e: [] for e in ids}
    return ReverseIndex(k, ids, entries, renderings.poses, config, renderings)


@dataclass(frozen=True)
class ShapeCandidate:
    exemplar_id: str
    pose_index: int
    distance: float


def invert_index(index: ReverseIndex) -> dict[str, list[ShapeCandidate]]:
    """Shape -> exemplars whose top-k contained it, closest pose only, ascending."""
    best: dict[tuple[str, str], ShapeCandidate] = {}
    for ex in index.exemplar_ids:
        for e in index.entries[ex]:
            key = (e.shape_id, ex)
            cur = best.get(key)
            if cur is None or (e.distance, e.pose_index) < (cur.distance, cur.pose_index):
                best[key] = ShapeCandidate(ex, e.pose_index, e.distance)
    out: dict[str, list[ShapeCandidate]] = {}
    for (shape, _), cand in best.items():
        out.setdefault(shape, []).append(cand)
    for shape in out:
        out[shape].sort(key=lambda c: (c.distance, c.exemplar_id))
    return dict(sorted(out.items()))


# --- binary serialization ---------------------------------------------------------
#
# little-endian layout:
#   magic(6) version(u32) k(u32)
#   hog config: cells_x cells_y bins cell_size (u32 x4) signed(u8) blur(f64) clip(f64)
#   n_poses(u32) then n_poses x (theta, phi, r, fov_x) f64
#   n_shapes(u32) then strings; n_exemplars(u32) then strings  (string = u32 len + utf-8)
#   n_entries(u32) then entries (exemplar u32, shape u32, pose u32, distance f64)
#   has_renderings(u8) [n_rows u32, dim u32, rows x (shape u32, pose u32), f64 descriptors]

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def string(self) -> str:
        (n,) = self.take("<I")
        s = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def array(self, dtype, count):
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += arr.nbytes
        return arr


def save_index(index: ReverseIndex, path: str | Path) -> None:
    cfg = index.config
    shapes = sorted({e.shape_id for ex in index.exemplar_ids for e in index.entries[ex]}
                    | set(index.renderings.shape_ids if index.renderings is not None else ()))
    shape_no = {s: i for i, s in enumerate(shapes)}
    out = [INDEX_MAGIC, struct.pack("<II", INDEX_VERSION, index.k),
           struct.pack("<IIII?dd", cfg.cells_x, cfg.cells_y, cfg.orientation_bins, cfg.cell_size,
                       cfg.signed, cfg.blur_sigma, cfg.clip),
           struct.pack("<I", len(index.poses))]
    out += [struct.pack("<dddd", p.theta, p.phi, p.r, p.fov_x) for p in index.poses]
    out.append(struct.pack("<I", len(shapes)))
    out += [_pack_str(s) for s in shapes]
    out.append(struct.pack("<I", len(index.exemplar_ids)))
    out += [_pack_str(s) for s in index.exemplar_ids]
    flat = [(xi, shape_no[e.shape_id], e.pose_index, e.distance)
            for xi, ex in enumerate(index.exemplar_ids) for e in index.entries[ex]]
    out.append(struct.pack("<I", len(flat)))
    out += [struct.pack("<IIId", *row) for row in flat]
    rs = index.renderings
    if rs is None:
        out.append(struct.pack("<?", False))
    else:
        out.append(struct.pack("<?II", True, len(rs), rs.descriptors.shape[1] if len(rs) else 0))
        out += [struct.pack("<II", shape_no[s], int(p)) for s, p in zip(rs.shape_ids, rs.pose_indices)]
        out.append(np.ascontiguousarray(rs.descriptors, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_index(path: str | Path) -> ReverseIndex:
    r = _Reader(Path(path).read_bytes())
    if r.data[:len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise ValueError("not a reverse-index file")
    r.pos = len(INDEX_MAGIC)
    version, k = r.take("<II")
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    cx, cy, bins, cs, signed, blur, clip = r.take("<IIII?dd")
    cfg = HogConfig(cx, cy, bins, cs, signed, blur, clip)
    (n_poses,) = r.take("<I")
    poses = tuple(SphericalPose(*r.take("<dddd")) for _ in range(n_poses))
    (n_shapes,) = r.take("<I")
    shapes = [r.string() for _ in range(n_shapes)]
    (n_ex,) = r.take("<I")
    exemplars = tuple(r.string() for _ in range(n_ex))
    (n_entries,) = r.take("<I")
    entries: dict[str, list[IndexEntry]] = {e: [] for e in exemplars}
    for _ in range(n_entries):
        xi, si, pi, d = r.take("<IIId")
        entries[exemplars[xi]].append(IndexEntry(shapes[si], pi, d))
    (has_rows,) = r.take("<?")
    renderings = None
    if has_rows:
        n_rows, dim = r.take("<II")
        meta = [r.take("<II") for _ in range(n_rows)]
        desc = r.array("<f8", n_rows * dim).reshape(n_rows, dim).copy()
        renderings = RenderingSet(desc, tuple(shapes[s] for s, _ in meta),
                                  np.array([p for _, p in meta], dtype=np.int64), poses)
    return ReverseIndex(k, exemplars, entries, poses, cfg, renderings)
