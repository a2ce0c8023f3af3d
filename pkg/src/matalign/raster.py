"""Deterministic z-buffer rasterizer for part-id maps, depth and flat previews."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, SphericalPose
from .imageops import resize_bilinear, resize_nearest
from .shapelib import SegmentedMesh

BACKGROUND = 0
NEAR = 1e-3


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel labels; 0 is background and ``k + 1`` encodes class ``k``."""

    labels: np.ndarray
    n_labels: int
    kind: str = "material_part"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValueError("label map must be a non-empty 2-D array")
        if labels.min() < 0 or labels.max() > self.n_labels:
            raise ValueError("label outside [0, n_labels]")
        object.__setattr__(self, "labels", labels.astype(np.int32, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def label_set(self) -> set[int]:
        return {int(v) for v in np.unique(self.labels)}


@dataclass(frozen=True, eq=False)
class RenderOutput:
    part_ids: LabelMap
    depth: np.ndarray
    face_ids: np.ndarray
    color: np.ndarray | None = None


def mesh_target(mesh: SegmentedMesh) -> np.ndarray:
    lo, hi = mesh.bounds()
    return 0.5 * (lo + hi)


_RASTER_CHUNK = 1 << 20


def _raster_batch(faces, bw, counts, xmin, ymin, verts, area, inv_z, face_ids, zbuf):
    """Rasterize a batch of faces (ascending ids) into the buffers in place."""
    x0, y0, x1, y1, x2, y2 = verts
    f = np.repeat(faces, counts)
    offset = np.arange(len(f)) - np.repeat(np.cumsum(counts) - counts, counts)
    bwr = np.repeat(bw, counts)
    col = xmin[f] + offset % bwr
    row = ymin[f] + offset // bwr
    px = col + 0.5
    py = row + 0.5
    a = area[f]
    b0 = ((x1[f] - px) * (y2[f] - py) - (x2[f] - px) * (y1[f] - py)) / a
    b1 = ((x2[f] - px) * (y0[f] - py) - (x0[f] - px) * (y2[f] - py)) / a
    b2 = 1.0 - b0 - b1
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    f, row, col, b0, b1, b2 = f[inside], row[inside], col[inside], b0[inside], b1[inside], b2[inside]
    # 1/z is affine in screen space for a planar triangle
    z = 1.0 / (b0 * inv_z[f, 0] + b1 * inv_z[f, 1] + b2 * inv_z[f, 2])
    pix = row * zbuf.shape[1] + col
    # nearest per pixel; the lower face id wins exact depth ties
    order = np.lexsort((f, z, pix))
    pix, z, f = pix[order], z[order], f[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, z, f = pix[first], z[first], f[first]
    # earlier batches hold lower face ids, so only a strictly closer hit replaces them
    flat_z, flat_f = zbuf.reshape(-1), face_ids.reshape(-1)
    closer = z < flat_z[pix]
    flat_z[pix[closer]] = z[closer]
    flat_f[pix[closer]] = f[closer]


def _rasterize(mesh: SegmentedMesh, camera: Camera, face_mask: np.ndarray | None = None):
    """Return (face index map, depth map). Lower face index wins depth ties."""
    h, w = camera.height, camera.width
    face_ids = np.full((h, w), -1, dtype=np.int32)
    zbuf = np.full((h, w), np.inf)
    screen, depth = camera.project(mesh.vertices)
    tri_xy = screen[mesh.faces]
    tri_z = depth[mesh.faces]
    valid = np.all(tri_z > NEAR, axis=1)
    if face_mask is not None:
        valid &= face_mask
    x0, y0 = tri_xy[:, 0, 0], tri_xy[:, 0, 1]
    x1, y1 = tri_xy[:, 1, 0], tri_xy[:, 1, 1]
    x2, y2 = tri_xy[:, 2, 0], tri_xy[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    valid &= np.abs(area) > 1e-12
    # pixel (i, j) has its center at (j + 0.5, i + 0.5)
    xmin = np.clip(np.ceil(tri_xy[..., 0].min(axis=1) - 0.5), 0, w).astype(int)
    xmax = np.clip(np.floor(tri_xy[..., 0].max(axis=1) - 0.5), -1, w - 1).astype(int)
    ymin = np.clip(np.ceil(tri_xy[..., 1].min(axis=1) - 0.5), 0, h).astype(int)
    ymax = np.clip(np.floor(tri_xy[..., 1].max(axis=1) - 0.5), -1, h - 1).astype(int)
    valid &= (xmax >= xmin) & (ymax >= ymin)
    inv_z = 1.0 / np.where(valid[:, None], tri_z, 1.0)

    faces = np.flatnonzero(valid)
    bw = xmax[faces] - xmin[faces] + 1
    counts = bw * (ymax[faces] - ymin[faces] + 1)
    # batches of faces bounded by their total bounding-box pixel count
    cum = np.cumsum(counts)
    start = 0
    while start < len(faces):
        done = cum[start - 1] if start else 0
        stop = max(int(np.searchsorted(cum, done + _RASTER_CHUNK, side="right")), start + 1)
        _raster_batch(faces[start:stop], bw[start:stop], counts[start:stop], xmin, ymin,
                      (x0, y0, x1, y1, x2, y2), area, inv_z, face_ids, zbuf)
        start = stop
    return face_ids, zbuf


def _check_render_args(mesh: SegmentedMesh, resolution: int):
    if len(mesh.faces) == 0:
        raise ValueError("cannot render an empty mesh")
    if resolution < 16:
        raise ValueError("resolution must be at least 16")


def render_part_ids(mesh: SegmentedMesh, pose: SphericalPose, resolution: int = 128,
                    target=None) -> RenderOutput:
    """Rasterize material-part ids (+1) with a z-buffer; no culling, no antialiasing."""
    _check_render_args(mesh, resolution)
    camera = Camera.from_pose(pose, resolution, target=mesh_target(mesh) if target is None else target)
    face_ids, depth = _rasterize(mesh, camera)
    labels = np.where(face_ids >= 0, mesh.face_material_part[np.maximum(face_ids, 0)] + 1, BACKGROUND)
    return RenderOutput(LabelMap(labels, mesh.n_parts), depth, face_ids)


def render_flat_color(mesh: SegmentedMesh, pose: SphericalPose, resolution: int, part_colors,
                      target=None) -> np.ndarray:
    """Flat Lambert preview, light along the view direction, white background.

    ``part_colors`` gives one RGB albedo in [0, 1] per material part. Back
    faces are culled, so winding must face outward.
    """
    return render_flat_color_hits(mesh, pose, resolution, part_colors, target)[0]


def render_flat_color_hits(mesh: SegmentedMesh, pose: SphericalPose, resolution: int, part_colors,
                           target=None) -> tuple[np.ndarray, np.ndarray]:
    """:func:`render_flat_color` plus the mask of pixels covered by a front face."""
    _check_render_args(mesh, resolution)
    colors = np.asarray(part_colors, dtype=np.float64).reshape(-1, 3)
    if len(colors) != mesh.n_parts:
        raise ValueError(f"expected {mesh.n_parts} part colors, got {len(colors)}")
    camera = Camera.from_pose(pose, resolution, target=mesh_target(mesh) if target is None else target)
    normals = mesh.face_normals()
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    front = np.einsum("ij,ij->i", normals, camera.position - centroids) > 0
    face_ids, _ = _rasterize(mesh, camera, face_mask=front)
    lambert = np.clip(normals @ -camera.forward, 0.0, 1.0)
    face_rgb = colors[mesh.face_material_part] * lambert[:, None]
    image = np.full((resolution, resolution, 3), 255, dtype=np.uint8)
    hit = face_ids >= 0
    image[hit] = np.clip(np.floor(face_rgb[face_ids[hit]] * 255 + 0.5), 0, 255).astype(np.uint8)
    return image, hit


def silhouette(render: RenderOutput) -> np.ndarray:
    return render.part_ids.labels != BACKGROUND


def square_crop_box(mask: np.ndarray) -> tuple[int, int, int]:
    """(top, left, side) of the tight square around ``mask``; may extend past the image."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    side = max(r1 - r0, c1 - c0)
    top = r0 - (side - (r1 - r0)) // 2
    left = c0 - (side - (c1 - c0)) // 2
    return int(top), int(left), int(side)


def apply_crop_box(array: np.ndarray, box: tuple[int, int, int], fill) -> np.ndarray:
    top, left, side = box
    out = np.empty((side, side) + array.shape[2:], dtype=array.dtype)
    out[...] = fill
    h, w = array.shape[:2]
    sr0, sr1 = max(top, 0), min(top + side, h)
    sc0, sc1 = max(left, 0), min(left + side, w)
    if sr1 > sr0 and sc1 > sc0:
        out[sr0 - top:sr1 - top, sc0 - left:sc1 - left] = array[sr0:sr1, sc0:sc1]
    return out


def square_crop_to_mask(data, mask: np.ndarray, out_size: int, box=None):
    """Crop to the tight square around ``mask`` and resample to ``out_size``.

    Label maps and boolean masks use nearest neighbour (so no label is ever
    invented) and pad with background; images are resampled bilinearly and
    padded with white.
    """
    box = square_crop_box(mask) if box is None else box
    if isinstance(data, LabelMap):
        crop = apply_crop_box(data.labels, box, BACKGROUND)
        return LabelMap(resize_nearest(crop, out_size, out_size), data.n_labels, data.kind)
    arr = np.asarray(data)
    if arr.dtype == bool or (arr.ndim == 2 and arr.dtype.kind in "iu"):
        crop = apply_crop_box(arr, box, 0)
        return resize_nearest(crop, out_size, out_size)
    fill = 255 if arr.dtype == np.uint8 else 1.0
    crop = apply_crop_box(arr, box, fill)
    return resize_bilinear(crop, out_size, out_size)
