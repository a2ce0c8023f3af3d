"""Silhouette flow: coordinate-encoded silhouettes matched with a discrete,
coarse-to-fine, truncated-L1 regularized flow solved by reweighted min-sum
message passing over dense SIFT-like descriptors.

Objective for an integer flow ``w = (u, v)``::

    E(w) = sum_p min(|d1(p) - d2(p + w(p))|_1, t)
         + eta * sum_p (|u(p)| + |v(p)|)
         + sum_{p~q} min(alpha |u(p) - u(q)|, d) + min(alpha |v(p) - v(q)|, d)

Labels are joint (u, v) offsets around a per-pixel center. Smoothness is
separable in u and v, so each message is two successive 1-D minimizations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageops import to_gray
from .raster import BACKGROUND, LabelMap

log = logging.getLogger(__name__)

OUT_OF_RANGE = 1e9


@dataclass(frozen=True)
class FlowParams:
    truncation: float = 40.0       # t, data term cap
    eta: float = 0.005             # small-displacement weight
    alpha: float = 2.0             # smoothness slope
    smooth_cap: float = 40.0       # d, smoothness cap
    levels: int = 3
    window: int = 11               # search radius at the coarsest level
    refine_window: int = 3         # radius around the upsampled flow at finer levels
    iterations: int = 10           # message sweeps (each sweep = 4 directions)
    reweight: float = 0.5          # 1.0 is plain loopy BP
    cell_size: int = 3             # descriptor cell size in pixels
    descriptor_scale: float = 5.0  # multiplies the unit descriptors before the L1 data term
    max_displacement: int | None = None  # default: window * 2**(levels-1)

    @property
    def max_disp(self) -> int:
        if self.max_displacement is not None:
            return self.max_displacement
        return self.window * 2 ** (self.levels - 1)


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    energy: float
    saturated: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


def zero_flow(shape) -> FlowField:
    return FlowField(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64), float("nan"))


# --- coordinate silhouettes ----------------------------------------------------

def encode_coordinate_silhouette(mask: np.ndarray) -> np.ndarray:
    """RGB silhouette: red = mask, green = column / width, blue = row / height."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    h, w = mask.shape
    out = np.zeros((h, w, 3), dtype=np.uint8)
    green = np.floor(255.0 * np.arange(w) / w + 0.5).astype(np.uint8)
    blue = np.floor(255.0 * np.arange(h) / h + 0.5).astype(np.uint8)
    out[..., 0] = 255
    out[..., 1] = green[None, :]
    out[..., 2] = blue[:, None]
    out[~mask] = 0
    return out


def plain_silhouette(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape + (3,), dtype=np.uint8)
    out[mask] = 255
    return out


def decode_coordinate_silhouette(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Approximate (mask, x, y) recovered from an encoded silhouette."""
    h, w = image.shape[:2]
    mask = image[..., 0] > 127
    x = image[..., 1].astype(np.float64) * w / 255.0
    y = image[..., 2].astype(np.float64) * h / 255.0
    return mask, x, y


# --- dense descriptors -----------------------------------------------------------

def dense_descriptors(image: np.ndarray, cell_size: int = 3, bins: int = 8) -> np.ndarray:
    """Per-pixel 4x4-cell x 8-orientation descriptors (128 values), unit L2 with 0.2 clamp.

    Gradients are taken on the luma channel; each pixel's descriptor pools
    oriented gradient energy over a 4*cell_size square centred on it.
    """
    gray = to_gray(image)
    if np.asarray(image).dtype == np.uint8:
        gray = gray / 255.0
    h, w = gray.shape
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = ang / (2 * np.pi / bins)
    b0 = np.floor(pos).astype(int) % bins
    w1 = pos - np.floor(pos)
    chans = np.zeros((bins, h, w))
    for b in range(bins):
        chans[b] = mag * np.where(b0 == b, 1 - w1, 0.0) + mag * np.where((b0 + 1) % bins == b, w1, 0.0)
    # cell sums via box filter, then sample 4x4 cell centres around each pixel
    cell = np.stack([ndimage.uniform_filter(c, size=cell_size, mode="constant") * cell_size ** 2
                     for c in chans])
    offsets = [int(round((k - 1.5) * cell_size)) for k in range(4)]
    pad = max(abs(o) for o in offsets) + 1
    padded = np.pad(cell, ((0, 0), (pad, pad), (pad, pad)))
    desc = np.empty((h, w, 4, 4, bins))
    for iy, oy in enumerate(offsets):
        for ix, ox in enumerate(offsets):
            desc[:, :, iy, ix, :] = np.moveaxis(padded[:, pad + oy:pad + oy + h, pad + ox:pad + ox + w], 0, -1)
    desc = desc.reshape(h, w, 16 * bins)
    return _normalize_descriptors(desc)


def _normalize_descriptors(desc: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    out = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > floor)
    out = np.minimum(out, 0.2)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return np.divide(out, norm, out=np.zeros_like(out), where=norm > floor)


# --- energy ---------------------------------------------------------------------

def _data_cost(d1, d2, u, v, t):
    # targets past the border read the replicated edge descriptor
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty = np.clip(ys + v, 0, h - 1)
    tx = np.clip(xs + u, 0, w - 1)
    return np.minimum(np.abs(d1 - d2[ty, tx]).sum(axis=-1), t)


def flow_energy(d1: np.ndarray, d2: np.ndarray, u: np.ndarray, v: np.ndarray, params: FlowParams) -> float:
    """Exact objective of an integer flow on given descriptor grids."""
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    e = _data_cost(d1, d2, u, v, params.truncation).sum()
    e += params.eta * (np.abs(u) + np.abs(v)).sum()
    for f in (u, v):
        e += np.minimum(params.alpha * np.abs(np.diff(f, axis=1)), params.smooth_cap).sum()
        e += np.minimum(params.alpha * np.abs(np.diff(f, axis=0)), params.smooth_cap).sum()
    return float(e)


# --- solver ------------------------------------------------------------------------

class _Level:
    """Joint (u, v) labels at one pyramid level: flow = center + (a_u, a_v)."""

    def __init__(self, d1, d2, cu, cv, radius, params: FlowParams, max_disp: int):
        self.h, self.w = cu.shape
        self.cu, self.cv = cu, cv
        self.r = radius
        self.L = 2 * radius + 1
        self.offs = np.arange(-radius, radius + 1)
        self.p = params
        L = self.L
        data = np.empty((self.h, self.w, L, L))
        for i, a in enumerate(self.offs):
            for j, b in enumerate(self.offs):
                u = cu + a
                v = cv + b
                c = _data_cost(d1, d2, u, v, params.truncation) + params.eta * (np.abs(u) + np.abs(v))
                c[(np.abs(u) > max_disp) | (np.abs(v) > max_disp)] = OUT_OF_RANGE
                data[:, :, i, j] = c
        self.data = data

    def pair_costs(self, c_from, c_to):
        """(..., L_from, L_to) truncated-L1 costs for one flow component."""
        diff = (c_from - c_to)[..., None, None] + self.offs[:, None] - self.offs[None, :]
        return np.minimum(self.p.alpha * np.abs(diff), self.p.smooth_cap)

    def message(self, h, src_u, src_v, dst_u, dst_v):
        """min over source labels of h + separable pairwise, normalized to min 0."""
        pu = self.pair_costs(src_u, dst_u)   # (n, Ls, Ld)
        pv = self.pair_costs(src_v, dst_v)
        # minimize over a_v first: tmp[n, a_u, b_v]
        tmp = (h[:, :, :, None] + pv[:, None, :, :]).min(axis=2)
        m = (tmp[:, :, None, :] + pu[:, :, :, None]).min(axis=1)
        return m - m.min(axis=(1, 2), keepdims=True)

    def solve(self, iterations: int, rho: float = 0.5):
        """Sweep-ordered reweighted min-sum message passing.

        The outgoing message from ``p`` is built from ``rho`` times its full
        belief minus the reverse message. ``rho = 1`` is plain loopy BP; the
        default 1/2 matches a grid split into row and column chains and stops
        weak evidence in flat regions from being counted around every loop.
        """
        h, w, L = self.h, self.w, self.L
        zeros = np.zeros((h, w, L, L))
        m_left, m_right, m_up, m_down = zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy()
        cu, cv = self.cu, self.cv

        def belief(sl):
            return self.data[sl] + m_left[sl] + m_right[sl] + m_up[sl] + m_down[sl]

        for _ in range(iterations):
            # message into (y, x) from its left neighbour is stored at m_left[y, x]
            for x in range(1, w):
                src = rho * belief(np.s_[:, x - 1]) - m_right[:, x - 1]
                m_left[:, x] = self.message(src, cu[:, x - 1], cv[:, x - 1], cu[:, x], cv[:, x])
            for x in range(w - 2, -1, -1):
                src = rho * belief(np.s_[:, x + 1]) - m_left[:, x + 1]
                m_right[:, x] = self.message(src, cu[:, x + 1], cv[:, x + 1], cu[:, x], cv[:, x])
            for y in range(1, h):
                src = rho * belief(np.s_[y - 1]) - m_down[y - 1]
                m_up[y] = self.message(src, cu[y - 1], cv[y - 1], cu[y], cv[y])
            for y in range(h - 2, -1, -1):
                src = rho * belief(np.s_[y + 1]) - m_up[y + 1]
                m_down[y] = self.message(src, cu[y + 1], cv[y + 1], cu[y], cv[y])
        self.messages = (m_left, m_right, m_up, m_down)
        return self.decode(m_right, m_down)

    def decode(self, m_right, m_down):
        """Raster-order decode conditioned on already fixed left/up neighbours.

        Exact backtracking on chains, and consistent under belief ties, which a
        per-pixel argmax is not. Exact ties go to the smallest offset.
        """
        L, offs = self.L, self.offs
        rank = (np.abs(offs)[:, None] + np.abs(offs)[None, :]).reshape(-1)
        order = np.argsort(rank, kind="stable")
        grid_u = self.cu[..., None] + offs          # (h, w, L) flow values per offset
        grid_v = self.cv[..., None] + offs
        u = np.zeros((self.h, self.w), dtype=np.int64)
        v = np.zeros((self.h, self.w), dtype=np.int64)
        for y in range(self.h):
            for x in range(self.w):
                cost = self.data[y, x] + m_right[y, x] + m_down[y, x]
                for ny, nx in ((y, x - 1), (y - 1, x)):
                    if ny >= 0 and nx >= 0:
                        cost = cost + self._pair(grid_u[y, x], u[ny, nx])[:, None] \
                            + self._pair(grid_v[y, x], v[ny, nx])[None, :]
                k = order[np.argmin(cost.reshape(-1)[order])]
                u[y, x] = grid_u[y, x, k // L]
                v[y, x] = grid_v[y, x, k % L]
        return u, v

    def _pair(self, values, other):
        return np.minimum(self.p.alpha * np.abs(values - other), self.p.smooth_cap)

    def icm(self, u, v, sweeps: int = 4):
        """Checkerboard coordinate descent over the joint labels; never increases energy."""
        au, av = u - self.cu, v - self.cv
        au = np.clip(au, -self.r, self.r)
        av = np.clip(av, -self.r, self.r)
        ys, xs = np.mgrid[0:self.h, 0:self.w]
        for _ in range(sweeps):
            changed = False
            for parity in (0, 1):
                sel = (ys + xs) % 2 == parity
                cost = self.data.copy()
                uu, vv = self.cu + au, self.cv + av
                for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                    ny, nx = ys + dy, xs + dx
                    ok = (ny >= 0) & (ny < self.h) & (nx >= 0) & (nx < self.w)
                    nyc, nxc = np.clip(ny, 0, self.h - 1), np.clip(nx, 0, self.w - 1)
                    nu = uu[nyc, nxc]
                    nv = vv[nyc, nxc]
                    cu_ = (self.cu[..., None] + self.offs)[..., :, None]
                    cv_ = (self.cv[..., None] + self.offs)[..., None, :]
                    pc = (np.minimum(self.p.alpha * np.abs(cu_ - nu[..., None, None]), self.p.smooth_cap)
                          + np.minimum(self.p.alpha * np.abs(cv_ - nv[..., None, None]), self.p.smooth_cap))
                    cost += np.where(ok[..., None, None], pc, 0.0)
                flat = cost.reshape(self.h, self.w, -1)
                cur = (au + self.r) * self.L + (av + self.r)
                cur_cost = np.take_along_axis(flat, cur[..., None], axis=2)[..., 0]
                best = np.argmin(flat, axis=2)
                best_cost = np.take_along_axis(flat, best[..., None], axis=2)[..., 0]
                upd = sel & (best_cost < cur_cost - 1e-12)
                if upd.any():
                    changed = True
                    au = np.where(upd, self.offs[best // self.L], au)
                    av = np.where(upd, self.offs[best % self.L], av)
            if not changed:
                break
        return self.cu + au, self.cv + av


def _downsample(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    img = img[:2 * h2, :2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(image, dtype=np.float64) / 255.0]
    for _ in range(levels - 1):
        if min(pyr[-1].shape[:2]) < 8:
            break
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _upsample_flow(f: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    rows = np.minimum(np.arange(h) // 2, f.shape[0] - 1)
    cols = np.minimum(np.arange(w) // 2, f.shape[1] - 1)
    return 2 * f[rows][:, cols]


def compute_flow(src: np.ndarray, dst: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Flow ``w`` such that ``src(p)`` matches ``dst(p + w(p))``.

    Coarse-to-fine: a full window search at the coarsest level, then a small
    refinement window around the doubled, upsampled flow. At every level the
    result is the lowest-energy of the BP decode (polished by ICM) and the
    incoming flow, so energy never increases across refinement. The final
    answer is also compared against zero flow.
    """
    src = np.asarray(src)
    dst = np.asarray(dst)
    if src.shape[:2] != dst.shape[:2]:
        raise ValueError("source and destination must have equal dimensions")
    max_disp = params.max_disp
    pyr_s = _pyramid(src, params.levels)
    pyr_d = _pyramid(dst, params.levels)
    n = len(pyr_s)
    u = v = None
    for lvl in range(n - 1, -1, -1):
        d1 = params.descriptor_scale * dense_descriptors(pyr_s[lvl], params.cell_size)
        d2 = params.descriptor_scale * dense_descriptors(pyr_d[lvl], params.cell_size)
        shape = d1.shape[:2]
        lvl_max = int(np.ceil(max_disp / 2 ** lvl))
        if u is None:
            cu = np.zeros(shape, dtype=np.int64)
            cv = np.zeros(shape, dtype=np.int64)
            radius = min(params.window, lvl_max)
        else:
            cu = np.clip(_upsample_flow(u, shape), -lvl_max, lvl_max)
            cv = np.clip(_upsample_flow(v, shape), -lvl_max, lvl_max)
            radius = params.refine_window
        level = _Level(d1, d2, cu, cv, radius, params, lvl_max)
        bu, bv = level.solve(params.iterations, params.reweight)
        bu, bv = level.icm(bu, bv)
        candidates = [(bu, bv), (cu, cv)]
        energies = [flow_energy(d1, d2, a, b, params) for a, b in candidates]
        k = int(np.argmin(energies))
        u, v = candidates[k]
        energy = energies[k]
        log.debug("level %d: bp %.3f incoming %.3f", lvl, *energies)
    zu = np.zeros_like(u)
    e0 = flow_energy(d1, d2, zu, zu, params)
    if e0 < energy:
        u, v, energy = zu, zu.copy(), e0
    saturated = bool(np.any(np.abs(u) >= max_disp) or np.any(np.abs(v) >= max_disp))
    if saturated:
        log.warning("flow reached the maximum displacement %d; the true offset may be larger", max_disp)
    return FlowField(u.astype(np.int64), v.astype(np.int64), energy, saturated)


def warp_labels(part_map: LabelMap, flow: FlowField) -> LabelMap:
    """Backward nearest-neighbour warp: ``out(p) = part_map(p - w(p))``."""
    labels = part_map.labels
    if labels.shape != flow.shape:
        raise ValueError("label map and flow dimensions differ")
    h, w = labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sy, sx = ys - flow.v, xs - flow.u
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.full_like(labels, BACKGROUND)
    out[inside] = labels[sy[inside], sx[inside]]
    return LabelMap(out, part_map.n_labels, part_map.kind)


def splat_labels(part_map: LabelMap, flow: FlowField) -> LabelMap:
    """Forward nearest-neighbour splat: ``out(p + w(p)) = part_map(p)`` for labeled ``p``.

    Where several sources land on one pixel the smallest displacement wins
    (then the first in row-major order); pixels nobody lands on are background.
    """
    labels = part_map.labels
    if labels.shape != flow.shape:
        raise ValueError("label map and flow dimensions differ")
    h, w = labels.shape
    ys, xs = np.nonzero(labels != BACKGROUND)
    ty, tx = ys + flow.v[ys, xs], xs + flow.u[ys, xs]
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    ys, xs, ty, tx = ys[inside], xs[inside], ty[inside], tx[inside]
    mag = np.abs(flow.u[ys, xs]) + np.abs(flow.v[ys, xs])
    order = np.lexsort((ys * w + xs, mag))[::-1]   # later writes win, so the preferred source goes last
    out = np.full_like(labels, BACKGROUND)
    out[ty[order], tx[order]] = labels[ys[order], xs[order]]
    return LabelMap(out, part_map.n_labels, part_map.kind)


def warp_mask(mask: np.ndarray, flow: FlowField) -> np.ndarray:
    lm = LabelMap(np.asarray(mask, dtype=np.int32), 1)
    return warp_labels(lm, flow).labels > 0


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """HSV visualisation: hue = direction, value = magnitude (normalized)."""
    from matplotlib.colors import hsv_to_rgb

    mag = np.hypot(flow.u, flow.v).astype(np.float64)
    ang = np.mod(np.arctan2(flow.v, flow.u), 2 * np.pi) / (2 * np.pi)
    vmax = mag.max() if mag.max() > 0 else 1.0
    hsv = np.stack([ang, np.ones_like(ang), mag / vmax], axis=-1)
    return (hsv_to_rgb(hsv) * 255 + 0.5).astype(np.uint8)


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo: magic 202021.25, width, height, interleaved float32 (u, v)."""
    h, w = flow.shape
    data = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as f:
        f.write(np.array([202021.25], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        magic = np.frombuffer(f.read(4), dtype="<f4")[0]
        if magic != np.float32(202021.25):
            raise ValueError("not a .flo file")
        w, h = np.frombuffer(f.read(8), dtype="<i4")
        data = np.frombuffer(f.read(), dtype="<f4").reshape(h, w, 2)
    return FlowField(np.rint(data[..., 0]).astype(np.int64), np.rint(data[..., 1]).astype(np.int64), float("nan"))
