"""Fully connected CRF with Gaussian edge potentials, solved by mean field.

Energy over labels x with Potts compatibility::

    E(x) = sum_i psi_u(x_i) + sum_{i<j} [x_i != x_j] k(f_i, f_j)
    k = w_app * exp(-|p_i - p_j|^2 / 2 th_a^2 - |I_i - I_j|^2 / 2 th_b^2)
      + w_smooth * exp(-|p_i - p_j|^2 / 2 th_g^2)

Mean field update: Q_i(l) ∝ exp(-psi_u(l) - sum_{j != i} k_ij (1 - Q_j(l))).

Two execution paths share the contract. ``brute`` builds the dense N x N
kernel. ``fast`` never forms it: the spatial Gaussian factorizes over rows
and columns, and the bilateral term is evaluated exactly either by grouping
pixels of identical color (few colors) or as a sparse kernel truncated where
its value drops below 1e-12 of the peak.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .raster import LabelMap

TRUNCATION = 1e-12
MAX_COLOR_GROUPS = 32


@dataclass(frozen=True)
class CrfParams:
    w_appearance: float = 10.0
    theta_alpha: float = 60.0
    theta_beta: float = 13.0
    w_smoothness: float = 3.0
    theta_gamma: float = 3.0
    iterations: int = 10
    unary_confidence: float = 0.1

    def __post_init__(self):
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ValueError("kernel weights must be nonnegative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.unary_confidence < 1:
            raise ValueError("unary_confidence must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def unary_from_labels(warped: LabelMap, epsilon: float) -> np.ndarray:
    """(H, W, n_labels + 1) table of -log P with P(label) = 1 - eps, rest uniform."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    n = warped.n_labels + 1
    if n < 2:
        raise ValueError("need at least two labels")
    other = epsilon / (n - 1)
    probs = np.full(warped.labels.shape + (n,), other)
    np.put_along_axis(probs, warped.labels[..., None].astype(np.intp), 1.0 - epsilon, axis=2)
    return -np.log(probs)


def softmax_neg(energy: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``-energy`` along the last axis."""
    z = -energy - (-energy).max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _features(h: int, w: int, guide: np.ndarray):
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    col = guide.reshape(h * w, -1).astype(np.float64)
    return pos, col


def _brute_kernel(h, w, guide, params: CrfParams) -> np.ndarray:
    pos, col = _features(h, w, guide)
    dp = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    dc = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = params.w_appearance * np.exp(-dp / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
    k += params.w_smoothness * np.exp(-dp / (2 * params.theta_gamma ** 2))
    np.fill_diagonal(k, 0.0)
    return k


def _gauss_matrix(n: int, theta: float) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return np.exp(-(idx[:, None] - idx[None, :]) ** 2 / (2 * theta ** 2))


class _FastFilter:
    """Applies the full pairwise kernel (self excluded) without an N x N matrix."""

    def __init__(self, h, w, guide, params: CrfParams):
        self.h, self.w, self.p = h, w, params
        self.gy_s = _gauss_matrix(h, params.theta_gamma)
        self.gx_s = _gauss_matrix(w, params.theta_gamma)
        self.gy_a = _gauss_matrix(h, params.theta_alpha)
        self.gx_a = _gauss_matrix(w, params.theta_alpha)
        self.self_weight = params.w_appearance + params.w_smoothness
        pos, col = _features(h, w, guide)
        colors, inverse = np.unique(col, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        self.sparse = None
        if params.w_appearance == 0:
            self.groups = None
        elif len(colors) <= MAX_COLOR_GROUPS:
            # k_app(i, j) = w * c(col_i, col_j) * g(p_i, p_j); split by color
            dc = ((colors[:, None, :] - colors[None, :, :]) ** 2).sum(-1)
            self.color_factor = np.exp(-dc / (2 * params.theta_beta ** 2))
            self.groups = inverse
            self.n_colors = len(colors)
        else:
            self.groups = None
            scaled = np.concatenate([pos / params.theta_alpha, col / params.theta_beta], axis=1)
            radius = np.sqrt(-2.0 * np.log(TRUNCATION))
            tree = cKDTree(scaled)
            pairs = tree.query_pairs(radius, output_type="ndarray")
            d2 = ((scaled[pairs[:, 0]] - scaled[pairs[:, 1]]) ** 2).sum(1)
            vals = params.w_appearance * np.exp(-0.5 * d2)
            n = h * w
            self.sparse = sparse.coo_matrix(
                (np.concatenate([vals, vals]), (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                                                np.concatenate([pairs[:, 1], pairs[:, 0]]))),
                shape=(n, n)).tocsr()

    def _separable(self, x, gy, gx):
        # x: (H, W, L) -> sum_j gy[i_y, j_y] gx[i_x, j_x] x[j]
        return np.einsum("ab,bcl,dc->adl", gy, x, gx, optimize=True)

    def apply(self, x: np.ndarray) -> np.ndarray:
        p = self.p
        out = p.w_smoothness * self._separable(x, self.gy_s, self.gx_s)
        if self.groups is not None:
            flat_groups = self.groups.reshape(self.h, self.w)
            app = np.zeros_like(x)
            for g in range(self.n_colors):
                sel = (flat_groups == g)[..., None]
                filtered = self._separable(x * sel, self.gy_a, self.gx_a)
                app += self.color_factor[flat_groups, g][..., None] * filtered
            out += p.w_appearance * app
            out -= self.self_weight * x
        else:
            out -= p.w_smoothness * x
            if self.sparse is not None:
                flat = x.reshape(self.h * self.w, -1)
                out += (self.sparse @ flat).reshape(x.shape)
        return out


def mean_field(unary: np.ndarray, guide_image: np.ndarray, params: CrfParams = CrfParams(),
               method: str = "fast", callback=None) -> np.ndarray:
    """Exactly ``params.iterations`` Potts mean-field updates; returns (H, W, L) marginals.

    ``callback(iteration, Q)`` is invoked after every update, iteration 0 being
    the initialization ``softmax(-unary)``.
    """
    unary = np.asarray(unary, dtype=np.float64)
    guide = np.asarray(guide_image)
    if unary.ndim != 3 or guide.shape[:2] != unary.shape[:2]:
        raise ValueError("unary and guide image dimensions differ")
    if guide.ndim == 2:
        guide = guide[..., None]
    h, w, n_labels = unary.shape
    q = softmax_neg(unary)
    if callback is not None:
        callback(0, q)
    if params.w_appearance == 0 and params.w_smoothness == 0:
        for it in range(1, params.iterations + 1):
            if callback is not None:
                callback(it, q)
        return q
    if method == "brute":
        k = _brute_kernel(h, w, guide, params)
        apply = lambda x: (k @ x.reshape(h * w, n_labels)).reshape(h, w, n_labels)  # noqa: E731
    elif method == "fast":
        apply = _FastFilter(h, w, guide, params).apply
    else:
        raise ValueError(f"unknown method {method!r}")
    for it in range(1, params.iterations + 1):
        # Potts: sum_j k_ij (1 - Q_j(l)) = K 1 - K Q
        message = apply(1.0 - q)
        q = softmax_neg(unary + message)
        if callback is not None:
            callback(it, q)
    return q


def map_labels(marginals: np.ndarray, kind: str = "material_part") -> LabelMap:
    """Per-pixel argmax; ``np.argmax`` already breaks ties toward the lower index."""
    marginals = np.asarray(marginals)
    return LabelMap(np.argmax(marginals, axis=-1), marginals.shape[-1] - 1, kind)


def dump_marginals(path, marginals: np.ndarray) -> None:
    """Little-endian float32 dump: header (H, W, L) as int32, then row-major values."""
    h, w, n = marginals.shape
    with open(path, "wb") as f:
        f.write(np.array([h, w, n], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(marginals, dtype="<f4").tobytes())


def load_marginals(path) -> np.ndarray:
    with open(path, "rb") as f:
        h, w, n = np.frombuffer(f.read(12), dtype="<i4")
        return np.frombuffer(f.read(), dtype="<f4").reshape(h, w, n).copy()
