"""Material/substance multitask losses with analytic gradients.

Fixed weighting::  L = L_mat + lam * L_sub
Learned log-variances::  L = L_mat exp(-s_m) + s_m + L_sub exp(-s_s) + s_s
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DEFAULT_S_MATERIAL = 0.0
DEFAULT_S_SUBSTANCE = -1.0


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.exp(x - m).sum()))


def cross_entropy(logits, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient ``softmax(logits) - onehot(target)``."""
    x = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < len(x):
        raise ValueError("target out of range")
    lse = logsumexp(x)
    loss = lse - x[target]
    grad = np.exp(x - lse)
    grad[target] -= 1.0
    return float(loss), grad


@dataclass(frozen=True, eq=False)
class MultitaskLossState:
    material_logits: np.ndarray
    substance_logits: np.ndarray
    material_target: int
    substance_target: int
    s_m: float = DEFAULT_S_MATERIAL
    s_s: float = DEFAULT_S_SUBSTANCE
    lam: float = 1.0

    def __post_init__(self):
        if not 0 <= self.material_target < len(self.material_logits):
            raise ValueError("material target out of range")
        if not 0 <= self.substance_target < len(self.substance_logits):
            raise ValueError("substance target out of range")
        if not (np.isfinite(self.s_m) and np.isfinite(self.s_s)):
            raise ValueError("log variances must be finite")

    def with_(self, **kw) -> "MultitaskLossState":
        return replace(self, **kw)


def multitask_loss_fixed(state: MultitaskLossState) -> float:
    l_mat, _ = cross_entropy(state.material_logits, state.material_target)
    l_sub, _ = cross_entropy(state.substance_logits, state.substance_target)
    return l_mat + state.lam * l_sub


def multitask_loss_uncertainty(state: MultitaskLossState) -> tuple[float, dict]:
    """Loss and gradients keyed ``material_logits``, ``substance_logits``, ``s_m``, ``s_s``."""
    l_mat, g_mat = cross_entropy(state.material_logits, state.material_target)
    l_sub, g_sub = cross_entropy(state.substance_logits, state.substance_target)
    w_m = np.exp(-state.s_m)
    w_s = np.exp(-state.s_s)
    loss = l_mat * w_m + state.s_m + l_sub * w_s + state.s_s
    grads = {
        "material_logits": g_mat * w_m,
        "substance_logits": g_sub * w_s,
        "s_m": float(1.0 - l_mat * w_m),
        "s_s": float(1.0 - l_sub * w_s),
    }
    return float(loss), grads


def stationary_log_variance(task_loss: float) -> float:
    """Closed-form minimizer of L exp(-s) + s over s, for L > 0."""
    if not task_loss > 0:
        raise ValueError("task loss must be positive")
    return float(np.log(task_loss))


# --- finite-difference checking --------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over one gradient block."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _central(f, x: np.ndarray, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def fd_check_state(state: MultitaskLossState, h: float = 1e-5) -> dict:
    """Relative errors of every analytic gradient block against central differences."""
    ce_m = _central(lambda x: cross_entropy(x, state.material_target)[0], state.material_logits, h)
    ce_s = _central(lambda x: cross_entropy(x, state.substance_target)[0], state.substance_logits, h)
    _, g = multitask_loss_uncertainty(state)

    def loss_of(**kw):
        return multitask_loss_uncertainty(state.with_(**kw))[0]

    num = {
        "material_logits": _central(lambda x: loss_of(material_logits=x), state.material_logits, h),
        "substance_logits": _central(lambda x: loss_of(substance_logits=x), state.substance_logits, h),
        "s_m": _central(lambda x: loss_of(s_m=float(x[0])), np.array([state.s_m]), h),
        "s_s": _central(lambda x: loss_of(s_s=float(x[0])), np.array([state.s_s]), h),
    }
    return {
        "ce_material": relative_error(cross_entropy(state.material_logits, state.material_target)[1], ce_m),
        "ce_substance": relative_error(cross_entropy(state.substance_logits, state.substance_target)[1], ce_s),
        **{f"uncertainty_{k}": relative_error(g[k], num[k]) for k in num},
    }


def random_state(rng: np.random.Generator, n_materials: int = 20, n_substances: int = 5) -> MultitaskLossState:
    return MultitaskLossState(
        material_logits=rng.normal(0, 3, n_materials),
        substance_logits=rng.normal(0, 3, n_substances),
        material_target=int(rng.integers(n_materials)),
        substance_target=int(rng.integers(n_substances)),
        s_m=float(rng.uniform(-2, 2)),
        s_s=float(rng.uniform(-2, 2)),
        lam=float(rng.uniform(0, 2)),
    )


def fd_suite(n_states: int = 1000, seed: int = 0, h: float = 1e-5) -> dict:
    """Worst relative error per gradient block over ``n_states`` random states."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_states):
        for k, v in fd_check_state(random_state(rng), h).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
