"""
Lipschitz-based safe sets over a grid.

Sets are boolean masks over row-major state indices. Every operation is a
pure function of its inputs.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List

import numpy as np
from scipy.spatial.distance import cdist

from env import ACTIONS, GridWorld
from stgp import BoundsTable, grid_coordinates

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LipschitzParams:
    """Lipschitz constants in safety units per cell (l_s) and per step (l_t)."""
    l_s: float
    l_t: float

    def __post_init__(self):
        for name in ('l_s', 'l_t'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True, eq=False)
class SafeSets:
    """Snapshot of the sets computed at one step."""
    t: int
    S: np.ndarray
    S_hat: np.ndarray
    G_next: np.ndarray
    expanders: np.ndarray
    candidates: np.ndarray

    def as_dict(self):
        return {
            'S': self.S,
            'S_hat': self.S_hat,
            'G_next': self.G_next,
            'expanders': self.expanders,
            'candidates': self.candidates,
        }


# Source states per distance block; bounds memory at n_states x CHUNK floats.
CHUNK = 1024


@lru_cache(maxsize=16)
def _grid_coords(rows: int, cols: int) -> np.ndarray:
    coords = grid_coordinates(rows, cols)
    coords.setflags(write=False)
    return coords


def manhattan_distances(w: GridWorld, targets: np.ndarray) -> np.ndarray:
    """Manhattan distances (in cells) from every state to the listed target states."""
    coords = _grid_coords(w.rows, w.cols)
    return cdist(coords, coords[np.asarray(targets, dtype=int)], 'cityblock')


def lipschitz_metric(a: int, b: int, t1: int, t2: int, p: LipschitzParams, cols: int) -> float:
    """L(a, b, t1, t2) = l_s * manhattan(a, b) + l_t * |t1 - t2|."""
    ra, ca = divmod(a, cols)
    rb, cb = divmod(b, cols)
    d_s = float(abs(ra - rb) + abs(ca - cb))
    d_t = float(abs(t1 - t2))
    return p.l_s * d_s + p.l_t * d_t


def empty_set(w: GridWorld) -> np.ndarray:
    return np.zeros(w.n_states, dtype=bool)


def _propagate(source: np.ndarray, lower: np.ndarray, dt: int, p: LipschitzParams,
               h: float, w: GridWorld, own_bound: bool = False) -> np.ndarray:
    """
    States s with some s' in source such that lower[s'] - L(s, s', dt) >= h.

    With own_bound, s must also clear h from its own lower bound,
    lower[s] - l_t * |dt| >= h.
    """
    out = empty_set(w)
    idx = np.flatnonzero(source)
    for start in range(0, len(idx), CHUNK):
        block = idx[start:start + CHUNK]
        dist = manhattan_distances(w, block)
        margin = lower[block][None, :] - (p.l_s * dist + p.l_t * float(abs(dt)))
        out |= np.any(margin >= h, axis=1)
    if own_bound:
        out &= lower - p.l_t * float(abs(dt)) >= h
    return out


def compute_S(prev_S_hat: np.ndarray, bounds: BoundsTable, t: int, p: LipschitzParams,
              h: float, w: GridWorld, own_bound: bool = False) -> np.ndarray:
    """S_t from S_hat_{t-1} and the lower bounds at t-1."""
    return _propagate(prev_S_hat, bounds.lower(t - 1), 1, p, h, w, own_bound)


def compute_G(from_t: int, to_t: int, S_hat_from: np.ndarray, bounds: BoundsTable,
              p: LipschitzParams, h: float, w: GridWorld, own_bound: bool = False) -> np.ndarray:
    """Conservative set G_{from_t}^{to_t}: states certified at to_t from bounds at from_t."""
    if to_t <= from_t:
        raise ValueError(f"G needs to_t > from_t, got {from_t} -> {to_t}")
    return _propagate(S_hat_from, bounds.lower(from_t), to_t - from_t, p, h, w, own_bound)


def _shift(grid: np.ndarray, drow: int, dcol: int) -> np.ndarray:
    """out[r, c] = grid[r + drow, c + dcol], False where that falls off the grid."""
    rows, cols = grid.shape
    out = np.zeros_like(grid)
    r0, r1 = max(0, -drow), min(rows, rows - drow)
    c0, c1 = max(0, -dcol), min(cols, cols - dcol)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = grid[r0 + drow:r1 + drow, c0 + dcol:c1 + dcol]
    return out


def reach_set(X: np.ndarray, w: GridWorld) -> np.ndarray:
    """X plus every state reachable from X with one available action."""
    grid = X.reshape(w.rows, w.cols)
    out = grid.copy()
    for action in ACTIONS:
        drow, dcol = action.value
        out |= _shift(grid, -drow, -dcol)
    return out.ravel()


def _one_step_preimage(X: np.ndarray, w: GridWorld) -> np.ndarray:
    grid = X.reshape(w.rows, w.cols)
    out = np.zeros_like(grid)
    for action in ACTIONS:
        drow, dcol = action.value
        out |= _shift(grid, drow, dcol)
    return out.ravel()


def ret_set(X: np.ndarray, w: GridWorld) -> np.ndarray:
    """X plus every state with an action leading into X."""
    return X | _one_step_preimage(X, w)


def ret_bar_set(X: np.ndarray, X_bar: np.ndarray, w: GridWorld) -> np.ndarray:
    """States that reach X_bar through an arbitrarily long path inside X."""
    current = X_bar.copy()
    while True:
        grown = current | (X & _one_step_preimage(current, w))
        if np.array_equal(grown, current):
            return current
        current = grown


def compute_S_hat(S: np.ndarray, prev_S_hat: np.ndarray, G_fwd: np.ndarray, w: GridWorld) -> np.ndarray:
    """S_hat_t = S_t & reach(S_hat_{t-1}) & ret(G_{t-1}^{t+1})."""
    return S & reach_set(prev_S_hat, w) & ret_set(G_fwd, w)


def expander_counts(S: np.ndarray, upper: np.ndarray, dt: int, p: LipschitzParams,
                    h: float, w: GridWorld) -> np.ndarray:
    """
    xi(s): number of states outside S that an optimistic value at s would certify.

    Args:
        S: Currently certified states
        upper: Upper bounds per state
        dt: Time gap used in the Lipschitz metric
        p: Lipschitz constants
        h: Safety threshold
        w: Grid world
    """
    counts = np.zeros(w.n_states, dtype=int)
    idx = np.flatnonzero(~S)
    for start in range(0, len(idx), CHUNK):
        dist = manhattan_distances(w, idx[start:start + CHUNK])
        margin = upper[:, None] - (p.l_s * dist + p.l_t * float(abs(dt)))
        counts += np.sum(margin >= h, axis=1)
    return counts


def compute_expanders(S_hat: np.ndarray, S: np.ndarray, bounds: BoundsTable, t: int,
                      p: LipschitzParams, h: float, w: GridWorld, horizon: int = 2) -> np.ndarray:
    """Expanders: states of S_hat_t with xi_t > 0, using u at t and L(., ., t, t + horizon)."""
    xi = expander_counts(S, bounds.upper(t), horizon, p, h, w)
    return S_hat & (xi > 0)


def compute_candidates(prev_state: int, w: GridWorld) -> np.ndarray:
    """Images of all available actions from prev_state (stay included)."""
    mask = empty_set(w)
    mask[w.successors(prev_state)] = True
    return mask


def lower_bound_terms(S_hat_t: np.ndarray, bounds: BoundsTable, t: int, N: int,
                      p: LipschitzParams, h: float, w: GridWorld, own_bound: bool = False) -> List[int]:
    """[M_{t+1}, ..., M_N] with M_i = |S_hat_t & G_t^{i+1}|."""
    if t >= N:
        raise ValueError(f"lower_bound_terms needs t < N, got t={t}, N={N}")
    return [int(np.sum(S_hat_t & compute_G(t, i + 1, S_hat_t, bounds, p, h, w, own_bound)))
            for i in range(t + 1, N + 1)]


def compute_S_time_invariant(prev_S_hat: np.ndarray, lower: np.ndarray, p: LipschitzParams,
                             h: float, w: GridWorld, own_bound: bool = False) -> np.ndarray:
    """Time-invariant S: spatial Lipschitz spread only."""
    return _propagate(prev_S_hat, lower, 0, LipschitzParams(p.l_s, 0.0), h, w, own_bound)


def compute_S_hat_time_invariant(S: np.ndarray, prev_S_hat: np.ndarray, w: GridWorld) -> np.ndarray:
    """Time-invariant S_hat: reachable from S_hat_{t-1} and able to return to it through S."""
    return S & reach_set(prev_S_hat, w) & ret_bar_set(S, prev_S_hat, w)


def compute_expanders_time_invariant(S_hat: np.ndarray, S: np.ndarray, upper: np.ndarray,
                                     p: LipschitzParams, h: float, w: GridWorld) -> np.ndarray:
    xi = expander_counts(S, upper, 0, LipschitzParams(p.l_s, 0.0), h, w)
    return S_hat & (xi > 0)
