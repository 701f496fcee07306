"""
Grid MDP environments with time-variant safety.

Deterministic four-neighbour dynamics plus stay, noisy observations of the
safety function, a random GP-sampled generator and grayscale terrain stacks.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd
from PIL import Image
from scipy.spatial.distance import cdist

from stgp import grid_coordinates

logger = logging.getLogger(__name__)

# Lunar scenario normalization range
TERRAIN_MAX = 1.5
TERRAIN_MIN = -0.5


class InvalidActionError(ValueError):
    """Raised when an action would leave the grid."""


class EnvFormatError(ValueError):
    """Raised for unreadable or inconsistent terrain input."""


class DegenerateNormalizationError(ValueError):
    """Raised when a terrain stack has a single pixel value."""


class EnvGenerationError(RuntimeError):
    """Raised when a random environment cannot be generated."""


class Action(Enum):
    """Grid moves as (row delta, col delta)."""
    STAY = (0, 0)
    UP = (-1, 0)
    DOWN = (1, 0)
    LEFT = (0, -1)
    RIGHT = (0, 1)


ACTIONS: Tuple[Action, ...] = tuple(Action)


@dataclass(frozen=True, eq=False)
class GridWorld:
    """
    Finite grid MDP with a dense time-indexed safety array.

    States are row-major indices; safety[t, s] is g(t, s). The safety array
    and the initial safe mask are read-only after construction.
    """
    rows: int
    cols: int
    safety: np.ndarray
    h: float
    initial_safe: np.ndarray
    noise_std: float = 0.001
    metadata: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        safety = np.array(self.safety, dtype=float)
        initial_safe = np.array(self.initial_safe, dtype=bool)
        if self.rows <= 0 or self.cols <= 0:
            raise EnvFormatError(f"Grid must be non-empty, got {self.rows}x{self.cols}")
        if safety.ndim != 2 or safety.shape[1] != self.rows * self.cols:
            raise EnvFormatError(f"Safety array of shape {safety.shape} does not match a {self.rows}x{self.cols} grid")
        if not np.all(np.isfinite(safety)):
            raise EnvFormatError("Safety values must be finite")
        if initial_safe.shape != (self.rows * self.cols,) or not initial_safe.any():
            raise EnvFormatError("Initial safe set must be a non-empty state mask")
        if np.any(safety[0, initial_safe] < self.h):
            raise EnvFormatError("Initial safe states must satisfy g[0][s] >= h")
        if self.noise_std < 0:
            raise EnvFormatError(f"noise_std must be non-negative, got {self.noise_std}")
        safety.setflags(write=False)
        initial_safe.setflags(write=False)
        object.__setattr__(self, 'safety', safety)
        object.__setattr__(self, 'initial_safe', initial_safe)

    @property
    def n_states(self) -> int:
        return self.rows * self.cols

    @property
    def horizon(self) -> int:
        return self.safety.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return grid_coordinates(self.rows, self.cols)

    def state_of(self, row: int, col: int) -> int:
        return row * self.cols + col

    def row_col(self, s: int) -> Tuple[int, int]:
        return divmod(int(s), self.cols)

    def _check_state(self, s: int) -> None:
        if not 0 <= s < self.n_states:
            raise InvalidActionError(f"State {s} is outside the {self.rows}x{self.cols} grid")

    def available_actions(self, s: int) -> List[Action]:
        """Stay plus every move whose target stays on the grid."""
        self._check_state(s)
        row, col = self.row_col(s)
        return [a for a in ACTIONS
                if 0 <= row + a.value[0] < self.rows and 0 <= col + a.value[1] < self.cols]

    def transition(self, s: int, a: Action) -> int:
        """Deterministic successor of s under a."""
        self._check_state(s)
        row, col = self.row_col(s)
        nrow, ncol = row + a.value[0], col + a.value[1]
        if not (0 <= nrow < self.rows and 0 <= ncol < self.cols):
            raise InvalidActionError(f"Action {a.name} leaves the grid from ({row}, {col})")
        return self.state_of(nrow, ncol)

    def successors(self, s: int) -> List[int]:
        return [self.transition(s, a) for a in self.available_actions(s)]

    def observe(self, t: int, s: int, rng: np.random.Generator) -> float:
        """Noisy measurement y = g(t, s) + eps."""
        if not 0 <= t < self.horizon:
            raise ValueError(f"Time {t} outside horizon {self.horizon}")
        value = float(self.safety[t, s])
        if self.noise_std == 0:
            return value
        return value + float(rng.normal(0.0, self.noise_std))

    def is_safe(self, t: int, s: int) -> bool:
        return bool(self.safety[t, s] >= self.h)

    def true_safe_set(self, t: int) -> np.ndarray:
        return self.safety[t] >= self.h

    def lipschitz_constants(self) -> Tuple[float, float]:
        """
        Smallest constants (per cell, per step) the true safety satisfies.

        Over the Manhattan metric the spatial constant is the largest change
        between 4-neighbors; the temporal one compares consecutive slices.
        """
        grid = self.safety.reshape(self.horizon, self.rows, self.cols)
        spatial = [0.0]
        for axis in (1, 2):
            if grid.shape[axis] > 1:
                spatial.append(float(np.abs(np.diff(grid, axis=axis)).max()))
        temporal = float(np.abs(np.diff(self.safety, axis=0)).max()) if self.horizon > 1 else 0.0
        return max(spatial), temporal

    def to_frame(self) -> pd.DataFrame:
        """Long format table with columns t, row, col, g."""
        horizon, n = self.safety.shape
        rows, cols = np.divmod(np.arange(n), self.cols)
        return pd.DataFrame({
            't': np.repeat(np.arange(horizon), n),
            'row': np.tile(rows, horizon),
            'col': np.tile(cols, horizon),
            'g': self.safety.ravel(),
        })

    def describe(self) -> Dict[str, Union[int, float, List[int]]]:
        lipschitz_space, lipschitz_time = self.lipschitz_constants()
        return {
            'rows': self.rows,
            'cols': self.cols,
            'horizon': self.horizon,
            'h': self.h,
            'noise_std': self.noise_std,
            'initial_safe': [int(s) for s in np.flatnonzero(self.initial_safe)],
            'g_min': float(self.safety.min()),
            'g_max': float(self.safety.max()),
            'lipschitz_space': lipschitz_space,
            'lipschitz_time': lipschitz_time,
        }


def transition(w: GridWorld, s: int, a: Action) -> int:
    return w.transition(s, a)


def available_actions(w: GridWorld, s: int) -> List[Action]:
    return w.available_actions(s)


def observe(w: GridWorld, t: int, s: int, rng: np.random.Generator) -> float:
    return w.observe(t, s, rng)


@dataclass(frozen=True)
class EnvGenSpec:
    """Parameters of the random environment generator."""
    seed: int
    rows: int = 20
    cols: int = 20
    horizon: int = 100
    lipschitz_time: float = 0.1
    variance: float = 1.0
    length_scale: float = 2.0
    h: float = 0.0
    safe_margin: float = 0.2
    noise_std: float = 0.001
    max_redraws: int = 100

    def validate(self) -> None:
        if self.rows <= 0 or self.cols <= 0 or self.horizon <= 0:
            raise ValueError("Grid size and horizon must be positive")
        if self.variance <= 0 or self.length_scale <= 0:
            raise ValueError("Generator kernel parameters must be positive")
        if self.lipschitz_time < 0 or self.noise_std < 0 or self.safe_margin < 0:
            raise ValueError("lipschitz_time, noise_std and safe_margin must be non-negative")


def _pick_initial_safe(slice0: np.ndarray, threshold: float) -> Optional[np.ndarray]:
    best = int(np.argmax(slice0))
    if slice0[best] < threshold:
        return None
    mask = np.zeros(slice0.shape[0], dtype=bool)
    mask[best] = True
    return mask


def _sample_field(cov_factor: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return cov_factor @ rng.standard_normal(cov_factor.shape[0])


def generate_random_env(spec: EnvGenSpec) -> GridWorld:
    """
    Sample a random time-variant environment.

    Slice 0 is a zero-mean GP draw with an RBF covariance over grid
    coordinates; each later slice adds L_t * phi_t * g[0] with one
    phi_t ~ U[-1, 1] per step. S_0 is the argmax state of slice 0, which must
    clear h by the safe margin (otherwise the field is redrawn).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    coords = grid_coordinates(spec.rows, spec.cols)
    cov = spec.variance * np.exp(-cdist(coords, coords, 'sqeuclidean') / (2.0 * spec.length_scale ** 2))
    n = cov.shape[0]
    factor = None
    for jitter in (1e-9, 1e-6):
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            logger.warning(f"Generator covariance not positive definite at jitter {jitter:g}")
    if factor is None:
        raise EnvGenerationError("Cholesky of the generator covariance failed")

    for attempt in range(spec.max_redraws):
        g0 = _sample_field(factor, rng)
        initial_safe = _pick_initial_safe(g0, spec.h + spec.safe_margin)
        if initial_safe is not None:
            break
        logger.debug(f"Redrawing environment (attempt {attempt + 1}): no state clears the safe margin")
    else:
        raise EnvGenerationError(f"No initial safe state after {spec.max_redraws} draws")

    phi = rng.uniform(-1.0, 1.0, size=max(spec.horizon - 1, 0))
    safety = np.empty((spec.horizon, n))
    safety[0] = g0
    for t in range(spec.horizon - 1):
        safety[t + 1] = safety[t] + spec.lipschitz_time * phi[t] * g0

    logger.debug(f"Generated {spec.rows}x{spec.cols} environment, horizon {spec.horizon}, seed {spec.seed}")
    return GridWorld(spec.rows, spec.cols, safety, spec.h, initial_safe, spec.noise_std)


def read_frame(path: Union[str, Path]) -> np.ndarray:
    """Read one grayscale frame from a PGM image or a CSV matrix."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == '.pgm':
            with Image.open(path) as image:
                frame = np.asarray(image, dtype=float)
        elif suffix == '.csv':
            frame = pd.read_csv(path, header=None).to_numpy(dtype=float)
        else:
            raise EnvFormatError(f"Unsupported terrain frame format: {path}")
    except EnvFormatError:
        raise
    except Exception as e:
        raise EnvFormatError(f"Failed to read terrain frame {path}: {e}") from e
    if frame.ndim != 2:
        raise EnvFormatError(f"Terrain frame {path} is not a single-channel image (shape {frame.shape})")
    if not np.all(np.isfinite(frame)):
        raise EnvFormatError(f"Terrain frame {path} contains non-finite values")
    return frame


def resize_frame(frame: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Area-resample a frame to rows x cols."""
    if frame.shape == (rows, cols):
        return frame
    return cv2.resize(frame.astype(np.float64), (cols, rows), interpolation=cv2.INTER_AREA)


def _frame_nodes(n_frames: int, steps: int) -> np.ndarray:
    """Slice index at which each frame sits, evenly spread over [0, steps-1]."""
    return np.rint(np.linspace(0, steps - 1, n_frames)).astype(int)


def load_terrain_env(frames: Sequence[np.ndarray], steps: int, h: float,
                     noise_std: float = 0.001, names: Optional[Sequence[str]] = None) -> GridWorld:
    """
    Build a time-variant world from a grayscale stack.

    Pixel values are rescaled so the stack spans [-0.5, 1.5]; `steps` slices
    are produced by per-pixel linear interpolation between consecutive
    frames, each frame sitting exactly on an evenly spread slice index.

    A positive affine map of the pixels gives a bitwise identical world when
    the mapped pixels are exact in float64 (integer coefficients on integer
    pixels). Other maps round the inputs and agree to a few ulps.

    Args:
        frames: Ordered grayscale grids with identical dimensions
        steps: Number of time slices (>= number of frames)
        h: Safety threshold
        noise_std: Observation noise of the resulting world
        names: Optional frame names for error messages
    """
    names = list(names) if names is not None else [f"frame {i}" for i in range(len(frames))]
    if len(frames) < 2:
        raise EnvFormatError(f"Need at least two terrain frames, got {len(frames)}")
    if steps < len(frames):
        raise EnvFormatError(f"steps ({steps}) must be at least the number of frames ({len(frames)})")
    shape = np.shape(frames[0])
    for frame, name in zip(frames, names):
        if np.shape(frame) != shape or len(shape) != 2:
            raise EnvFormatError(f"{name} has shape {np.shape(frame)}, expected {shape}")
    stack = np.stack([np.asarray(f, dtype=float) for f in frames])
    lo, hi = float(stack.min()), float(stack.max())
    if hi == lo:
        raise DegenerateNormalizationError(f"Terrain stack is constant ({lo}); cannot normalize")
    span = TERRAIN_MAX - TERRAIN_MIN
    scaled = (stack - lo) / (hi - lo) * span + TERRAIN_MIN

    nodes = _frame_nodes(len(frames), steps)
    rows, cols = shape
    safety = np.empty((steps, rows * cols))
    for k in range(len(frames) - 1):
        start, end = nodes[k], nodes[k + 1]
        a, b = scaled[k].ravel(), scaled[k + 1].ravel()
        for j in range(start, end + 1):
            w = (j - start) / (end - start)
            safety[j] = (1.0 - w) * a + w * b

    initial_safe = _pick_initial_safe(safety[0], h)
    if initial_safe is None:
        raise EnvFormatError(f"No state of the first terrain slice reaches h={h}")
    world = GridWorld(rows, cols, safety, h, initial_safe, noise_std,
                      metadata={'pixel_min': lo, 'pixel_max': hi})
    logger.info(f"Built terrain world {rows}x{cols} with {steps} slices from {len(frames)} frames")
    return world


def load_terrain_files(paths: Sequence[Union[str, Path]], steps: int, h: float,
                       noise_std: float = 0.001, grid: Optional[Tuple[int, int]] = None) -> GridWorld:
    frames = [read_frame(p) for p in paths]
    if grid is not None:
        frames = [resize_frame(f, grid[0], grid[1]) for f in frames]
    return load_terrain_env(frames, steps, h, noise_std, names=[str(p) for p in paths])


def world_from_frame(table: pd.DataFrame, h: float, initial_safe: Sequence[int],
                     noise_std: float = 0.001) -> GridWorld:
    """Rebuild a world from the long-format table written by GridWorld.to_frame."""
    missing = {'t', 'row', 'col', 'g'} - set(table.columns)
    if missing:
        raise EnvFormatError(f"Environment table lacks columns {sorted(missing)}")
    rows = int(table['row'].max()) + 1
    cols = int(table['col'].max()) + 1
    horizon = int(table['t'].max()) + 1
    if len(table) != rows * cols * horizon:
        raise EnvFormatError(f"Environment table has {len(table)} rows, expected {rows * cols * horizon}")
    safety = np.full((horizon, rows * cols), np.nan)
    safety[table['t'].to_numpy(int), (table['row'] * cols + table['col']).to_numpy(int)] = table['g'].to_numpy(float)
    mask = np.zeros(rows * cols, dtype=bool)
    mask[list(initial_safe)] = True
    return GridWorld(rows, cols, safety, h, mask, noise_std)
