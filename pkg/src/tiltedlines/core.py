"""Discrete Gaussian bridge machinery for ordered line ensembles above a wall.

Everything here is exact for the node-discretized measure: bridges are
Gaussian random walks conditioned on their endpoint, areas are trapezoid
sums (exact on piecewise-linear paths), and the area-tilt mean shift is the
solution of the tridiagonal bridge-precision system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solveh_banded

__all__ = [
    "TimeGrid",
    "Ensemble",
    "TiltSchedule",
    "BoundaryCondition",
    "kernel_q",
    "sample_bridge",
    "sample_bridges",
    "bridge_from_innovations",
    "area",
    "tilt_shift",
    "curved_max",
    "min_gap",
    "modulus",
    "harmonic_u",
    "check_admissible",
    "event_threshold",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [left, right] into `steps` cells."""

    left: float
    right: float
    steps: int

    def __post_init__(self):
        if not self.right > self.left:
            raise ValueError(f"need right > left, got [{self.left}, {self.right}]")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.right - self.left) / self.steps

    @property
    def n_nodes(self) -> int:
        return self.steps + 1

    @property
    def node_times(self) -> np.ndarray:
        return np.linspace(self.left, self.right, self.steps + 1)

    def index_of(self, t: float) -> int:
        """Index of the node at time t; raises if t is not a node."""
        j = (t - self.left) / self.dt
        jr = round(j)
        if not (0 <= jr <= self.steps) or abs(j - jr) > 1e-9:
            raise ValueError(f"t={t} is not a node of {self}")
        return int(jr)

    def window_indices(self, gamma: float) -> tuple[int, int]:
        """Node index range [i0, i1] covering [-gamma, gamma] (inclusive)."""
        if gamma <= 0:
            raise ValueError("window half-width must be positive")
        lo = max(self.left, -gamma)
        hi = min(self.right, gamma)
        t = self.node_times
        idx = np.nonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))[0]
        if idx.size == 0:
            raise ValueError("window contains no grid nodes")
        return int(idx[0]), int(idx[-1])


def as_path(values, grid: TimeGrid) -> np.ndarray:
    """Validate and return a node-value vector for `grid`."""
    v = np.asarray(values, dtype=float)
    if v.shape != (grid.n_nodes,):
        raise ValueError(f"path has shape {v.shape}, grid wants ({grid.n_nodes},)")
    if not np.all(np.isfinite(v)):
        raise ValueError("path contains non-finite values")
    return v


@dataclass(frozen=True)
class TiltSchedule:
    """Per-line area-tilt strengths, geometric rho_i = a * lam**(i-1) or explicit."""

    kind: str  # "geometric" | "general"
    a: float = 0.0
    lam: float = 2.0
    rhos: Optional[tuple] = None  # per-line scalars or node-value arrays

    @classmethod
    def geometric(cls, a: float, lam: float) -> "TiltSchedule":
        if a < 0:
            raise ValueError("geometric tilt needs a >= 0")
        if a > 0 and not lam > 1:
            raise ValueError("geometric tilt needs lambda > 1")
        return cls(kind="geometric", a=a, lam=lam)

    @classmethod
    def general(cls, rhos: Sequence) -> "TiltSchedule":
        frozen = []
        for r in rhos:
            arr = np.asarray(r, dtype=float)
            if np.any(arr < 0):
                raise ValueError("tilt weights must be non-negative")
            frozen.append(float(arr) if arr.ndim == 0 else arr)
        return cls(kind="general", rhos=tuple(frozen))

    def rho(self, line: int):
        """Tilt for 1-based line index (line 1 = top)."""
        if line < 1:
            raise ValueError("line index is 1-based")
        if self.kind == "geometric":
            return self.a * self.lam ** (line - 1)
        if self.rhos is None or line > len(self.rhos):
            raise ValueError(f"no tilt defined for line {line}")
        return self.rhos[line - 1]

    def rho_nodes(self, line: int, grid: TimeGrid) -> np.ndarray:
        r = self.rho(line)
        if np.ndim(r) == 0:
            return np.full(grid.n_nodes, float(r))
        return as_path(r, grid)


@dataclass(frozen=True)
class BoundaryCondition:
    """Fixed endpoint vectors, all-zero endpoints, or free endpoints."""

    kind: str  # "fixed" | "zero" | "free"
    x_left: Optional[np.ndarray] = None
    x_right: Optional[np.ndarray] = None
    nu: Optional[Callable[[int, float], float]] = None
    eta: Optional[Callable[[int, float], float]] = None

    @classmethod
    def fixed(cls, x_left, x_right) -> "BoundaryCondition":
        xl = np.asarray(x_left, dtype=float)
        xr = np.asarray(x_right, dtype=float)
        for v in (xl, xr):
            if v.ndim != 1 or v.size == 0:
                raise ValueError("endpoint vectors must be non-empty 1-d")
            if np.any(np.diff(v) >= 0) or np.any(v < 0):
                raise ValueError("endpoint vector must be strictly decreasing and >= 0")
        if xl.size != xr.size:
            raise ValueError("endpoint vectors differ in length")
        return cls(kind="fixed", x_left=xl, x_right=xr)

    @classmethod
    def zero(cls) -> "BoundaryCondition":
        return cls(kind="zero")

    @classmethod
    def free(cls, nu=None, eta=None) -> "BoundaryCondition":
        return cls(kind="free", nu=nu, eta=eta)


@dataclass
class Ensemble:
    """Ordered stack of lines on a common grid, with optional floor/ceiling.

    lines[0] is the top line (line 1 in 1-based language).  floor=None means
    the hard wall at 0; ceiling=None means +infinity.
    """

    grid: TimeGrid
    lines: np.ndarray  # shape (n, n_nodes)
    floor: Optional[np.ndarray] = None
    ceiling: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lines = np.atleast_2d(np.asarray(self.lines, dtype=float))
        if self.lines.shape[1] != self.grid.n_nodes:
            raise ValueError("line length does not match grid")
        if self.floor is not None:
            self.floor = as_path(self.floor, self.grid)
        if self.ceiling is not None:
            self.ceiling = as_path(self.ceiling, self.grid)

    @property
    def n(self) -> int:
        return self.lines.shape[0]

    def floor_values(self) -> np.ndarray:
        if self.floor is None:
            return np.zeros(self.grid.n_nodes)
        return self.floor

    def ceiling_values(self) -> np.ndarray:
        if self.ceiling is None:
            return np.full(self.grid.n_nodes, np.inf)
        return self.ceiling

    def copy(self) -> "Ensemble":
        return Ensemble(
            grid=self.grid,
            lines=self.lines.copy(),
            floor=None if self.floor is None else self.floor.copy(),
            ceiling=None if self.ceiling is None else self.ceiling.copy(),
        )


# ---------------------------------------------------------------------------
# kernels and bridges

def kernel_q(t: float, x: float, y: float) -> float:
    """Gaussian transition weight (2*pi*t)^(-1/2) exp(-(y-x)^2 / (2t))."""
    if t <= 0:
        raise ValueError(f"duration must be positive, got {t}")
    return math.exp(-((y - x) ** 2) / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)


def bridge_from_innovations(grid: TimeGrid, x: float, y: float, z: np.ndarray) -> np.ndarray:
    """Map iid standard normals z (length steps) to a bridge from x to y.

    A Gaussian walk with increments sqrt(dt)*z, pinned at the far end by
    subtracting the linear ramp of its terminal value, is an exact sample of
    the discrete Gaussian bridge.
    """
    m = grid.steps
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != m:
        raise ValueError(f"need {m} innovations, got {z.shape[-1]}")
    w = np.cumsum(z, axis=-1) * math.sqrt(grid.dt)
    frac = np.arange(1, m + 1) / m
    out = np.empty(z.shape[:-1] + (m + 1,))
    out[..., 0] = x
    out[..., 1:] = x + frac * (y - x) + w - frac * w[..., -1:]
    return out


def sample_bridge(grid: TimeGrid, x: float, y: float, rng: np.random.Generator) -> np.ndarray:
    """Exact sample of the discrete Gaussian bridge pinned at (left,x), (right,y)."""
    return bridge_from_innovations(grid, x, y, rng.standard_normal(grid.steps))


def sample_bridges(grid: TimeGrid, x: float, y: float, size: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Vectorized batch of `size` independent bridge samples, shape (size, m+1)."""
    return bridge_from_innovations(grid, x, y, rng.standard_normal((size, grid.steps)))


# ---------------------------------------------------------------------------
# functionals

def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_nodes, grid.dt)
    w[0] = w[-1] = grid.dt / 2.0
    return w


def area(path, grid: TimeGrid, weight=None) -> float:
    """Trapezoid-rule integral of weight(t) * X(t) over the grid."""
    p = as_path(path, grid)
    w = trapezoid_weights(grid)
    if weight is not None:
        w = w * as_path(weight, grid)
    return float(np.dot(w, p))


def tilt_shift(grid: TimeGrid, rho) -> np.ndarray:
    """Mean shift of the zero-pinned discrete bridge tilted by exp(-rho*area).

    Solves the tridiagonal precision system Q m = -rho_w with
    Q = (1/dt) tridiag(-1, 2, -1) on interior nodes and trapezoid node
    weights on the right-hand side; endpoints stay at zero.  For constant
    rho this reproduces the parabola -rho (t-l)(r-t)/2 exactly at the nodes.
    """
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr < 0):
        raise ValueError("tilt strength must be non-negative")
    m = grid.steps
    if m < 2:
        return np.zeros(m + 1)
    if rho_arr.ndim == 0:
        rho_nodes = np.full(m + 1, float(rho_arr))
    else:
        rho_nodes = as_path(rho_arr, grid)
    dt = grid.dt
    rhs = -rho_nodes[1:-1] * dt
    # symmetric banded form of (1/dt) tridiag(-1, 2, -1)
    ab = np.zeros((2, m - 1))
    ab[0, 1:] = -1.0 / dt
    ab[1, :] = 2.0 / dt
    interior = solveh_banded(ab, rhs)
    out = np.zeros(m + 1)
    out[1:-1] = interior
    return out


def curved_max(path, grid: TimeGrid, alpha: float) -> float:
    """Minimal lift of |t|^alpha needed to dominate the path over the grid."""
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")
    p = as_path(path, grid)
    if grid.left <= 0.0 <= grid.right:
        # t = 0 must be a node, otherwise the curve's minimum is missed
        grid.index_of(0.0)
    lift = p - np.abs(grid.node_times) ** alpha
    return float(max(np.max(lift), 0.0))


def min_gap(ensemble: Ensemble, gamma: float) -> float:
    """Minimal adjacent-line gap over the window [-gamma, gamma]."""
    if ensemble.n < 2:
        raise ValueError("min_gap needs at least two lines")
    i0, i1 = ensemble.grid.window_indices(gamma)
    block = ensemble.lines[:, i0:i1 + 1]
    gaps = np.abs(block[:-1] - block[1:])
    return float(np.min(gaps))


def modulus(ensemble: Ensemble, gamma: float, delta: float, k: Optional[int] = None) -> float:
    """Max |X_i(s) - X_i(t)| over lines i <= k and window node pairs with |s-t| < delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    i0, i1 = ensemble.grid.window_indices(gamma)
    k = ensemble.n if k is None else min(k, ensemble.n)
    block = ensemble.lines[:k, i0:i1 + 1]
    dt = ensemble.grid.dt
    max_lag = min(block.shape[1] - 1, int(math.ceil(delta / dt)) - 1)
    # |s-t| < delta strictly; lag*dt must stay below delta
    while max_lag >= 1 and max_lag * dt >= delta - 1e-15:
        max_lag -= 1
    best = 0.0
    for lag in range(1, max_lag + 1):
        d = np.abs(block[:, lag:] - block[:, :-lag])
        if d.size:
            best = max(best, float(np.max(d)))
    return best


def harmonic_u(x) -> float:
    """prod x_j * prod_{i<j} (x_i^2 - x_j^2) on strictly ordered positive vectors."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("need a non-empty vector")
    if np.any(v <= 0) or np.any(np.diff(v) >= 0):
        raise ValueError("need x_1 > ... > x_k > 0")
    sq = v ** 2
    out = float(np.prod(v))
    for i in range(v.size):
        for j in range(i + 1, v.size):
            out *= sq[i] - sq[j]
    return out


def check_admissible(ensemble: Ensemble, strict_endpoints: bool = False) -> bool:
    """Ordering/floor/ceiling check: strict between lines at interior nodes,
    weak at endpoints unless strict_endpoints is set."""
    lines = ensemble.lines
    floor = ensemble.floor_values()
    ceil = ensemble.ceiling_values()
    if np.any(floor < 0):
        return False

    def ok(strict_lines: bool, sl) -> bool:
        a = lines[:, sl]
        if strict_lines and np.any(a[:-1] <= a[1:]):
            return False
        if not strict_lines and np.any(a[:-1] < a[1:]):
            return False
        return bool(np.all(a[-1] >= floor[sl]) and np.all(a[0] <= ceil[sl]))

    if lines.shape[1] > 2 and not ok(True, slice(1, lines.shape[1] - 1)):
        return False
    return ok(strict_endpoints, [0, lines.shape[1] - 1])


def event_threshold(i: int, m_level: float, lam: float) -> float:
    """Excursion threshold lam**(-(i-1)/3) * M for line i (1-based)."""
    if i < 1:
        raise ValueError("line index is 1-based")
    return lam ** (-(i - 1) / 3.0) * m_level
