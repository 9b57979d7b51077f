"""Reference computations on small instances.

Closed-form reflection and determinant probabilities for untilted bridges,
plus dense transfer-operator passes that are exact (up to quadrature) for
the node-discretized tilted measure the sampler targets.  Everything here is
independent of the MCMC code paths it is used to check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    BoundaryCondition,
    TimeGrid,
    TiltSchedule,
    harmonic_u,
    kernel_q,
    sample_bridges,
    trapezoid_weights,
)

__all__ = [
    "SpaceGrid",
    "MarginalTable",
    "CostGuardError",
    "reflection_positive_prob",
    "km_prob",
    "km_wall_density",
    "brute_partition",
    "transfer_marginals",
    "harnack_ratio_check",
    "sample_positive_indicator",
    "sample_ordered_indicator",
]

# refuse dense transfer passes beyond this many state evaluations
DEFAULT_COST_LIMIT = 4.0e8


class CostGuardError(RuntimeError):
    """Raised when a requested oracle computation exceeds the cost guard."""


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform quadrature grid on [0, x_max] with trapezoid weights."""

    x_max: float
    points: int

    def __post_init__(self):
        if self.x_max <= 0 or self.points < 3:
            raise ValueError("need x_max > 0 and at least 3 points")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, self.x_max, self.points)

    @property
    def weights(self) -> np.ndarray:
        h = self.x_max / (self.points - 1)
        w = np.full(self.points, h)
        w[0] = w[-1] = h / 2.0
        return w

    @classmethod
    def auto(cls, m_scale: float, duration: float, points: int = 801) -> "SpaceGrid":
        """Default cutoff 8*(M + sqrt(duration)); adequacy is re-checked later."""
        return cls(x_max=8.0 * (m_scale + math.sqrt(duration)), points=points)


@dataclass
class MarginalTable:
    """One-point densities of each line at each integrated node."""

    grid: TimeGrid
    space: SpaceGrid
    densities: np.ndarray  # (n_lines, n_nodes, points); NaN rows at pinned nodes
    log_z: float

    def density(self, line: int, node: int) -> np.ndarray:
        return self.densities[line - 1, node]

    def cdf(self, line: int, node: int) -> np.ndarray:
        """CDF of the line at the node, at the space-grid points (left edges)."""
        d = self.densities[line - 1, node] * self.space.weights
        c = np.cumsum(d)
        return np.clip(c / c[-1], 0.0, 1.0)

    def mean(self, line: int, node: int) -> float:
        d = self.densities[line - 1, node]
        w = self.space.weights
        return float(np.sum(d * w * self.space.xs) / np.sum(d * w))

    def check_normalized(self, tol: float = 1e-10):
        mass = np.einsum("lnp,p->ln", self.densities, self.space.weights)
        finite = mass[np.isfinite(mass)]
        err = np.max(np.abs(finite - 1.0))
        if err > tol:
            raise AssertionError(f"marginal mass off by {err:.2e}")

    def to_rows(self):
        """Rows (node_time, line, x, density) for CSV emission."""
        ts = self.grid.node_times
        xs = self.space.xs
        for li in range(self.densities.shape[0]):
            for ni in range(self.densities.shape[1]):
                if not np.all(np.isfinite(self.densities[li, ni])):
                    continue
                for xi in range(xs.size):
                    yield ts[ni], li + 1, xs[xi], self.densities[li, ni, xi]


# ---------------------------------------------------------------------------
# closed forms

def reflection_positive_prob(x: float, y: float, t: float) -> float:
    """P(bridge from x to y over duration t stays positive) = 1 - exp(-2xy/t)."""
    if x <= 0 or y <= 0 or t <= 0:
        raise ValueError("reflection_positive_prob needs x, y, t > 0")
    return -math.expm1(-2.0 * x * y / t)


def _km_kernel(x: np.ndarray, y: np.ndarray, t: float, wall: bool) -> np.ndarray:
    k = np.array([[kernel_q(t, xi, yj) for yj in y] for xi in x])
    if wall:
        k -= np.array([[kernel_q(t, xi, -yj) for yj in y] for xi in x])
    return k


def km_prob(x, y, t: float, wall: bool = False) -> float:
    """Probability that independent normalized bridges stay strictly ordered
    (and positive, with `wall`): det[K_t(x_i, y_j)] / prod_i q_t(x_i, y_i)."""
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.ndim != 1 or xv.shape != yv.shape:
        raise ValueError("x and y must be 1-d vectors of equal length")
    if xv.size > 1 and (np.any(np.diff(xv) >= 0) or np.any(np.diff(yv) >= 0)):
        raise ValueError("vectors must be strictly decreasing")
    if wall and (np.any(xv <= 0) or np.any(yv <= 0)):
        raise ValueError("wall case needs strictly positive vectors")
    if t <= 0:
        raise ValueError("duration must be positive")
    k = _km_kernel(xv, yv, t, wall)
    if k.shape[0] > 1:
        cond = np.linalg.cond(k)
        if cond > 1e12:
            warnings.warn(
                f"Karlin-McGregor matrix is ill-conditioned (cond ~ {cond:.2e}); "
                "determinant accurate to roughly cond * eps",
                RuntimeWarning,
            )
    det = float(np.linalg.det(k))
    norm = float(np.prod([kernel_q(t, xi, yi) for xi, yi in zip(xv, yv)]))
    return det / norm


def km_wall_density(x, z, t: float) -> float:
    """Density at z of k walkers started at x, staying ordered and positive."""
    xv = np.asarray(x, dtype=float)
    zv = np.asarray(z, dtype=float)
    return float(np.linalg.det(_km_kernel(xv, zv, t, wall=True)))


# ---------------------------------------------------------------------------
# continuum-exact positivity / ordering trials via cellwise reflection

def sample_positive_indicator(grid: TimeGrid, x: float, y: float, size: int,
                              rng: np.random.Generator) -> np.ndarray:
    """Bernoulli draws of the continuum event {bridge from x to y stays > 0}.

    Samples bridge nodes, then resolves each cell's excursion below zero via
    the exact reflection crossing probability exp(-2 u v / dt); unbiased for
    the continuum event, unlike the raw node-positivity indicator.
    """
    paths = sample_bridges(grid, x, y, size, rng)
    ok = np.all(paths > 0, axis=1)
    cross = np.exp(-2.0 * paths[:, :-1] * paths[:, 1:] / grid.dt)
    return ok & np.all(rng.random(cross.shape) >= cross, axis=1)


def sample_ordered_indicator(grid: TimeGrid, x, y, size: int,
                             rng: np.random.Generator, wall: bool = True) -> np.ndarray:
    """Bernoulli draws of {independent bridges x->y stay strictly ordered
    (and positive, with wall)}, continuum-exact via cellwise reflection."""
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    paths = np.stack([sample_bridges(grid, xv[i], yv[i], size, rng)
                      for i in range(xv.size)])  # (k, size, nodes)
    ok = np.ones(size, dtype=bool)
    for i in range(xv.size - 1):
        g = paths[i] - paths[i + 1]  # gap bridge, variance doubled
        ok &= np.all(g > 0, axis=1)
        cross = np.exp(-g[:, :-1] * g[:, 1:] / grid.dt)
        ok &= np.all(rng.random(cross.shape) >= cross, axis=1)
    if wall:
        b = paths[-1]
        ok &= np.all(b > 0, axis=1)
        cross = np.exp(-2.0 * b[:, :-1] * b[:, 1:] / grid.dt)
        ok &= np.all(rng.random(cross.shape) >= cross, axis=1)
    return ok


# ---------------------------------------------------------------------------
# dense transfer-operator passes (n <= 2)

def _cost_check(n: int, grid: TimeGrid, space: SpaceGrid, limit: float):
    if n > 2:
        raise CostGuardError("dense oracle supports at most 2 lines")
    cost = grid.steps * float(space.points) ** n
    if cost > limit:
        raise CostGuardError(
            f"transfer pass cost ~{cost:.2e} state evaluations exceeds limit {limit:.2e}"
        )


def _step_matrix(space: SpaceGrid, dt: float) -> np.ndarray:
    xs = space.xs
    d = xs[:, None] - xs[None, :]
    return np.exp(-d * d / (2.0 * dt)) / math.sqrt(2.0 * math.pi * dt)


def _node_potentials(n: int, grid: TimeGrid, space: SpaceGrid, tilts: TiltSchedule):
    """Per-line node tilt factors exp(-rho_i(t_j) w_j x), shape (n, nodes, points)."""
    w = trapezoid_weights(grid)
    out = np.empty((n, grid.n_nodes, space.points))
    for i in range(n):
        rho = tilts.rho_nodes(i + 1, grid)
        out[i] = np.exp(-np.outer(rho * w, space.xs))
    return out


def _endpoint_factor(fn, line: int, xs: np.ndarray) -> np.ndarray:
    if fn is None:
        return np.ones_like(xs)
    return np.exp(-np.array([fn(line, x) for x in xs]))


class _Pass:
    """Forward/backward transfer pass over integrated nodes [start, stop]."""

    def __init__(self, n: int, grid: TimeGrid, space: SpaceGrid,
                 tilts: TiltSchedule, boundary: BoundaryCondition):
        self.n, self.grid, self.space = n, grid, space
        self.boundary = boundary
        xs, dt, m = space.xs, grid.dt, grid.steps
        self.t_step = _step_matrix(space, dt)
        self.wq = space.weights
        g = _node_potentials(n, grid, space, tilts)

        # The node-constrained density has a positive limit at the indicator
        # boundaries.  At the wall (a one-sided domain edge) the node takes
        # the full right-limit value; on the diagonal (a jump interior to the
        # integration square) it takes the two-sided average.  Both keep the
        # trapezoid rule at O(h^2).
        if n == 1:
            chamber = np.ones_like(xs)
            self.psi = g[0] * chamber  # (nodes, points)
        else:
            gt = (xs[:, None] > xs[None, :]).astype(float)
            np.fill_diagonal(gt, 0.5)
            chamber = gt
            self.psi = g[0][:, :, None] * g[1][:, None, :] * chamber

        if boundary.kind in ("fixed", "zero"):
            self.start, self.stop = 1, m - 1
            if m < 2:
                raise ValueError("pinned boundaries need at least 2 steps")
            if boundary.kind == "fixed":
                xl, xr = boundary.x_left, boundary.x_right
                if xl.size != n:
                    raise ValueError("boundary vector length != line count")
            else:
                xl = xr = np.zeros(n)
            ql = [np.exp(-(xs - xl[i]) ** 2 / (2 * dt)) / math.sqrt(2 * math.pi * dt)
                  for i in range(n)]
            qr = [np.exp(-(xs - xr[i]) ** 2 / (2 * dt)) / math.sqrt(2 * math.pi * dt)
                  for i in range(n)]
            if n == 1:
                phi_l, phi_r = ql[0], qr[0]
            else:
                phi_l = ql[0][:, None] * ql[1][None, :]
                phi_r = qr[0][:, None] * qr[1][None, :]
            # tilt factors at the pinned nodes are state-independent constants
            w = trapezoid_weights(grid)
            self.const_log = 0.0
            if tilts is not None:
                for i in range(n):
                    rho = tilts.rho_nodes(i + 1, grid)
                    self.const_log -= rho[0] * w[0] * xl[i] + rho[-1] * w[-1] * xr[i]
        else:  # free
            self.start, self.stop = 0, m
            nu_l = [_endpoint_factor(boundary.nu, i + 1, xs) for i in range(n)]
            nu_r = [_endpoint_factor(boundary.eta, i + 1, xs) for i in range(n)]
            if n == 1:
                phi_l, phi_r = nu_l[0], nu_r[0]
            else:
                phi_l = nu_l[0][:, None] * nu_l[1][None, :]
                phi_r = nu_r[0][:, None] * nu_r[1][None, :]
            self.const_log = 0.0
        self.phi_l, self.phi_r = phi_l, phi_r

    def _step_fwd(self, f):
        if self.n == 1:
            return self.t_step.T @ (f * self.wq)
        a = self.t_step.T @ ((f * self.wq[:, None]) * self.wq[None, :])
        return (a @ self.t_step)

    def _step_bwd(self, b):
        if self.n == 1:
            return self.t_step @ (b * self.wq)
        a = self.t_step @ ((b * self.wq[:, None]) * self.wq[None, :])
        return (a @ self.t_step.T)

    def run(self):
        start, stop = self.start, self.stop
        shape = (stop - start + 1,) + self.psi.shape[1:]
        fwd = np.empty(shape)
        bwd = np.empty(shape)
        log_f = np.zeros(stop - start + 1)
        log_b = np.zeros(stop - start + 1)
        fwd[0] = self.psi[start] * self.phi_l
        for j in range(start + 1, stop + 1):
            v = self._step_fwd(fwd[j - 1 - start]) * self.psi[j]
            s = float(np.max(v))
            if s <= 0:
                raise ValueError("forward mass vanished; configuration infeasible")
            fwd[j - start] = v / s
            log_f[j - start] = log_f[j - 1 - start] + math.log(s)
        bwd[-1] = self.phi_r
        for j in range(stop - 1, start - 1, -1):
            v = self._step_bwd(bwd[j + 1 - start] * self.psi[j + 1])
            s = float(np.max(v))
            if s <= 0:
                raise ValueError("backward mass vanished; configuration infeasible")
            bwd[j - start] = v / s
            log_b[j - start] = log_b[j + 1 - start] + math.log(s)
        # total mass: integrate fwd * bwd at any node; use the last one
        end = fwd[-1] * bwd[-1]
        if self.n == 1:
            z = float(np.sum(end * self.wq))
        else:
            z = float(np.sum(end * self.wq[:, None] * self.wq[None, :]))
        log_z = math.log(z) + log_f[-1] + log_b[-1] + self.const_log
        return fwd, bwd, log_z


def _resolve_space(config, grid: TimeGrid, boundary: BoundaryCondition,
                   space: SpaceGrid | None, points: int) -> SpaceGrid:
    if space is not None:
        return space
    if boundary.kind == "fixed":
        m_scale = float(np.max(boundary.x_left.max()))
        m_scale = max(m_scale, float(boundary.x_right.max()))
    else:
        m_scale = 1.0
    return SpaceGrid.auto(m_scale, grid.right - grid.left, points=points)


def brute_partition(n: int, grid: TimeGrid, tilts: TiltSchedule,
                    boundary: BoundaryCondition, space: SpaceGrid | None = None,
                    points: int = 801,
                    cost_limit: float = DEFAULT_COST_LIMIT) -> float:
    """Partition function of the node-discretized measure by dense transfer
    products.  Returns Z (unnormalized against the bridge reference)."""
    space = _resolve_space(None, grid, boundary, space, points)
    _cost_check(n, grid, space, cost_limit)
    p = _Pass(n, grid, space, tilts, boundary)
    fwd, bwd, log_z = p.run()
    _check_boundary_mass(space, fwd[-1] * bwd[-1])
    return math.exp(log_z)


def _check_boundary_mass(space: SpaceGrid, density: np.ndarray, tol: float = 1e-10):
    total = float(np.sum(np.abs(density)))
    tail = max(2, space.points // 50)
    if density.ndim == 1:
        top = float(np.sum(np.abs(density[-tail:])))
    else:
        top = float(np.sum(np.abs(density[-tail:, :])) + np.sum(np.abs(density[:, -tail:])))
    if total > 0 and top / total > tol:
        raise ValueError(
            f"space cutoff x_max={space.x_max} too small: relative boundary mass "
            f"{top / total:.2e} exceeds {tol:.0e}"
        )


def transfer_marginals(n: int, grid: TimeGrid, tilts: TiltSchedule,
                       boundary: BoundaryCondition, space: SpaceGrid | None = None,
                       points: int = 801,
                       cost_limit: float = DEFAULT_COST_LIMIT) -> MarginalTable:
    """Exact (quadrature-limited) one-point densities of each line at each
    integrated node.  Pinned endpoint nodes are reported as NaN rows."""
    space = _resolve_space(None, grid, boundary, space, points)
    _cost_check(n, grid, space, cost_limit)
    p = _Pass(n, grid, space, tilts, boundary)
    fwd, bwd, log_z = p.run()
    out = np.full((n, grid.n_nodes, space.points), np.nan)
    wq = space.weights
    for j in range(p.start, p.stop + 1):
        joint = fwd[j - p.start] * bwd[j - p.start]
        _check_boundary_mass(space, joint)
        if n == 1:
            mass = float(np.sum(joint * wq))
            out[0, j] = joint / mass
        else:
            mass = float(np.sum(joint * wq[:, None] * wq[None, :]))
            out[0, j] = (joint * wq[None, :]).sum(axis=1) / mass
            out[1, j] = (joint * wq[:, None]).sum(axis=0) / mass
    return MarginalTable(grid=grid, space=space, densities=out, log_z=log_z)


# ---------------------------------------------------------------------------
# Harnack-type certification

def harnack_ratio_check(t: float, cutoff: float, samples: int, k: int = 2,
                        seed: int = 0, t0: float = 0.05,
                        u_exponent: float = 1.0) -> float:
    """Max/min of p_{0,t}(x, z) / (U(x) U(z))**u_exponent over sampled chamber
    pairs below `cutoff`.  Finite, stable values certify a Harnack constant;
    u_exponent != 1 is the deliberate negative control."""
    if t < t0:
        raise ValueError(f"duration below configured t0={t0}")
    if samples < 2:
        raise ValueError("need at least two sampled pairs")
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(samples):
        x = np.sort(rng.uniform(0.0, cutoff, size=k))[::-1]
        z = np.sort(rng.uniform(0.0, cutoff, size=k))[::-1]
        if np.any(np.diff(x) == 0) or np.any(np.diff(z) == 0):
            continue
        p = km_wall_density(x, z, t)
        u = (harmonic_u(x) * harmonic_u(z)) ** u_exponent
        if p > 0 and u > 0:
            ratios.append(p / u)
    if len(ratios) < 2:
        raise ValueError("degenerate sample set")
    r = np.asarray(ratios)
    return float(np.max(r) / np.min(r))
