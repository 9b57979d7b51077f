"""Heat-bath block resampling for ordered area-tilted bridge ensembles.

The kernel replaces one line on one block by an exact tilted-bridge proposal
(bridge noise + deterministic tilt shift) accepted iff the ordering
constraints hold at the block's interior nodes; after too many rejections
the block is halved recursively, and single-node blocks are drawn exactly
from the truncated Gaussian conditional.  All randomness flows through the
chain's own numpy Generator, so a (seed, config) pair fixes the trajectory.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .core import (
    BoundaryCondition,
    Ensemble,
    TimeGrid,
    TiltSchedule,
    check_admissible,
    tilt_shift,
)

__all__ = [
    "SamplerConfig",
    "ChainState",
    "ConsistencyError",
    "CheckpointError",
    "Observable",
    "RunResult",
    "init_state",
    "resample_block",
    "sweep",
    "update_endpoints",
    "coupled_sweep",
    "run_chain",
    "checkpoint",
    "restore",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
]

_MAGIC = b"ATLE"
_VERSION = 1
_PROPOSAL_BATCH = 8


class ConsistencyError(RuntimeError):
    """Block boundary data already violates the ordering constraints."""


class CheckpointError(ValueError):
    """Checkpoint blob is malformed, truncated, or from another version."""


@dataclass(frozen=True)
class SamplerConfig:
    n: int
    grid: TimeGrid
    tilts: TiltSchedule
    boundary: BoundaryCondition
    floor: Optional[np.ndarray] = None
    ceiling: Optional[np.ndarray] = None
    block_len: int = 16
    max_rejections: int = 64
    sweep_schedule: str = "systematic"
    seed: int = 0
    burnin: int = 200
    thin: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one line")
        if self.block_len < 2:
            raise ValueError("block_len must be >= 2 nodes")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be positive")
        if self.sweep_schedule not in ("systematic", "random-block"):
            raise ValueError(f"unknown sweep schedule {self.sweep_schedule!r}")
        if self.burnin < 0 or self.thin < 0:
            raise ValueError("burnin and thin must be non-negative")
        if self.boundary.kind == "fixed" and self.boundary.x_left.size != self.n:
            raise ValueError("fixed boundary vectors must have length n")


@dataclass
class ChainState:
    config: SamplerConfig
    ensemble: Ensemble
    rng: np.random.Generator
    sweeps_done: int = 0
    proposals: np.ndarray = None  # per line
    rejections: np.ndarray = None
    ep_scale: np.ndarray = None  # (n, 2) endpoint proposal scales
    ep_tries: int = 0
    ep_accepts: int = 0
    adapting: bool = True

    def __post_init__(self):
        n = self.config.n
        if self.proposals is None:
            self.proposals = np.zeros(n, dtype=np.int64)
        if self.rejections is None:
            self.rejections = np.zeros(n, dtype=np.int64)
        if self.ep_scale is None:
            self.ep_scale = np.full((n, 2), math.sqrt(self.config.grid.dt))


# ---------------------------------------------------------------------------
# configuration plumbing

def config_to_dict(config: SamplerConfig) -> dict:
    g = config.grid
    tilts = config.tilts
    if tilts.kind == "geometric":
        tilt_d = {"type": "geometric", "a": tilts.a, "lambda": tilts.lam}
    else:
        tilt_d = {"type": "general",
                  "rhos": [r if np.ndim(r) == 0 else list(np.asarray(r)) for r in tilts.rhos]}
    b = config.boundary
    if b.kind == "fixed":
        bd = {"type": "fixed", "left": list(b.x_left), "right": list(b.x_right)}
    elif b.kind == "zero":
        bd = {"type": "zero"}
    else:
        if b.nu is not None or b.eta is not None:
            raise CheckpointError("free boundaries with endpoint potentials "
                                  "cannot be serialized")
        bd = {"type": "free"}
    return {
        "n": config.n,
        "grid": {"left": g.left, "right": g.right, "steps": g.steps},
        "tilts": tilt_d,
        "boundary": bd,
        "floor": None if config.floor is None else list(config.floor),
        "ceiling": None if config.ceiling is None else list(config.ceiling),
        "block_len": config.block_len,
        "max_rejections": config.max_rejections,
        "sweep_schedule": config.sweep_schedule,
        "seed": config.seed,
        "burnin": config.burnin,
        "thin": config.thin,
    }


def config_from_dict(d: dict) -> SamplerConfig:
    g = TimeGrid(d["grid"]["left"], d["grid"]["right"], d["grid"]["steps"])
    td = d["tilts"]
    if td["type"] == "geometric":
        tilts = TiltSchedule.geometric(td["a"], td["lambda"])
    else:
        tilts = TiltSchedule.general(td["rhos"])
    bd = d["boundary"]
    if bd["type"] == "fixed":
        boundary = BoundaryCondition.fixed(bd["left"], bd["right"])
    elif bd["type"] == "zero":
        boundary = BoundaryCondition.zero()
    else:
        boundary = BoundaryCondition.free()
    return SamplerConfig(
        n=d["n"], grid=g, tilts=tilts, boundary=boundary,
        floor=None if d.get("floor") is None else np.asarray(d["floor"]),
        ceiling=None if d.get("ceiling") is None else np.asarray(d["ceiling"]),
        block_len=d["block_len"], max_rejections=d["max_rejections"],
        sweep_schedule=d["sweep_schedule"], seed=d["seed"],
        burnin=d["burnin"], thin=d["thin"],
    )


def config_hash(config: SamplerConfig, ignore_seed: bool = False) -> str:
    d = config_to_dict(config)
    if ignore_seed:
        d.pop("seed")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# initialization

def init_state(config: SamplerConfig) -> ChainState:
    """Deterministic admissible start: fan of constant offsets (n-i+1),
    interpolated down to the boundary data where endpoints are pinned."""
    g = config.grid
    n = config.n
    ts = g.node_times
    lines = np.empty((n, g.n_nodes))
    b = config.boundary
    if b.kind == "fixed":
        for i in range(n):
            lines[i] = np.interp(ts, [g.left, g.right],
                                 [b.x_left[i], b.x_right[i]])
    elif b.kind == "zero":
        half = (g.left + g.right) / 2.0
        tent = np.minimum(ts - g.left, g.right - ts) / (half - g.left)
        for i in range(n):
            lines[i] = (n - i) * tent
    else:
        for i in range(n):
            lines[i] = float(n - i)
    if config.floor is not None:
        # lift the fan above a nontrivial floor where needed
        top = np.max(config.floor)
        for i in range(n):
            interior = slice(1, g.n_nodes - 1)
            lines[i, interior] = np.maximum(lines[i, interior],
                                            config.floor[interior] + (n - i) * 1e-3)
    ens = Ensemble(grid=g, lines=lines, floor=config.floor, ceiling=config.ceiling)
    if not check_admissible(ens):
        raise ConsistencyError("initial configuration is not admissible; "
                               "check boundary data against floor/ceiling")
    return ChainState(config=config, ensemble=ens,
                      rng=np.random.default_rng(config.seed))


# ---------------------------------------------------------------------------
# block resampling

def _block_plan(n_nodes: int, block_len: int) -> list[tuple[int, int]]:
    """Blocks (lo, hi) node-index pairs, left to right, 50% overlap."""
    m = n_nodes - 1
    b = min(block_len, n_nodes)
    span = b - 1  # cells per block
    stride = max(1, span // 2)
    blocks = []
    s = 0
    while True:
        blocks.append((s, s + span))
        if s + span >= m:
            break
        s = min(s + stride, m - span)
    return blocks


def _shift_interior(rho, g: TimeGrid, lo: int, hi: int) -> np.ndarray:
    """Tilt mean shift at the interior nodes of block [lo, hi]."""
    if np.ndim(rho) == 0:
        if rho == 0.0:
            return np.zeros(hi - lo - 1)
        t = g.node_times[lo + 1:hi]
        s, e = g.node_times[lo], g.node_times[hi]
        return -float(rho) * (t - s) * (e - t) / 2.0
    sub = TimeGrid(g.node_times[lo], g.node_times[hi], hi - lo)
    return tilt_shift(sub, np.asarray(rho)[lo:hi + 1])[1:-1]


def _bounds(state: ChainState, line: int, lo: int, hi: int):
    """(lower, upper) constraint vectors at the interior nodes of the block."""
    i = line - 1
    ens = state.ensemble
    sl = slice(lo + 1, hi)
    upper = ens.lines[i - 1, sl] if i > 0 else ens.ceiling_values()[sl]
    lower = ens.lines[i + 1, sl] if i < ens.n - 1 else ens.floor_values()[sl]
    return lower, upper


def _propose(x0, x1, dt, k, z, shift):
    """Bridge proposal at k interior nodes from k+1 innovations."""
    w = np.cumsum(z, axis=-1) * math.sqrt(dt)
    frac = np.arange(1, k + 1) / (k + 1)
    lin = x0 + frac * (x1 - x0)
    return lin + w[..., :k] - frac * w[..., -1:] + shift


def _truncnorm_draw(mu, sigma, lower, upper, u):
    a = ndtr((lower - mu) / sigma)
    b = ndtr((upper - mu) / sigma)
    if b <= a:
        raise ConsistencyError("empty truncation window in single-node update")
    return mu + sigma * ndtri(a + u * (b - a))


def resample_block(state: ChainState, line: int, lo: int, hi: int) -> None:
    """Heat-bath update of `line` (1-based, 1 = top) on nodes (lo, hi)."""
    if not 1 <= line <= state.ensemble.n:
        raise ValueError(f"no line {line}")
    if not 0 <= lo < hi <= state.config.grid.steps:
        raise ValueError(f"bad block [{lo}, {hi}]")
    k = hi - lo - 1
    if k == 0:
        return
    g = state.config.grid
    lower, upper = _bounds(state, line, lo, hi)
    if np.any(lower >= upper):
        raise ConsistencyError(
            f"constraint window for line {line} on block [{lo}, {hi}] is empty")
    vals = state.ensemble.lines[line - 1]
    x0, x1 = vals[lo], vals[hi]
    rho = state.config.tilts.rho(line)

    if k == 1:
        dt = g.dt
        rho_mid = float(rho) if np.ndim(rho) == 0 else float(np.asarray(rho)[lo + 1])
        mu = (x0 + x1) / 2.0 - rho_mid * dt * dt / 4.0
        vals[lo + 1] = _truncnorm_draw(mu, math.sqrt(dt / 2.0),
                                       lower[0], upper[0], state.rng.random())
        state.proposals[line - 1] += 1
        return

    shift = _shift_interior(rho, g, lo, hi)
    tried = 0
    while tried < state.config.max_rejections:
        batch = min(_PROPOSAL_BATCH, state.config.max_rejections - tried)
        z = state.rng.standard_normal((batch, k + 1))
        prop = _propose(x0, x1, g.dt, k, z, shift)
        ok = np.all((prop > lower) & (prop < upper), axis=1)
        hit = np.argmax(ok) if ok.any() else -1
        if hit >= 0:
            state.proposals[line - 1] += tried + hit + 1
            state.rejections[line - 1] += tried + hit
            vals[lo + 1:hi] = prop[hit]
            return
        tried += batch
    state.proposals[line - 1] += tried
    state.rejections[line - 1] += tried
    mid = (lo + hi) // 2
    resample_block(state, line, lo, mid)
    resample_block(state, line, mid, hi)


# ---------------------------------------------------------------------------
# endpoint updates (free boundary conditions)

def _endpoint_logpdf(state: ChainState, line: int, side: int, v: float) -> float:
    g = state.config.grid
    i = line - 1
    node = 0 if side == 0 else g.steps
    nbr = state.ensemble.lines[i, 1 if side == 0 else g.steps - 1]
    upper = state.ensemble.lines[i - 1, node] if i > 0 \
        else state.ensemble.ceiling_values()[node]
    lower = state.ensemble.lines[i + 1, node] if i < state.ensemble.n - 1 \
        else state.ensemble.floor_values()[node]
    if not lower < v < upper:
        return -math.inf
    rho = state.config.tilts.rho_nodes(line, g)[node]
    out = -(v - nbr) ** 2 / (2 * g.dt) - rho * (g.dt / 2.0) * v
    b = state.config.boundary
    pot = b.nu if side == 0 else b.eta
    if pot is not None:
        out -= pot(line, v)
    return out


def update_endpoints(state: ChainState) -> None:
    """Metropolis random-walk update of every free endpoint value."""
    if state.config.boundary.kind != "free":
        raise RuntimeError("update_endpoints requires free boundary conditions")
    g = state.config.grid
    for side, node in ((0, 0), (1, g.steps)):
        for line in range(1, state.ensemble.n + 1):
            i = line - 1
            v = state.ensemble.lines[i, node]
            scale = state.ep_scale[i, side]
            w = v + scale * state.rng.standard_normal()
            delta = _endpoint_logpdf(state, line, side, w) \
                - _endpoint_logpdf(state, line, side, v)
            accept = math.log(state.rng.random()) < delta
            if accept:
                state.ensemble.lines[i, node] = w
            state.ep_tries += 1
            state.ep_accepts += int(accept)
            if state.adapting:
                state.ep_scale[i, side] = scale * math.exp(0.05 * (float(accept) - 0.4))


# ---------------------------------------------------------------------------
# sweeps

def _line_blocks(cfg: SamplerConfig, line: int) -> list[tuple[int, int]]:
    """Block plan for one line; spans shrink like rho^{-1/2} so the tilt
    shift depth stays O(1) relative to the proposal noise."""
    rho = cfg.tilts.rho(line)
    rho_max = float(rho) if np.ndim(rho) == 0 else float(np.max(rho))
    span_cap = cfg.block_len - 1
    if rho_max > 0:
        span_time = 2.0 / math.sqrt(rho_max)
        span_cap = min(span_cap, max(2, int(span_time / cfg.grid.dt)))
    return _block_plan(cfg.grid.n_nodes, span_cap + 1)


def sweep(state: ChainState) -> None:
    """One full pass: endpoint moves (free b.c.), then every line and block."""
    cfg = state.config
    if cfg.boundary.kind == "free":
        update_endpoints(state)
    if cfg.sweep_schedule == "systematic":
        for line in range(1, cfg.n + 1):
            for lo, hi in _line_blocks(cfg, line):
                resample_block(state, line, lo, hi)
    else:
        blocks = _block_plan(cfg.grid.n_nodes, cfg.block_len)
        total = cfg.n * len(blocks)
        for _ in range(total):
            line = int(state.rng.integers(1, cfg.n + 1))
            lo, hi = blocks[int(state.rng.integers(len(blocks)))]
            resample_block(state, line, lo, hi)
    state.sweeps_done += 1
    assert check_admissible(state.ensemble), "kernel broke admissibility"


# ---------------------------------------------------------------------------
# monotone coupling

def _check_coupling_preconditions(lo: ChainState, hi: ChainState):
    cl, ch = lo.config, hi.config
    if cl.grid != ch.grid or cl.n != ch.n:
        raise ValueError("coupled chains need identical grids and line counts")
    if cl.boundary.kind == "free" or ch.boundary.kind == "free":
        raise ValueError("monotone coupling is only provided for fixed/zero "
                         "boundary conditions")
    for line in range(1, cl.n + 1):
        rl = cl.tilts.rho_nodes(line, cl.grid)
        rh = ch.tilts.rho_nodes(line, ch.grid)
        if np.any(rl < rh - 1e-12):
            raise ValueError("lo chain must have pointwise >= tilts")
    fl = lo.ensemble.floor_values()
    fh = hi.ensemble.floor_values()
    if np.any(fl > fh + 1e-12):
        raise ValueError("lo floor must lie below hi floor")
    cll = lo.ensemble.ceiling_values()
    clh = hi.ensemble.ceiling_values()
    if np.any(cll > clh + 1e-12):
        raise ValueError("lo ceiling must lie below hi ceiling")
    if cl.boundary.kind == "fixed" and ch.boundary.kind == "fixed":
        if np.any(cl.boundary.x_left > ch.boundary.x_left + 1e-12) or \
                np.any(cl.boundary.x_right > ch.boundary.x_right + 1e-12):
            raise ValueError("lo boundary data must lie below hi boundary data")


def _coupled_block(lo: ChainState, hi: ChainState, line: int, b_lo: int, b_hi: int,
                   shared: np.random.Generator) -> None:
    k = b_hi - b_lo - 1
    if k == 0:
        return
    g = lo.config.grid
    lower_l, upper_l = _bounds(lo, line, b_lo, b_hi)
    lower_h, upper_h = _bounds(hi, line, b_lo, b_hi)
    if np.any(lower_l >= upper_l) or np.any(lower_h >= upper_h):
        raise ConsistencyError("empty constraint window in coupled block")
    vl = lo.ensemble.lines[line - 1]
    vh = hi.ensemble.lines[line - 1]
    rho_l = lo.config.tilts.rho(line)
    rho_h = hi.config.tilts.rho(line)

    if k == 1:
        dt = g.dt
        u = shared.random()
        for st, vals, rho, low, upp in ((lo, vl, rho_l, lower_l, upper_l),
                                        (hi, vh, rho_h, lower_h, upper_h)):
            r = float(rho) if np.ndim(rho) == 0 else float(np.asarray(rho)[b_lo + 1])
            mu = (vals[b_lo] + vals[b_hi]) / 2.0 - r * dt * dt / 4.0
            vals[b_lo + 1] = _truncnorm_draw(mu, math.sqrt(dt / 2.0), low[0], upp[0], u)
            st.proposals[line - 1] += 1
        return

    shift_l = _shift_interior(rho_l, g, b_lo, b_hi)
    shift_h = _shift_interior(rho_h, g, b_lo, b_hi)
    tried = 0
    while tried < lo.config.max_rejections:
        z = shared.standard_normal(k + 1)
        pl = _propose(vl[b_lo], vl[b_hi], g.dt, k, z, shift_l)
        ph = _propose(vh[b_lo], vh[b_hi], g.dt, k, z, shift_h)
        ok_l = bool(np.all((pl > lower_l) & (pl < upper_l)))
        ok_h = bool(np.all((ph > lower_h) & (ph < upper_h)))
        tried += 1
        for st in (lo, hi):
            st.proposals[line - 1] += 1
        if ok_l and ok_h:
            vl[b_lo + 1:b_hi] = pl
            vh[b_lo + 1:b_hi] = ph
            return
        if ok_l != ok_h:
            break  # constraint disagreement: fall to the common halved block
        for st in (lo, hi):
            st.rejections[line - 1] += 1
    mid = (b_lo + b_hi) // 2
    _coupled_block(lo, hi, line, b_lo, mid, shared)
    _coupled_block(lo, hi, line, mid, b_hi, shared)


def coupled_sweep(lo: ChainState, hi: ChainState) -> None:
    """One sweep of both chains from shared innovations; preserves lo <= hi.

    Shared randomness is drawn from lo's generator; hi's generator is not
    advanced.  Requires fixed or zero boundary conditions on both chains.
    """
    _check_coupling_preconditions(lo, hi)
    cfg = lo.config
    shared = lo.rng
    for line in range(1, cfg.n + 1):
        # lo has the larger tilts, hence the shorter spans; share its plan
        for b_lo, b_hi in _line_blocks(cfg, line):
            _coupled_block(lo, hi, line, b_lo, b_hi, shared)
    lo.sweeps_done += 1
    hi.sweeps_done += 1
    assert check_admissible(lo.ensemble) and check_admissible(hi.ensemble)


# ---------------------------------------------------------------------------
# observables and chain driver

@dataclass(frozen=True)
class Observable:
    kind: str  # point | curved_max | window_max | min_gap | modulus | area
    params: tuple = ()

    @property
    def name(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + "_" + "_".join(str(p) for p in self.params)


def make_observable(kind: str, **kw) -> Observable:
    order = {
        "point": ("t", "line"),
        "curved_max": ("alpha", "line", "gamma"),
        "window_max": ("line", "gamma"),
        "min_gap": ("k", "gamma"),
        "modulus": ("k", "gamma", "delta"),
        "area": ("line",),
    }
    if kind not in order:
        raise ValueError(f"unknown observable kind {kind!r}")
    defaults = {"line": 1, "k": None}
    params = tuple(kw.get(key, defaults.get(key)) for key in order[kind])
    return Observable(kind=kind, params=params)


def _eval_observable(obs: Observable, ens: Ensemble) -> float:
    from . import core

    if obs.kind == "point":
        t, line = obs.params
        return float(ens.lines[int(line) - 1, ens.grid.index_of(float(t))])
    if obs.kind == "curved_max":
        alpha, line, gamma = obs.params
        vals = ens.lines[int(line) - 1]
        ts = ens.grid.node_times
        if gamma is not None:
            i0, i1 = ens.grid.window_indices(float(gamma))
            vals, ts = vals[i0:i1 + 1], ts[i0:i1 + 1]
        if not 0.0 < float(alpha) < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")
        return float(max(np.max(vals - np.abs(ts) ** float(alpha)), 0.0))
    if obs.kind == "window_max":
        line, gamma = obs.params
        i0, i1 = ens.grid.window_indices(float(gamma))
        return float(np.max(ens.lines[int(line) - 1, i0:i1 + 1]))
    if obs.kind == "min_gap":
        k, gamma = obs.params
        sub = ens if k is None else Ensemble(ens.grid, ens.lines[:int(k)],
                                             ens.floor, ens.ceiling)
        return core.min_gap(sub, float(gamma))
    if obs.kind == "modulus":
        k, gamma, delta = obs.params
        return core.modulus(ens, float(gamma), float(delta),
                            k=None if k is None else int(k))
    if obs.kind == "area":
        (line,) = obs.params
        return core.area(ens.lines[int(line) - 1], ens.grid)
    raise ValueError(obs.kind)


@dataclass
class RunResult:
    config: SamplerConfig
    sweeps: np.ndarray
    table: dict
    diagnostics: dict
    state: ChainState
    paths: Optional[np.ndarray] = None  # (n_samples, n, nodes) when kept

    def values(self, name: str) -> np.ndarray:
        return self.table[name]


def run_chain(config: SamplerConfig, n_samples: int, observables=(),
              keep_paths: bool = False, state: Optional[ChainState] = None,
              progress=None) -> RunResult:
    """Burn in, then retain `n_samples` states (one per `thin` sweeps) and
    evaluate the requested observables on each."""
    from .stats import ess_tau

    if state is None:
        state = init_state(config)
    for _ in range(config.burnin):
        sweep(state)
    state.adapting = False
    obs = list(observables)
    cols = {o.name: np.empty(n_samples) for o in obs}
    sweeps_idx = np.empty(n_samples, dtype=np.int64)
    paths = np.empty((n_samples, config.n, config.grid.n_nodes)) if keep_paths else None
    for s in range(n_samples):
        for _ in range(max(1, config.thin)):
            sweep(state)
        sweeps_idx[s] = state.sweeps_done
        for o in obs:
            cols[o.name][s] = _eval_observable(o, state.ensemble)
        if keep_paths:
            paths[s] = state.ensemble.lines
        if progress is not None and (s + 1) % progress == 0:
            print(f"  retained {s + 1}/{n_samples} samples", flush=True)
    diags = {}
    for name, vals in cols.items():
        ess, tau = ess_tau(vals)
        diags[name] = {"ess": ess, "tau": tau}
    diags["_chain"] = {
        "sweeps": int(state.sweeps_done),
        "proposals": state.proposals.tolist(),
        "rejections": state.rejections.tolist(),
    }
    return RunResult(config=config, sweeps=sweeps_idx, table=cols,
                     diagnostics=diags, state=state, paths=paths)


# ---------------------------------------------------------------------------
# checkpointing

def checkpoint(state: ChainState) -> bytes:
    """Versioned, self-describing blob; round-trips bit-exactly."""
    cfg_d = config_to_dict(state.config)
    rng_state = state.rng.bit_generator.state
    header = {
        "config": cfg_d,
        "config_hash": config_hash(state.config),
        "rng": {
            "bit_generator": rng_state["bit_generator"],
            "state": {k: str(v) for k, v in rng_state["state"].items()},
            "has_uint32": rng_state["has_uint32"],
            "uinteger": rng_state["uinteger"],
        },
        "sweeps_done": state.sweeps_done,
        "proposals": state.proposals.tolist(),
        "rejections": state.rejections.tolist(),
        "ep_scale": state.ep_scale.tolist(),
        "ep_tries": state.ep_tries,
        "ep_accepts": state.ep_accepts,
        "adapting": state.adapting,
        "shape": list(state.ensemble.lines.shape),
    }
    hj = json.dumps(header, sort_keys=True).encode()
    lines = np.ascontiguousarray(state.ensemble.lines, dtype="<f8").tobytes()
    return _MAGIC + struct.pack("<HI", _VERSION, len(hj)) + hj + lines


def restore(blob: bytes) -> ChainState:
    if len(blob) < 10 or blob[:4] != _MAGIC:
        raise CheckpointError("not a chain checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 10 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[10:10 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    config = config_from_dict(header["config"])
    if header.get("config_hash") != config_hash(config):
        raise CheckpointError("config hash mismatch in checkpoint")
    shape = tuple(header["shape"])
    body = blob[10 + hlen:]
    expect = shape[0] * shape[1] * 8
    if len(body) != expect:
        raise CheckpointError(
            f"truncated checkpoint body: {len(body)} bytes, expected {expect}")
    lines = np.frombuffer(body, dtype="<f8").reshape(shape).copy()
    rng = np.random.default_rng(0)
    rd = header["rng"]
    rng.bit_generator.state = {
        "bit_generator": rd["bit_generator"],
        "state": {k: int(v) for k, v in rd["state"].items()},
        "has_uint32": rd["has_uint32"],
        "uinteger": rd["uinteger"],
    }
    ens = Ensemble(grid=config.grid, lines=lines, floor=config.floor,
                   ceiling=config.ceiling)
    return ChainState(
        config=config, ensemble=ens, rng=rng,
        sweeps_done=header["sweeps_done"],
        proposals=np.asarray(header["proposals"], dtype=np.int64),
        rejections=np.asarray(header["rejections"], dtype=np.int64),
        ep_scale=np.asarray(header["ep_scale"]),
        ep_tries=header["ep_tries"], ep_accepts=header["ep_accepts"],
        adapting=header["adapting"],
    )
