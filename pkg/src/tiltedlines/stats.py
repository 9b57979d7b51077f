"""Estimators and pass/fail tests over chain output.

Confidence intervals are autocorrelation-corrected via the integrated
autocorrelation time (initial-positive-sequence truncation, ESS =
N / (2 tau + 1)).  Default confidence level is 99% since many gates run
simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import ks_2samp

__all__ = [
    "EstimateCI",
    "ScanResult",
    "ThresholdEvent",
    "InsufficientSamples",
    "autocorr",
    "ess_tau",
    "mean_ci",
    "prob_ci",
    "estimate_curved_max",
    "max_tail_scan",
    "gap_tail",
    "modulus_tail",
    "dominance_test",
    "monotone_scan",
    "gibbs_consistency",
]


class InsufficientSamples(RuntimeError):
    """Estimator refused: effective sample size below its floor."""


def autocorr(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation function of a 1-d series (FFT-based)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        return np.ones(1)
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real
    if acov[0] == 0.0:
        return np.ones(1)
    return acov / acov[0]


def ess_tau(x: np.ndarray) -> tuple[float, float]:
    """(effective sample size, integrated autocorrelation time).

    tau truncates the ACF at the end of the initial positive sequence of
    paired sums; ESS = N / (2 tau + 1).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n < 4 or np.ptp(x) == 0.0:
        return float(n), 0.0
    rho = autocorr(x)
    cutoff = 0
    for m in range(1, (len(rho) - 1) // 2):
        if rho[2 * m - 1] + rho[2 * m] <= 0:
            break
        cutoff = 2 * m
    tau = float(np.sum(rho[1:cutoff + 1]))
    tau = max(tau, 0.0)
    return n / (2 * tau + 1), tau


@dataclass(frozen=True)
class EstimateCI:
    point: float
    se: float
    ess: float
    level: float = 0.99
    widened: bool = False  # tail counts too thin for a normal CI

    @property
    def half_width(self) -> float:
        return ndtri((1 + self.level) / 2) * self.se

    @property
    def lower(self) -> float:
        return self.point - self.half_width

    @property
    def upper(self) -> float:
        return self.point + self.half_width

    def overlaps(self, other: "EstimateCI") -> bool:
        return self.lower <= other.upper and other.lower <= self.upper


def mean_ci(values, level: float = 0.99) -> EstimateCI:
    v = np.asarray(values, dtype=float).reshape(-1)
    ess, _ = ess_tau(v)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return EstimateCI(point=float(np.mean(v)), se=sd / math.sqrt(max(ess, 1.0)),
                      ess=ess, level=level)


def prob_ci(indicator, level: float = 0.99) -> EstimateCI:
    """Probability estimate with ESS-corrected binomial standard error."""
    v = np.asarray(indicator, dtype=float).reshape(-1)
    ess, _ = ess_tau(v)
    ess = max(ess, 1.0)
    p = float(np.mean(v))
    hits = p * v.size
    widened = hits < 10 or (v.size - hits) < 10
    if p in (0.0, 1.0):
        # rule of three: CI half-width ~ 3/ess on the empty side
        return EstimateCI(point=p, se=3.0 / ess / ndtri((1 + level) / 2),
                          ess=ess, level=level, widened=True)
    return EstimateCI(point=p, se=math.sqrt(p * (1 - p) / ess), ess=ess,
                      level=level, widened=widened)


# ---------------------------------------------------------------------------
# theorem-shaped estimators

def estimate_curved_max(values, alpha: float, min_ess: float = 100.0,
                        level: float = 0.99) -> EstimateCI:
    """Mean curved maximum with autocorrelation-corrected CI."""
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    est = mean_ci(values, level=level)
    if est.ess < min_ess and np.ptp(np.asarray(values, dtype=float)) > 0:
        raise InsufficientSamples(
            f"effective sample size {est.ess:.0f} below floor {min_ess:.0f}")
    return est


def max_tail_scan(maxima_by_line: dict, m_list: Sequence[float], lam: float,
                  level: float = 0.99):
    """Tail probabilities P(max X_k > lam^{-(k-1)/3} M) per (k, M), plus the
    smallest constant C with every upper CI <= C / M."""
    from .core import event_threshold

    rows = []
    c_fit = 0.0
    for k in sorted(maxima_by_line):
        vals = np.asarray(maxima_by_line[k], dtype=float)
        for m_level in m_list:
            thr = event_threshold(k, m_level, lam)
            est = prob_ci(vals > thr, level=level)
            rows.append({"k": k, "M": m_level, "threshold": thr, "estimate": est})
            c_fit = max(c_fit, est.upper * m_level)
    return rows, c_fit


def gap_tail(gap_values, delta_list: Sequence[float], level: float = 0.99):
    """P(min gap <= delta) per delta, monotone by construction on one sample set."""
    vals = np.asarray(gap_values, dtype=float)
    return [{"delta": d, "estimate": prob_ci(vals <= d, level=level)}
            for d in delta_list]


def modulus_tail(mod_values, eta: float, level: float = 0.99) -> EstimateCI:
    """P(modulus of continuity >= eta)."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    vals = np.asarray(mod_values, dtype=float)
    return prob_ci(vals >= eta, level=level)


# ---------------------------------------------------------------------------
# stochastic dominance

@dataclass(frozen=True)
class DominanceResult:
    statistic: float  # sup of F_hi - F_lo; <= 0 under perfect dominance
    p_value: float
    consistent: bool  # dominance not rejected


def dominance_test(samples_lo, samples_hi, n_boot: int = 500, seed: int = 0,
                   alpha: float = 0.05) -> DominanceResult:
    """One-sided test that `samples_hi` stochastically dominates `samples_lo`.

    Statistic is sup_x (F_hi(x) - F_lo(x)); under dominance F_hi <= F_lo so
    large positive values are evidence against.  The p-value is a pooled
    permutation bootstrap of the statistic.
    """
    lo = np.sort(np.asarray(samples_lo, dtype=float).reshape(-1))
    hi = np.sort(np.asarray(samples_hi, dtype=float).reshape(-1))
    if lo.size == 0 or hi.size == 0:
        raise ValueError("empty sample set")
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        raise ValueError("mismatched or non-finite supports")

    def stat(a, b):
        grid = np.concatenate([a, b])
        fa = np.searchsorted(a, grid, side="right") / a.size
        fb = np.searchsorted(b, grid, side="right") / b.size
        return float(np.max(fb - fa))

    observed = stat(lo, hi)
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([lo, hi])
    count = 0
    for _ in range(n_boot):
        perm = rng.permutation(pooled)
        a = np.sort(perm[:lo.size])
        b = np.sort(perm[lo.size:])
        if stat(a, b) >= observed:
            count += 1
    p = (count + 1) / (n_boot + 1)
    return DominanceResult(statistic=observed, p_value=p, consistent=p >= alpha)


# ---------------------------------------------------------------------------
# monotone convergence along growing domains

@dataclass(frozen=True)
class ThresholdEvent:
    """Increasing event {X_line(t) > threshold}; the only shape admitted."""

    line: int
    t: float
    threshold: float
    direction: str = ">"

    def __post_init__(self):
        if self.direction != ">":
            raise ValueError("only increasing threshold events (direction '>') "
                             "are admitted to monotone scans")


@dataclass
class ScanResult:
    settings: list
    estimates: list  # of EstimateCI
    non_decreasing: bool
    saturated: bool


def derived_seed(base_seed: int, index: int, tag: str) -> int:
    import hashlib

    h = hashlib.sha256(f"{base_seed}:{index}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def monotone_scan(configs, event: ThresholdEvent, n_samples: int,
                  level: float = 0.99, base_seed: int = 0) -> ScanResult:
    """P0(event) along a sequence of growing zero-boundary configs; checks
    non-decrease within CIs and saturation of the last two settings."""
    import dataclasses

    from . import sampler as smp

    estimates = []
    settings = []
    for idx, cfg in enumerate(configs):
        if cfg.boundary.kind != "zero":
            raise ValueError("monotone scans require zero boundary conditions")
        seed = derived_seed(base_seed, idx, smp.config_hash(cfg, ignore_seed=True))
        cfg = dataclasses.replace(cfg, seed=seed)
        obs = smp.make_observable("point", t=event.t, line=event.line)
        res = smp.run_chain(cfg, n_samples, [obs])
        vals = res.values(obs.name)
        estimates.append(prob_ci(vals > event.threshold, level=level))
        settings.append((cfg.n, cfg.grid.left, cfg.grid.right))
    non_dec = all(estimates[i + 1].upper >= estimates[i].lower
                  for i in range(len(estimates) - 1))
    saturated = len(estimates) >= 2 and estimates[-1].overlaps(estimates[-2])
    return ScanResult(settings=settings, estimates=estimates,
                      non_decreasing=non_dec, saturated=saturated)


# ---------------------------------------------------------------------------
# Gibbs consistency

@dataclass
class GibbsResult:
    outside_identical: bool
    min_p_inside: float
    decision: bool


def gibbs_consistency(run, interval: tuple, seed: int = 0,
                      p_floor: float = 0.01) -> GibbsResult:
    """One extra block resampling on `interval` applied to each retained
    stationary state must leave inside marginals distribution-equal and
    outside values bit-identical.

    `run` is a RunResult produced with keep_paths=True.
    """
    from . import sampler as smp

    if run.paths is None:
        raise ValueError("gibbs_consistency needs run_chain(..., keep_paths=True)")
    cfg = run.config
    g = cfg.grid
    lo = g.index_of(interval[0])
    hi = g.index_of(interval[1])
    if hi <= lo:
        raise ValueError("empty resampling interval")
    n_samples = run.paths.shape[0]
    resampled = np.empty_like(run.paths)
    rng = np.random.default_rng(seed)
    work = smp.init_state(cfg)
    work.rng = rng
    for s in range(n_samples):
        work.ensemble.lines[:] = run.paths[s]
        for line in range(1, cfg.n + 1):
            smp.resample_block(work, line, lo, hi)
        resampled[s] = work.ensemble.lines

    outside = np.ones(g.n_nodes, dtype=bool)
    outside[lo + 1:hi] = False
    outside_identical = bool(
        np.array_equal(run.paths[:, :, outside], resampled[:, :, outside]))
    # one-point marginal per line at the interval midpoint; the paired
    # pre/post samples are positively correlated, which only shrinks the
    # KS statistic relative to the independent-sample null
    mid = (lo + hi) // 2
    min_p = 1.0
    for line in range(cfg.n):
        p = ks_2samp(run.paths[:, line, mid], resampled[:, line, mid]).pvalue
        min_p = min(min_p, float(p))
    return GibbsResult(outside_identical=outside_identical, min_p_inside=min_p,
                       decision=outside_identical and min_p > p_floor)
