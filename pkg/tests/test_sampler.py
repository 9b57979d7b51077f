import math

import numpy as np
import pytest
from scipy import stats as sps

from tiltedlines.core import BoundaryCondition, Ensemble, TimeGrid, TiltSchedule
from tiltedlines.sampler import (
    CheckpointError,
    ConsistencyError,
    SamplerConfig,
    checkpoint,
    config_from_dict,
    config_hash,
    config_to_dict,
    coupled_sweep,
    init_state,
    make_observable,
    resample_block,
    restore,
    run_chain,
    sweep,
    update_endpoints,
)


def _cfg(**kw):
    base = dict(
        n=2,
        grid=TimeGrid(-1.0, 1.0, 20),
        tilts=TiltSchedule.geometric(1.0, 2.0),
        boundary=BoundaryCondition.fixed([2.0, 1.0], [2.0, 1.0]),
        seed=0,
        burnin=20,
    )
    base.update(kw)
    return SamplerConfig(**base)


# ---------------------------------------------------------------------------
# configuration and initialization

def test_config_roundtrip_and_hash():
    cfg = _cfg(floor=np.full(21, 0.1))
    d = config_to_dict(cfg)
    back = config_from_dict(d)
    assert config_hash(back) == config_hash(cfg)
    other = _cfg(floor=np.full(21, 0.1), seed=99)
    assert config_hash(other) != config_hash(cfg)
    assert config_hash(other, ignore_seed=True) == config_hash(cfg, ignore_seed=True)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(n=0)
    with pytest.raises(ValueError):
        _cfg(block_len=1)
    with pytest.raises(ValueError):
        _cfg(sweep_schedule="zigzag")
    with pytest.raises(ValueError):
        _cfg(n=3)  # boundary vectors have length 2


@pytest.mark.parametrize("bc", [
    BoundaryCondition.fixed([2.0, 1.0], [3.0, 0.5]),
    BoundaryCondition.zero(),
    BoundaryCondition.free(),
])
def test_init_state_is_admissible(bc):
    from tiltedlines.core import check_admissible

    st = init_state(_cfg(boundary=bc))
    assert check_admissible(st.ensemble)
    assert st.sweeps_done == 0


def test_init_state_lifts_above_floor():
    from tiltedlines.core import check_admissible

    floor = 0.3 + 0.2 * np.sin(np.linspace(0, 3, 21)) ** 2
    st = init_state(_cfg(boundary=BoundaryCondition.fixed([4.0, 2.0], [4.0, 2.0]),
                         floor=floor))
    assert check_admissible(st.ensemble)


# ---------------------------------------------------------------------------
# determinism and checkpointing

def test_sweeps_are_deterministic():
    a, b = init_state(_cfg()), init_state(_cfg())
    for _ in range(30):
        sweep(a)
        sweep(b)
    np.testing.assert_array_equal(a.ensemble.lines, b.ensemble.lines)
    assert a.sweeps_done == b.sweeps_done == 30


def test_checkpoint_roundtrip_bit_exact():
    st = init_state(_cfg())
    for _ in range(25):
        sweep(st)
    blob = checkpoint(st)
    back = restore(blob)
    np.testing.assert_array_equal(back.ensemble.lines, st.ensemble.lines)
    assert back.rng.bit_generator.state == st.rng.bit_generator.state
    assert back.sweeps_done == st.sweeps_done
    np.testing.assert_array_equal(back.proposals, st.proposals)


def test_split_run_equals_straight_run():
    a = init_state(_cfg())
    for _ in range(60):
        sweep(a)
    b = init_state(_cfg())
    for _ in range(30):
        sweep(b)
    b = restore(checkpoint(b))
    for _ in range(30):
        sweep(b)
    np.testing.assert_array_equal(a.ensemble.lines, b.ensemble.lines)
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


def test_restore_rejects_garbage():
    st = init_state(_cfg())
    blob = checkpoint(st)
    with pytest.raises(CheckpointError):
        restore(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        restore(blob[:-8])  # truncated body
    with pytest.raises(CheckpointError):
        restore(blob[:6])
    bad = bytearray(blob)
    bad[0] = 0x58
    with pytest.raises(CheckpointError):
        restore(bytes(bad))


# ---------------------------------------------------------------------------
# kernel correctness

def test_unconstrained_marginal_matches_bridge_law():
    # far above the wall with no tilt the chain targets the plain bridge:
    # X(t) ~ N(50, (t-l)(r-t)/(r-l)) marginally
    g = TimeGrid(0.0, 1.0, 10)
    cfg = SamplerConfig(n=1, grid=g, tilts=TiltSchedule.geometric(0.0, 2.0),
                        boundary=BoundaryCondition.fixed([50.0], [50.0]),
                        seed=3, burnin=100, thin=5)
    obs = make_observable("point", t=0.4, line=1)
    res = run_chain(cfg, 4000, [obs])
    vals = res.values(obs.name)
    var = 0.4 * 0.6
    p = sps.kstest(vals, "norm", args=(50.0, math.sqrt(var))).pvalue
    assert p > 1e-3


def test_stationarity_against_direct_rejection_sampler():
    # one tilt-free line above the wall: the chain law must match direct
    # rejection sampling of bridges positive at every node
    from tiltedlines.core import sample_bridges

    g = TimeGrid(0.0, 1.0, 10)
    cfg = SamplerConfig(n=1, grid=g, tilts=TiltSchedule.geometric(0.0, 2.0),
                        boundary=BoundaryCondition.fixed([0.8], [0.8]),
                        seed=4, burnin=200, thin=5)
    obs = make_observable("point", t=0.5, line=1)
    res = run_chain(cfg, 8000, [obs])
    rng = np.random.default_rng(44)
    paths = sample_bridges(g, 0.8, 0.8, 60_000, rng)
    keep = np.all(paths[:, 1:-1] > 0, axis=1)
    direct = paths[keep, g.index_of(0.5)]
    p = sps.ks_2samp(res.values(obs.name), direct).pvalue
    assert p > 1e-3


def test_single_node_update_is_exact_truncated_normal():
    # steps=2 has one interior node; resample_block draws it exactly from
    # the truncated normal conditional
    g = TimeGrid(0.0, 0.2, 2)
    cfg = SamplerConfig(n=1, grid=g, tilts=TiltSchedule.geometric(3.0, 2.0),
                        boundary=BoundaryCondition.fixed([0.4], [0.4]), seed=5)
    st = init_state(cfg)
    draws = np.empty(40_000)
    for i in range(draws.size):
        resample_block(st, 1, 0, 2)
        draws[i] = st.ensemble.lines[0, 1]
    dt = g.dt
    mu = 0.4 - 3.0 * dt * dt / 4.0
    sigma = math.sqrt(dt / 2.0)
    a = (0.0 - mu) / sigma
    p = sps.kstest(draws, sps.truncnorm(a, np.inf, loc=mu, scale=sigma).cdf).pvalue
    assert p > 1e-3


def test_chain_matches_dense_oracle_marginal():
    from tiltedlines.oracle import SpaceGrid, transfer_marginals

    g = TimeGrid(-0.5, 0.5, 10)
    tilts = TiltSchedule.geometric(1.0, 2.0)
    bc = BoundaryCondition.fixed([1.5, 0.7], [1.5, 0.7])
    cfg = SamplerConfig(n=2, grid=g, tilts=tilts, boundary=bc, seed=6,
                        burnin=300, thin=2)
    obs = [make_observable("point", t=0.0, line=k) for k in (1, 2)]
    res = run_chain(cfg, 30_000, obs)
    table = transfer_marginals(2, g, tilts, bc, space=SpaceGrid(7.0, 801))
    node = g.index_of(0.0)
    for k in (1, 2):
        vals = np.sort(res.values(obs[k - 1].name))
        xs = table.space.xs
        emp = np.searchsorted(vals, xs, side="right") / vals.size
        ks = float(np.max(np.abs(emp - table.cdf(k, node))))
        assert ks < 0.03, f"line {k}: KS {ks:.4f} against dense oracle"


def test_consistency_error_on_impossible_block():
    st = init_state(_cfg())
    # push the top line below the wall: line 2's window (0, top) is empty
    st.ensemble.lines[0, 5:8] = -0.5
    with pytest.raises(ConsistencyError):
        resample_block(st, 2, 4, 9)


def test_resample_block_argument_checks():
    st = init_state(_cfg())
    with pytest.raises(ValueError):
        resample_block(st, 3, 0, 5)
    with pytest.raises(ValueError):
        resample_block(st, 1, 5, 5)
    with pytest.raises(ValueError):
        resample_block(st, 1, -1, 5)


# ---------------------------------------------------------------------------
# endpoint updates

def test_update_endpoints_requires_free_boundary():
    st = init_state(_cfg())
    with pytest.raises(RuntimeError):
        update_endpoints(st)


def test_free_endpoints_move_and_adapt():
    cfg = _cfg(boundary=BoundaryCondition.free(
        nu=lambda line, x: 0.5 * x * x, eta=lambda line, x: 0.5 * x * x))
    st = init_state(cfg)
    before = st.ensemble.lines[:, [0, -1]].copy()
    scales0 = st.ep_scale.copy()
    for _ in range(200):
        sweep(st)
    assert st.ep_tries == 200 * 2 * cfg.n
    assert st.ep_accepts > 0
    assert not np.array_equal(before, st.ensemble.lines[:, [0, -1]])
    assert not np.array_equal(scales0, st.ep_scale)
    # adaptation freezes outside burn-in
    st.adapting = False
    frozen = st.ep_scale.copy()
    for _ in range(20):
        sweep(st)
    np.testing.assert_array_equal(frozen, st.ep_scale)


# ---------------------------------------------------------------------------
# monotone coupling

def test_coupled_sweep_identical_configs_stay_identical():
    lo, hi = init_state(_cfg(seed=7)), init_state(_cfg(seed=7))
    for _ in range(50):
        coupled_sweep(lo, hi)
    np.testing.assert_array_equal(lo.ensemble.lines, hi.ensemble.lines)


def test_coupled_sweep_preserves_ordering():
    lo = init_state(_cfg(tilts=TiltSchedule.geometric(3.0, 2.0), seed=8))
    hi = init_state(_cfg(tilts=TiltSchedule.geometric(1.0, 2.0), seed=8))
    for _ in range(300):
        coupled_sweep(lo, hi)
        assert np.all(lo.ensemble.lines <= hi.ensemble.lines + 1e-12)


def test_coupling_preconditions():
    lo = init_state(_cfg(tilts=TiltSchedule.geometric(1.0, 2.0)))
    hi = init_state(_cfg(tilts=TiltSchedule.geometric(2.0, 2.0)))
    with pytest.raises(ValueError, match="tilts"):
        coupled_sweep(lo, hi)  # hi has the stronger tilt: wrong way round
    free = init_state(_cfg(boundary=BoundaryCondition.free()))
    with pytest.raises(ValueError, match="boundary"):
        coupled_sweep(free, free)
    other = init_state(_cfg(grid=TimeGrid(-1.0, 1.0, 10)))
    with pytest.raises(ValueError, match="grid"):
        coupled_sweep(init_state(_cfg()), other)


# ---------------------------------------------------------------------------
# observables and the chain driver

def test_make_observable_names_and_errors():
    o = make_observable("point", t=0.5, line=2)
    assert o.name == "point_0.5_2"
    assert make_observable("area").name == "area_1"
    with pytest.raises(ValueError):
        make_observable("volume")


def test_run_chain_table_matches_kept_paths():
    from tiltedlines.core import area

    cfg = _cfg(thin=2)
    obs = [make_observable("point", t=0.0, line=2), make_observable("area", line=1)]
    res = run_chain(cfg, 50, obs, keep_paths=True)
    assert res.paths.shape == (50, 2, 21)
    node = cfg.grid.index_of(0.0)
    np.testing.assert_array_equal(res.values(obs[0].name), res.paths[:, 1, node])
    expect = [area(res.paths[s, 0], cfg.grid) for s in range(50)]
    np.testing.assert_allclose(res.values(obs[1].name), expect, atol=1e-12)
    assert res.diagnostics[obs[0].name]["ess"] > 0
    assert res.diagnostics["_chain"]["sweeps"] == res.state.sweeps_done


def test_run_chain_resumes_from_state():
    cfg = _cfg()
    st = init_state(cfg)
    for _ in range(10):
        sweep(st)
    res = run_chain(cfg, 5, [], state=st)
    # burnin runs again on the supplied state, then 5 thinned sweeps
    assert res.state.sweeps_done == 10 + cfg.burnin + 5
