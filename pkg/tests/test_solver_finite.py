import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmfg.graphon import Graphon, PopulationStructure, reference_graphons
from gmfg.grid import MeanFieldGrid
from gmfg.model import AffineKernel, LinearReward, ModelSpec, malware_model
from gmfg.solver_finite import (FixedPointConfig, FixedPointError, best_response, pure_prescriptions, solve_finite,
                                stage_fixed_point, value_bound)

from oracles import stage_by_enumeration
from test_model import random_model

H, I = 0, 1
ONE = PopulationStructure.single()


def mu_inf(m):
    return np.array([[1 - m, m]])


def enumeration_mismatches(policy, tol=1e-9):
    """Compare every grid point whose selected prescription is pure and tie-free
    against exhaustive enumeration of pure prescriptions.

    Returns (number of points checked, largest value mismatch, score shortfall).
    """
    model, grid = policy.model, policy.grid
    coupling = policy.structure.coupling[0, 0]
    checked, worst, shortfall = 0, 0.0, 0.0
    for t in range(1, policy.horizon + 1):
        table = policy.values[t]
        last = t == policy.horizon and not np.any(table)
        v_next = None if last else (lambda nxt, table=table: grid.interpolate(table, nxt[None])[0])
        for p, mu in enumerate(grid.nodes):
            gamma = policy.gammas[t - 1, p, 0]
            if not np.all((gamma == 0) | (gamma == 1)):
                continue
            cands = stage_by_enumeration(model, coupling, mu[0], v_next)
            qv_sel = next(qv for g, qv, _ in cands if np.array_equal(g, gamma))
            srt = np.sort(qv_sel, axis=-1)
            if model.n_actions > 1 and np.any(srt[:, -1] - srt[:, -2] <= policy.cfg.tie_tolerance):
                continue
            checked += 1
            value = (gamma * qv_sel).sum(-1)
            worst = max(worst, float(np.max(np.abs(value - policy.values[t - 1, p, 0]))))
            eq = [(g * qv).sum(-1).sum() for g, qv, gain in cands if gain <= policy.cfg.tol]
            shortfall = max(shortfall, max(eq) - value.sum())
    return checked, worst, shortfall


def test_myopic_stage():
    res = stage_fixed_point(malware_model(), ONE, mu_inf(0.5))
    assert res.gamma[0, I].tolist() == [1.0, 0.0]
    assert res.gamma[0, H].tolist() == [1.0, 0.0]
    assert res.residual == 0.0


def test_zero_discount_is_myopic():
    m = malware_model(discount=0.0, horizon=4)
    pol = solve_finite(m, ONE, MeanFieldGrid(1, 2, 11))
    assert np.all(pol.gammas[..., I, 0] == 1.0)
    assert np.allclose(pol.values[:-1, :, 0, I], -0.3)


def test_single_action_trivial():
    m = ModelSpec(("a", "b"), ("only",), np.zeros((2, 1, 2)), np.zeros((2, 1)),
                  AffineKernel(np.array([[[0.5, 0.5]], [[0.2, 0.8]]]), np.zeros((2, 1, 2))),
                  LinearReward(np.array([[1.0], [2.0]])), 0.9, 2)
    res = stage_fixed_point(m, ONE, np.array([[0.3, 0.7]]))
    assert res.gamma.tolist() == [[[1.0], [1.0]]]
    assert res.iterations == 1


def test_horizon_one_is_myopic():
    m = malware_model(horizon=1)
    pol = solve_finite(m, ONE, MeanFieldGrid(1, 2, 21))
    myo = stage_fixed_point(m, ONE, pol.grid.nodes)
    assert np.array_equal(pol.gammas[0], myo.gamma)
    assert np.all(pol.values[1] == 0)


def test_t2_matches_best_pure_prescription():
    m = malware_model(horizon=2)
    grid = MeanFieldGrid(1, 2, 101)
    pol = solve_finite(m, ONE, grid)
    p = grid.node_index(mu_inf(0.5))
    v_next = lambda nxt: grid.interpolate(pol.values[1], nxt[None])[0]
    cands = stage_by_enumeration(m, 1.0, np.array([0.5, 0.5]), v_next)
    eq = [c for c in cands if c[2] <= 1e-8]
    best = max(eq, key=lambda c: (c[0] * c[1]).sum())
    assert np.array_equal(pol.gammas[0, p, 0], best[0])
    assert np.allclose(pol.values[0, p, 0], (best[0] * best[1]).sum(-1), atol=1e-12)


def test_value_consistency_t3():
    # recompute V_t from the stored prescriptions with explicit expectations
    m = malware_model(horizon=3)
    grid = MeanFieldGrid(1, 2, 51)
    pol = solve_finite(m, ONE, grid)
    xs = np.linspace(0, 1, 51)
    for t in range(1, 4):
        for p in range(51):
            mi = 1 - grid.nodes[p, 0, 0]
            g = pol.gammas[t - 1, p, 0]
            infect = 0.9 * mi
            Q = np.array([[[1 - infect, infect], [1, 0]], [[0, 1], [1, 0]]])
            nxt_i = sum((1 - mi if x == 0 else mi) * g[x, a] * Q[x, a, 1] for x in range(2) for a in range(2))
            Vn = np.array([np.interp(1 - nxt_i, xs, pol.values[t, :, 0, x]) for x in range(2)])
            R = np.array([[0.0, -0.2], [-0.3, -0.5]])
            V = [sum(g[x, a] * (R[x, a] + 0.9 * Q[x, a] @ Vn) for a in range(2)) for x in range(2)]
            assert np.allclose(V, pol.values[t - 1, p, 0], atol=1e-10)


@pytest.mark.parametrize("g", reference_graphons(), ids=lambda g: g.label)
def test_repair_monotone_in_healthy_mass(g):
    m = malware_model(horizon=10)
    s = PopulationStructure.from_graphon(g, model=m)
    pol = solve_finite(m, s)
    rep = pol.gammas[..., 0, I, 1]  # (T, P); node order is increasing healthy mass
    assert np.all(np.diff(rep, axis=1) >= -1e-9)


def test_value_bound_holds():
    m = malware_model(horizon=6)
    pol = solve_finite(m, ONE, MeanFieldGrid(1, 2, 41))
    for t in range(1, 7):
        assert np.abs(pol.values[t - 1]).max() <= value_bound(m.reward_bound, 0.9, 7 - t) + 1e-12
    assert value_bound(0.5, 1.0, 3) == 1.5


def test_fixed_point_residual_at_every_node():
    m = malware_model(horizon=4)
    s = PopulationStructure.from_graphon(Graphon.erdos_renyi(0.8), model=m)
    pol = solve_finite(m, s, MeanFieldGrid(1, 2, 41))
    for t in range(1, 5):
        cont = None if t == 4 else pol.continuation(t)
        from gmfg.solver_finite import stage_qvalues

        qv = stage_qvalues(m, s, pol.grid.nodes, pol.gammas[t - 1], cont)
        br = best_response(qv)
        assert np.max(np.abs(qv.max(-1) - (pol.gammas[t - 1] * qv).sum(-1))) <= pol.cfg.tol
        pure = np.all((pol.gammas[t - 1] == 0) | (pol.gammas[t - 1] == 1), axis=(1, 2, 3))
        assert np.array_equal(br[pure], pol.gammas[t - 1][pure])


def test_threads_do_not_change_results():
    m = malware_model(horizon=3)
    s = PopulationStructure.from_graphon(Graphon.stochastic_block(0.9, 0.4, 0.3, 4), model=m)
    a = solve_finite(m, s, MeanFieldGrid(2, 2, 11))
    b = solve_finite(m, s, MeanFieldGrid(2, 2, 11), FixedPointConfig(threads=3))
    assert np.array_equal(a.gammas, b.gammas) and np.array_equal(a.values, b.values)


def test_deterministic():
    m = malware_model(horizon=3)
    a = solve_finite(m, ONE, MeanFieldGrid(1, 2, 31))
    b = solve_finite(m, ONE, MeanFieldGrid(1, 2, 31))
    assert np.array_equal(a.gammas, b.gammas)


def test_failure_is_explicit():
    m = malware_model(horizon=2)
    cfg = FixedPointConfig(max_iters=1, restarts=1, purify=False, enumerate_pure=0, polish=False)
    with pytest.raises(FixedPointError) as exc:
        solve_finite(m, ONE, MeanFieldGrid(1, 2, 11), cfg)
    err = exc.value
    assert err.t == 2 and err.point is not None
    assert err.residual > cfg.tol and err.last_iterate.shape == (1, 2, 2)
    assert "t=2" in str(err)


@pytest.mark.parametrize("kw", [dict(tol=0), dict(damping=0), dict(damping=1.5), dict(restarts=0), dict(lookup="nearest")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FixedPointConfig(**kw)


def test_pure_enumeration():
    P = pure_prescriptions(1, 2, 2, 64)
    assert P.shape == (4, 1, 2, 2)
    assert pure_prescriptions(3, 3, 3, 64) is None


def test_mixed_equilibrium_found():
    # crowding game: each agent picks a side and is penalized by that side's next mass;
    # no pure prescription splits the population evenly, so the equilibrium mixes
    f = np.zeros((2, 2, 2))
    base = np.zeros((2, 2, 2))
    base[:, 0] = [1.0, 0.0]
    base[:, 1] = [0.0, 1.0]
    m = ModelSpec(("l", "r"), ("go_l", "go_r"), f, np.zeros((2, 2)), AffineKernel(base, np.zeros((2, 2, 2))),
                  LinearReward(np.zeros((2, 2))), 1.0, 1)
    grid = MeanFieldGrid(1, 2, 101)
    pol = solve_finite(m, ONE, grid, terminal_value=-grid.nodes)
    mu = grid.nodes[37]
    g = pol.gammas[0, 37]
    nxt = np.einsum("kx,kxa->ka", mu, g)
    assert np.allclose(nxt, 0.5, atol=1e-8)
    assert not np.all((g == 0) | (g == 1))
    assert pol.diagnostics["max_residual"] <= 1e-8


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_oracle_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, horizon=int(rng.integers(1, 4)))
    s = PopulationStructure.single(float(rng.uniform(0.2, 1.0)))
    pol = solve_finite(m, s, MeanFieldGrid(1, m.n_states, int(rng.integers(2, 12))))
    checked, worst, shortfall = enumeration_mismatches(pol)
    assert worst <= 1e-9
    assert shortfall <= 1e-9
