import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmfg.graphon import Graphon, PopulationStructure, reference_graphons
from gmfg.model import (AffineKernel, LinearReward, ModelDefinitionError, ModelSpec, aggregate, check_assumptions,
                        kernel, malware_model, rewards)

H, I = 0, 1
ONE = PopulationStructure.single()


def mu_inf(m):
    return np.array([[1 - m, m]])


def random_model(rng, nx=None, na=None, discount=0.9, horizon=3):
    """Random model with an affine kernel that stays a distribution for drives in [0, 1]."""
    nx = nx or int(rng.integers(1, 4))
    na = na or int(rng.integers(1, 4))
    f = rng.random((nx, na, nx)) / nx
    p0 = rng.dirichlet(np.ones(nx), size=(nx, na))
    p1 = rng.dirichlet(np.ones(nx), size=(nx, na))
    kern = AffineKernel(p0, p1 - p0)
    reward = LinearReward(rng.normal(size=(nx, na)), rng.normal(size=(nx, na)), rng.normal(size=(nx, na, nx)))
    return ModelSpec(tuple(f"s{i}" for i in range(nx)), tuple(f"a{i}" for i in range(na)), f,
                     np.zeros((nx, na)), kern, reward, discount, horizon)


def test_zero_interaction_aggregate():
    m = malware_model(q=0.0)
    assert np.all(aggregate(m, ONE, mu_inf(0.7)) == 0)


def test_malware_aggregate_values():
    m = malware_model()
    assert aggregate(m, ONE, mu_inf(1.0))[0, H, 0] == pytest.approx(0.9, abs=1e-15)
    assert aggregate(m, ONE, mu_inf(0.5))[0, H, 0] == pytest.approx(0.45, abs=1e-15)


def test_aggregate_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate(malware_model(), ONE, np.array([0.5, 0.3, 0.2]))


def test_malware_kernel_examples():
    m = malware_model()
    for mi in (0.0, 0.3, 1.0):
        Q = kernel(m, ONE, mu_inf(mi))[0]
        assert Q[H, 1].tolist() == [1.0, 0.0]
        assert Q[I, 1].tolist() == [1.0, 0.0]
        assert Q[I, 0].tolist() == [0.0, 1.0]
    Q = kernel(m, ONE, mu_inf(0.5))[0]
    assert Q[H, 0] == pytest.approx([0.55, 0.45], abs=1e-15)


def test_malware_rewards():
    R = rewards(malware_model(), ONE, mu_inf(0.4))[0]
    assert R == pytest.approx(np.array([[0.0, -0.2], [-0.3, -0.5]]))


def test_invalid_kernel_reports_offending_pair():
    base = np.zeros((2, 2, 2))
    base[..., 0] = 1
    slope = np.zeros((2, 2, 2))
    slope[1, 0] = [-2.0, 2.0]  # leaves [0, 1] once the drive passes 0.5
    f = np.full((2, 2, 2), 1.0)
    m = ModelSpec(("a", "b"), ("u", "v"), f, np.zeros((2, 2)), AffineKernel(base, slope), LinearReward(np.zeros((2, 2))), 0.9)
    with pytest.raises(ModelDefinitionError, match=r"x=1, a=0"):
        kernel(m, ONE, np.array([[0.5, 0.5]]))


def test_unbounded_reward_rejected():
    def inverse(mu, drive):
        return np.broadcast_to((1.0 / mu[..., :1])[..., None], drive.shape)

    with pytest.raises(ModelDefinitionError):
        malware_model().with_(reward=inverse)


@pytest.mark.parametrize("disc,horizon", [(1.0, None), (0.0, None), (1.2, 5), (0.9, 0), (0.9, 2.5)])
def test_discount_and_horizon_validation(disc, horizon):
    with pytest.raises(ValueError):
        malware_model(discount=disc, horizon=horizon)


def test_finite_horizon_allows_unit_discount():
    assert malware_model(discount=1.0, horizon=3).discount == 1.0


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        ModelSpec((), ("a",), np.zeros((0, 1, 0)), np.zeros((0, 1)), None, None, 0.5, 1)


def test_hash_stable_and_sensitive():
    assert malware_model().hash() == malware_model().hash()
    assert malware_model().hash() != malware_model(q=0.8).hash()
    assert malware_model().hash() != malware_model(discount=0.8).hash()


def test_assumption_report():
    rep = check_assumptions(malware_model())
    assert rep["A1"]["holds"] and rep["A1"]["n_actions"] == 2
    assert rep["A5"]["singleton"] and not rep["A5"]["checked"]
    rep = check_assumptions(malware_model(), argmax_ties=[{"t": 1, "node": 3, "class": 0, "state": 1}])
    assert not rep["A5"]["singleton"] and rep["A5"]["n_ties"] == 1
    assert rep["reward_bound"] == pytest.approx(0.5)


def test_a5_scan_flags_exact_tie():
    # at delta = 0 an infected node compares -0.3 with -0.5: no tie; lambda = 0 makes repair free and ties the healthy row
    from gmfg.solver_finite import argmax_ties, stage_qvalues

    m = malware_model(lam=0.0, horizon=1)
    mus = np.stack([mu_inf(x) for x in np.linspace(0, 1, 101)])
    qv = stage_qvalues(m, ONE, mus, np.full((101, 1, 2, 2), 0.5))
    ties = argmax_ties(qv)
    # healthy: no_repair 0 vs repair 0 -> tie everywhere; infected: -0.3 vs -0.3 -> tie
    assert ties.all()
    qv = stage_qvalues(malware_model(horizon=1), ONE, mus, np.full((101, 1, 2, 2), 0.5))
    assert not argmax_ties(qv).any()


@given(st.integers(0, 2**31 - 1))
def test_kernel_valid_random_sweep(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    g = reference_graphons(8)[seed % 4]
    s = PopulationStructure.from_graphon(g, reduce=False)
    mu = rng.dirichlet(np.ones(m.n_states), size=(200, s.K))
    Q = kernel(m, s, mu)
    assert Q.shape == (200, 8, m.n_states, m.n_actions, m.n_states)
    assert Q.min() >= 0
    assert np.max(np.abs(Q.sum(-1) - 1)) <= 1e-12


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_aggregate_linear(seed, lam):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    s = PopulationStructure.from_graphon(Graphon.stochastic_block(0.9, 0.2, 0.5, 4), reduce=False)
    a, b = rng.dirichlet(np.ones(m.n_states), size=(2, s.K))
    lhs = aggregate(m, s, lam * a + (1 - lam) * b)
    rhs = lam * aggregate(m, s, a) + (1 - lam) * aggregate(m, s, b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_zero_graphon_kernel_ignores_population(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    s = PopulationStructure.from_graphon(Graphon.erdos_renyi(0.0, 4), reduce=False)
    a, b = rng.dirichlet(np.ones(m.n_states), size=(2, s.K))
    assert np.array_equal(kernel(m, s, a), kernel(m, s, b))
