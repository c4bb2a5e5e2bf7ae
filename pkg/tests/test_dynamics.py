import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmfg.dynamics import (ConsistencyError, ConstantPolicy, DomainError, constant_prescription, propagate, trajectory,
                           validate_population, write_trajectory_csv)
from gmfg.graphon import AgentClassGrid, Graphon, PopulationStructure, class_coupling, reference_graphons
from gmfg.model import ModelSpec, kernel, malware_model

from oracles import malware_step, propagate_ensemble
from test_model import random_model

ONE = PopulationStructure.single()
M = malware_model()


def mu_inf(m):
    return np.array([[1 - m, m]])


def test_always_repair_heals():
    g = constant_prescription(M, ONE, "repair")
    for m in (0.0, 0.4, 1.0):
        assert propagate(M, ONE, mu_inf(m), g)[0].tolist() == [1.0, 0.0]


def test_never_repair_step():
    nxt = propagate(M, ONE, mu_inf(0.5), constant_prescription(M, ONE, "no_repair"))
    assert nxt[0, 1] == pytest.approx(0.725, abs=1e-15)
    assert nxt[0, 1] == pytest.approx(malware_step(0.5, 1.0), abs=1e-15)


def test_point_mass_gives_kernel_row():
    mu = np.array([[1.0, 0.0]])
    g = constant_prescription(M, ONE, "no_repair")
    assert np.array_equal(propagate(M, ONE, mu, g), kernel(M, ONE, mu)[:, 0, 0])


def test_trajectory_examples():
    never = ConstantPolicy(constant_prescription(M, ONE, "no_repair"))
    assert len(trajectory(M, ONE, mu_inf(0.5), never, 0)) == 1
    path = trajectory(M, ONE, mu_inf(0.5), never, 2)
    assert path[1][0, 1] == pytest.approx(0.725, abs=1e-15)
    assert path[2][0, 1] == pytest.approx(0.9044375, abs=1e-15)
    heal = ConstantPolicy(constant_prescription(M, ONE, "repair"))
    path = trajectory(M, ONE, mu_inf(0.3), heal, 4)
    assert all(p[0].tolist() == [1.0, 0.0] for p in path[1:])


def test_trajectory_respects_horizon():
    with pytest.raises(ValueError):
        trajectory(M, ONE, mu_inf(0.5), ConstantPolicy(constant_prescription(M, ONE, 0), horizon=2), 3)


def test_trajectory_domain_error_names_t():
    class Bad:
        horizon = None

        def prescription(self, t, mu):
            if t == 2:
                raise DomainError("off grid")
            return constant_prescription(M, ONE, 0)

    with pytest.raises(DomainError, match="t=2"):
        trajectory(M, ONE, mu_inf(0.5), Bad(), 3)


def test_mass_error_detected():
    leaky = ModelSpec(("a", "b"), ("u",), np.zeros((2, 1, 2)), np.zeros((2, 1)),
                      lambda d: np.broadcast_to(np.array([0.5, 0.4]), d.shape + (2,)),
                      lambda mu, d: np.zeros(d.shape), 0.9)
    with pytest.raises(Exception) as exc:
        propagate(leaky, ONE, np.array([[0.5, 0.5]]), np.ones((1, 2, 1)))
    assert exc.type.__name__ in ("ConsistencyError", "ModelDefinitionError")


def test_consistency_error_type():
    assert issubclass(ConsistencyError, RuntimeError)


def test_validate_population():
    with pytest.raises(ValueError):
        validate_population([[0.6, 0.6]])
    with pytest.raises(ValueError):
        validate_population([[1.1, -0.1]])


def test_csv_export(tmp_path):
    path = trajectory(M, ONE, mu_inf(0.5), ConstantPolicy(constant_prescription(M, ONE, 0)), 1)
    out = tmp_path / "t.csv"
    write_trajectory_csv(out, M, path)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,class,state,probability"
    assert lines[1:] == ["0,0,healthy,0.5", "0,0,infected,0.5", "1,0,healthy,0.275", "1,0,infected,0.725"]


@given(st.integers(0, 2**31 - 1))
def test_simplex_preserved(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    s = PopulationStructure.from_graphon(reference_graphons(6)[seed % 4], reduce=False)
    mu = rng.dirichlet(np.ones(m.n_states), size=(50, s.K))
    gamma = rng.dirichlet(np.ones(m.n_actions), size=(50, s.K, m.n_states))
    nxt = propagate(m, s, mu, gamma)
    assert nxt.min() >= 0
    assert np.max(np.abs(nxt.sum(-1) - 1)) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    g = reference_graphons(5)[seed % 4]
    s = PopulationStructure.from_graphon(g, reduce=False)
    mu = rng.dirichlet(np.ones(m.n_states), size=s.K)
    gamma = rng.dirichlet(np.ones(m.n_actions), size=(s.K, m.n_states))
    ref = propagate_ensemble(m.interaction, m.transition, class_coupling(g, AgentClassGrid(5)), mu, gamma)
    assert np.allclose(propagate(m, s, mu, gamma), ref, atol=1e-13)


@pytest.mark.parametrize("g", reference_graphons(16), ids=lambda g: g.label)
def test_equivalent_classes_stay_identical(g, rng):
    full = PopulationStructure.from_graphon(g, reduce=False)
    red = PopulationStructure.from_graphon(g, model=M)
    mu1 = rng.dirichlet([1, 1])
    mu = np.tile(mu1, (16, 1))
    red_mu = mu1[None]
    for _ in range(20):
        gamma1 = rng.dirichlet([1, 1], size=2)
        mu = propagate(M, full, mu, np.tile(gamma1, (16, 1, 1)))
        red_mu = propagate(M, red, red_mu, gamma1[None])
        assert np.max(np.abs(mu - mu[0])) <= 1e-12
        assert np.max(np.abs(mu[0] - red_mu[0])) <= 1e-12


def test_monte_carlo_agreement(rng):
    # independent single-agent chains driven by the frozen population path
    s = PopulationStructure.from_graphon(Graphon.erdos_renyi(0.8), model=M)
    gamma = np.array([[[0.7, 0.3], [0.4, 0.6]]])
    path = trajectory(M, s, mu_inf(0.5), ConstantPolicy(gamma), 5)
    n = 10**5
    x = (rng.random(n) < 0.5).astype(int)
    for t in range(5):
        Q = kernel(M, s, path[t])[0]
        a = (rng.random(n) < gamma[0, x, 1]).astype(int)
        x = (rng.random(n) < Q[x, a, 1]).astype(int)
        p = path[t + 1][0, 1]
        assert abs(x.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12
