import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from mcam.lattice import build_grid, transitions
from mcam.model import Control, RegimeParams, State, is_admissible, table1_params
from mcam.solver import (
    ActionTable,
    ConvergenceError,
    ReducibleChainError,
    TabularPolicy,
    action_grid,
    apply_boundary,
    bellman_backup,
    boundary_extrapolate,
    brute_force_gain,
    gain_of_policy,
    policy_chain,
    policy_values,
    reference_state,
    relative_value_iteration,
    rvi_solve,
    stationary_distribution,
    stationary_vector,
)

import oracles
from helpers import random_policy

U_EX = Control(1.0, 0.3, 0.062)


def single_regime(**kw):
    base = dict(regimes=(RegimeParams(0.13, 0.08, 0.2),), Q=np.zeros((1, 1)), K=0.5, B=1.0)
    base.update(kw)
    return table1_params(**base)


# -- action grid ---------------------------------------------------------------


def test_action_grid_above_threshold(table1):
    acts = action_grid(table1, State(5.0, 0), (11, 11, 11))
    assert 0 < len(acts) <= 11 * 11 * 12
    assert all(is_admissible(table1, State(5.0, 0), u) for u in acts)
    assert acts == sorted(acts, key=lambda u: u.astuple())


def test_action_grid_below_threshold(table1):
    acts = action_grid(table1, State(1.0, 1), (11, 11, 11))
    assert len(acts) == 11
    assert all(u.s == 0 and u.l == 0 for u in acts)


def test_action_grid_corners(table1):
    acts = {u.astuple() for u in action_grid(table1, State(5.0, 0), (2, 2, 2))}
    assert (0.4, 0.0, 0.062) in acts and (1.0, 0.0, 0.062) in acts
    assert (1.0, 0.0, 1.0) in acts and (1.0, 0.0, 0.0) in acts
    assert not any(s == 0.3 and l == 1.0 for _, s, l in acts)


def test_action_grid_rejects_low_resolution(table1):
    with pytest.raises(ValueError):
        action_grid(table1, State(5.0, 0), (11, 1, 11))


# -- single backups ---------------------------------------------------------------


def test_bellman_backup_examples(table1):
    g = build_grid(10, 0.1, 2)
    st0 = State(4.0, 0)
    row = transitions(table1, g, st0, U_EX)
    f = 0.09302
    assert bellman_backup(st0, np.zeros((2, g.n)), U_EX, g, table1) == pytest.approx(f * row.dt, abs=1e-12)
    assert bellman_backup(st0, np.full((2, g.n), 3.5), U_EX, g, table1) == pytest.approx(3.5 + f * row.dt, abs=1e-12)
    k = g.index_of(4.0)
    V = np.zeros((2, g.n))
    V[0, k + 1], V[0, k - 1] = 1.0, -1.0
    S = bellman_backup(st0, V, U_EX, g, table1)
    # the reference probabilities are rounded to 5 decimals, so their difference carries 1e-5
    assert S == pytest.approx(-0.02094 + 0.09302 * 0.067568, abs=1e-5)
    assert S == pytest.approx(row.p_up - row.p_down + f * row.dt, abs=1e-12)


@given(k=st.integers(1, 41), i=st.integers(0, 1), bump=st.floats(0.0, 10.0), where=st.integers(0, 85))
def test_bellman_backup_monotone(k, i, bump, where):
    p = table1_params()
    g = build_grid(10, 0.5, 2)
    x = float(g.nodes[k])
    u = Control(0.8, 0.2, 0.062) if x > p.K else Control(0.8, 0.0, 0.0)
    V = np.linspace(-1, 1, 2 * g.n).reshape(2, g.n)
    W = V.copy()
    W.flat[where] += bump
    assert bellman_backup(State(x, i), W, u, g, p) >= bellman_backup(State(x, i), V, u, g, p)


def test_centering_shift_keeps_argmax(table1, rng):
    g = build_grid(10, 0.5, 2)
    V = rng.normal(size=(2, g.n))
    c = rng.normal() * 100
    for x in (-3.0, 1.0, 4.5, 9.5):
        acts = action_grid(table1, State(x, 1), (5, 5, 5))
        s1 = [bellman_backup(State(x, 1), V, u, g, table1) for u in acts]
        s2 = [bellman_backup(State(x, 1), V + c, u, g, table1) for u in acts]
        assert int(np.argmax(s1)) == int(np.argmax(s2))


def test_boundary_extrapolate_examples():
    x = np.linspace(-2, 2, 9)
    left, right = boundary_extrapolate(2 * x + 1)
    assert left == pytest.approx(2 * (x[0] - 0.5) + 1, abs=1e-12)
    assert right == pytest.approx(2 * (x[-1] + 0.5) + 1, abs=1e-12)
    assert boundary_extrapolate(np.array([5.0, 3.0, 0.0]))[0] == 7.0
    assert boundary_extrapolate(np.full(4, 2.5)) == (2.5, 2.5)
    V = np.array([[0.0, 5.0, 3.0, 1.0, 0.0]])
    apply_boundary(V, "extrapolate")
    assert V[0, 0] == 7.0 and V[0, -1] == -1.0


# -- stationary distributions ---------------------------------------------------------------


def test_two_state_flip_chain():
    nu = stationary_vector(np.array([[0.0, 1.0], [1.0, 0.0]]), "linear_solve")
    np.testing.assert_allclose(nu, [0.5, 0.5], atol=1e-15)
    nu = stationary_vector(np.array([[0.0, 1.0], [1.0, 0.0]]), "power_iteration")
    np.testing.assert_allclose(nu, [0.5, 0.5], atol=1e-12)


def test_birth_death_detailed_balance():
    # nu1 = nu0 * p01 / p10, nu2 = nu1 * p12 / p21
    p01, p10, p12, p21 = 0.3, 0.2, 0.5, 0.4
    P = np.array([[1 - p01, p01, 0], [p10, 1 - p10 - p12, p12], [0, p21, 1 - p21]])
    w = np.array([1.0, p01 / p10, p01 / p10 * p12 / p21])
    for method in ("linear_solve", "power_iteration"):
        np.testing.assert_allclose(stationary_vector(sp.csr_matrix(P), method), w / w.sum(), atol=1e-12)


def test_reducible_chain_raises():
    with pytest.raises(ReducibleChainError):
        stationary_vector(sp.identity(3, format="csr"), "linear_solve")


def test_methods_agree_on_random_policies(table1, rng):
    g = build_grid(10, 0.5, 2)
    for _ in range(5):
        pol = random_policy(table1, g, rng)
        lin = stationary_distribution(pol, g, table1, "linear_solve")
        pw = stationary_distribution(pol, g, table1, "power_iteration")
        np.testing.assert_allclose(lin, pw, atol=1e-9)
        assert lin.sum() == pytest.approx(1.0, abs=1e-10)


# -- gains ---------------------------------------------------------------


def test_gain_matches_independent_dense_oracle(table1, rng):
    g = build_grid(10, 0.5, 2)
    for _ in range(5):
        pol = random_policy(table1, g, rng)
        est = gain_of_policy(pol, g, table1)
        P, dt, f, _ = oracles.dense_chain(table1, g.h, table1.B, lambda x, i: pol.control(State(x, i)).astuple())
        assert est.gamma == pytest.approx(oracles.gain(P, dt, f), abs=1e-10)
        assert est.residual <= 1e-12
        assert est.diagnostics["omega"].sum() == pytest.approx(1.0, abs=1e-12)
        Ps, dts, fs = policy_chain(pol, g, table1)
        assert brute_force_gain(Ps, dts, fs) == pytest.approx(est.gamma, abs=1e-10)


def test_constant_reward_gain(table1, rng):
    p = table1.replace(constant_reward=0.4321)
    g = build_grid(10, 0.5, 2)
    assert gain_of_policy(random_policy(p, g, rng), g, p).gamma == pytest.approx(0.4321, abs=1e-10)


def test_constant_dt_reduces_to_unweighted_mean(rng):
    P = rng.random((6, 6))
    P /= P.sum(axis=1, keepdims=True)
    f = rng.normal(size=6)
    nu = stationary_vector(P)
    assert brute_force_gain(P, np.full(6, 0.37), f) == pytest.approx(float(f @ nu), abs=1e-12)


def test_policy_values_solve_the_evaluation_equation(table1, rng):
    g = build_grid(10, 0.5, 2)
    pol = random_policy(table1, g, rng)
    V, gam = policy_values(pol, g, table1)
    assert gam == pytest.approx(gain_of_policy(pol, g, table1).gamma, abs=1e-10)
    y0, r = reference_state(g)
    assert V[r, y0] == pytest.approx(0.0, abs=1e-12)
    for i in range(2):
        for k in range(1, g.n - 1):
            S = bellman_backup(State(float(g.nodes[k]), i), V, pol.control(State(float(g.nodes[k]), i)), g, table1, gain=gam)
            assert S == pytest.approx(V[i, k], abs=1e-8)


# -- relative value iteration ---------------------------------------------------------------


def test_rvi_constant_reward(table1):
    p = table1.replace(constant_reward=0.25)
    g = build_grid(10, 1.0, 2)
    pol, V, est = rvi_solve(p, g, (3, 3, 3))
    assert est.gamma == pytest.approx(0.25, abs=1e-10)
    # iterates stop within the sweep tolerance; the exact relative values are flat
    assert np.ptp(V.values) < 1e-3
    Vp, gam = policy_values(pol, g, p)
    assert gam == pytest.approx(0.25, abs=1e-12)
    assert np.ptp(Vp) < 1e-9


def test_rvi_single_control_matches_forced_policy():
    p = single_regime()
    g = build_grid(1.0, 0.5, 0.5)
    u = Control(0.7, 0.1, 0.0)
    only = lambda st: [u if st.x > p.K else Control(0.7, 0.0, 0.0)]  # noqa: E731
    pol, _, est = rvi_solve(p, g, action_fn=only)
    forced = TabularPolicy.constant(p, g, u)
    assert est.gamma == pytest.approx(gain_of_policy(forced, g, p).gamma, abs=1e-10)
    P, dt, f, _ = oracles.dense_chain(p, 0.5, 1.0, lambda x, i: forced.control(State(x, i)).astuple())
    assert est.gamma == pytest.approx(oracles.gain(P, dt, f), abs=1e-10)


def test_rvi_finds_best_policy_by_enumeration():
    """On a tiny problem every deterministic policy can be scored exactly."""
    p = table1_params(B=1.0, K=0.5)
    g = build_grid(1.0, 0.5, 0.5)

    def actions(x, i):
        if x <= p.K:
            return [(0.4, 0.0, 0.0), (1.0, 0.0, 0.0)]
        return [(0.4, 0.3, 0.0), (1.0, 0.0, 0.5)]

    best = oracles.best_gain_by_enumeration(p, g.h, p.B, actions)
    _, _, est = rvi_solve(p, g, action_fn=lambda st: [Control(*u) for u in actions(st.x, st.regime)])
    assert est.gamma == pytest.approx(best, abs=1e-9)


def test_rvi_raises_when_sweeps_run_out(table1):
    with pytest.raises(ConvergenceError) as exc:
        rvi_solve(table1, build_grid(10, 1.0, 2), (3, 3, 3), max_sweeps=5)
    assert np.isfinite(exc.value.residual)


def _synthetic_table(rng, m0, n_int, A, dt):
    """Random action table with one dt; as on the lattice, switching is then action-free."""
    shape = (m0, n_int, A)
    sw = rng.uniform(0.0, 0.2, (m0, n_int, m0))
    sw[np.arange(m0), :, np.arange(m0)] = 0.0
    stay = 1.0 - sw.sum(axis=-1, keepdims=True)
    up = rng.random(shape)
    p_up = stay * up
    controls = np.zeros(shape + (3,))
    controls[..., 0] = np.arange(A) / A
    return ActionTable(
        controls=controls,
        valid=np.ones(shape, dtype=bool),
        p_up=p_up,
        p_down=stay - p_up,
        p_switch=np.broadcast_to(sw[:, :, None, :], shape + (m0,)).copy(),
        dt=np.full(shape, dt),
        fdt=rng.normal(size=shape) * dt,
    )


@pytest.mark.parametrize("centering", ["per_regime", "scalar"])
def test_variants_agree_when_dt_is_constant(rng, centering):
    g = build_grid(2.0, 0.5, 1.0)
    for _ in range(3):
        table = _synthetic_table(rng, 2, g.n - 2, 4, 0.3)
        j1, _ = relative_value_iteration(table, g, 1e-12, 200_000, "semi_mdp")
        j2, _ = relative_value_iteration(table, g, 1e-12, 200_000, "paper", centering=centering)
        np.testing.assert_array_equal(j1, j2)


@pytest.fixture(scope="module")
def coarse_solution():
    p = table1_params()
    g = build_grid(10, 0.5, 2)
    return p, g, rvi_solve(p, g)


def test_rvi_table1_coarse_gain(coarse_solution):
    _, _, (pol, V, est) = coarse_solution
    assert abs(est.gamma - 0.28) <= 0.03
    assert est.residual < 1e-6
    assert est.diagnostics["iteration_gain"] == pytest.approx(est.gamma, abs=1e-4)


def test_rvi_returns_admissible_policy(coarse_solution):
    p, g, (pol, _, _) = coarse_solution
    assert pol.admissible(p).all()


def test_rvi_values_are_the_policy_values(coarse_solution):
    p, g, (pol, V, est) = coarse_solution
    Vp, gam = policy_values(pol, g, p)
    assert gam == pytest.approx(est.gamma, abs=1e-10)
    assert np.max(np.abs(Vp - V.values)) < 1e-2


def test_rvi_gain_does_not_depend_on_reference(coarse_solution):
    p, g, (_, _, est) = coarse_solution
    _, _, other = rvi_solve(p, g, reference=(g.index_of(5.0), 1))
    assert abs(other.gamma - est.gamma) < 1e-6
