import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcam.lattice import (
    AlignmentError,
    BoundaryFlag,
    backup_and_gradient,
    build_grid,
    chain_step_moments,
    transition_arrays,
    transitions,
)
from mcam.model import Control, State, coefficients, table1_params

from oracles import coeffs

U_EX = Control(1.0, 0.3, 0.062)


def test_grid_examples():
    g = build_grid(10, 0.5, 2)
    assert g.n == 43 and g.K_index == 25 and g.nodes[25] == 2.0
    assert build_grid(10, 0.1, 2).n == 203
    np.testing.assert_array_equal(build_grid(1, 1, 1).nodes, [-2, -1, 0, 1, 2])


def test_grid_nodes_exact_at_landmarks():
    g = build_grid(10, 0.1, 2)
    assert g.nodes[g.K_index] == 2.0
    assert g.nodes[1] == -10.0 and g.nodes[-2] == 10.0
    assert 0.0 in g.nodes
    np.testing.assert_allclose(np.diff(g.nodes), 0.1, atol=1e-12)
    assert g.boundary_flag(0) is BoundaryFlag.LEFT_REFLECT
    assert g.boundary_flag(g.n - 1) is BoundaryFlag.RIGHT_REFLECT


@pytest.mark.parametrize("B,h,K", [(10, 0.3, 2), (10, 0.5, 2.2), (10.05, 0.1, 2)])
def test_grid_misalignment_raises(B, h, K):
    with pytest.raises(AlignmentError):
        build_grid(B, h, K)


def test_subgrid_indices():
    coarse, fine = build_grid(10, 0.5, 2), build_grid(10, 0.1, 2)
    idx = fine.subgrid_indices(coarse)
    np.testing.assert_allclose(fine.nodes[idx], coarse.interior_nodes, atol=1e-12)


def test_transition_example(table1):
    g = build_grid(10, 0.1, 2)
    row = transitions(table1, g, State(4.0, 0), U_EX)
    # hand evaluation: D = 0.1444 + 0.1 * 0.03098 + 0.01 * 0.05
    assert row.D == pytest.approx(0.147998, abs=1e-9)
    assert row.p_up == pytest.approx(0.48784, abs=5e-6)
    assert row.p_down == pytest.approx(0.50878, abs=5e-6)
    assert row.p_switch[1] == pytest.approx(0.003378, abs=5e-7)
    assert row.p_switch[0] == 0.0
    assert row.dt == pytest.approx(0.067568, abs=5e-7)
    assert row.total() == pytest.approx(1.0, abs=1e-12)


def test_transition_zero_drift_is_symmetric(table1):
    # a = 1 - rho / beta = 0.4 cancels the drift below K
    g = build_grid(10, 0.1, 2)
    u = Control(0.4, 0.0, 0.0)
    assert coefficients(table1, 1.0, 0, 0.4, 0, 0).drift == pytest.approx(0.0, abs=1e-15)
    row = transitions(table1, g, State(1.0, 0), u)
    assert row.p_up == pytest.approx(row.p_down, abs=1e-15)
    mean, _ = chain_step_moments(row, g.h)
    assert mean == pytest.approx(0.0, abs=1e-15)


def test_reflection_rows(table1):
    g = build_grid(10, 0.1, 2)
    left = transitions(table1, g, State(-10.1, 1), U_EX)
    assert (left.p_up, left.p_down, left.dt) == (1.0, 0.0, 0.0)
    assert left.boundary_flag is BoundaryFlag.LEFT_REFLECT and not left.p_switch.any()
    right = transitions(table1, g, State(10.1, 0), U_EX)
    assert (right.p_up, right.p_down, right.dt) == (0.0, 1.0, 0.0)


def test_step_moments_example(table1):
    g = build_grid(10, 0.1, 2)
    row = transitions(table1, g, State(4.0, 0), U_EX)
    mean, var = chain_step_moments(row, g.h)
    b, sig2 = -0.03098, 0.1444
    assert mean == pytest.approx(-0.0020933, abs=5e-8)
    assert mean == pytest.approx(b * row.dt, abs=1e-15)
    assert var == pytest.approx(sig2 * row.dt + g.h * abs(b) * row.dt - (b * row.dt) ** 2, abs=1e-15)


def test_transitions_agree_with_independent_formulas(table1, rng):
    for h in (0.2, 0.1, 0.05):
        for _ in range(200):
            x = h * rng.integers(-int(10 / h), int(10 / h) + 1)
            i = int(rng.integers(2))
            a, s, l = rng.uniform(0.4, 1), rng.uniform(0, 0.3), rng.choice([0.0, rng.uniform(0.062, 0.7)])
            if x <= table1.K:
                s = l = 0.0
            t = transition_arrays(table1, h, x, i, a, s, l)
            b, sig2, f = coeffs(table1, x, i, a, s, l)
            D = sig2 + h * abs(b) - h * h * table1.Q[i, i]
            assert float(t.p_up) == pytest.approx((sig2 / 2 + h * max(b, 0)) / D, rel=1e-12)
            assert float(t.p_down) == pytest.approx((sig2 / 2 + h * max(-b, 0)) / D, rel=1e-12)
            assert float(t.dt) == pytest.approx(h * h / D, rel=1e-12)


rows = st.tuples(
    st.floats(-10, 10),
    st.integers(0, 1),
    st.floats(0.4, 1.0),
    st.floats(0.0, 0.3),
    st.one_of(st.just(0.0), st.floats(0.062, 0.7)),
    st.sampled_from([0.2, 0.1, 0.05]),
)


@given(rows)
def test_rows_are_probability_vectors(r):
    x, i, a, s, l, h = r
    t = transition_arrays(table1_params(), h, x, i, a, s, l)
    probs = np.concatenate([[t.p_up, t.p_down], np.atleast_1d(t.p_switch)])
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) <= 1e-12
    assert t.dt > 0


@given(rows)
def test_local_consistency(r):
    x, i, a, s, l, h = r
    p = table1_params()
    t = transition_arrays(p, h, x, i, a, s, l)
    b, sig2, dt = float(t.drift), float(t.diffusion_sq), float(t.dt)
    mean = h * float(t.p_up - t.p_down)
    var = h * h * float(t.p_up + t.p_down) - mean**2
    assert abs(mean - b * dt) <= 1e-12
    assert abs(var / dt - sig2) <= h * abs(b) + b * b * dt + 1e-12


def test_dt_bounds_shrink_with_h(table1, rng):
    xs = rng.uniform(-10, 10, 2000)
    i = rng.integers(0, 2, 2000)
    a, s = rng.uniform(0.4, 1, 2000), rng.uniform(0, 0.3, 2000)
    l = np.where(rng.random(2000) < 0.5, 0.0, rng.uniform(0.062, 0.7, 2000))
    dts = [transition_arrays(table1, h, xs, i, a, s, l).dt for h in (0.2, 0.1, 0.05)]
    assert all(d.min() > 0 for d in dts)
    assert dts[0].max() > dts[1].max() > dts[2].max()


def test_backup_gradient_finite_differences(table1, rng):
    """Closed-form dS/du against central differences, away from b = 0."""
    h, eps = 0.1, 1e-6
    checked = 0
    while checked < 100:
        x, i = rng.uniform(2.5, 10), int(rng.integers(2))
        u = np.array([rng.uniform(0.45, 0.95), rng.uniform(0.02, 0.28), rng.uniform(0.1, 0.6)])
        b = float(coefficients(table1, x, i, *u).drift)
        if abs(b) < 1e-3:
            continue
        vu, vd = rng.normal(size=2)
        vs = rng.normal(size=2)
        _, grad = backup_and_gradient(table1, h, x, i, *u, vu, vd, vs, gain=0.27)
        for c in range(3):
            up, dn = u.copy(), u.copy()
            up[c] += eps
            dn[c] -= eps
            Sp, _ = backup_and_gradient(table1, h, x, i, *up, vu, vd, vs, gain=0.27, with_grad=False)
            Sm, _ = backup_and_gradient(table1, h, x, i, *dn, vu, vd, vs, gain=0.27, with_grad=False)
            fd = (Sp - Sm) / (2 * eps)
            assert grad[c] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        checked += 1
