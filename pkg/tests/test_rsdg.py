import time

import numpy as np
import pytest

from robustq.errors import DomainError, StepTooLarge
from robustq.model import derive
from robustq.rsdg import ValueFunction, beta_epsilon, mc_game_value, psi_v, solve_value

# frozen solver outputs at N=4001, x0=2 (grid convergence below shows ~1e-7 accuracy)
V_EXP_X2 = 9.311862082932262
V_FIG1_X2 = 6.41609419958019


def test_frozen_values(exp_vf, fig1_vf):
    assert exp_vf.value(2.0) == pytest.approx(V_EXP_X2, abs=1e-12)
    assert fig1_vf.value(2.0) == pytest.approx(V_FIG1_X2, abs=1e-12)


@pytest.mark.parametrize("which", ["fig1", "exp"])
def test_derivative_bounds(which, fig1_vf, exp_vf):
    vf = fig1_vf if which == "fig1" else exp_vf
    assert vf.dV[0] <= 1e-6 * vf.r
    assert np.all(vf.dV >= -1e-12)
    assert np.max(vf.dV) <= vf.r + 1e-8
    assert np.all(np.diff(vf.V) >= -1e-12)
    above = vf.grid >= vf.beta_eps
    np.testing.assert_allclose(vf.dV[above], vf.r, rtol=1e-6)
    assert np.all(vf.dV[~above] < vf.r)


def test_residual_and_runtime(exp_derived):
    t0 = time.perf_counter()
    vf = solve_value(exp_derived, N=4001)
    assert time.perf_counter() - t0 < 5
    assert vf.residual_max <= 1e-5


def test_beta_epsilon_matches_solver(exp_vf, fig1_vf):
    assert beta_epsilon(exp_vf) == exp_vf.beta_eps
    assert 0 < exp_vf.beta_eps < exp_vf.b
    # with varrho=1 the rejection region is empty
    assert beta_epsilon(fig1_vf) == fig1_vf.b


def test_beta_equals_b_when_never_active(exp_vf):
    flat = ValueFunction(exp_vf.grid, exp_vf.V, np.minimum(exp_vf.dV, 0.5 * exp_vf.r), 0.0,
                         exp_vf.epsilon, 0.0, exp_vf.r, exp_vf.sigma)
    assert beta_epsilon(flat) == flat.b


def test_beta_monotone_in_rejection_cost(exp_spec):
    betas = []
    for f in (1.0, 2.0, 5.0, 10.0):
        spec = exp_spec.with_(r_hat=tuple(f * v for v in exp_spec.r_hat))
        betas.append(solve_value(derive(spec), N=2001).beta_eps)
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(betas, betas[1:]))


def test_value_increases_with_ambiguity(exp_derived):
    # V grows with epsilon here: a larger epsilon makes the adversary's penalty cheaper
    vals = [solve_value(exp_derived, epsilon=e).value(2.0) for e in (0.25, 0.5, 1.0, 2.0)]
    assert np.all(np.diff(vals) > 0)


def test_beta_continuous_in_epsilon(exp_derived):
    eps = np.array([0.25, 0.5, 1.0])
    betas = np.array([solve_value(exp_derived, epsilon=e).beta_eps for e in eps])
    slope = np.abs(np.diff(betas)) / np.diff(eps)
    assert np.all(np.isfinite(slope)) and slope.max() < exp_derived.b


def test_grid_convergence(exp_derived):
    vals = {N: solve_value(exp_derived, N=N) for N in (1001, 2001, 4001)}
    fine = solve_value(exp_derived, N=8001)
    errs = [np.max(np.abs(vals[N].value(fine.grid) - fine.V)) for N in (1001, 2001, 4001)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.0)


def test_psi_v(exp_vf):
    top = exp_vf.epsilon * exp_vf.sigma * exp_vf.r
    assert psi_v(exp_vf, 0.0) == 0.0
    xs = exp_vf.grid[exp_vf.grid >= exp_vf.beta_eps]
    np.testing.assert_allclose(psi_v(exp_vf, xs), top, rtol=1e-6)
    vals = psi_v(exp_vf, np.linspace(0, exp_vf.b, 777))
    assert np.all(vals >= 0) and np.all(vals <= top + 1e-12)
    with pytest.raises(DomainError):
        psi_v(exp_vf, -0.1)
    with pytest.raises(DomainError):
        psi_v(exp_vf, exp_vf.b + 1)


def test_save_load_roundtrip(tmp_path, exp_vf):
    csv_path, json_path = exp_vf.save(tmp_path / "v.csv")
    back = ValueFunction.load(csv_path)
    np.testing.assert_array_equal(back.V, exp_vf.V)
    np.testing.assert_array_equal(back.dV, exp_vf.dV)
    assert back.header() == exp_vf.header()


def test_invalid_arguments(exp_derived):
    with pytest.raises(ValueError):
        solve_value(exp_derived, epsilon=0.0)
    with pytest.raises(ValueError):
        solve_value(exp_derived, N=100)


def test_mc_oracle_fig1(fig1_derived, fig1_vf):
    est = mc_game_value(fig1_derived, fig1_vf, 2.0, replications=2000, seed=3)
    V = float(fig1_vf.value(2.0))
    assert abs(est.mean - V) <= est.half_width
    assert est.half_width <= 0.01 * V
    assert est.tail_bound <= 1e-3 * abs(est.mean)


def test_mc_step_too_large(exp_derived, exp_vf):
    with pytest.raises(StepTooLarge):
        mc_game_value(exp_derived, exp_vf, 0.0, dt=5.0, replications=2)


def test_mc_domain(exp_derived, exp_vf):
    with pytest.raises(DomainError):
        mc_game_value(exp_derived, exp_vf, exp_vf.beta_eps + 1.0, replications=2)
