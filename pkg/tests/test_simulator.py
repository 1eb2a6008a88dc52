import csv
import gzip

import numpy as np
import pytest
from scipy import stats

from robustq.adversary import constant_shift_adversary, equilibrium_adversary, null_adversary
from robustq.errors import NonFiniteIntensity
from robustq.harness import initial_state
from robustq.model import ModelSpec, derive, scale
from robustq.policy import CandidatePolicy, admit_all_work_conserving
from robustq.simulator import (ARRIVAL, END, FORCED_REJECTION, OVERLOAD_REJECTION, SERVICE, START,
                               Trajectory, run_batch, run_path, run_replication, scaled_view)


@pytest.fixture(scope="module")
def setup(exp_spec, exp_derived, exp_vf):
    sc = scale(exp_spec, exp_derived, 100)
    pol = CandidatePolicy(sc, exp_derived, exp_vf.beta_eps)
    adv = equilibrium_adversary(sc, exp_derived, exp_vf)
    return sc, pol, adv, initial_state(exp_derived, sc, 2.0)


@pytest.fixture(scope="module")
def path(setup):
    sc, pol, adv, x0 = setup
    traj, cost = run_path(sc, pol, adv, 20.0, seed=123, x0=x0)
    return traj, cost


def test_log_structure(path, setup):
    traj, _ = path
    sc = setup[0]
    assert traj.kinds[0] == START and traj.kinds[-1] == END
    assert traj.times[0] == 0.0 and traj.times[-1] == traj.horizon
    assert np.all(np.diff(traj.times[:-1]) > 0)
    assert set(np.unique(traj.kinds[1:-1])) <= {ARRIVAL, SERVICE, FORCED_REJECTION, OVERLOAD_REJECTION}
    assert np.all(traj.X >= 0) and np.all(traj.X <= sc.b_n)


def test_balance_equation(path):
    traj, _ = path
    np.testing.assert_array_equal(traj.X, traj.X0 + traj.A - traj.S - traj.R)
    # a rejection leaves the state unchanged
    rej = np.nonzero(np.isin(traj.kinds, [FORCED_REJECTION, OVERLOAD_REJECTION]))[0]
    np.testing.assert_array_equal(traj.X[rej], traj.X[rej - 1])


def test_effort_admissible(path):
    traj, _ = path
    U = traj.U[:-1]
    assert np.all(U >= 0) and np.all(U.sum(axis=1) <= 1 + 1e-12)
    assert np.all(U[traj.X[:-1] == 0] == 0)
    busy = np.any(traj.X[:-1] > 0, axis=1)
    np.testing.assert_allclose(U[busy].sum(axis=1), 1.0, atol=1e-12)
    dT = np.diff(traj.T, axis=0)
    dt = np.diff(traj.times)
    assert np.all(dT >= 0) and np.all(dT <= dt[:, None] + 1e-12)


def test_arrival_count_mean(exp_spec, exp_derived):
    sc = scale(exp_spec, exp_derived, 25)
    pol = admit_all_work_conserving(sc, exp_derived)
    adv = null_adversary(sc)
    T = 2.0
    counts = np.array([run_path(sc, pol, adv, T, seed=s)[0].A[-1] for s in range(1000)])
    se = counts.std(axis=0, ddof=1) / np.sqrt(len(counts))
    assert np.all(np.abs(counts.mean(axis=0) - sc.lam_n * T) <= 3 * se)


def mm1k_mean(lam, mu, K):
    p = (lam / mu) ** np.arange(K + 1)
    return float(np.arange(K + 1) @ p / p.sum())


@pytest.mark.parametrize("n", [25, 100])
def test_mm1k_mean_queue(n):
    spec = ModelSpec.create(lam=[1.0], mu=[1.0], lam_hat=[-0.5], b_hat=[2.0], h_hat=[1.0],
                            r_hat=[1.0], kappa1=0.5, kappa2=0.5, varrho=1.0, delta0=0.0)
    d = derive(spec)
    sc = scale(spec, d, n)
    pol = admit_all_work_conserving(sc, d)
    adv = null_adversary(sc)
    K = int(sc.b_n[0])
    burn, T = 20.0, 220.0
    means = []
    for s in range(30):
        traj, _ = run_path(sc, pol, adv, T, seed=1000 + s)
        t = np.clip(traj.times, burn, None)
        means.append(float(np.sum(traj.X[:-1, 0] * np.diff(t))) / (T - burn))
    means = np.array(means)
    se = means.std(ddof=1) / np.sqrt(len(means))
    want = mm1k_mean(sc.lam_n[0], sc.mu_n[0], K)
    assert abs(means.mean() - want) <= 3 * se


def test_interevent_exponential(setup):
    sc, pol, adv, x0 = setup
    gaps = []
    seed = 0
    while sum(len(g) for g in gaps) < 10_000:
        traj, _ = run_path(sc, pol, adv, 5.0, seed=seed, x0=x0)
        rate = traj.psi1.sum(axis=1) + (traj.psi2 * traj.U).sum(axis=1)
        # the final gap is cut by the horizon
        gaps.append(np.diff(traj.times)[:-1] * rate[:-2])
        seed += 1
    g = np.concatenate(gaps)[:10_000]
    assert stats.kstest(g, "expon").pvalue > 0.01


@pytest.mark.slow
def test_buffer_never_exceeded(exp_spec, exp_derived, exp_vf):
    sc = scale(exp_spec, exp_derived, 1600)
    pol = CandidatePolicy(sc, exp_derived, exp_vf.beta_eps)
    adv = equilibrium_adversary(sc, exp_derived, exp_vf)
    traj, _ = run_path(sc, pol, adv, 200.0, seed=9, x0=sc.b_n)
    assert len(traj.times) >= 1_000_000
    assert np.all(traj.X >= 0) and np.all(traj.X <= sc.b_n)


def test_determinism(setup):
    sc, pol, adv, x0 = setup
    a, ca = run_path(sc, pol, adv, 5.0, seed=77, x0=x0)
    b, cb = run_path(sc, pol, adv, 5.0, seed=77, x0=x0)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.X, b.X)
    assert ca.total == cb.total
    np.testing.assert_array_equal(ca.kl1, cb.kl1)
    c, _ = run_path(sc, pol, adv, 5.0, seed=78, x0=x0)
    assert len(c.times) != len(a.times) or not np.array_equal(c.times, a.times)


def test_batch_reproducible_and_worker_independent(setup):
    sc, pol, adv, x0 = setup
    one = run_batch(sc, pol, adv, 3.0, 16, seed=5, x0=x0)
    two = run_batch(sc, pol, adv, 3.0, 16, seed=5, x0=x0, workers=4)
    np.testing.assert_array_equal(one.stats, two.stats)
    tail = run_batch(sc, pol, adv, 3.0, 6, seed=5, x0=x0, start=10)
    np.testing.assert_array_equal(tail.stats, one.stats[10:])
    _, cost = run_replication(sc, pol, adv, 3.0, 5, 7, x0=x0)
    assert cost.total == one.total[7]


def test_cost_identity(path):
    _, cost = path
    kl = np.sum(cost.kl1 / 0.5) + np.sum(cost.kl2 / 0.5)
    assert cost.total == pytest.approx(cost.holding + cost.rejection - kl, abs=1e-12)


def test_scaled_view(path, setup):
    traj, _ = path
    sc = setup[0]
    view = scaled_view(traj, sc)
    np.testing.assert_allclose(view.workload, (traj.X / sc.sqrt_n) @ sc.theta_n, atol=1e-12)
    manual = np.zeros(len(traj.times))
    for i in range(sc.I):
        manual += sc.theta_n[i] * traj.X[:, i] / sc.sqrt_n
    np.testing.assert_allclose(view.workload, manual, atol=1e-12)
    np.testing.assert_allclose(view.R_hat, traj.R / sc.sqrt_n)
    grid = np.linspace(0, traj.horizon, 101)
    g = scaled_view(traj, sc, grid)
    np.testing.assert_array_equal(g.X_hat, traj.state_at(grid) / sc.sqrt_n)
    # grid and event-epoch views agree at event epochs
    k = len(traj.times) // 2
    at = scaled_view(traj, sc, traj.times[k:k + 1])
    np.testing.assert_allclose(at.Y_hat[0], view.Y_hat[k], atol=1e-9)


def test_scaled_view_idle_system(setup):
    sc = setup[0]
    I = sc.I
    traj = Trajectory(times=np.array([0.0, 2.0]), kinds=np.array([START, END], dtype=np.int8),
                      classes=np.zeros(2, dtype=np.int32), X=np.zeros((2, I), dtype=np.int64),
                      U=np.zeros((2, I)), psi1=np.ones((2, I)), psi2=np.ones((2, I)), n=sc.n,
                      horizon=2.0, seed=0)
    grid = np.linspace(0, 2, 11)
    v = scaled_view(traj, sc, grid)
    rho = sc.lam / sc.mu
    np.testing.assert_allclose(v.Y_hat, sc.mu_n / sc.sqrt_n * rho * grid[:, None], rtol=1e-15)
    assert not v.workload.any()


def test_dump_csv(tmp_path, path):
    traj, _ = path
    p = tmp_path / "traj.csv.gz"
    traj.dump_csv(p)
    with gzip.open(p, "rt") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["time", "kind", "class"]
    assert len(rows) == len(traj.times) + 1
    assert rows[1][1] == "start" and rows[-1][1] == "end"
    np.testing.assert_array_equal(np.array(rows[1:], dtype=object)[:, 3:].astype(int), traj.X)


def test_errors(setup):
    sc, pol, _, x0 = setup
    with pytest.raises(ValueError):
        run_path(sc, pol, null_adversary(sc), 0.0, seed=1)
    with pytest.raises(ValueError):
        run_path(sc, pol, null_adversary(sc), 1.0, seed=1, x0=sc.b_n + 1)
    bad = constant_shift_adversary(np.nan, 0.0, sc)
    with pytest.raises(NonFiniteIntensity):
        run_path(sc, pol, bad, 1.0, seed=1, x0=x0)
