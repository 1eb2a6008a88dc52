import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustq.errors import (ConfigError, CriticalLoadViolation, ModelError, NegativeRate)
from robustq.model import (ModelSpec, derive, dump_model, figure1_model, load_model, parse_model,
                           scale)

from conftest import config_path


def spec_with(**kw):
    base = dict(lam=[0.9, 0.4, 0.45], mu=[3.0, 1.0, 1.5], b_hat=[4.5, 7.5, 6.5],
                h_hat=[1.0, 2.5, 1.5], r_hat=[2.0, 3.0, 4.0], kappa1=0.5, kappa2=0.5,
                varrho=1.0, delta0=0.5)
    base.update(kw)
    return ModelSpec.create(**base)


def test_cmu_ordering_of_example(fig1_spec):
    hm = fig1_spec.h_hat * fig1_spec.mu
    np.testing.assert_allclose(hm, [3.0, 2.5, 2.25])
    assert np.all(np.diff(hm) <= 0)


def test_common_kappa_gives_epsilon(fig1_derived):
    np.testing.assert_allclose(fig1_derived.eps_hat, 0.5)
    assert fig1_derived.epsilon == pytest.approx(0.5, abs=1e-15)


def test_sigma_squared_example(fig1_derived):
    # term-by-term (theta_i sigma_hat_ii)^2
    terms = [(1 / 3) ** 2 * 1.8, 1.0 * 0.8, (2 / 3) ** 2 * 0.9]
    assert fig1_derived.sigma ** 2 == pytest.approx(sum(terms), abs=1e-14)
    assert fig1_derived.sigma ** 2 == pytest.approx(1.4, abs=1e-14)


def test_derived_scalars(fig1_derived):
    d = fig1_derived
    np.testing.assert_allclose(d.rho, [0.3, 0.4, 0.3])
    np.testing.assert_allclose(d.theta, [1 / 3, 1.0, 2 / 3])
    # r_hat * mu = (6, 3, 6): class 2 is the cheapest to reject
    assert d.i_star == 1 and d.r == 3.0
    assert d.b == pytest.approx(4.5 / 3 + 7.5 + 6.5 * 2 / 3)
    np.testing.assert_allclose(d.a_hat, [4.0, 7.0, 6.0])
    assert d.m == 0.0
    assert d.a is None and d.with_cutoff(100.0).a == pytest.approx(d.a_upper)


def test_i_star_ties_break_low():
    d = derive(spec_with(r_hat=[1.0, 3.0, 2.0]))  # r_hat*mu = (3, 3, 3)
    assert d.i_star == 0


def test_derive_is_pure(fig1_spec):
    a, b = derive(fig1_spec), derive(fig1_spec)
    for f in ("sigma", "epsilon", "m", "b", "r"):
        assert getattr(a, f) == getattr(b, f)
    assert np.array_equal(a.theta, b.theta)


def test_critical_load_enforced():
    with pytest.raises(CriticalLoadViolation):
        spec_with(lam=[0.9, 0.4, 0.5])


def test_delta0_bound():
    with pytest.raises(ModelError):
        spec_with(delta0=4.5)


def test_nonpositive_parameters_rejected():
    with pytest.raises(ModelError):
        spec_with(h_hat=[1.0, -1.0, 1.0])


def test_reordering_is_consistent():
    # input in reverse cmu order
    s = spec_with(lam=[0.45, 0.4, 0.9], mu=[1.5, 1.0, 3.0], b_hat=[6.5, 7.5, 4.5],
                  h_hat=[1.5, 2.5, 1.0], r_hat=[4.0, 3.0, 2.0])
    ref = figure1_model()
    for f in ("lam", "mu", "b_hat", "h_hat", "r_hat"):
        np.testing.assert_array_equal(getattr(s, f), getattr(ref, f))
    np.testing.assert_array_equal(s.perm, [2, 1, 0])
    np.testing.assert_array_equal(s.original_order(s.b_hat), [6.5, 7.5, 4.5])
    assert derive(s).b == pytest.approx(derive(ref).b, abs=1e-15)


def test_ties_keep_input_order():
    s = spec_with(lam=[0.5, 0.5], mu=[1.0, 1.0], b_hat=[1.0, 2.0], h_hat=[1.0, 1.0],
                  r_hat=[1.0, 1.0], delta0=0.1)
    np.testing.assert_array_equal(s.perm, [0, 1])


def test_scale_examples():
    s = ModelSpec.create(lam=[1.0], mu=[1.0], b_hat=[7.0], h_hat=[1.0], r_hat=[1.0],
                         kappa1=1.0, kappa2=1.0, varrho=1.0, delta0=0.5)
    sc = scale(s, derive(s), 100)
    assert sc.lam_n[0] == 100.0
    assert sc.b_n[0] == 70
    s2 = s.with_(lam_hat=[-2.0])
    assert scale(s2, derive(s2), 100).lam_n[0] == 80.0


def test_scale_negative_rate():
    s = ModelSpec.create(lam=[1.0], mu=[1.0], b_hat=[7.0], h_hat=[1.0], r_hat=[1.0],
                         kappa1=1.0, kappa2=1.0, varrho=1.0, delta0=0.5, lam_hat=[-20.0])
    with pytest.raises(NegativeRate):
        scale(s, derive(s), 4)


def test_theta_n_rate():
    s = spec_with(mu_hat=[1.0, -0.5, 2.0])
    d = derive(s)
    ladder = np.array([25, 100, 400, 1600])
    gaps = np.array([np.max(np.abs(scale(s, d, n).theta_n - d.theta)) for n in ladder])
    slope = np.polyfit(np.log(ladder), np.log(gaps), 1)[0]
    assert abs(slope + 0.5) <= 0.15
    m_gaps = [np.max(np.abs(scale(s, d, n).m_hat_n - d.m_hat)) for n in ladder]
    assert all(b < a for a, b in zip(m_gaps, m_gaps[1:])) or max(m_gaps) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.2, 5.0), min_size=2, max_size=5), st.data())
def test_permutation_invariance(mus, data):
    I = len(mus)
    w = np.array(data.draw(st.lists(st.floats(0.1, 1.0), min_size=I, max_size=I)))
    rho = w / w.sum()
    mu = np.array(mus)
    lam = rho * mu
    h = np.array(data.draw(st.lists(st.floats(0.1, 5.0), min_size=I, max_size=I)))
    b = np.array(data.draw(st.lists(st.floats(1.0, 9.0), min_size=I, max_size=I)))
    try:
        s = ModelSpec.create(lam=lam, mu=mu, b_hat=b, h_hat=h, r_hat=np.ones(I), kappa1=0.5,
                             kappa2=0.5, varrho=1.0, delta0=0.5)
    except CriticalLoadViolation:
        return
    assert np.all(np.diff(s.h_hat * s.mu) <= 0)
    assert derive(s).b == pytest.approx(float(np.sum(b / mu)), rel=1e-12)
    np.testing.assert_array_equal(s.original_order(s.b_hat), b)


def test_model_file_roundtrip(fig1_spec):
    text = dump_model(fig1_spec)
    back = parse_model(text)
    for f in ("lam", "mu", "b_hat", "h_hat", "r_hat", "kappa1", "kappa2"):
        np.testing.assert_array_equal(getattr(back, f), getattr(fig1_spec, f))
    assert back.varrho == fig1_spec.varrho and back.delta0 == fig1_spec.delta0


def test_config_files_load():
    s = load_model(config_path("fig1.ini"))
    np.testing.assert_array_equal(s.b_hat, [4.5, 7.5, 6.5])
    assert load_model(config_path("experiment.ini")).varrho == 0.8


def test_parse_errors_report_line_and_key():
    text = "[model]\nI = 3\nlambda = 0.9, 0.4\nmu = 3, 1, 1.5\n"
    with pytest.raises(ConfigError) as info:
        parse_model(text)
    assert info.value.key == "model.lambda" and info.value.line == 3
    with pytest.raises(ConfigError) as info:
        parse_model("[model]\nI = 3\nlambda = 0.9, x, 0.45\n")
    assert info.value.line == 3
    with pytest.raises(ConfigError):
        parse_model("[other]\nx = 1\n")
    with pytest.raises(ConfigError) as info:
        parse_model("[model]\nI = 1\nlambda = 1\nmu = 1\nb_hat = 1\n")
    assert info.value.key == "model.h_hat"
