import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rtqm import fluid
from rtqm.fluid import FluidParams

DEFAULT = FluidParams()


# frozen values for k=0.001, q0=10, tau=40, lam=0.004, C=25 Mbps, N=9, B=B0=15 kB
@pytest.mark.parametrize("fn, expected", [
    (fluid.qmax_fq, 718.3281572999747),
    (fluid.qmax_fifo, 424.61175520398507),
    (fluid.qmax_cbq, 79.81423969999719),
    (fluid.qmax_confucius_simplified, 703.2),
    (fluid.t0_root, 55.91025073704419),
])
def test_closed_form_golden_values(fn, expected):
    assert fn(DEFAULT) == pytest.approx(expected, rel=1e-12)


def test_copa_like_simplified_value():
    p = DEFAULT.replace(q0=1.0)
    assert fluid.qmax_confucius_simplified(p) == pytest.approx(647.76)
    assert fluid.qmax_confucius_series(p) == pytest.approx(436.4151788856502, rel=1e-12)


def test_t0_is_the_positive_root_of_its_quadratic():
    p = DEFAULT
    a = p.C * (p.k / 2) / (p.lam ** 2 + p.k * math.exp(p.lam * p.tau))
    b = p.C - a
    t = fluid.t0_root(p)
    assert b * p.k * t * t + 2 * p.lam * a * t - 2 * (a + b) == pytest.approx(0, abs=1e-6)
    assert t > 0


def test_fct_deltas():
    assert fluid.fct_delta("CBQ", DEFAULT) == pytest.approx(38.4)
    assert fluid.fct_delta("FQ", DEFAULT) == 0.0
    assert fluid.fct_delta("fifo", DEFAULT) == 0.0
    assert fluid.fct_delta("CONFUCIUS", DEFAULT) == pytest.approx(46.613108475351055)
    assert fluid.fct_delta_bound(DEFAULT) == pytest.approx(math.log2(math.e) / 0.004)
    assert fluid.fct_delta_bound(DEFAULT) == pytest.approx(360.67, abs=0.01)


def test_responsiveness_fit():
    assert fluid.fit_responsiveness(200.0) == pytest.approx((2 * math.pi / 200) ** 2)
    assert fluid.fit_responsiveness(200.0) == pytest.approx(0.001, rel=0.02)
    with pytest.raises(ValueError):
        fluid.fit_responsiveness(0)


def test_policy_bound_flags():
    flags = {p: fluid.policy_bound(p, DEFAULT).flag for p in fluid.POLICIES}
    assert flags == {"FQ": "approx", "FIFO": "lower", "CBQ": "approx", "CONFUCIUS": "upper"}
    with pytest.raises(ValueError):
        fluid.policy_bound("wfq", DEFAULT)


@pytest.mark.parametrize("field, value", [("k", 0), ("tau", -1), ("C", float("nan")), ("N", -1), ("N", 2.5)])
def test_invalid_params_rejected(field, value):
    with pytest.raises(ValueError):
        DEFAULT.replace(**{field: value})


def test_regime_warnings():
    with pytest.warns(fluid.FluidWarning):
        assert DEFAULT.check_regime()
    with pytest.warns(fluid.FluidWarning):
        fluid.qmax_confucius_series(DEFAULT.replace(lam=0.05))


@given(st.floats(1e-5, 0.1), st.floats(1e-4, 0.05), st.floats(1, 200))
def test_t0_positive_and_finite(k, lam, tau):
    t = fluid.t0_root(DEFAULT.replace(k=k, lam=lam, tau=tau))
    assert 0 < t < math.inf


def test_integrator_rejects_coarse_steps():
    with pytest.raises(ValueError):
        fluid.integrate_fluid(DEFAULT, "FQ", dt=fluid.max_step(DEFAULT) * 2)


def test_integrator_starts_at_equilibrium_and_stays_bounded_under_cbq():
    # the rate law has no damping term: the orbit cycles around q0 rather than settling
    tr = fluid.integrate_fluid(DEFAULT, "CBQ")
    assert tr.s[0] == DEFAULT.C
    assert tr.q[0] == pytest.approx(DEFAULT.q0 * 2)  # backlog q0*C drains at C/2
    assert np.all(np.isfinite(tr.q)) and tr.q.min() >= 0
    tail = tr.q[len(tr.q) // 2:]
    assert tail.min() < DEFAULT.q0 < tail.max()


def test_integrator_is_step_refined():
    p = DEFAULT.replace(k=0.0004, tau=20.0, q0=5.0)
    a = fluid.integrate_fluid(p, "CONFUCIUS").q_max
    b = fluid.integrate_fluid(p, "CONFUCIUS", dt=fluid.max_step(p) / 4).q_max
    assert a == pytest.approx(b, rel=0.01)


def test_service_rates():
    assert fluid.service_rate("FQ", DEFAULT, 0) == DEFAULT.C / 10
    assert fluid.service_rate("CBQ", DEFAULT, 0) == DEFAULT.C / 2
    assert fluid.service_rate("CONFUCIUS", DEFAULT, 0) == DEFAULT.C / 2
    assert fluid.service_rate("CONFUCIUS", DEFAULT, 1e6) == DEFAULT.C / 10
    assert fluid.service_rate("CONFUCIUS", DEFAULT.replace(N=0), 5) == DEFAULT.C


@given(st.integers(1, 200), st.floats(0, 5000))
def test_confucius_rate_never_below_fair_share(n, t):
    p = DEFAULT.replace(N=n)
    assert fluid.service_rate("CONFUCIUS", p, t) >= fluid.service_rate("FQ", p, t)


@given(st.integers(1, 500), st.floats(1e-4, 0.05))
def test_confucius_fct_delta_within_bound(n, lam):
    p = DEFAULT.replace(N=n, lam=lam)
    d = fluid.fct_delta("CONFUCIUS", p)
    assert d <= fluid.fct_delta_bound(p)
    if n >= 3:
        assert d >= 0


@given(st.integers(1, 100))
def test_fq_is_n_times_cbq(n):
    p = DEFAULT.replace(N=n)
    assert fluid.qmax_fq(p) == pytest.approx(n * fluid.qmax_cbq(p))


def test_parse_param_file():
    text = "# comment\nk = 0.0004\nq0=5\ntau=20\nlambda=0.01\nN=50\nC_mbps=10\ndt=0.5\n"
    p, opts = fluid.parse_param_file(text)
    assert (p.k, p.q0, p.tau, p.lam, p.N, p.C) == (0.0004, 5.0, 20.0, 0.01, 50, 10_000.0)
    assert opts == {"dt": 0.5}


@pytest.mark.parametrize("text", ["k 0.1", "kappa=1", "N=abc", "k=-1"])
def test_parse_param_file_errors(text):
    with pytest.raises(ValueError):
        fluid.parse_param_file(text)


def test_analyze_rows_shape():
    rows = fluid.analyze_rows(DEFAULT.replace(k=0.004, tau=5.0))
    assert [r["policy"] for r in rows] == list(fluid.POLICIES)
    assert set(rows[0]) == {"policy", "q_max_closed_ms", "q_max_integrated_ms", "fct_delta_ms", "bound_flag"}
