import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercomp.crossed_gibbs import GibbsConfig, run_crossed_chain
from hiercomp.designs import design_from_counts, gen_circulant, gen_mcar, random_balanced_counts
from hiercomp.diagnostics import (acf, cost_gibbs, ess, ess_per_sec, fit_geometric_rate, iat, iat_sokal,
                                  moment_errors, relaxation_time_cgs, relaxation_time_gibbs, summarize_trace,
                                  theorem_bounds)
from hiercomp.models import CrossedHyper, ValidationError
from hiercomp.trace import ChainTrace


def ar1(rho, n, seed=0):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x


def unit_hyper(design, prec=1.0, tau=1.0):
    return CrossedHyper.default(design, prec=prec, tau=tau)


# ---------------------------------------------------------------- autocorrelation and IAT

def test_acf_constant_series_rejected():
    with pytest.raises(ValidationError):
        acf(np.ones(100))


def test_acf_iid():
    n = 100_000
    r = acf(np.random.default_rng(0).standard_normal(n), 50)
    assert r[0] == 1 and np.all(np.abs(r[1:]) < 4 / np.sqrt(n))


def test_acf_ar1():
    n = 100_000
    r = acf(ar1(0.9, n), 20)
    # Bartlett standard error of an AR(1) autocorrelation at lag t
    t = np.arange(21)
    se = np.sqrt(((1 + 0.81) * (1 - 0.81 ** t) / (1 - 0.81) - 2 * t * 0.81 ** t) / n)
    assert np.all(np.abs(r - 0.9 ** t) <= 4 * se + 1e-12)


def test_iat_iid_and_ar1():
    assert abs(iat(np.random.default_rng(1).standard_normal(100_000)) - 1) < 0.1
    assert abs(iat(ar1(0.9, 100_000, seed=2)) / 19 - 1) < 0.15


def test_iat_alternating_series_is_supereffective():
    x = np.tile([1.0, -1.0], 500)
    tau = iat(x)
    assert np.isfinite(tau) and tau < 1


def test_iat_window_is_even():
    # with rho[t] = 0.5 for every t the self-consistent window is the smallest
    # even M with M >= 5 (1 + M), which never exists: the longest even window is used
    rho = np.r_[1.0, np.full(10, 0.5)]
    assert iat_sokal(rho) == pytest.approx(1 + 2 * 0.5 * 10)
    rho = np.r_[1.0, 0.0, 0.0, 0.0]
    assert iat_sokal(rho) == 1.0


def test_ess_per_sec_arithmetic():
    x = np.random.default_rng(0).standard_normal(1000)
    tr = ChainTrace(["x"], x, np.arange(1, 1001), np.linspace(0.01, 10, 1000))
    expected = 1000 / iat(x) / 10
    assert ess_per_sec(tr, "x") == pytest.approx(expected)
    slow = ChainTrace(["x"], x, np.arange(1, 1001), 2 * np.linspace(0.01, 10, 1000))
    assert ess_per_sec(slow, "x") == pytest.approx(expected / 2)


def test_ess_per_sec_under_thinning():
    x = ar1(0.9, 200_000, seed=3)
    t = np.linspace(1e-4, 20, x.size)
    rates = []
    for thin in (1, 2, 5):
        tr = ChainTrace(["x"], x[thin - 1::thin], np.arange(x.size)[thin - 1::thin] + 1, t[thin - 1::thin])
        rates.append(ess_per_sec(tr, "x"))
    # thinning an AR(1) chain by m gives rho^m; ESS per second falls by the known factor
    expected = [19.0 / (1 + 0.9 ** m) * (1 - 0.9 ** m) / m for m in (1, 2, 5)]
    assert np.allclose(np.array(rates) / rates[0], np.array(expected) / expected[0], rtol=0.15)


def test_fit_geometric_rate_exact():
    assert fit_geometric_rate(0.6 ** np.arange(30)) == pytest.approx(0.6)
    assert fit_geometric_rate(np.r_[1.0, -0.5, 0.2]) == 0.0


@settings(deadline=None)
@given(st.integers(0, 10_000), st.integers(50, 400))
def test_acf_properties(seed, n):
    x = np.random.default_rng(seed).standard_normal(n).cumsum()
    r = acf(x)
    assert r[0] == pytest.approx(1) and np.all(np.abs(r) <= 1 + 1e-12)
    assert ess(x) > 0


# ---------------------------------------------------------------- moment errors and summaries

def test_moment_errors_point_mass_is_undefined():
    with np.errstate(divide="ignore"):
        out = moment_errors(np.ones((10, 2)), [1, 1], [1, 1])
    assert not np.isfinite(out["log_sd_abs_err_max"])


def test_moment_errors_vanish_against_self():
    s = np.random.default_rng(0).normal(size=(5000, 3))
    out = moment_errors(s, s.mean(0), s.std(0, ddof=1))
    assert max(out.values()) < 1e-12


def test_split_chain_errors_comparable():
    d = gen_mcar(25, pi=0.1, seed=0)
    conf = GibbsConfig(n_iter=8000, n_burn=400, clock="virtual", method="mh")
    trace, _, _ = run_crossed_chain(d, unit_hyper(d), conf, np.random.default_rng(0))
    cols = [trace.names.index(c) for c in ("a0[0]", "mean_a1[0]", "mean_a2[0]")]
    X = trace.draws[:, cols]
    ref_m, ref_s = X.mean(0), X.std(0, ddof=1)
    e1 = moment_errors(X[: len(X) // 2], ref_m, ref_s)["mean_abs_err_max"]
    e2 = moment_errors(X[len(X) // 2:], ref_m, ref_s)["mean_abs_err_max"]
    assert 0.5 <= e1 / e2 <= 2


def test_summarize_trace_handles_constant_columns():
    tr = ChainTrace(["a", "b"], np.column_stack([np.random.default_rng(0).normal(size=50), np.ones(50)]),
                    np.arange(1, 51), np.linspace(0.1, 5, 50))
    s = summarize_trace(tr)
    assert s["a"]["iat"] > 0 and s["b"]["iat"] is None


# ---------------------------------------------------------------- relaxation times

def test_full_design_aux_mixes_in_one_step():
    d = design_from_counts(np.ones((5, 5), int))
    r = relaxation_time_cgs(d, unit_hyper(d))
    assert r["rho_aux"] == pytest.approx(0, abs=1e-9) and r["T_aux"] == pytest.approx(1)


def test_disconnected_design_flags_infinite_time():
    d = design_from_counts(np.eye(2, dtype=int))
    r = relaxation_time_cgs(d, unit_hyper(d))
    assert not r["connected"] and r["T_aux"] == np.inf


def test_closed_form_needs_two_gaussian_factors():
    d = gen_mcar(3, K=3, pi=1.0)
    with pytest.raises(ValidationError):
        relaxation_time_cgs(d, unit_hyper(d))


def test_closed_form_matches_operator_rate():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = design_from_counts(random_balanced_counts(int(rng.integers(4, 12)), int(rng.integers(1, 4)), rng))
        h = CrossedHyper(T_prior=[[0.0]], mu_prior=[0.0], T=[[[rng.uniform(0.2, 3)]], [[rng.uniform(0.2, 3)]]],
                         tau=rng.uniform(0.2, 3))
        r = relaxation_time_cgs(d, h)
        if r["connected"]:
            assert relaxation_time_gibbs(d, h) == pytest.approx(r["T_cgs"], rel=1e-8)


def test_cost_gibbs_unit_relaxation():
    d = design_from_counts(np.ones((4, 4), int))
    # a huge effect precision makes every rho_k vanish
    out = cost_gibbs(d, unit_hyper(d, prec=1e12))
    assert out["relaxation_time"] == pytest.approx(1) and out["cost"] == pytest.approx(2 * d.N + d.p)


def test_cost_gibbs_methods_agree_on_circulant():
    d = gen_circulant(12, 4)
    h = unit_hyper(d)
    assert cost_gibbs(d, h, "closed_form")["cost"] == pytest.approx(cost_gibbs(d, h, "operator")["cost"], rel=1e-8)
    with pytest.raises(ValidationError):
        cost_gibbs(d, h, "magic")


def test_theorem_bounds_report_fields():
    d = gen_circulant(10, 2)
    r = theorem_bounds(d, unit_hyper(d))
    assert r["c"] == 0.5 and r["C"] == 2 and r["upper"] == pytest.approx(2 * min(3, r["T_aux"]))
    assert r["T_cgs"] <= r["upper"]
