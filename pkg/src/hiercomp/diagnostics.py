"""Mixing diagnostics and theoretical relaxation times.

Empirical side: autocorrelations, integrated autocorrelation times with
Sokal's adaptive window, effective sample sizes and moment errors.

Theoretical side: the relaxation time of the collapsed Gibbs sampler for
two-factor Gaussian designs with balanced levels, the two-sided bound on it
in terms of the mean degree and the auxiliary chain, and the exact
convergence rate of any deterministic-scan blocked Gibbs sampler on a
Gaussian target (spectral radius of its linear update operator).
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .designs import check_balanced_levels, cooccurrence_counts
from .models import CrossedDesign, CrossedHyper, Likelihood, ValidationError
from .trace import ChainTrace


def acf(x, max_lag: int | None = None) -> np.ndarray:
    """Sample autocorrelation function, normalised so that ``acf[0] == 1``.

    Uses the biased (divide-by-``n``) autocovariance estimator computed by FFT.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValidationError("need at least two draws for an autocorrelation")
    xc = x - x.mean()
    if not np.any(xc):
        raise ValidationError("autocorrelation of a constant series is undefined")
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size)
    acov = np.fft.irfft(f * np.conj(f), n=size)[:n] / n
    out = acov / acov[0]
    if max_lag is not None:
        out = out[: max_lag + 1]
    return out


def iat_sokal(rho, c: float = 5.0) -> float:
    """Integrated autocorrelation time from an autocorrelation function.

    ``tau(M) = 1 + 2 sum_{t=1}^{M} rho[t]``, with the window ``M`` the smallest
    even lag satisfying ``M >= c tau(M)``.  If no lag qualifies the sum over
    the longest even window is returned.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.size < 3:
        return 1.0
    tau = 2.0 * np.cumsum(rho) - 1.0
    lags = np.arange(rho.size)
    ok = (lags % 2 == 0) & (lags > 0) & (lags >= c * tau)
    if np.any(ok):
        return float(tau[np.argmax(ok)])
    last = rho.size - 1 if (rho.size - 1) % 2 == 0 else rho.size - 2
    return float(tau[last])


def iat(x, c: float = 5.0) -> float:
    return iat_sokal(acf(x), c=c)


def ess(x, c: float = 5.0) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return x.size / iat(x, c=c)


def ess_per_sec(trace: ChainTrace, name: str, c: float = 5.0) -> float:
    """Effective samples per second of total run time (adaptation included)."""
    t = trace.total_time
    if t <= 0:
        return float("inf")
    return ess(trace.column(name), c=c) / t


def mc_standard_error(x, c: float = 5.0) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(np.std(x) * np.sqrt(iat(x, c=c) / x.size))


def fit_geometric_rate(rho, max_lag: int = 20) -> float:
    """Decay rate ``r`` of an autocorrelation function ``rho[t] ~ r^t``.

    Weighted least squares on ``log rho[t] = t log r`` over the initial run of
    positive lags ``1..max_lag``, weights ``rho[t]^2`` (the inverse delta-method
    variance of ``log rho[t]``).
    """
    rho = np.asarray(rho, dtype=float)[1: max_lag + 1]
    stop = np.argmax(rho <= 0) if np.any(rho <= 0) else rho.size
    if stop == 0:
        return 0.0
    r = rho[:stop]
    t = np.arange(1, stop + 1)
    w = r ** 2
    return float(np.exp(np.sum(w * t * np.log(r)) / np.sum(w * t * t)))


def moment_errors(samples, ref_means, ref_sds) -> dict:
    """Median and maximum absolute errors of posterior means and log sds."""
    samples = np.asarray(samples, dtype=float)
    m = samples.mean(axis=0)
    s = samples.std(axis=0, ddof=1)
    e_mean = np.abs(m - np.asarray(ref_means))
    e_lsd = np.abs(np.log(s) - np.log(np.asarray(ref_sds)))
    return {"mean_abs_err_median": float(np.median(e_mean)), "mean_abs_err_max": float(np.max(e_mean)),
            "log_sd_abs_err_median": float(np.median(e_lsd)), "log_sd_abs_err_max": float(np.max(e_lsd))}


def summarize_trace(trace: ChainTrace, c: float = 5.0) -> dict:
    out = {}
    for j, name in enumerate(trace.names):
        x = trace.draws[:, j]
        entry = {"mean": float(x.mean()) if x.size else float("nan"),
                 "sd": float(x.std(ddof=1)) if x.size > 1 else float("nan")}
        try:
            tau = iat(x, c=c)
            entry.update(iat=tau, ess=x.size / tau,
                         ess_per_sec=(x.size / tau) / trace.total_time if trace.total_time > 0 else None)
        except ValidationError:
            entry.update(iat=None, ess=None, ess_per_sec=None)
        out[name] = entry
    return out


# ----------------------------------------------------------------------------
# relaxation times

def _aux_second_eigenvalue(N: sp.csr_matrix, tol: float = 1e-10, max_iter: int = 200_000,
                           seed: int = 0) -> tuple[float, bool]:
    """Square of the second singular value of ``D1^{-1/2} N D2^{-1/2}``.

    Deflated power iteration on the symmetric PSD operator
    ``P = D1^{-1/2} N D2^{-1} N^T D1^{-1/2}``, whose top eigenpair is known
    (eigenvalue one, eigenvector proportional to ``sqrt(d1)``).  A shift by
    ``-lambda_min`` is unnecessary because ``P`` is PSD.
    """
    d1 = np.asarray(N.sum(axis=1)).ravel()
    d2 = np.asarray(N.sum(axis=0)).ravel()
    s1 = 1.0 / np.sqrt(d1)
    NT = N.T.tocsr()

    def apply(x):
        return s1 * (N @ ((NT @ (s1 * x)) / d2))

    v1 = np.sqrt(d1)
    v1 /= np.linalg.norm(v1)
    if d1.size < 2:
        return 0.0, True
    x = np.random.default_rng(seed).standard_normal(d1.size)
    x -= v1 * (v1 @ x)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = apply(x)
        y -= v1 * (v1 @ y)
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0, True
        x = y / ny
        if abs(new - lam) <= tol * max(new, 1e-300):
            return new, True
        lam = new
    return lam, False


def relaxation_time_cgs(design: CrossedDesign, hyper: CrossedHyper, tol: float = 1e-10) -> dict:
    """Relaxation time of the collapsed Gibbs sampler, two factors and ``L == 1``.

    ``T_cgs = 1 / (1 - rho_1 rho_2 rho_aux)`` with
    ``rho_k = N tau / (N tau + I_k tau_k)`` and ``rho_aux`` the squared second
    singular value of the normalised co-occurrence matrix.  The formula is
    exact for designs with balanced levels; ``balanced`` reports whether that
    holds.
    """
    if design.K != 2 or design.D != 1 or design.likelihood is not Likelihood.GAUSSIAN:
        raise ValidationError("the closed form needs K = 2, L = 1 and a Gaussian likelihood")
    if design.N == 0:
        raise ValidationError("the design has no observations")
    tau = hyper.tau
    taus = [float(T[0, 0]) for T in hyper.T]
    rho = [design.N * tau / (design.N * tau + I * tk) for I, tk in zip(design.levels, taus)]
    stats = cooccurrence_counts(design)
    Nmat = stats.pair_counts[(0, 1)]
    r_nz = np.nonzero(stats.counts[0])[0]
    c_nz = np.nonzero(stats.counts[1])[0]
    Nsub = Nmat[r_nz][:, c_nz].tocsr()
    n_comp, _ = connected_components(sp.bmat([[None, Nsub], [Nsub.T, None]]), directed=False)
    if n_comp > 1:
        rho_aux, converged = 1.0, True
    else:
        rho_aux, converged = _aux_second_eigenvalue(Nsub, tol=tol)
    rate = rho[0] * rho[1] * rho_aux
    T_aux = np.inf if rho_aux >= 1 else 1.0 / (1.0 - rho_aux)
    return {"T_cgs": 1.0 / (1.0 - rate), "rate": rate, "rho1": rho[0], "rho2": rho[1],
            "rho_aux": rho_aux, "T_aux": T_aux, "connected": n_comp == 1, "converged": converged,
            "balanced": check_balanced_levels(design)["balanced"], "mean_degree": design.mean_degree}


def theorem_bounds(design: CrossedDesign, hyper: CrossedHyper) -> dict:
    """Two-sided bound ``c min(nbar, T_aux) <= T_cgs <= C min(nbar, T_aux)``.

    ``c = min(1, tau / (2 max_k tau_k))`` and ``C = 1 + tau / min_k tau_k``.
    """
    r = relaxation_time_cgs(design, hyper)
    taus = [float(T[0, 0]) for T in hyper.T]
    c = min(1.0, hyper.tau / (2.0 * max(taus)))
    C = 1.0 + hyper.tau / min(taus)
    m = min(r["mean_degree"], r["T_aux"])
    r.update(c=c, C=C, lower=c * m, upper=C * m, holds=bool(c * m <= r["T_cgs"] <= C * m))
    return r


def crossed_blocks(design: CrossedDesign, collapsed: bool = True) -> list:
    """Scalar index blocks of the collapsed (intercept joined to each factor)
    or the plain (intercept alone, then each factor) Gibbs sweep."""
    L = design.L
    off = design.offsets()
    fac = [np.arange(off[k] * L, (off[k] + I) * L) for k, I in enumerate(design.levels)]
    root = np.arange(L)
    if collapsed:
        return [np.concatenate([root, f]) for f in fac]
    return [root] + fac


def gibbs_operator_rate(Q, blocks) -> float:
    """Spectral radius of the mean-update operator of a blocked Gibbs sweep.

    For a Gaussian target with precision ``Q`` a deterministic-scan sweep
    over (possibly overlapping) blocks maps ``x -> B x + noise`` with
    ``B = B_last ... B_first``; updating block ``b`` replaces ``x_b`` by
    ``-Q_bb^{-1} Q_{b,rest} x_rest``.  The convergence rate of the chain is the
    spectral radius of ``B``.
    """
    Q = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    n = Q.shape[0]
    B = np.eye(n)
    for b in blocks:
        b = np.asarray(b)
        rest = np.setdiff1d(np.arange(n), b)
        Bk = np.eye(n)
        Bk[b] = 0.0
        Bk[np.ix_(b, rest)] = -np.linalg.solve(Q[np.ix_(b, b)], Q[np.ix_(b, rest)])
        B = Bk @ B
    return float(np.max(np.abs(np.linalg.eigvals(B))))


def relaxation_time_gibbs(design: CrossedDesign, hyper: CrossedHyper, collapsed: bool = True) -> float:
    """Exact relaxation time ``1 / (1 - rate)`` of a Gibbs sweep (Gaussian likelihood)."""
    from .sparse_factor import assemble_Q_crossed
    Q = assemble_Q_crossed(design, hyper).to_dense()
    rate = gibbs_operator_rate(Q, crossed_blocks(design, collapsed=collapsed))
    return 1.0 / (1.0 - rate)


def cost_gibbs(design: CrossedDesign, hyper: CrossedHyper, method: str = "auto") -> dict:
    """Operation count of a collapsed Gibbs run reaching stationarity.

    ``(K N + p) * T`` where ``K N + p`` is the work of one sweep and ``T`` the
    relaxation time: the closed form for balanced two-factor designs
    (``method="closed_form"``) or the exact operator spectral radius
    (``method="operator"``).
    """
    if method == "auto":
        method = "closed_form" if (design.K == 2 and design.D == 1 and
                                   check_balanced_levels(design)["balanced"]) else "operator"
    if method == "closed_form":
        T = relaxation_time_cgs(design, hyper)["T_cgs"]
    elif method == "operator":
        T = relaxation_time_gibbs(design, hyper, collapsed=True)
    else:
        raise ValidationError(f"unknown relaxation method {method!r}")
    per_sweep = design.K * design.N + design.p
    return {"cost": per_sweep * T, "per_sweep": per_sweep, "relaxation_time": T, "method": method}
