"""Collapsed Gibbs sampling for crossed random-effects models.

One sweep visits the factors in order.  For factor ``k`` the intercept and
the effects of that factor are updated jointly given everything else:

* Gaussian likelihood: exactly, drawing the intercept with the factor
  integrated out and then every level given the intercept;
* otherwise: in the centred parametrisation ``xi_i = a0 + a_i``, drawing the
  intercept given ``xi`` and then each ``xi_i`` with a Metropolis-Hastings
  kernel (a Newton-type proposal for scalar effects, an auxiliary-gradient
  proposal with per-level adaptive step sizes for vector effects).

The non-collapsed sweep (intercept alone, then each factor) is provided for
comparison.  Variance parameters are refreshed after every sweep from their
conjugate full conditionals.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .models import CrossedDesign, CrossedHyper, CrossedState, Likelihood, NumericalError, ValidationError
from .rng import as_generator
from .trace import ChainTrace

LOG_2PI = np.log(2.0 * np.pi)
DELTA_MIN, DELTA_MAX = 1e-8, 1e8


# ----------------------------------------------------------------------------
# likelihood terms on the free coordinates

def loglik_terms(lik: Likelihood, eta, y, tau: float = 1.0) -> np.ndarray:
    """Per-observation log-likelihood given the free linear predictor ``eta``."""
    if lik is Likelihood.GAUSSIAN:
        r = y - eta
        return -0.5 * tau * np.sum(r * r, axis=1) + 0.5 * y.shape[1] * (np.log(tau) - LOG_2PI)
    if lik is Likelihood.BINOMIAL:
        e = eta[:, 0]
        return y[:, 0] * e - np.logaddexp(0.0, e)
    full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
    mx = full.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(full - mx).sum(axis=1))
    return np.sum(y * full, axis=1) - lse


def grad_terms(lik: Likelihood, eta, y, tau: float = 1.0) -> np.ndarray:
    """Per-observation gradient of the log-likelihood with respect to ``eta``."""
    if lik is Likelihood.GAUSSIAN:
        return tau * (y - eta)
    if lik is Likelihood.BINOMIAL:
        return y - 0.5 * (1.0 + np.tanh(0.5 * eta))
    full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
    prob = np.exp(full - full.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    return (y - prob)[:, : eta.shape[1]]


def hess_terms(lik: Likelihood, eta, y, tau: float = 1.0) -> np.ndarray:
    """Per-observation second derivative for one-dimensional ``eta``."""
    if eta.shape[1] != 1:
        raise ValidationError("second derivatives are only used for scalar effects")
    if lik is Likelihood.GAUSSIAN:
        return np.full(eta.shape[0], -tau)
    s = 0.5 * (1.0 + np.tanh(0.5 * eta[:, 0]))
    return -s * (1.0 - s)


def _agg(idx, vals, n: int) -> np.ndarray:
    """Sum rows of ``vals`` by group index ``idx`` into ``n`` groups."""
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n)
    out = np.empty((n, vals.shape[1]))
    for j in range(vals.shape[1]):
        out[:, j] = np.bincount(idx, weights=vals[:, j], minlength=n)
    return out


@dataclass
class OpCounter:
    """Running count of floating-point work (array elements touched)."""

    flops: float = 0.0

    def add(self, n) -> None:
        self.flops += float(n)


# ----------------------------------------------------------------------------
# Metropolis-Hastings kernels for a block of conditionally independent levels

@dataclass
class LevelTarget:
    """Conditional target of the levels of one factor.

    Level ``i`` has value ``x_i`` (free dimension ``D``) with prior
    ``N(center_i, T^{-1})`` and the observations ``j`` with ``idx[j] == i``
    have linear predictor ``offset[j] + x_i``.  ``T`` may be zero (flat prior).
    """

    lik: Likelihood
    y: np.ndarray
    tau: float
    offset: np.ndarray
    idx: np.ndarray
    n_levels: int
    center: np.ndarray
    T: np.ndarray
    counter: OpCounter | None = None

    def __post_init__(self):
        self.center = np.broadcast_to(np.asarray(self.center, dtype=float),
                                      (self.n_levels, self.T.shape[0])).copy()
        lam, V = np.linalg.eigh(self.T)
        self.lam = np.maximum(lam, 0.0)
        self.V = V

    @property
    def D(self) -> int:
        return self.T.shape[0]

    def _eta(self, x):
        return self.offset + x[self.idx]

    def loglik(self, x) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(4 * self.offset.size)
        return _agg(self.idx, loglik_terms(self.lik, self._eta(x), self.y, self.tau), self.n_levels)

    def grad(self, x) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(4 * self.offset.size)
        return _agg(self.idx, grad_terms(self.lik, self._eta(x), self.y, self.tau), self.n_levels)

    def hess(self, x) -> np.ndarray:
        return _agg(self.idx, hess_terms(self.lik, self._eta(x), self.y, self.tau), self.n_levels)

    def evaluate(self, x, hess: bool = False):
        """Per-level log-likelihood, gradient and (optionally) second derivative."""
        eta = self._eta(x)
        if self.counter is not None:
            self.counter.add(12 * eta.size)
        ll = _agg(self.idx, loglik_terms(self.lik, eta, self.y, self.tau), self.n_levels)
        g = _agg(self.idx, grad_terms(self.lik, eta, self.y, self.tau), self.n_levels)
        h = _agg(self.idx, hess_terms(self.lik, eta, self.y, self.tau), self.n_levels) if hess else None
        return ll, g, h

    def log_prior(self, x) -> np.ndarray:
        z = (x - self.center) @ self.V
        pos = self.lam > 0
        return (-0.5 * np.sum(self.lam * z * z, axis=1)
                + 0.5 * np.sum(np.log(self.lam[pos])) - 0.5 * pos.sum() * LOG_2PI)

    def log_target(self, x) -> np.ndarray:
        """Unnormalised log density of each level (likelihood times prior)."""
        return self.loglik(x) + self.log_prior(x)


def _normal_logpdf(x, mean, var):
    return -0.5 * ((x - mean) ** 2 / var + np.log(var) + LOG_2PI)


class SecondOrderKernel:
    """Newton-type independence-style proposal for scalar effects.

    At state ``x`` the proposal is ``N(m(x), c(x))`` with
    ``c = 1 / (T - f''(x))`` and ``m = c (f'(x) + T center - f''(x) x)``: one
    Newton step on the log target, exact when the likelihood is Gaussian.
    When ``T - f''`` is not positive the variance falls back to ``1 / T``,
    and to ``1 / PREC_FLOOR`` under a flat prior (the curvature of a logistic
    likelihood underflows to zero far from the data).
    """

    PREC_FLOOR = 1e-10

    def __init__(self, target: LevelTarget):
        if target.D != 1:
            raise ValidationError("the second-order kernel needs scalar effects")
        self.t = target
        self.prec = float(target.T[0, 0])

    def moments(self, x):
        ll, g, h = self.t.evaluate(x, hess=True)
        return self._moments(x, g[:, 0], h)

    def _moments(self, x, g, h):
        prec = self.prec - h
        bad = prec <= 0
        if np.any(bad):
            prec = np.where(bad, max(self.prec, self.PREC_FLOOR), prec)
        c = 1.0 / prec
        m = c * (g + self.prec * self.t.center[:, 0] - h * x[:, 0])
        return m, c

    def _state(self, x):
        ll, g, h = self.t.evaluate(x, hess=True)
        m, c = self._moments(x, g[:, 0], h)
        return ll + self.t.log_prior(x), m, c

    def log_q(self, x, x_to):
        m, c = self.moments(x)
        return _normal_logpdf(x_to[:, 0], m, c)

    def _log_ratio(self, x, sx, prop, sp_):
        return (sp_[0] - sx[0] + _normal_logpdf(x[:, 0], sp_[1], sp_[2])
                - _normal_logpdf(prop[:, 0], sx[1], sx[2]))

    def log_accept(self, x, x_to):
        """Log acceptance probability of every level's move ``x -> x_to``."""
        return np.minimum(0.0, self._log_ratio(x, self._state(x), x_to, self._state(x_to)))

    def step(self, x, rng):
        sx = self._state(x)
        prop = (sx[1] + np.sqrt(sx[2]) * rng.standard_normal(sx[1].shape))[:, None]
        la = np.minimum(0.0, self._log_ratio(x, sx, prop, self._state(prop)))
        acc = np.log(rng.random(la.shape)) < la
        return np.where(acc[:, None], prop, x), acc


class GradientKernel:
    """Auxiliary-gradient proposal for vector effects.

    With ``C = (T + I / delta)^{-1}`` the proposal is ``N(m(x), Dm)``,
    ``m = C (x / delta + grad f(x) + T center)``, ``Dm = C + C^2 / delta``.
    The proposal is reversible with respect to the prior alone, so moves are
    always accepted when the likelihood is flat.  ``delta`` holds one step
    size per level.
    """

    def __init__(self, target: LevelTarget, delta):
        self.t = target
        self.delta = np.broadcast_to(np.asarray(delta, dtype=float), (target.n_levels,)).copy()

    def _scales(self):
        lam = self.t.lam[None, :]
        inv_d = 1.0 / self.delta[:, None]
        c = 1.0 / (lam + inv_d)
        return c, c + c * c * inv_d, inv_d

    def _moments(self, x, g):
        V = self.t.V
        c, dvar, inv_d = self._scales()
        m = c * ((x @ V) * inv_d + g @ V + self.t.lam[None, :] * (self.t.center @ V))
        return m, dvar

    def moments(self, x):
        return self._moments(x, self.t.evaluate(x)[1])

    def _state(self, x):
        ll, g, _ = self.t.evaluate(x)
        m, dvar = self._moments(x, g)
        return ll + self.t.log_prior(x), m, dvar

    def log_q(self, x, x_to):
        m, dvar = self.moments(x)
        return np.sum(_normal_logpdf(x_to @ self.t.V, m, dvar), axis=1)

    def _log_ratio(self, x, sx, prop, sp_):
        V = self.t.V
        return (sp_[0] - sx[0] + np.sum(_normal_logpdf(x @ V, sp_[1], sp_[2]), axis=1)
                - np.sum(_normal_logpdf(prop @ V, sx[1], sx[2]), axis=1))

    def log_accept(self, x, x_to):
        return np.minimum(0.0, self._log_ratio(x, self._state(x), x_to, self._state(x_to)))

    def step(self, x, rng):
        sx = self._state(x)
        prop = (sx[1] + np.sqrt(sx[2]) * rng.standard_normal(sx[1].shape)) @ self.t.V.T
        la = np.minimum(0.0, self._log_ratio(x, sx, prop, self._state(prop)))
        acc = np.log(rng.random(la.shape)) < la
        return np.where(acc[:, None], prop, x), acc


def adapt_step_sizes(delta, accepted, t: int) -> np.ndarray:
    """Robbins-Monro update ``log delta += t^{-1/2} (accepted - 1/2)``."""
    out = np.exp(np.log(delta) + (np.asarray(accepted, dtype=float) - 0.5) / np.sqrt(max(t, 1)))
    return np.clip(out, DELTA_MIN, DELTA_MAX)


def make_kernel(target: LevelTarget, delta=None, kind: str = "auto"):
    if kind == "auto":
        kind = "second_order" if target.D == 1 else "gradient"
    if kind == "second_order":
        return SecondOrderKernel(target)
    if kind == "gradient":
        return GradientKernel(target, 1.0 if delta is None else delta)
    raise ValidationError(f"unknown kernel {kind!r}")


# ----------------------------------------------------------------------------
# sweeps

def _draw_mvn_prec(Q, b, rng, what="intercept"):
    """Draw from ``N(Q^{-1} b, Q^{-1})``."""
    try:
        C = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise NumericalError(f"the {what} full conditional is improper or not positive definite") from None
    w = np.linalg.solve(C, b)
    return np.linalg.solve(C.T, w + rng.standard_normal(b.shape))


def root_update_from_centered(xi, hyper: CrossedHyper, k: int, rng) -> np.ndarray:
    """Draw the intercept given the centred effects ``xi = a0 + a^(k)``.

    Precision ``T_prior + I_k T_k`` and canonical mean
    ``T_prior mu_prior + T_k sum_i xi_i``.
    """
    rng = as_generator(rng)
    xi = np.asarray(xi, dtype=float).reshape(-1, hyper.D)
    Tk = hyper.T[k]
    Q = hyper.T_prior + xi.shape[0] * Tk
    b = hyper.T_prior @ hyper.mu_prior + Tk @ xi.sum(axis=0)
    return _draw_mvn_prec(Q, b, rng)


class Sweeper:
    """Caches design-level quantities and performs sweeps in place."""

    def __init__(self, design: CrossedDesign, counter: OpCounter | None = None):
        self.design = design
        self.lik = design.likelihood
        self.D = design.D
        self.y = np.ascontiguousarray(design.responses)
        self.idx = [np.ascontiguousarray(design.obs_levels[:, k]) for k in range(design.K)]
        self.counts = [np.bincount(self.idx[k], minlength=I) for k, I in enumerate(design.levels)]
        self.counter = counter if counter is not None else OpCounter()
        self.accept = [[0, 0] for _ in range(design.K + 1)]

    def factor_sum(self, state: CrossedState) -> np.ndarray:
        S = np.zeros((self.design.N, self.D))
        for k in range(self.design.K):
            S += state.a[k][self.idx[k], : self.D]
        return S

    # exact Gaussian collapsed update of (a0, a^(k))
    def _exact_factor(self, k, state, hyper, S, rng):
        D, idx, n = self.D, self.idx[k], self.counts[k]
        tau = hyper.tau
        ak = state.a[k][:, :D]
        r = self.y - (S - ak[idx])
        s = _agg(idx, r, n.size)
        lam, V = np.linalg.eigh(hyper.T[k])
        lam = np.maximum(lam, 0.0)
        s_rot = s @ V
        nt = n[:, None] * tau
        w = tau * lam[None, :] / (lam[None, :] + nt)
        Q0 = hyper.T_prior + (V * np.sum(nt * lam[None, :] / (lam[None, :] + nt), axis=0)) @ V.T
        b0 = hyper.T_prior @ hyper.mu_prior + V @ np.sum(w * s_rot, axis=0)
        a0 = _draw_mvn_prec(Q0, b0, rng)
        prec = lam[None, :] + nt
        if np.any(prec <= 0):
            raise NumericalError(f"factor {k} has an empty level with a singular prior precision")
        a_rot = (tau * (s_rot - n[:, None] * (a0 @ V)[None, :])
                 + np.sqrt(prec) * rng.standard_normal(prec.shape)) / prec
        new = a_rot @ V.T
        self.counter.add(6 * r.size + 10 * new.size + D ** 3)
        return a0, new

    def _mh_factor(self, k, state, hyper, S, rng, adapt_t, kind):
        D, idx = self.D, self.idx[k]
        ak = state.a[k][:, :D]
        xi = state.a0[:D][None, :] + ak
        a0 = root_update_from_centered(xi, hyper, k, rng)
        target = LevelTarget(self.lik, self.y, hyper.tau, S - ak[idx], idx, ak.shape[0],
                             a0[None, :], hyper.T[k], self.counter)
        kern = make_kernel(target, state.delta[k], kind)
        xi_new, acc = kern.step(xi, rng)
        self.accept[k + 1][0] += int(acc.sum())
        self.accept[k + 1][1] += acc.size
        if adapt_t is not None and isinstance(kern, GradientKernel):
            state.delta[k] = adapt_step_sizes(state.delta[k], acc, adapt_t)
        self.counter.add(4 * xi.size + D ** 3)
        return a0, xi_new - a0[None, :]

    def collapsed(self, state, hyper, rng, method="exact", adapt_t=None, kind="auto"):
        D = self.D
        S = self.factor_sum(state)
        for k in range(self.design.K):
            old = state.a[k][:, :D].copy()
            if method == "exact":
                a0, new = self._exact_factor(k, state, hyper, S, rng)
            else:
                a0, new = self._mh_factor(k, state, hyper, S, rng, adapt_t, kind)
            state.a0[:D] = a0
            state.a[k][:, :D] = new
            S += (new - old)[self.idx[k]]
            self.counter.add(2 * S.size)
        return state

    def vanilla(self, state, hyper, rng, adapt_t=None, kind="auto"):
        """Intercept given the effects, then each factor given the rest."""
        D, N = self.D, self.design.N
        S = self.factor_sum(state)
        if self.lik is Likelihood.GAUSSIAN:
            tau = hyper.tau
            Q = hyper.T_prior + N * tau * np.eye(D)
            b = hyper.T_prior @ hyper.mu_prior + tau * (self.y - S).sum(axis=0)
            state.a0[:D] = _draw_mvn_prec(Q, b, rng)
            for k in range(self.design.K):
                idx, n = self.idx[k], self.counts[k]
                old = state.a[k][:, :D].copy()
                s = _agg(idx, self.y - state.a0[:D] - (S - old[idx]), n.size)
                lam, V = np.linalg.eigh(hyper.T[k])
                prec = lam[None, :] + n[:, None] * tau
                new = ((tau * s @ V + np.sqrt(prec) * rng.standard_normal(prec.shape)) / prec) @ V.T
                state.a[k][:, :D] = new
                S += (new - old)[idx]
                self.counter.add(8 * S.size + 10 * new.size)
            return state
        zeros = np.zeros(N, dtype=np.int64)
        target = LevelTarget(self.lik, self.y, hyper.tau, S, zeros, 1, hyper.mu_prior[None, :],
                             hyper.T_prior, self.counter)
        kern = make_kernel(target, state.delta0, kind)
        new0, acc = kern.step(state.a0[None, :D], rng)
        self.accept[0][0] += int(acc.sum())
        self.accept[0][1] += 1
        if adapt_t is not None and isinstance(kern, GradientKernel):
            state.delta0 = float(adapt_step_sizes(np.array([state.delta0]), acc, adapt_t)[0])
        state.a0[:D] = new0[0]
        for k in range(self.design.K):
            idx = self.idx[k]
            old = state.a[k][:, :D].copy()
            target = LevelTarget(self.lik, self.y, hyper.tau, state.a0[:D] + S - old[idx], idx,
                                 old.shape[0], np.zeros((1, D)), hyper.T[k], self.counter)
            kern = make_kernel(target, state.delta[k], kind)
            new, acc = kern.step(old, rng)
            self.accept[k + 1][0] += int(acc.sum())
            self.accept[k + 1][1] += acc.size
            if adapt_t is not None and isinstance(kern, GradientKernel):
                state.delta[k] = adapt_step_sizes(state.delta[k], acc, adapt_t)
            state.a[k][:, :D] = new
            S += (new - old)[idx]
        return state


def collapsed_sweep_gaussian(design: CrossedDesign, state: CrossedState, hyper: CrossedHyper, rng) -> CrossedState:
    """One exact collapsed sweep for a Gaussian likelihood (returns a new state)."""
    if design.likelihood is not Likelihood.GAUSSIAN:
        raise ValidationError("the exact collapsed sweep needs a Gaussian likelihood")
    return Sweeper(design).collapsed(state.copy(), hyper, as_generator(rng), method="exact")


def collapsed_sweep_mh(design: CrossedDesign, state: CrossedState, hyper: CrossedHyper, rng,
                       adapt_t: int | None = None, kind: str = "auto") -> CrossedState:
    """One collapsed sweep with Metropolis-Hastings level updates."""
    return Sweeper(design).collapsed(state.copy(), hyper, as_generator(rng), method="mh",
                                     adapt_t=adapt_t, kind=kind)


def vanilla_sweep(design: CrossedDesign, state: CrossedState, hyper: CrossedHyper, rng,
                  adapt_t: int | None = None, kind: str = "auto") -> CrossedState:
    return Sweeper(design).vanilla(state.copy(), hyper, as_generator(rng), adapt_t=adapt_t, kind=kind)


# ----------------------------------------------------------------------------
# variance parameters

def precision_full_conditional(effects, shape: float, rate: float) -> tuple[float, float]:
    """Gamma ``(shape, rate)`` full conditional of a scalar effect precision."""
    e = np.asarray(effects, dtype=float).ravel()
    return shape + 0.5 * e.size, rate + 0.5 * float(e @ e)


def wishart_full_conditional(effects, dof: float) -> tuple[float, np.ndarray]:
    """``(dof, scale)`` of the Wishart full conditional under a ``W(dof, I/dof)`` prior."""
    e = np.asarray(effects, dtype=float)
    D = e.shape[1]
    return dof + e.shape[0], np.linalg.inv(dof * np.eye(D) + e.T @ e)


def update_hypers_crossed(design: CrossedDesign, state: CrossedState, hyper: CrossedHyper, rng,
                          update_tau: bool = False) -> CrossedHyper:
    """Conjugate refresh of every factor precision (and optionally ``tau``)."""
    rng = as_generator(rng)
    D = hyper.D
    new = hyper.copy()
    for k in range(design.K):
        e = state.a[k][:, :D]
        if D == 1:
            a, b = precision_full_conditional(e, *hyper.prec_prior)
            new.T[k] = np.array([[rng.gamma(a, 1.0 / b)]])
        else:
            df, scale = wishart_full_conditional(e, hyper.wishart_dof[k])
            new.T[k] = np.atleast_2d(stats.wishart.rvs(df=df, scale=scale, random_state=rng))
    if update_tau and design.likelihood is Likelihood.GAUSSIAN:
        eta = state.a0[None, :] + sum(state.a[k][design.obs_levels[:, k]] for k in range(design.K))
        r = design.responses - eta
        a, b = hyper.tau_prior
        new.tau = float(rng.gamma(a + 0.5 * r.size, 1.0 / (b + 0.5 * float(np.sum(r * r)))))
    return new


# ----------------------------------------------------------------------------
# chains

@dataclass
class GibbsConfig:
    """Settings of a crossed-model chain.

    ``sampler`` is ``"collapsed"`` or ``"vanilla"``.  ``method`` chooses the
    collapsed level update: ``"auto"`` (exact for Gaussian likelihoods,
    Metropolis-Hastings otherwise), ``"exact"`` or ``"mh"``.  ``clock`` is
    ``"wall"`` for measured time or ``"virtual"`` for a deterministic clock
    that converts counted operations to seconds at ``virtual_flops_per_sec``.
    """

    n_iter: int = 1000
    n_burn: int = 100
    thin: int = 1
    sampler: str = "collapsed"
    method: str = "auto"
    kernel: str = "auto"
    update_hypers: bool = True
    update_tau: bool = False
    record: str = "summary"
    clock: str = "wall"
    virtual_flops_per_sec: float = 1e9
    initial_step: float = 1.0

    def __post_init__(self):
        if self.n_iter < 0 or self.n_burn < 0 or self.thin < 1:
            raise ValidationError("n_iter and n_burn must be >= 0 and thin >= 1")
        if self.sampler not in ("collapsed", "vanilla"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")
        if self.method not in ("auto", "exact", "mh"):
            raise ValidationError(f"unknown method {self.method!r}")
        if self.record not in ("summary", "full"):
            raise ValidationError(f"unknown record mode {self.record!r}")
        if self.clock not in ("wall", "virtual"):
            raise ValidationError(f"unknown clock {self.clock!r}")


def monitored_names(design: CrossedDesign, config: GibbsConfig) -> list:
    D = design.D
    names = [f"a0[{l}]" for l in range(D)]
    names += [f"mean_a{k + 1}[{l}]" for k in range(design.K) for l in range(D)]
    names += [f"inv_prec{k + 1}[{l}]" for k in range(design.K) for l in range(D)]
    if config.update_tau and design.likelihood is Likelihood.GAUSSIAN:
        names.append("inv_tau")
    if config.record == "full":
        names += [f"a{k + 1}_{i}[{l}]" for k, I in enumerate(design.levels) for i in range(I) for l in range(D)]
    return names


def _monitor(design, state, hyper, config) -> np.ndarray:
    D = design.D
    parts = [state.a0[:D]]
    parts += [state.a[k][:, :D].mean(axis=0) for k in range(design.K)]
    parts += [np.diag(np.linalg.inv(hyper.T[k])) for k in range(design.K)]
    if config.update_tau and design.likelihood is Likelihood.GAUSSIAN:
        parts.append([1.0 / hyper.tau])
    if config.record == "full":
        parts += [state.a[k][:, :D].ravel() for k in range(design.K)]
    return np.concatenate([np.ravel(p) for p in parts])


def run_crossed_chain(design: CrossedDesign, hyper: CrossedHyper, config: GibbsConfig, rng,
                      init: CrossedState | None = None):
    """Run a chain and return ``(trace, final_state, final_hyper)``.

    Step sizes adapt during the ``n_burn`` burn-in sweeps only.  Every
    ``thin``-th subsequent sweep is stored.
    """
    if hyper.D != design.D:
        raise ValidationError("hyperparameters and design disagree on the effect dimension")
    rng = as_generator(rng)
    method = config.method
    if method == "auto":
        method = "exact" if design.likelihood is Likelihood.GAUSSIAN else "mh"
    if method == "exact" and design.likelihood is not Likelihood.GAUSSIAN:
        raise ValidationError("exact collapsed updates need a Gaussian likelihood")
    state = CrossedState.zeros(design, delta=config.initial_step) if init is None else init.copy()
    hyper = hyper.copy()
    counter = OpCounter()
    sw = Sweeper(design, counter)
    names = monitored_names(design, config)
    initial = _monitor(design, state, hyper, config)
    n_keep = config.n_iter // config.thin
    draws = np.empty((n_keep, len(names)))
    iters = np.empty(n_keep, dtype=np.int64)
    times = np.empty(n_keep)
    t0 = time.perf_counter()

    def now():
        if config.clock == "wall":
            return time.perf_counter() - t0
        return counter.flops / config.virtual_flops_per_sec

    total = config.n_burn + config.n_iter
    j = 0
    for it in range(1, total + 1):
        adapt_t = it if it <= config.n_burn else None
        if config.sampler == "collapsed":
            sw.collapsed(state, hyper, rng, method=method, adapt_t=adapt_t, kind=config.kernel)
        else:
            sw.vanilla(state, hyper, rng, adapt_t=adapt_t, kind=config.kernel)
        if config.update_hypers:
            hyper = update_hypers_crossed(design, state, hyper, rng, update_tau=config.update_tau)
            counter.add(design.p * design.D ** 2)
        if it > config.n_burn and (it - config.n_burn) % config.thin == 0 and j < n_keep:
            draws[j] = _monitor(design, state, hyper, config)
            iters[j] = it
            times[j] = now()
            j += 1
    acc = {("a0" if k == 0 else f"a{k}"): (a / n if n else None) for k, (a, n) in enumerate(sw.accept)}
    info = {"sampler": config.sampler, "method": method, "clock": config.clock,
            "flops": counter.flops, "acceptance": acc, "sweeps": total}
    trace = ChainTrace(names, draws[:j], iters[:j], times[:j], adapt_boundary=config.n_burn,
                       initial=initial, info=info)
    return trace, state, hyper
