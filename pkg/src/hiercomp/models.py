"""Core data types for crossed and nested Gaussian hierarchical models.

Crossed models
    ``eta_j = a0 + sum_k a^(k)[i_k[j]]`` with Gaussian, Bernoulli or
    multinomial-logit observations.  For the multinomial logit the last
    coordinate of every effect is pinned at zero, so the free dimension is
    ``L - 1``; prior precision matrices act on the free coordinates only.

Nested models
    A rooted tree of ``L``-vectors.  A child is ``A @ parent`` plus Gaussian
    noise with (possibly singular) covariance; any node may carry a linear
    Gaussian observation block ``y = X beta + noise``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class ValidationError(ValueError):
    """Input rejected before any computation (CLI exit code 2)."""


class NumericalError(ArithmeticError):
    """Numerical breakdown such as a non-PD pivot (CLI exit code 3)."""


class Likelihood(str, Enum):
    GAUSSIAN = "gaussian"
    BINOMIAL = "binomial"
    MULTINOMIAL = "multinomial_logit"

    @classmethod
    def parse(cls, value) -> "Likelihood":
        if isinstance(value, Likelihood):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown likelihood {value!r}") from None


def check_psd(M, name: str, strict: bool = False, tol: float = 1e-10) -> np.ndarray:
    """Validate that ``M`` is a finite symmetric PSD (or PD) matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T), initial=0.0) > tol * scale:
        raise ValidationError(f"{name} is not symmetric")
    M = 0.5 * (M + M.T)
    if M.size:
        lam = np.linalg.eigvalsh(M)
        if lam[0] < -tol * scale:
            raise ValidationError(f"{name} is not positive semidefinite (min eigenvalue {lam[0]:.3g})")
        if strict and lam[0] <= tol * scale:
            raise ValidationError(f"{name} must be positive definite")
    return M


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CrossedDesign:
    """Observations of a crossed random-effects model.

    Attributes
    ----------
    levels : tuple of int
        Number of levels ``I_k`` of each factor.
    obs_levels : ndarray, shape (N, K)
        Zero-based level index of each observation in each factor.
    responses : ndarray, shape (N, L)
        Gaussian responses, 0/1 indicators (binomial, ``L == 1``) or one-hot
        rows (multinomial logit, ``L >= 2``).
    likelihood : Likelihood
    labels : tuple of tuple of str, optional
        External label of every level, used for round-tripping files.
    """

    levels: tuple
    obs_levels: np.ndarray
    responses: np.ndarray
    likelihood: Likelihood = Likelihood.GAUSSIAN
    labels: tuple | None = None
    factor_names: tuple | None = None
    response_names: tuple | None = None

    def __post_init__(self):
        lik = Likelihood.parse(self.likelihood)
        levels = tuple(int(i) for i in self.levels)
        if len(levels) < 1 or any(i < 1 for i in levels):
            raise ValidationError("every factor needs at least one level")
        K = len(levels)
        obs = np.asarray(self.obs_levels)
        if obs.size == 0:
            obs = np.zeros((0, K), dtype=np.int64)
        if obs.ndim != 2 or obs.shape[1] != K:
            raise ValidationError(f"obs_levels must have shape (N, {K})")
        if not np.issubdtype(obs.dtype, np.integer):
            if not np.all(obs == np.round(obs)):
                raise ValidationError("level indices must be integers")
        obs = obs.astype(np.int64)
        if obs.size and (obs.min() < 0 or np.any(obs.max(axis=0) >= np.array(levels))):
            raise ValidationError("level index out of range")
        y = np.asarray(self.responses, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != obs.shape[0]:
            raise ValidationError("responses and obs_levels disagree on N")
        if not np.all(np.isfinite(y)):
            raise ValidationError("responses must be finite")
        if lik is Likelihood.BINOMIAL:
            if y.shape[1] != 1 or np.any((y != 0) & (y != 1)):
                raise ValidationError("binomial responses must be a single 0/1 column")
        elif lik is Likelihood.MULTINOMIAL:
            if y.shape[1] < 2:
                raise ValidationError("multinomial logit needs L >= 2 one-hot columns")
            if np.any((y != 0) & (y != 1)) or np.any(y.sum(axis=1) != 1):
                raise ValidationError("multinomial responses must be one-hot rows")
        if self.labels is not None:
            labels = tuple(tuple(str(s) for s in lab) for lab in self.labels)
            if len(labels) != K or any(len(lab) != i for lab, i in zip(labels, levels)):
                raise ValidationError("labels must list one label per level")
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "likelihood", lik)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "obs_levels", _readonly(obs))
        object.__setattr__(self, "responses", _readonly(y))

    @property
    def K(self) -> int:
        return len(self.levels)

    @property
    def N(self) -> int:
        return self.obs_levels.shape[0]

    @property
    def L(self) -> int:
        return self.responses.shape[1]

    @property
    def D(self) -> int:
        """Free dimension of each effect vector."""
        return self.L - 1 if self.likelihood is Likelihood.MULTINOMIAL else self.L

    @property
    def p(self) -> int:
        """Number of random-effect levels, ``sum_k I_k``."""
        return int(sum(self.levels))

    @property
    def mean_degree(self) -> float:
        """Average number of observations per level, ``K N / p``."""
        return self.K * self.N / self.p

    def offsets(self) -> np.ndarray:
        """Block index of the first level of each factor (block 0 is the intercept)."""
        return 1 + np.concatenate([[0], np.cumsum(self.levels)[:-1]]).astype(np.int64)


@dataclass
class CrossedHyper:
    """Prior settings and current variance parameters of a crossed model.

    Attributes
    ----------
    T_prior, mu_prior : ndarray
        Precision (may be zero for a flat prior) and mean of the intercept.
    T : list of ndarray
        Current precision matrix ``T_k`` of every factor, shape ``(D, D)``.
    tau : float
        Observation precision (Gaussian likelihood only).
    wishart_dof : list of float, optional
        Degrees of freedom ``nu_k`` of the ``Wishart(nu_k, I / nu_k)`` prior
        used when ``D > 1``; defaults to ``D``.
    prec_prior : tuple
        ``(shape, rate)`` of the Gamma prior on scalar precisions ``tau_k``.
    tau_prior : tuple
        ``(shape, rate)`` of the Gamma prior on the Gaussian precision.
    """

    T_prior: np.ndarray
    mu_prior: np.ndarray
    T: list
    tau: float = 1.0
    wishart_dof: list | None = None
    prec_prior: tuple = (0.5, 0.5)
    tau_prior: tuple = (0.5, 0.5)

    def __post_init__(self):
        self.T_prior = check_psd(self.T_prior, "T_prior")
        D = self.T_prior.shape[0]
        self.mu_prior = np.asarray(self.mu_prior, dtype=float).reshape(D)
        self.T = [check_psd(t, f"T[{k}]", strict=True) for k, t in enumerate(self.T)]
        if any(t.shape != (D, D) for t in self.T):
            raise ValidationError("factor precisions must match the intercept dimension")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ValidationError("tau must be a positive finite number")
        if self.wishart_dof is None:
            self.wishart_dof = [float(D)] * len(self.T)
        if len(self.wishart_dof) != len(self.T) or any(v <= D - 1 for v in self.wishart_dof):
            raise ValidationError("Wishart degrees of freedom must exceed D - 1")
        for name, (a, b) in (("prec_prior", self.prec_prior), ("tau_prior", self.tau_prior)):
            if not (a > 0 and b > 0):
                raise ValidationError(f"{name} must have positive shape and rate")

    @property
    def D(self) -> int:
        return self.T_prior.shape[0]

    @classmethod
    def default(cls, design: CrossedDesign, prec: float = 1.0, prior_prec: float = 0.0,
                tau: float = 1.0, **kw) -> "CrossedHyper":
        D = design.D
        return cls(T_prior=prior_prec * np.eye(D), mu_prior=np.zeros(D),
                   T=[prec * np.eye(D) for _ in range(design.K)], tau=tau, **kw)

    def copy(self, **changes) -> "CrossedHyper":
        """Shallow copy with fresh precision matrices (skips re-validation)."""
        new = object.__new__(CrossedHyper)
        new.__dict__.update(self.__dict__)
        new.T = [t.copy() for t in self.T]
        for k, v in changes.items():
            setattr(new, k, v)
        return new


@dataclass
class CrossedState:
    """Current effects of a crossed model.

    ``a0`` has shape ``(L,)`` and ``a[k]`` shape ``(I_k, L)``; for the
    multinomial logit the last column is identically zero.  ``delta`` holds the
    per-level step sizes of the gradient kernel; the intercept step size used
    by the non-collapsed sampler lives in ``delta0``.
    """

    a0: np.ndarray
    a: list
    delta: list = field(default_factory=list)
    delta0: float = 1.0

    @classmethod
    def zeros(cls, design: CrossedDesign, delta: float = 1.0) -> "CrossedState":
        L = design.L
        return cls(a0=np.zeros(L), a=[np.zeros((i, L)) for i in design.levels],
                   delta=[np.full(i, float(delta)) for i in design.levels], delta0=float(delta))

    def copy(self) -> "CrossedState":
        return CrossedState(self.a0.copy(), [x.copy() for x in self.a],
                            [d.copy() for d in self.delta], self.delta0)

    def flat(self) -> np.ndarray:
        """Concatenate ``a0`` and all factor effects into one vector."""
        return np.concatenate([self.a0.ravel()] + [x.ravel() for x in self.a])


@dataclass
class NestedTree:
    """A nested Gaussian model on a rooted tree.

    Nodes are stored in breadth-first order, so ``parent[v] < v`` and node 0
    is the root.  Level-shared covariances are keyed by the depth of the
    child they govern (``1`` for the children of the root).

    Attributes
    ----------
    parent : ndarray of int, shape (p,)
        Parent index, ``-1`` for the root.
    A : ndarray, shape (p, L, L)
        Linear map from the parent to each node (the root entry is unused).
    level_sigma : dict
        ``depth -> (L, L)`` PSD covariance shared by the nodes at that depth.
    sigma_override : dict
        ``node -> (L, L)`` node-specific covariances overriding the level.
    XtX, Xty, yty, n_obs : ndarray
        Sufficient statistics of each node's observation block.
    tau : ndarray, shape (p,)
        Observation precision of each node (ignored where ``n_obs == 0``).
    mu_prior, T_prior : ndarray
        Prior mean and precision of the root (zero precision = flat).
    """

    parent: np.ndarray
    A: np.ndarray
    level_sigma: dict
    XtX: np.ndarray
    Xty: np.ndarray
    yty: np.ndarray
    n_obs: np.ndarray
    tau: np.ndarray
    mu_prior: np.ndarray
    T_prior: np.ndarray
    sigma_override: dict = field(default_factory=dict)
    paths: list | None = None
    X: list | None = None
    y: list | None = None

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        p = self.parent.shape[0]
        if p < 1 or self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise ValidationError("node 0 must be the unique root")
        if np.any(self.parent[1:] >= np.arange(1, p)):
            raise ValidationError("nodes must be ordered so that parents precede children")
        self.A = np.asarray(self.A, dtype=float)
        L = self.A.shape[-1]
        if self.A.shape != (p, L, L):
            raise ValidationError("A must have shape (p, L, L)")
        self.T_prior = check_psd(self.T_prior, "T_prior")
        self.mu_prior = np.asarray(self.mu_prior, dtype=float).reshape(L)
        self.level_sigma = {int(d): check_psd(s, f"Sigma[level {d}]") for d, s in self.level_sigma.items()}
        self.sigma_override = {int(v): check_psd(s, f"Sigma[node {v}]") for v, s in self.sigma_override.items()}
        self.XtX = np.asarray(self.XtX, dtype=float).reshape(p, L, L)
        self.Xty = np.asarray(self.Xty, dtype=float).reshape(p, L)
        self.yty = np.asarray(self.yty, dtype=float).reshape(p)
        self.n_obs = np.asarray(self.n_obs, dtype=np.int64).reshape(p)
        self.tau = np.asarray(self.tau, dtype=float).reshape(p)
        if np.any(self.tau < 0) or not np.all(np.isfinite(self.tau)):
            raise ValidationError("observation precisions must be non-negative")
        depth = np.zeros(p, dtype=np.int64)
        for v in range(1, p):
            depth[v] = depth[self.parent[v]] + 1
        self.depth = depth
        for v in range(1, p):
            if v not in self.sigma_override and int(depth[v]) not in self.level_sigma:
                raise ValidationError(f"no covariance for node {v} at depth {depth[v]}")

    @property
    def p(self) -> int:
        return self.parent.shape[0]

    @property
    def L(self) -> int:
        return self.A.shape[-1]

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    @property
    def flat_prior(self) -> bool:
        return not np.any(self.T_prior)

    def children(self) -> list:
        ch = [[] for _ in range(self.p)]
        for v in range(1, self.p):
            ch[self.parent[v]].append(v)
        return ch

    def sigmas(self) -> np.ndarray:
        """Covariance of every node given its parent, shape ``(p, L, L)``."""
        out = np.zeros((self.p, self.L, self.L))
        for d, s in self.level_sigma.items():
            out[self.depth == d] = s
        for v, s in self.sigma_override.items():
            out[v] = s
        out[0] = 0.0
        return out

    def leaves_to_root(self) -> np.ndarray:
        """Node indices in a topological order that visits children first."""
        return np.argsort(-self.depth, kind="stable")

    def with_params(self, level_sigma=None, tau=None) -> "NestedTree":
        new = replace(self, level_sigma=dict(self.level_sigma if level_sigma is None else level_sigma),
                      tau=self.tau.copy() if tau is None else np.asarray(tau, dtype=float))
        return new

    @classmethod
    def from_nodes(cls, nodes, L: int, level_sigma: dict, mu_prior=None, T_prior=None,
                   sigma_override_by_path: dict | None = None) -> "NestedTree":
        """Build a tree from node records keyed by path.

        Parameters
        ----------
        nodes : iterable of dict
            Each record has ``path`` (tuple; ``()`` is the root) and optionally
            ``A``, ``X``, ``y``, ``tau`` and ``Sigma`` (a node override).
        """
        recs = {}
        for rec in nodes:
            path = tuple(rec.get("path", ()))
            if path in recs:
                raise ValidationError(f"duplicate node path {path}")
            recs[path] = rec
        if () not in recs:
            raise ValidationError("the tree has no root (empty path)")
        for path in recs:
            if path and path[:-1] not in recs:
                raise ValidationError(f"orphan node {path}: parent {path[:-1]} missing")
        # breadth-first order, siblings in insertion order
        order = sorted(recs, key=lambda q: len(q))
        index = {q: i for i, q in enumerate(order)}
        p = len(order)
        parent = np.array([-1] + [index[q[:-1]] for q in order[1:]], dtype=np.int64)
        A = np.zeros((p, L, L))
        XtX = np.zeros((p, L, L))
        Xty = np.zeros((p, L))
        yty = np.zeros(p)
        n_obs = np.zeros(p, dtype=np.int64)
        tau = np.zeros(p)
        Xs, ys, override = [], [], {}
        for i, q in enumerate(order):
            rec = recs[q]
            A[i] = np.asarray(rec.get("A", np.eye(L)), dtype=float).reshape(L, L)
            X = rec.get("X")
            if X is not None and len(X):
                X = np.asarray(X, dtype=float).reshape(-1, L)
                y = np.asarray(rec["y"], dtype=float).reshape(-1)
                if y.shape[0] != X.shape[0]:
                    raise ValidationError(f"node {q}: X and y disagree on the number of rows")
                XtX[i], Xty[i], yty[i], n_obs[i] = X.T @ X, X.T @ y, y @ y, X.shape[0]
                tau[i] = float(rec.get("tau", 1.0))
            else:
                X = np.zeros((0, L))
                y = np.zeros(0)
            Xs.append(X)
            ys.append(y)
            if "Sigma" in rec and rec["Sigma"] is not None:
                override[i] = np.asarray(rec["Sigma"], dtype=float).reshape(L, L)
        if sigma_override_by_path:
            for q, s in sigma_override_by_path.items():
                override[index[tuple(q)]] = s
        mu_prior = np.zeros(L) if mu_prior is None else mu_prior
        T_prior = np.eye(L) if T_prior is None else T_prior
        return cls(parent=parent, A=A, level_sigma=level_sigma, XtX=XtX, Xty=Xty, yty=yty,
                   n_obs=n_obs, tau=tau, mu_prior=mu_prior, T_prior=T_prior,
                   sigma_override=override, paths=order, X=Xs, y=ys)
