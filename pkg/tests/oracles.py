"""Independent dense reference computations used by the tests.

Nothing here calls the package's inference code: nested models are expanded
into a dense Gaussian through the ancestral linear map, crossed models through
the explicit design matrix.
"""
import numpy as np
from scipy import stats
from scipy.special import expit, logsumexp

from hiercomp.crossed_gibbs import LevelTarget
from hiercomp.models import Likelihood, NestedTree


def random_tree(rng, p_max=50, L=2, singular=False, data_prob=0.7, max_children=4, depth_max=3):
    """Random tree (as node records) with random maps and observation blocks."""
    nodes = [{"path": ()}]
    frontier = [()]
    while frontier and len(nodes) < p_max:
        par = frontier.pop(0)
        if len(par) >= depth_max:
            continue
        for c in range(int(rng.integers(1, max_children + 1))):
            if len(nodes) >= p_max:
                break
            path = par + (c,)
            rec = {"path": path, "A": np.eye(L) + 0.3 * rng.normal(size=(L, L))}
            if rng.random() < data_prob:
                n = int(rng.integers(1, 5))
                rec.update(X=rng.normal(size=(n, L)), y=rng.normal(size=n), tau=float(rng.uniform(0.5, 2.0)))
            nodes.append(rec)
            frontier.append(path)
    sig = {}
    for d in range(1, depth_max + 1):
        B = rng.normal(size=(L, L))
        S = B @ B.T + 0.2 * np.eye(L)
        if singular and d == 1 and L > 1:
            v = rng.normal(size=L)
            S = np.outer(v, v)
        sig[d] = S
    mu = rng.normal(size=L)
    T = np.eye(L) * rng.uniform(0.5, 2.0)
    return nodes, sig, mu, T


def build_tree(rng, **kw):
    nodes, sig, mu, T = random_tree(rng, **kw)
    L = kw.get("L", 2)
    return NestedTree.from_nodes(nodes, L, sig, mu_prior=mu, T_prior=T)


def nested_dense(tree):
    """Joint prior mean/cov of all nodes, observation map and data.

    Returns dict with prior mean ``m``, prior covariance ``P``, observation
    matrix ``H``, data ``y``, noise covariance ``R``, the evidence, and the
    posterior mean ``pm``, covariance ``pc`` and precision ``pq``.
    """
    p, L = tree.p, tree.L
    S = np.zeros((p, L, L))
    for v in range(1, p):
        S[v] = tree.sigma_override.get(v, tree.level_sigma.get(int(tree.depth[v])))
    M = np.zeros((p, L, p, L))
    for v in range(p):
        M[v, :, v, :] = np.eye(L)
        if v:
            M[v] += np.einsum("ij,jwk->iwk", tree.A[v], M[tree.parent[v]])
    M = M.reshape(p * L, p * L)
    E = np.zeros((p * L, p * L))
    E[:L, :L] = np.linalg.inv(tree.T_prior)
    for v in range(1, p):
        E[v * L:(v + 1) * L, v * L:(v + 1) * L] = S[v]
    m = M[:, :L] @ tree.mu_prior
    P = M @ E @ M.T
    rows, ys, noise = [], [], []
    for v in range(p):
        X, y = tree.X[v], tree.y[v]
        for r in range(X.shape[0]):
            h = np.zeros(p * L)
            h[v * L:(v + 1) * L] = X[r]
            rows.append(h)
            ys.append(y[r])
            noise.append(1.0 / tree.tau[v])
    out = {"m": m, "P": P}
    if not rows:
        out.update(evidence=0.0, pm=m, pc=P)
        return out
    H, y, R = np.array(rows), np.array(ys), np.diag(noise)
    Sy = H @ P @ H.T + R
    out["evidence"] = float(stats.multivariate_normal(H @ m, Sy).logpdf(y))
    K = P @ H.T @ np.linalg.inv(Sy)
    out["pm"] = m + K @ (y - H @ m)
    out["pc"] = P - K @ H @ P
    return out


def crossed_dense_posterior(design, hyper):
    """Posterior mean and covariance of (a0, a^(1), ..., a^(K)), Gaussian, L=1."""
    N, p = design.N, design.p
    X = np.zeros((N, p + 1))
    X[:, 0] = 1.0
    off = 1
    for k, I in enumerate(design.levels):
        X[np.arange(N), off + design.obs_levels[:, k]] = 1.0
        off += I
    prior = np.zeros(p + 1)
    prior[0] = hyper.T_prior[0, 0]
    off = 1
    for k, I in enumerate(design.levels):
        prior[off:off + I] = hyper.T[k][0, 0]
        off += I
    Q = np.diag(prior) + hyper.tau * X.T @ X
    b = hyper.tau * X.T @ design.responses[:, 0]
    b[0] += hyper.T_prior[0, 0] * hyper.mu_prior[0]
    C = np.linalg.inv(Q)
    return C @ b, C, Q


# ---------------------------------------------------------------- crossed MH kernels

def random_target(rng, lik, n_levels, D=1):
    n_obs = int(rng.integers(n_levels, 4 * n_levels))
    idx = np.sort(rng.integers(0, n_levels, n_obs))
    if lik is Likelihood.GAUSSIAN:
        y = rng.normal(size=(n_obs, D))
    elif lik is Likelihood.BINOMIAL:
        y = rng.integers(0, 2, (n_obs, 1)).astype(float)
    else:
        y = np.eye(D + 1)[rng.integers(0, D + 1, n_obs)]
    A = rng.normal(size=(D, D))
    T = A @ A.T + 0.3 * np.eye(D)
    return LevelTarget(lik, y, float(rng.uniform(0.5, 2)), rng.normal(size=(n_obs, D)), idx, n_levels,
                       rng.normal(size=(n_levels, D)), T)


def log_pi(t, x):
    """Unnormalised log conditional density of each level, computed directly."""
    eta = t.offset + x[t.idx]
    if t.lik is Likelihood.GAUSSIAN:
        terms = stats.norm.logpdf(t.y, eta, 1 / np.sqrt(t.tau)).sum(axis=1)
    elif t.lik is Likelihood.BINOMIAL:
        terms = np.where(t.y[:, 0] == 1, np.log(expit(eta[:, 0])), np.log(expit(-eta[:, 0])))
    else:
        full = np.column_stack([eta, np.zeros(len(eta))])
        terms = np.sum(t.y * (full - logsumexp(full, axis=1, keepdims=True)), axis=1)
    ll = np.bincount(t.idx, weights=terms, minlength=t.n_levels)
    prior = [stats.multivariate_normal.logpdf(x[i], t.center[i], np.linalg.inv(t.T)) for i in range(t.n_levels)]
    return ll + np.array(prior)


def grad_hess(t, x):
    eta = t.offset + x[t.idx]
    if t.lik is Likelihood.GAUSSIAN:
        g, h = t.tau * (t.y - eta), np.full(len(eta), -t.tau)
    elif t.lik is Likelihood.BINOMIAL:
        s = expit(eta[:, 0])
        g, h = (t.y[:, 0] - s)[:, None], -s * (1 - s)
    else:
        full = np.column_stack([eta, np.zeros(len(eta))])
        prob = np.exp(full - logsumexp(full, axis=1, keepdims=True))
        g, h = (t.y - prob)[:, :-1], None
    G = np.array([np.bincount(t.idx, weights=g[:, j], minlength=t.n_levels) for j in range(g.shape[1])]).T
    H = None if h is None else np.bincount(t.idx, weights=h, minlength=t.n_levels)
    return G, H


def log_q_second_order(t, x, x_to):
    g, h = grad_hess(t, x)
    T = t.T[0, 0]
    c = 1 / (T - h)
    m = c * (g[:, 0] + T * t.center[:, 0] - h * x[:, 0])
    return stats.norm.logpdf(x_to[:, 0], m, np.sqrt(c))


def log_q_gradient(t, delta, x, x_to):
    g, _ = grad_hess(t, x)
    out = []
    for i in range(t.n_levels):
        C = np.linalg.inv(t.T + np.eye(t.D) / delta[i])
        m = C @ (x[i] / delta[i] + g[i] + t.T @ t.center[i])
        out.append(stats.multivariate_normal.logpdf(x_to[i], m, C + C @ C / delta[i]))
    return np.array(out)


def importance_reference(design, hyper, n=400_000, seed=0):
    """Posterior means and sds of (a0, a^(1), a^(2)) for a binomial design by
    importance sampling from a widened Laplace approximation."""
    N = design.N
    X = np.zeros((N, 1 + design.p))
    X[:, 0] = 1
    X[np.arange(N), 1 + design.obs_levels[:, 0]] = 1
    X[np.arange(N), 1 + design.levels[0] + design.obs_levels[:, 1]] = 1
    P = np.diag([hyper.T_prior[0, 0]] + [hyper.T[0][0, 0]] * design.levels[0] + [hyper.T[1][0, 0]] * design.levels[1])
    y = design.responses[:, 0]
    th = np.zeros(X.shape[1])
    for _ in range(50):
        s = expit(X @ th)
        H = X.T @ (X * (s * (1 - s))[:, None]) + P
        th = th + np.linalg.solve(H, X.T @ (y - s) - P @ th)
    prop = stats.multivariate_t(loc=th, shape=1.5 * np.linalg.inv(H), df=5, seed=seed)
    z = prop.rvs(size=n)
    eta = z @ X.T
    logp = (y * eta - np.logaddexp(0, eta)).sum(axis=1) - 0.5 * np.einsum("ij,jk,ik->i", z, P, z)
    lw = logp - prop.logpdf(z)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    mean = w @ z
    var = w @ (z - mean) ** 2
    se = np.sqrt(np.sum(w[:, None] ** 2 * (z - mean) ** 2, axis=0))
    return mean, np.sqrt(var), se
