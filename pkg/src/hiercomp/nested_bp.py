"""Exact inference for nested Gaussian models by message passing on the tree.

A message is a triplet ``(log c, C, u)`` representing the function
``x -> c exp(-x'Cx/2 + u'x)``.  The forward pass sends messages from the
leaves to the root; each node combines its own observation message with the
messages of its children and pushes the result through the Gaussian factor
linking it to its parent.  At the root the messages combine with the prior to
give the root posterior and the marginal likelihood of the data.  The
backward pass draws the root and then every child given its parent.

Covariances may be singular: factor messages are computed from PSD square
roots ``Sigma = Gamma' Gamma`` and ``C = B' B`` obtained by eigendecomposition
with eigenvalues below ``1e-12`` times the largest one dropped, so no
covariance is ever inverted.  Nodes of equal depth are processed as one
batch.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .models import NestedTree, NumericalError, ValidationError
from .rng import as_generator
from .trace import ChainTrace

LOG_2PI = np.log(2.0 * np.pi)
EIG_RTOL = 1e-12


@dataclass
class Message:
    """``c exp(-x'Cx/2 + u'x)`` with ``c`` stored on the log scale."""

    logc: float
    C: np.ndarray
    u: np.ndarray

    @classmethod
    def identity(cls, L: int) -> "Message":
        return cls(0.0, np.zeros((L, L)), np.zeros(L))

    def log_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.logc - 0.5 * x @ self.C @ x + self.u @ x)


def _psd_root(S):
    """Batched square roots ``R`` with ``R'R = S``; truncated rows are zero."""
    lam, U = np.linalg.eigh(S)
    top = lam[..., -1:]
    keep = lam > EIG_RTOL * np.maximum(top, 0.0)
    keep &= lam > 0
    root = np.sqrt(np.where(keep, lam, 0.0))
    return root[..., :, None] * np.swapaxes(U, -1, -2)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def leaf_data_message(X, y, tau: float) -> Message:
    """Observation message of ``y ~ N(X beta, I / tau)`` as a function of ``beta``.

    A zero precision (or no rows) gives the identity message.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    L = X.shape[1]
    if tau == 0 or y.size == 0:
        return Message.identity(L)
    if tau < 0:
        raise ValidationError("observation precision must be non-negative")
    return Message(0.5 * y.size * (np.log(tau) - LOG_2PI) - 0.5 * tau * float(y @ y),
                   tau * X.T @ X, tau * X.T @ y)


def _data_messages(tree: NestedTree):
    has = (tree.n_obs > 0) & (tree.tau > 0)
    t = np.where(has, tree.tau, 0.0)
    C = t[:, None, None] * tree.XtX
    u = t[:, None] * tree.Xty
    logc = np.where(has, 0.5 * tree.n_obs * (np.log(np.where(has, tree.tau, 1.0)) - LOG_2PI)
                    - 0.5 * t * tree.yty, 0.0)
    return logc, C, u


def _factor_batch(logc, C, u, A, S):
    """Factor-to-parent messages for a batch of nodes plus backward quantities.

    Returns ``(logc~, C~, u~, Gb, K, Su)`` where the child given its parent
    and its subtree's data is ``N(Gb (A x + Su), K K')``.
    """
    n, L = u.shape
    eye = np.eye(L)
    Gam = _psd_root(S)
    B = _psd_root(C)
    BA = B @ A
    M1 = B @ S @ np.swapaxes(B, 1, 2) + eye
    Ct = np.swapaxes(BA, 1, 2) @ np.linalg.solve(M1, BA)
    CS = C @ S
    z = np.linalg.solve(CS + eye, u[..., None])[..., 0]
    ut = np.einsum("nji,nj->ni", A, z)
    Gi = Gam @ C @ np.swapaxes(Gam, 1, 2) + eye
    G = np.linalg.inv(_sym(Gi))
    sign, logdet_Gi = np.linalg.slogdet(Gi)
    Gu = np.einsum("nij,nj->ni", Gam, u)
    quad = np.einsum("ni,nij,nj->n", Gu, G, Gu)
    logct = logc - 0.5 * logdet_Gi + 0.5 * quad
    Gb = np.linalg.inv(S @ C + eye)
    K = np.swapaxes(Gam, 1, 2) @ np.linalg.cholesky(_sym(G))
    Su = np.einsum("nij,nj->ni", S, u)
    return logct, _sym(Ct), ut, Gb, K, Su


def factor_to_parent_message(msg: Message, A, Sigma) -> Message:
    """Push a message through the factor ``child ~ N(A parent, Sigma)``.

    Integrates the child out of ``N(child; A x, Sigma) * msg(child)`` and
    returns the result as a message in the parent ``x``.
    """
    A = np.asarray(A, dtype=float)
    L = A.shape[0]
    logct, Ct, ut, *_ = _factor_batch(np.array([msg.logc]), msg.C[None], msg.u[None], A[None],
                                      np.asarray(Sigma, dtype=float).reshape(1, L, L))
    return Message(float(logct[0]), Ct[0], ut[0])


def combine_at_variable(messages) -> Message:
    """Product of messages on the same variable."""
    messages = list(messages)
    if not messages:
        raise ValidationError("nothing to combine")
    return Message(float(sum(m.logc for m in messages)), sum(m.C for m in messages),
                   sum(m.u for m in messages))


@dataclass
class MessageSet:
    """Result of a forward pass.

    Attributes
    ----------
    up_logc, up_C, up_u : ndarray
        Combined message at every node (own data times children).
    msg_logc, msg_C, msg_u : ndarray
        Message from every non-root node's factor to its parent.
    T_post, mu_post : ndarray
        Precision and canonical mean (``T_post @ mean``) of the root posterior.
    log_evidence : float
        Log marginal likelihood of all observations.
    flops : float
        Operation count of the forward pass; each backward draw adds
        ``backward_flops``.
    """

    up_logc: np.ndarray
    up_C: np.ndarray
    up_u: np.ndarray
    msg_logc: np.ndarray
    msg_C: np.ndarray
    msg_u: np.ndarray
    Gb: np.ndarray
    K: np.ndarray
    Su: np.ndarray
    T_post: np.ndarray
    mu_post: np.ndarray
    root_mean: np.ndarray
    root_chol: np.ndarray
    log_evidence: float
    flops: float
    backward_flops: float
    levels: list = field(repr=False, default_factory=list)

    def message(self, v: int) -> Message:
        return Message(float(self.msg_logc[v]), self.msg_C[v], self.msg_u[v])

    def combined(self, v: int) -> Message:
        return Message(float(self.up_logc[v]), self.up_C[v], self.up_u[v])


def forward_pass(tree: NestedTree) -> MessageSet:
    """Leaves-to-root message pass, root posterior and marginal likelihood."""
    p, L = tree.p, tree.L
    logc, C, u = _data_messages(tree)
    up_logc, up_C, up_u = logc.copy(), C.copy(), u.copy()
    msg_logc = np.zeros(p)
    msg_C = np.zeros((p, L, L))
    msg_u = np.zeros((p, L))
    Gb = np.zeros((p, L, L))
    K = np.zeros((p, L, L))
    Su = np.zeros((p, L))
    S_all = tree.sigmas()
    levels = [np.nonzero(tree.depth == d)[0] for d in range(tree.max_depth + 1)]
    L3 = float(L) ** 3
    flops = 0.0
    for d in range(tree.max_depth, 0, -1):
        nodes = levels[d]
        lc, Ct, ut, gb, kk, su = _factor_batch(up_logc[nodes], up_C[nodes], up_u[nodes],
                                               tree.A[nodes], S_all[nodes])
        msg_logc[nodes], msg_C[nodes], msg_u[nodes] = lc, Ct, ut
        Gb[nodes], K[nodes], Su[nodes] = gb, kk, su
        par = tree.parent[nodes]
        np.add.at(up_logc, par, lc)
        np.add.at(up_C, par, Ct)
        np.add.at(up_u, par, ut)
        flops += nodes.size * 30.0 * L3
    T_post = _sym(tree.T_prior + up_C[0])
    mu_post = tree.T_prior @ tree.mu_prior + up_u[0]
    try:
        R = np.linalg.cholesky(T_post)
    except np.linalg.LinAlgError:
        raise NumericalError("the root posterior is improper (flat prior without enough data)") from None
    lam = np.linalg.eigvalsh(T_post)
    if lam[0] <= 1e-12 * lam[-1]:
        raise NumericalError("the root posterior is improper (flat prior without enough data)")
    mean = np.linalg.solve(T_post, mu_post)
    logdet_post = 2.0 * np.sum(np.log(np.diag(R)))
    if tree.flat_prior:
        logdet_pr, quad_pr = 0.0, 0.0
    else:
        sign, logdet_pr = np.linalg.slogdet(tree.T_prior)
        if sign <= 0:
            raise ValidationError("a non-flat root prior must have a positive-definite precision")
        quad_pr = float(tree.mu_prior @ tree.T_prior @ tree.mu_prior)
    log_ev = 0.5 * logdet_pr + up_logc[0] - 0.5 * logdet_post + 0.5 * (float(mu_post @ mean) - quad_pr)
    flops += 10.0 * L3
    return MessageSet(up_logc, up_C, up_u, msg_logc, msg_C, msg_u, Gb, K, Su, T_post, mu_post,
                      mean, R, float(log_ev), flops, backward_flops=p * 3.0 * L * L, levels=levels)


def log_marginal_likelihood(tree: NestedTree, msgs: MessageSet | None = None) -> float:
    """``log p(y | gamma)``.

    Under a flat root prior the ``log |T_prior|`` term is dropped, which
    amounts to the prior density ``(2 pi)^{-L/2}`` on the root.
    """
    return (forward_pass(tree) if msgs is None else msgs).log_evidence


def backward_sample(tree: NestedTree, msgs: MessageSet, rng, size: int | None = None, z=None) -> np.ndarray:
    """Exact posterior draw(s) of every node, shape ``(p, L)`` or ``(size, p, L)``.

    The root is drawn from its posterior, then each node given its parent
    and the data in its subtree.  All matrices come from the forward pass, so
    a draw costs ``O(L^2)`` per node.  ``z`` (standard normals of the output
    shape) may be supplied; zeros give the posterior mean.
    """
    p, L = tree.p, tree.L
    shape = (1 if size is None else int(size), p, L)
    if z is None:
        z = as_generator(rng).standard_normal(shape)
    else:
        z = np.asarray(z, dtype=float).reshape(shape)
    beta = np.empty(shape)
    beta[:, 0] = msgs.root_mean + np.linalg.solve(msgs.root_chol.T, z[:, 0].T).T
    for d in range(1, len(msgs.levels)):
        nodes = msgs.levels[d]
        par = tree.parent[nodes]
        m = np.einsum("nij,snj->sni", tree.A[nodes], beta[:, par]) + msgs.Su[nodes][None]
        beta[:, nodes] = (np.einsum("nij,snj->sni", msgs.Gb[nodes], m)
                          + np.einsum("nij,snj->sni", msgs.K[nodes], z[:, nodes]))
    msgs.flops += shape[0] * msgs.backward_flops
    return beta[0] if size is None else beta


def posterior_mean(tree: NestedTree, msgs: MessageSet) -> np.ndarray:
    return backward_sample(tree, msgs, None, z=np.zeros((tree.p, tree.L)))


# ----------------------------------------------------------------------------
# variance parameters

def update_hypers_nested(tree: NestedTree, beta, rng, sigma_df: float | None = None, sigma_scale=None,
                         tau_prior=(0.5, 0.25), update_sigma: bool = True, update_tau: bool = True) -> NestedTree:
    """Conjugate refresh of level covariances and observation precisions.

    Each level-shared covariance has an ``InvWishart(sigma_df, sigma_scale)``
    prior (defaults ``L`` and the identity) and full conditional
    ``InvWishart(sigma_df + n, sigma_scale + sum r r')`` over the residuals
    ``r = beta_child - A beta_parent`` of the nodes it governs.  Node
    overrides are held fixed.  Observation precisions have a Gamma
    ``(shape, rate)`` prior.
    """
    rng = as_generator(rng)
    beta = np.asarray(beta, dtype=float)
    L = tree.L
    df0 = float(L) if sigma_df is None else float(sigma_df)
    scale0 = np.eye(L) if sigma_scale is None else np.asarray(sigma_scale, dtype=float)
    new_sigma = dict(tree.level_sigma)
    if update_sigma:
        resid = beta[1:] - np.einsum("nij,nj->ni", tree.A[1:], beta[tree.parent[1:]])
        over = np.zeros(tree.p, dtype=bool)
        over[list(tree.sigma_override)] = True
        for d in sorted(tree.level_sigma):
            sel = (tree.depth[1:] == d) & ~over[1:]
            r = resid[sel]
            df = df0 + r.shape[0]
            scale = scale0 + r.T @ r
            draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
            new_sigma[d] = np.atleast_2d(draw).reshape(L, L)
    tau = tree.tau.copy()
    if update_tau:
        a0, b0 = tau_prior
        has = tree.n_obs > 0
        rss = (tree.yty - 2.0 * np.einsum("ni,ni->n", beta, tree.Xty)
               + np.einsum("ni,nij,nj->n", beta, tree.XtX, beta))
        shape = a0 + 0.5 * tree.n_obs[has]
        rate = b0 + 0.5 * np.maximum(rss[has], 0.0)
        tau[has] = rng.gamma(shape, 1.0 / rate)
    return tree.with_params(level_sigma=new_sigma, tau=tau)


@dataclass
class NestedConfig:
    n_iter: int = 1000
    n_burn: int = 100
    thin: int = 1
    update_sigma: bool = True
    update_tau: bool = True
    sigma_df: float | None = None
    tau_prior: tuple = (0.5, 0.25)
    record: str = "summary"

    def __post_init__(self):
        if self.n_iter < 0 or self.n_burn < 0 or self.thin < 1:
            raise ValidationError("n_iter and n_burn must be >= 0 and thin >= 1")
        if self.record not in ("summary", "full"):
            raise ValidationError(f"unknown record mode {self.record!r}")


def _nested_monitor(tree, beta, log_ev, config):
    L = tree.L
    parts = [beta[0]]
    parts += [np.diag(tree.level_sigma[d]) for d in sorted(tree.level_sigma)]
    parts.append([log_ev])
    if config.record == "full":
        parts.append(beta.ravel())
    return np.concatenate([np.ravel(x) for x in parts]), (
        [f"root[{l}]" for l in range(L)]
        + [f"sigma_level{d}[{l}]" for d in sorted(tree.level_sigma) for l in range(L)]
        + ["log_evidence"]
        + ([f"beta{v}[{l}]" for v in range(tree.p) for l in range(L)] if config.record == "full" else []))


def run_nested_chain(tree: NestedTree, config: NestedConfig, rng, clock: str = "wall"):
    """Blocked Gibbs chain: exact draw of all nodes, then variance parameters.

    Returns ``(trace, final_tree)``.  With ``clock="virtual"`` the time column
    is the counted operations divided by ``1e9``.
    """
    rng = as_generator(rng)
    t0 = time.perf_counter()
    flops = 0.0
    rows, iters, times = [], [], []
    names = None
    msgs = forward_pass(tree)
    initial, names = _nested_monitor(tree, posterior_mean(tree, msgs), msgs.log_evidence, config)
    total = config.n_burn + config.n_iter
    for it in range(1, total + 1):
        msgs = forward_pass(tree)
        beta = backward_sample(tree, msgs, rng)
        flops += msgs.flops
        if config.update_sigma or config.update_tau:
            tree = update_hypers_nested(tree, beta, rng, sigma_df=config.sigma_df, tau_prior=config.tau_prior,
                                        update_sigma=config.update_sigma, update_tau=config.update_tau)
        if it > config.n_burn and (it - config.n_burn) % config.thin == 0:
            row, _ = _nested_monitor(tree, beta, msgs.log_evidence, config)
            rows.append(row)
            iters.append(it)
            times.append(time.perf_counter() - t0 if clock == "wall" else flops / 1e9)
    trace = ChainTrace(names, np.array(rows).reshape(len(rows), len(names)), iters, times,
                       adapt_boundary=config.n_burn, initial=initial,
                       info={"flops": flops, "clock": clock, "sweeps": total})
    return trace, tree


# ----------------------------------------------------------------------------
# correspondence with the sparse Cholesky factor

def bp_cholesky_correspondence(tree: NestedTree) -> dict:
    """Compare forward-pass quantities with the depth-last Cholesky factor.

    With ``Q = L L'`` under the depth-last ordering and ``L w = b`` (``b`` the
    canonical mean), every non-root node ``v`` with parent ``q`` satisfies

    * ``L_vv L_vv' = C_v + Sigma_v^{-1}``  (``C_v`` the combined message),
    * ``L_vv L_qv' = -Sigma_v^{-1} A_v``,
    * ``L_vv w_v = u_v``,

    and at the root ``L_rr L_rr' = T_post`` and ``L_rr w_r = mu_post``.
    Returns the largest relative discrepancy of each identity.
    """
    from .sparse_factor import (BlockGraph, assemble_Q_nested, assemble_rhs_nested, forward_solve,
                                numeric_cholesky, ordering_depth_last, symbolic_analysis)
    S = tree.sigmas()
    if tree.p > 1 and np.any(np.linalg.eigvalsh(S[1:])[:, 0] <= 1e-12 * max(np.abs(S[1:]).max(), 1.0)):
        warnings.warn("singular covariance: BP-Cholesky identities need invertible Sigma; skipped")
        return {"skipped": "singular covariance"}
    msgs = forward_pass(tree)
    Q = assemble_Q_nested(tree)
    sym = symbolic_analysis(BlockGraph.from_matrix(Q), ordering_depth_last(tree))
    fac = numeric_cholesky(Q, sym)
    w_pos = forward_solve(fac, assemble_rhs_nested(tree))
    w = np.empty_like(w_pos)
    w[sym.perm] = w_pos

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))

    err = {"diag": 0.0, "offdiag": 0.0, "w": 0.0}
    for v in range(1, tree.p):
        Lvv = fac.block(v, v)
        Si = np.linalg.inv(S[v])
        err["diag"] = max(err["diag"], rel(Lvv @ Lvv.T, msgs.up_C[v] + Si))
        Lqv = fac.block(tree.parent[v], v)
        err["offdiag"] = max(err["offdiag"], rel(Lvv @ Lqv.T, -Si @ tree.A[v]))
        err["w"] = max(err["w"], rel(Lvv @ w[v], msgs.up_u[v]))
    Lrr = fac.block(0, 0)
    err["root"] = rel(Lrr @ Lrr.T, msgs.T_post)
    err["root_w"] = rel(Lrr @ w[0], msgs.mu_post)
    err["fill_ratio"] = sym.fill_ratio
    return err
