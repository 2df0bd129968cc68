"""Block-sparse Cholesky factorisation of posterior precision matrices.

The posterior of the effects of a Gaussian hierarchical model given the
variance parameters is ``N(Q^{-1} b, Q^{-1})`` with a sparse block precision
``Q``.  This module assembles ``Q`` and ``b`` for crossed and nested models,
predicts the sparsity of the Cholesky factor for a given ordering, computes
the numeric factor while counting floating-point operations, and draws exact
samples by two triangular solves.

Orderings are permutations ``perm`` with ``perm[pos] = block``: the block
eliminated at position ``pos``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401  (registers sp.linalg)
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .designs import cooccurrence_counts
from .models import CrossedDesign, CrossedHyper, Likelihood, NestedTree, NumericalError, ValidationError
from .rng import as_generator


@dataclass
class BlockSparseMatrix:
    """Symmetric block matrix storing the diagonal and the strict lower triangle.

    Attributes
    ----------
    diag : ndarray, shape (M, L, L)
    rows, cols : ndarray of int
        Block coordinates of the stored off-diagonal blocks, ``rows > cols``.
    vals : ndarray, shape (nnz, L, L)
        ``vals[e]`` is the block ``Q[rows[e], cols[e]]``.
    """

    diag: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        L = self.diag.shape[-1]
        self.vals = np.asarray(self.vals, dtype=float).reshape(-1, L, L)
        if np.any(self.rows <= self.cols):
            raise ValidationError("only strictly lower-triangular blocks may be stored")

    @property
    def M(self) -> int:
        return self.diag.shape[0]

    @property
    def L(self) -> int:
        return self.diag.shape[-1]

    @property
    def n_lower(self) -> int:
        """Non-zero blocks in the lower triangle, diagonal included."""
        return self.M + self.rows.shape[0]

    @property
    def n_full(self) -> int:
        """Non-zero blocks counted over whole rows (both triangles)."""
        return self.M + 2 * self.rows.shape[0]

    def to_scipy(self) -> sp.csr_matrix:
        """Scalar symmetric sparse matrix of size ``M L``."""
        L = self.L
        bi, bj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
        dr = (np.arange(self.M)[:, None, None] * L + bi).ravel()
        dc = (np.arange(self.M)[:, None, None] * L + bj).ravel()
        orr = (self.rows[:, None, None] * L + bi).ravel()
        occ = (self.cols[:, None, None] * L + bj).ravel()
        r = np.concatenate([dr, orr, occ])
        c = np.concatenate([dc, occ, orr])
        v = np.concatenate([self.diag.ravel(), self.vals.ravel(), self.vals.ravel()])
        n = self.M * L
        return sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


@dataclass
class BlockGraph:
    """Undirected sparsity graph of a symmetric block matrix."""

    M: int
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_matrix(cls, Q: BlockSparseMatrix) -> "BlockGraph":
        return cls(Q.M, Q.rows.copy(), Q.cols.copy())

    def adjacency(self) -> sp.csr_matrix:
        n = self.rows.shape[0]
        A = sp.coo_matrix((np.ones(2 * n), (np.concatenate([self.rows, self.cols]),
                                            np.concatenate([self.cols, self.rows]))),
                          shape=(self.M, self.M)).tocsr()
        A.sum_duplicates()
        A.data[:] = 1.0
        return A


def block_matrix_from_scipy(A, L: int = 1, tol: float = 1e-12) -> BlockSparseMatrix:
    """Block view of a symmetric scalar sparse matrix with ``L x L`` blocks."""
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or n % L:
        raise ValidationError(f"matrix of shape {A.shape} is not square with size divisible by {L}")
    scale = max(abs(A).max(), 1.0) if A.nnz else 1.0
    if A.nnz and abs(A - A.T).max() > tol * scale:
        raise ValidationError("matrix is not symmetric")
    M = n // L
    coo = A.tocoo()
    br, bc = coo.row // L, coo.col // L
    keep = br >= bc
    br, bc, r, c, v = br[keep], bc[keep], coo.row[keep] % L, coo.col[keep] % L, coo.data[keep]
    diag = np.zeros((M, L, L))
    on = br == bc
    np.add.at(diag, (br[on], r[on], c[on]), v[on])
    diag = np.tril(diag) + np.swapaxes(np.tril(diag, -1), 1, 2)
    off = ~on
    pairs, inv = np.unique(np.stack([br[off], bc[off]], axis=1), axis=0, return_inverse=True)
    vals = np.zeros((pairs.shape[0], L, L))
    np.add.at(vals, (inv.ravel(), r[off], c[off]), v[off])
    return BlockSparseMatrix(diag, pairs[:, 0] if pairs.size else np.zeros(0, np.int64),
                             pairs[:, 1] if pairs.size else np.zeros(0, np.int64), vals)


# ----------------------------------------------------------------------------
# assembly

def assemble_Q_crossed(design: CrossedDesign, hyper: CrossedHyper) -> BlockSparseMatrix:
    """Posterior precision of ``(a0, a^(1), ..., a^(K))`` for a Gaussian crossed model.

    Block 0 is the intercept and factor ``k`` occupies blocks
    ``offsets[k] .. offsets[k] + I_k - 1``.
    """
    if design.likelihood is not Likelihood.GAUSSIAN:
        raise ValidationError("the posterior precision is only Gaussian for Gaussian likelihoods")
    L, tau = design.L, hyper.tau
    eye = np.eye(L)
    stats = cooccurrence_counts(design)
    off = design.offsets()
    diag = np.zeros((1 + design.p, L, L))
    diag[0] = hyper.T_prior + design.N * tau * eye
    rows, cols, vals = [], [], []
    for k, n in enumerate(stats.counts):
        idx = off[k] + np.arange(design.levels[k])
        diag[idx] = hyper.T[k] + (n * tau)[:, None, None] * eye
        nz = np.nonzero(n)[0]
        rows.append(idx[nz])
        cols.append(np.zeros(nz.size, dtype=np.int64))
        vals.append((n[nz] * tau)[:, None, None] * eye)
    for (k, l), M in stats.pair_counts.items():
        C = M.tocoo()
        rows.append(off[l] + C.col)
        cols.append(off[k] + C.row)
        vals.append((C.data * tau)[:, None, None] * eye)
    return BlockSparseMatrix(diag, np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals) if vals else np.zeros((0, L, L)))


def assemble_rhs_crossed(design: CrossedDesign, hyper: CrossedHyper) -> np.ndarray:
    """Canonical mean vector ``b`` with ``Q E[theta] = b``, shape ``(1 + p, L)``."""
    tau, y = hyper.tau, design.responses
    b = np.zeros((1 + design.p, design.L))
    b[0] = hyper.T_prior @ hyper.mu_prior + tau * y.sum(axis=0)
    off = design.offsets()
    for k, I in enumerate(design.levels):
        for l in range(design.L):
            b[off[k]:off[k] + I, l] = tau * np.bincount(design.obs_levels[:, k], weights=y[:, l], minlength=I)
    return b


def _pd_inverse(S, what):
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValidationError(f"{what} must be positive definite for the precision form") from None
    ci = np.linalg.inv(c)
    return ci.T @ ci


def assemble_Q_nested(tree: NestedTree) -> BlockSparseMatrix:
    """Posterior precision of all node vectors of a nested model (node order)."""
    p, L = tree.p, tree.L
    S = tree.sigmas()
    diag = tree.tau[:, None, None] * tree.XtX
    diag[0] += tree.T_prior
    vals = np.zeros((p - 1, L, L))
    for v in range(1, p):
        Si = _pd_inverse(S[v], f"Sigma of node {v}")
        A = tree.A[v]
        diag[v] += Si
        diag[tree.parent[v]] += A.T @ Si @ A
        vals[v - 1] = -Si @ A
    return BlockSparseMatrix(diag, np.arange(1, p), tree.parent[1:].copy(), vals)


def assemble_rhs_nested(tree: NestedTree) -> np.ndarray:
    b = tree.tau[:, None] * tree.Xty
    b[0] += tree.T_prior @ tree.mu_prior
    return b


# ----------------------------------------------------------------------------
# orderings

def ordering_natural(M: int) -> np.ndarray:
    return np.arange(M, dtype=np.int64)


def ordering_depth_last(tree: NestedTree) -> np.ndarray:
    """Deepest nodes first and the root last; every child precedes its parent."""
    return np.argsort(-tree.depth, kind="stable").astype(np.int64)


def ordering_crossed_default(design: CrossedDesign) -> np.ndarray:
    """Factor levels in factor order, intercept last."""
    return np.concatenate([np.arange(1, 1 + design.p), [0]]).astype(np.int64)


def ordering_rcm(graph: BlockGraph) -> np.ndarray:
    """Reverse Cuthill-McKee ordering of the block graph."""
    return np.asarray(reverse_cuthill_mckee(graph.adjacency(), symmetric_mode=True), dtype=np.int64)


ORDERINGS = {
    "natural": lambda model, graph: ordering_natural(graph.M),
    "depth_last": lambda model, graph: ordering_depth_last(_require(model, NestedTree, "depth_last")),
    "intercept_last": lambda model, graph: ordering_crossed_default(_require(model, CrossedDesign, "intercept_last")),
    "rcm": lambda model, graph: ordering_rcm(graph),
}


def _require(model, cls, name):
    if not isinstance(model, cls):
        raise ValidationError(f"ordering {name!r} needs a {cls.__name__}")
    return model


def get_ordering(name: str, model, graph: BlockGraph) -> np.ndarray:
    try:
        fn = ORDERINGS[name]
    except KeyError:
        raise ValidationError(f"unknown ordering {name!r}; choose from {sorted(ORDERINGS)}") from None
    perm = fn(model, graph)
    if sorted(perm.tolist()) != list(range(graph.M)):
        raise ValidationError("ordering is not a permutation of the blocks")
    return perm


# ----------------------------------------------------------------------------
# symbolic analysis

def _block_flops(n_off: np.ndarray, L: int) -> np.ndarray:
    """Operation count of each column: factor the pivot, solve the column,
    and apply the symmetric rank-L update to every pair of its rows."""
    L3, L2 = float(L) ** 3, float(L) ** 2
    n_off = n_off.astype(float)
    return L3 + n_off * L3 + n_off * (n_off + 1) / 2 * (L3 + L2)


@dataclass
class SymbolicFactor:
    """Predicted block structure of the Cholesky factor for one ordering.

    Attributes
    ----------
    perm, inv_perm : ndarray
        ``perm[pos] = block`` and its inverse.
    col_rows : list of ndarray
        Sorted positions of the strictly-lower non-zero blocks of each column.
    n_col : ndarray
        Non-zero blocks per column, diagonal included.
    etree : ndarray
        Elimination-tree parent of each position (-1 for roots).
    n_Q, n_Q_full : int
        Non-zeros of ``Q`` (lower triangle with diagonal; whole rows).
    """

    perm: np.ndarray
    inv_perm: np.ndarray
    col_rows: list
    n_col: np.ndarray
    etree: np.ndarray
    n_Q: int
    n_Q_full: int
    L: int = 1
    colptr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.colptr = np.concatenate([[0], np.cumsum(self.n_col - 1)]).astype(np.int64)

    @property
    def M(self) -> int:
        return self.perm.shape[0]

    @property
    def n_L(self) -> int:
        return int(self.n_col.sum())

    @property
    def fill_ratio(self) -> float:
        return self.n_L / self.n_Q

    @property
    def predicted_flops(self) -> float:
        return float(_block_flops(self.n_col - 1, self.L).sum())

    @property
    def three_cycles(self) -> int:
        n = self.n_col - 1
        return int((n * (n - 1) // 2).sum())

    @property
    def jensen_lower_bound(self) -> float:
        """``n_L^2 / M``, a lower bound on ``sum_m n_col[m]^2``."""
        return self.n_L ** 2 / self.M

    def summary(self) -> dict:
        return {"M": self.M, "L": self.L, "n_Q": self.n_Q, "n_Q_full_rows": self.n_Q_full,
                "n_L": self.n_L, "fill_ratio": self.fill_ratio,
                "predicted_flops": self.predicted_flops, "three_cycles": self.three_cycles,
                "sum_n_col_squared": int((self.n_col.astype(np.int64) ** 2).sum()),
                "jensen_lower_bound": self.jensen_lower_bound,
                "three_cycle_upper_bound": float(self.n_L) ** 1.5}


def symbolic_analysis(graph: BlockGraph, perm, L: int = 1) -> SymbolicFactor:
    """Non-zero structure of the Cholesky factor of ``P Q P^T``.

    Column ``m`` of the factor is non-zero in row ``j > m`` iff ``j`` is a
    neighbour of ``m`` in the elimination graph, i.e. iff the original graph
    has a path from ``m`` to ``j`` whose interior vertices are all eliminated
    before ``m``.  The structure is built column by column: the lower
    neighbours of ``m`` together with the structures of its elimination-tree
    children.
    """
    perm = np.asarray(perm, dtype=np.int64)
    M = graph.M
    if perm.shape != (M,):
        raise ValidationError("ordering length does not match the number of blocks")
    inv = np.empty(M, dtype=np.int64)
    inv[perm] = np.arange(M)
    pr, pc = inv[graph.rows], inv[graph.cols]
    lo, hi = np.minimum(pr, pc), np.maximum(pr, pc)
    key = np.unique(lo * M + hi)
    lo, hi = key // M, key % M
    starts = np.searchsorted(lo, np.arange(M + 1))
    struct: list = [None] * M
    children: list = [[] for _ in range(M)]
    etree = np.full(M, -1, dtype=np.int64)
    col_rows = []
    for m in range(M):
        s = set(hi[starts[m]:starts[m + 1]].tolist())
        for c in children[m]:
            s.update(struct[c])
            struct[c] = None
        s.discard(m)
        arr = np.fromiter(sorted(s), dtype=np.int64, count=len(s))
        col_rows.append(arr)
        if arr.size:
            etree[m] = arr[0]
            children[arr[0]].append(m)
            struct[m] = arr
    n_col = np.array([r.size + 1 for r in col_rows], dtype=np.int64)
    return SymbolicFactor(perm=perm, inv_perm=inv, col_rows=col_rows, n_col=n_col, etree=etree,
                          n_Q=M + key.size, n_Q_full=M + 2 * key.size, L=L)


# ----------------------------------------------------------------------------
# numeric factorisation

@dataclass
class BlockCholeskyFactor:
    """Lower block-triangular ``L`` with ``L L^T = P Q P^T`` (positions order).

    ``diag[m]`` is the pivot block of position ``m`` and
    ``vals[colptr[m]:colptr[m+1]]`` the blocks in rows ``sym.col_rows[m]``.
    """

    sym: SymbolicFactor
    diag: np.ndarray
    vals: np.ndarray
    flops_actual: float

    @property
    def L(self) -> int:
        return self.diag.shape[-1]

    def column(self, m: int):
        a, b = self.sym.colptr[m], self.sym.colptr[m + 1]
        return self.sym.col_rows[m], self.vals[a:b]

    def block(self, row_block: int, col_block: int) -> np.ndarray:
        """Block of the factor addressed by original block indices."""
        i, j = self.sym.inv_perm[row_block], self.sym.inv_perm[col_block]
        if i == j:
            return self.diag[i]
        if i < j:
            return np.zeros((self.L, self.L))
        rows, vals = self.column(j)
        t = np.searchsorted(rows, i)
        if t < rows.size and rows[t] == i:
            return vals[t]
        return np.zeros((self.L, self.L))

    def to_scipy(self) -> sp.csr_matrix:
        """Scalar lower-triangular factor in position order."""
        L, M = self.L, self.sym.M
        bi, bj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
        col_of = np.repeat(np.arange(M), self.sym.n_col - 1)
        row_of = np.concatenate(self.sym.col_rows) if M else np.zeros(0, dtype=np.int64)
        r = np.concatenate([(np.arange(M)[:, None, None] * L + bi).ravel(),
                            (row_of[:, None, None] * L + bi).ravel()])
        c = np.concatenate([(np.arange(M)[:, None, None] * L + bj).ravel(),
                            (col_of[:, None, None] * L + bj).ravel()])
        v = np.concatenate([np.tril(self.diag).ravel(), self.vals.ravel()])
        keep = r >= c
        return sp.coo_matrix((v[keep], (r[keep], c[keep])), shape=(M * L, M * L)).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


def _scatter_Q(Q: BlockSparseMatrix, sym: SymbolicFactor):
    M, L = Q.M, Q.L
    diag = Q.diag[sym.perm].copy()
    vals = np.zeros((int(sym.colptr[-1]), L, L))
    if Q.rows.size:
        pr, pc = sym.inv_perm[Q.rows], sym.inv_perm[Q.cols]
        flip = pr < pc
        col = np.where(flip, pr, pc)
        row = np.where(flip, pc, pr)
        blocks = np.where(flip[:, None, None], np.swapaxes(Q.vals, 1, 2), Q.vals)
        keys = np.concatenate([m * M + r for m, r in enumerate(sym.col_rows)]) if M else np.zeros(0)
        idx = np.searchsorted(keys, col * M + row)
        if np.any(idx >= keys.size) or np.any(keys[np.minimum(idx, keys.size - 1)] != col * M + row):
            raise ValidationError("the symbolic structure does not cover the matrix pattern")
        np.add.at(vals, idx, blocks)
    return diag, vals


def _right_solve_lt(Lmm, blocks):
    """``blocks[t] @ inv(Lmm).T`` for a stack of blocks."""
    n, L = blocks.shape[0], Lmm.shape[0]
    rhs = np.swapaxes(blocks, 1, 2).transpose(1, 0, 2).reshape(L, n * L)
    Y = sla.solve_triangular(Lmm, rhs, lower=True)
    return np.swapaxes(Y.reshape(L, n, L).transpose(1, 0, 2), 1, 2)


def numeric_cholesky(Q: BlockSparseMatrix, sym: SymbolicFactor) -> BlockCholeskyFactor:
    """Right-looking block Cholesky on the predicted structure, counting flops."""
    L = Q.L
    if sym.M != Q.M:
        raise ValidationError("symbolic factor and matrix disagree on the number of blocks")
    sym.L = L
    diag, vals = _scatter_Q(Q, sym)
    L3, L2 = float(L) ** 3, float(L) ** 2
    flops = 0.0
    colptr, col_rows = sym.colptr, sym.col_rows
    for m in range(sym.M):
        try:
            Lmm = np.linalg.cholesky(diag[m])
        except np.linalg.LinAlgError:
            raise NumericalError(f"non-positive-definite pivot at block {sym.perm[m]} "
                                 f"(position {m})") from None
        diag[m] = Lmm
        flops += L3
        a, b = colptr[m], colptr[m + 1]
        if a == b:
            continue
        seg = vals[a:b]
        if L == 1:
            seg /= Lmm[0, 0]
        else:
            seg[:] = _right_solve_lt(Lmm, seg)
        flops += (b - a) * L3
        rows = col_rows[m]
        for t in range(rows.size):
            j = rows[t]
            Lj = seg[t]
            diag[j] -= Lj @ Lj.T
            if t + 1 < rows.size:
                tgt = colptr[j] + np.searchsorted(col_rows[j], rows[t + 1:])
                vals[tgt] -= seg[t + 1:] @ Lj.T
            flops += (rows.size - t) * (L3 + L2)
    return BlockCholeskyFactor(sym, diag, vals, flops)


def dense_cholesky(Q: BlockSparseMatrix, perm) -> np.ndarray:
    """Dense factor of the permuted matrix (reference path for small problems)."""
    L = Q.L
    idx = (np.asarray(perm)[:, None] * L + np.arange(L)).ravel()
    Qd = Q.to_dense()[np.ix_(idx, idx)]
    try:
        return np.linalg.cholesky(Qd)
    except np.linalg.LinAlgError:
        raise NumericalError("matrix is not positive definite") from None


def forward_solve(factor: BlockCholeskyFactor, b) -> np.ndarray:
    """Solve ``L w = P b``; ``b`` is given in block order, ``w`` in position order."""
    sym = factor.sym
    w = np.asarray(b, dtype=float).reshape(sym.M, -1)[sym.perm].copy()
    for m in range(sym.M):
        w[m] = sla.solve_triangular(factor.diag[m], w[m], lower=True)
        rows, seg = factor.column(m)
        if rows.size:
            w[rows] -= seg @ w[m]
    return w


def backward_solve(factor: BlockCholeskyFactor, v) -> np.ndarray:
    """Solve ``L^T x = v`` (position order) and return ``x`` in block order."""
    sym = factor.sym
    x = np.array(v, dtype=float).reshape(sym.M, -1)
    for m in range(sym.M - 1, -1, -1):
        rows, seg = factor.column(m)
        r = x[m]
        if rows.size:
            r = r - np.einsum("tij,ti->j", seg, x[rows])
        x[m] = sla.solve_triangular(factor.diag[m], r, lower=True, trans="T")
    out = np.empty_like(x)
    out[sym.perm] = x
    return out


def sample_gaussian_sla(factor: BlockCholeskyFactor, b, rng, z=None) -> np.ndarray:
    """Exact draw from ``N(Q^{-1} b, Q^{-1})`` given the factor of ``Q``.

    Solves ``L w = P b`` and then ``L^T x = w + z`` with ``z ~ N(0, I)``.
    Passing ``z = 0`` returns the posterior mean.
    """
    w = forward_solve(factor, b)
    if z is None:
        z = as_generator(rng).standard_normal(w.shape)
    return backward_solve(factor, w + np.asarray(z).reshape(w.shape))


# ----------------------------------------------------------------------------
# thresholding

def _factor_entries(factor: BlockCholeskyFactor) -> sp.csr_matrix:
    return factor.to_scipy()


def _relative_error(Ls: sp.csr_matrix, Qp: np.ndarray | sp.spmatrix, Qnorm: float) -> float:
    n = Ls.shape[0]
    if n <= 6000:
        Ld = Ls.toarray()
        Qd = Qp.toarray() if sp.issparse(Qp) else Qp
        return float(np.linalg.norm(Qd - Ld @ Ld.T) / Qnorm)
    R = (Qp - Ls @ Ls.T).tocsr()
    return float(sp.linalg.norm(R) / Qnorm)


def permuted_scalar_Q(Q: BlockSparseMatrix, perm) -> sp.csr_matrix:
    L = Q.L
    idx = (np.asarray(perm)[:, None] * L + np.arange(L)).ravel()
    return Q.to_scipy()[idx][:, idx].tocsr()


def threshold_factor(factor: BlockCholeskyFactor, Q: BlockSparseMatrix, threshold: float | None = None,
                     fraction: float | None = None) -> dict:
    """Zero small entries of the factor and measure the reconstruction error.

    Exactly one of ``threshold`` (entries with ``|L_ij| <= threshold`` are
    zeroed) or ``fraction`` (the smallest fraction of stored entries is
    zeroed) must be given.

    Returns
    -------
    dict
        ``L`` (thresholded scalar factor), ``zeroed_fraction`` and
        ``rel_error = ||PQP^T - L L^T||_F / ||Q||_F``.
    """
    if (threshold is None) == (fraction is None):
        raise ValidationError("give exactly one of threshold or fraction")
    Ls = _factor_entries(factor).tocsr()
    Ls.eliminate_zeros()
    mag = np.abs(Ls.data)
    if threshold is not None:
        if threshold < 0:
            raise ValidationError("threshold must be non-negative")
        drop = mag <= threshold if threshold > 0 else np.zeros(mag.size, dtype=bool)
    else:
        if not 0 <= fraction <= 1:
            raise ValidationError("fraction must lie in [0, 1]")
        k = int(np.floor(fraction * mag.size))
        drop = np.zeros(mag.size, dtype=bool)
        drop[np.argsort(mag, kind="stable")[:k]] = True
    Lt = Ls.copy()
    Lt.data = np.where(drop, 0.0, Lt.data)
    Lt.eliminate_zeros()
    Qp = permuted_scalar_Q(Q, factor.sym.perm)
    Qnorm = float(sp.linalg.norm(Qp))
    return {"L": Lt, "zeroed_fraction": float(drop.mean()) if drop.size else 0.0,
            "rel_error": _relative_error(Lt, Qp, Qnorm)}


def thresholding_curve(factor: BlockCholeskyFactor, Q: BlockSparseMatrix, fractions) -> list:
    """Relative error after zeroing each fraction of the smallest entries."""
    Ls = _factor_entries(factor).tocsr()
    Ls.eliminate_zeros()
    order = np.argsort(np.abs(Ls.data), kind="stable")
    Qp = permuted_scalar_Q(Q, factor.sym.perm)
    Qd = Qp.toarray() if Qp.shape[0] <= 6000 else Qp
    Qnorm = float(sp.linalg.norm(Qp))
    out = []
    for f in fractions:
        k = int(np.floor(f * order.size))
        Lt = Ls.copy()
        Lt.data[order[:k]] = 0.0
        Lt.eliminate_zeros()
        out.append(_relative_error(Lt, Qd, Qnorm))
    return out


def max_thresholdable_fraction(factor: BlockCholeskyFactor, Q: BlockSparseMatrix, tol: float,
                               resolution: float = 1e-3) -> float:
    """Largest fraction of smallest entries that can be zeroed with error ``<= tol``.

    Bisection over the fraction; the error is (up to rounding) non-decreasing
    in the number of zeroed entries.
    """
    lo, hi = 0.0, 1.0
    if thresholding_curve(factor, Q, [1.0])[0] <= tol:
        return 1.0
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if thresholding_curve(factor, Q, [mid])[0] <= tol:
            lo = mid
        else:
            hi = mid
    return lo
