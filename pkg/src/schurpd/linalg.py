"""Sparse symmetric scalar matrices and the direct-solve machinery: AMD fill
ordering, up-looking sparse Cholesky, partial factorization with a retained
dense Schur complement, dense SPD refactorization with additive updates, and
a Jacobi-preconditioned CG baseline.

Everything is double precision. The partial factor eliminates the leading n1
unknowns of a matrix already permuted collision-safe-first; a fill-reducing
ordering is applied inside that leading block only, so the trailing block's
indexing is never disturbed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
from numba import njit

from ._amd import amd_order
from .errors import IndefiniteMatrixError, IndefiniteOperatorError, InvalidArgumentError


# ----------------------------------------------------------------- container


class ScalarSparseSym:
    """Symmetric n x n sparse matrix storing the upper triangle (CSC, sorted
    indices). One instance holds one coordinate block; the full 3n x 3n
    operator is this block replicated per coordinate."""

    def __init__(self, upper: sp.csc_matrix):
        if upper.shape[0] != upper.shape[1]:
            raise InvalidArgumentError("matrix must be square")
        upper = sp.csc_matrix(upper)
        upper.sum_duplicates()
        upper.sort_indices()
        if (sp.tril(upper, -1)).nnz:
            raise InvalidArgumentError("strictly-lower entries passed to upper-triangle storage")
        self.upper = upper
        self._full = None

    @classmethod
    def from_coo(cls, n: int, rows, cols, vals) -> "ScalarSparseSym":
        """Assemble from symmetric triplets (both halves present)."""
        full = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        full.sum_duplicates()
        return cls(sp.triu(full, format="csc"))

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "ScalarSparseSym":
        if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
            raise InvalidArgumentError("matrix is not symmetric")
        return cls(sp.triu(sp.csc_matrix(a), format="csc"))

    @property
    def n(self) -> int:
        return self.upper.shape[0]

    @property
    def nnz_upper(self) -> int:
        return self.upper.nnz

    def full(self) -> sp.csr_matrix:
        """Both triangles, CSR (cached)."""
        if self._full is None:
            u = self.upper
            d = sp.diags(u.diagonal())
            self._full = (u + u.T - d).tocsr()
            self._full.sort_indices()
        return self._full

    def diagonal(self) -> np.ndarray:
        return self.upper.diagonal()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.full() @ x

    def toarray(self) -> np.ndarray:
        return self.full().toarray()

    def permuted(self, order: np.ndarray) -> "ScalarSparseSym":
        """Symmetric permutation; order[new] = old. Preserves the entry count."""
        order = np.asarray(order)
        if sorted(order.tolist()) != list(range(self.n)):
            raise InvalidArgumentError("order is not a permutation of 0..n-1")
        f = self.full()[order][:, order]
        return ScalarSparseSym(sp.triu(f, format="csc"))

    def __repr__(self):
        return f"ScalarSparseSym(n={self.n}, nnz_upper={self.nnz_upper})"


def write_matrix_market(path, mat) -> None:
    """Debug dump in MatrixMarket coordinate format."""
    if isinstance(mat, ScalarSparseSym):
        mat = mat.full()
    scipy.io.mmwrite(path, sp.coo_matrix(mat))


# ------------------------------------------------------- numba sparse kernels


@njit(cache=True)
def _etree(n, Ap, Ai):
    """Elimination tree from the upper-triangle pattern, with path compression."""
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(k, Ap, Ai, parent, s, w):
    """Row pattern of L(k, 0:k): paths from A(:,k) entries up the etree.
    Returns top; s[top:n] holds the pattern in topological order."""
    n = len(parent)
    top = n
    w[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        ln = 0
        while w[i] != k:
            s[ln] = i
            ln += 1
            w[i] = k
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            s[top] = s[ln]
    return top


@njit(cache=True)
def _chol_counts(n, Ap, Ai, parent):
    counts = np.ones(n, np.int64)
    s = np.empty(n, np.int64)
    w = np.full(n, -1, np.int64)
    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def _chol_numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx, pivot_tol):
    """Up-looking Cholesky of the upper-triangle CSC input. Column counts must
    already be in Lp. Returns the first column with a pivot at or below
    pivot_tol * max_diagonal, or -1 on success."""
    maxdiag = 0.0
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] == k and Ax[p] > maxdiag:
                maxdiag = Ax[p]
    threshold = pivot_tol * maxdiag
    c = Lp[:n].copy()
    x = np.zeros(n, np.float64)
    s = np.empty(n, np.int64)
    w = np.full(n, -1, np.int64)
    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, s, w)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if d <= threshold:
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit(cache=True)
def _lsolve(n, Lp, Li, Lx, x):
    """x <- L^-1 x. Columns whose solution entry is exactly zero are skipped,
    which makes sparse right-hand sides cheap without a reach computation."""
    for j in range(n):
        xj = x[j]
        if xj != 0.0:
            xj /= Lx[Lp[j]]
            x[j] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def _ltsolve(n, Lp, Li, Lx, x):
    """x <- L^-T x."""
    for j in range(n - 1, -1, -1):
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            xj -= Lx[p] * x[Li[p]]
        x[j] = xj / Lx[Lp[j]]


# Pivot acceptance threshold, relative to the largest diagonal entry.
PIVOT_TOLERANCE = 1e-13


@dataclass(frozen=True)
class CscLower:
    """Lower-triangular factor in CSC arrays (unit diagonal not assumed)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indptr[self.n])

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def solve_lower(self, b: np.ndarray) -> np.ndarray:
        x = np.array(b, dtype=np.float64, copy=True)
        _lsolve(self.n, self.indptr, self.indices, self.data, x)
        return x

    def solve_lower_t(self, b: np.ndarray) -> np.ndarray:
        x = np.array(b, dtype=np.float64, copy=True)
        _ltsolve(self.n, self.indptr, self.indices, self.data, x)
        return x


def _sparse_cholesky(upper: sp.csc_matrix) -> CscLower:
    """Factor an SPD matrix given by its upper triangle (CSC, sorted)."""
    n = upper.shape[0]
    Ap = upper.indptr.astype(np.int64)
    Ai = upper.indices.astype(np.int64)
    Ax = upper.data.astype(np.float64)
    parent = _etree(n, Ap, Ai)
    counts = _chol_counts(n, Ap, Ai, parent)
    Lp = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = np.empty(Lp[n], np.int64)
    Lx = np.empty(Lp[n], np.float64)
    bad = _chol_numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx, PIVOT_TOLERANCE)
    if bad >= 0:
        raise IndefiniteMatrixError(
            f"non-positive pivot at column {bad} of {n}", column=int(bad)
        )
    return CscLower(n, Lp, Li, Lx)


# ------------------------------------------------------------- fill ordering


def fill_ordering(pattern) -> np.ndarray:
    """Approximate-minimum-degree ordering of a symmetric pattern.

    Accepts a ScalarSparseSym or any scipy sparse matrix; returns order with
    order[new] = old.
    """
    if isinstance(pattern, ScalarSparseSym):
        pattern = pattern.upper
    perm = amd_order(pattern)
    n = pattern.shape[0]
    if len(perm) != n or not np.array_equal(np.bincount(perm, minlength=n), np.ones(n, dtype=np.int64)):
        raise RuntimeError("fill ordering produced a non-bijective permutation")
    return perm


# ------------------------------------------------------------ partial factor


@dataclass(frozen=True)
class PartialFactor:
    """Partial Cholesky of an SPD matrix split at n1.

    l1 factors the fill-reordered leading block: l1 l1' = (P1 A11 P1').
    coupling = A21 L1^-T (in the fill-reordered basis), so
    sigma0 = A22 - coupling coupling' is the Schur complement of A11,
    independent of the fill ordering. forward_sub/backward_sub accept and
    return vectors in the pre-fill (partition) basis; y1 lives in the
    factored basis, matching l1.
    """

    n1: int
    n2: int
    l1: CscLower
    fill_perm: np.ndarray  # order within x1: fill_perm[new] = old
    coupling: sp.csr_matrix  # (n2, n1)
    sigma0: np.ndarray  # (n2, n2) dense symmetric

    @property
    def n(self) -> int:
        return self.n1 + self.n2


def _columns(b: np.ndarray) -> Tuple[np.ndarray, bool]:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return b[:, None], True
    return b, False


def partial_cholesky(A: ScalarSparseSym, n1: int, use_fill_ordering: bool = True) -> PartialFactor:
    """Eliminate the leading n1 unknowns of A, retaining the dense Schur
    complement on the trailing block. AMD is applied inside the leading block
    only; the trailing indices keep their positions."""
    n = A.n
    if not 0 <= n1 <= n:
        raise InvalidArgumentError(f"n1 = {n1} out of range for n = {n}")
    n2 = n - n1
    full = A.full()
    a11 = full[:n1, :n1].tocsc()
    a21 = full[n1:, :n1].tocsr()
    a22 = full[n1:, n1:].toarray()

    if use_fill_ordering and n1 > 1:
        fperm = fill_ordering(a11)
    else:
        fperm = np.arange(n1, dtype=np.int64)
    a11p = a11[fperm][:, fperm]
    upper = sp.triu(a11p, format="csc")
    upper.sort_indices()
    try:
        l1 = _sparse_cholesky(upper)
    except IndefiniteMatrixError as err:
        raise IndefiniteMatrixError(
            f"leading block is not positive definite: non-positive pivot at "
            f"fill-ordered column {err.column} (original index {int(fperm[err.column])})",
            column=int(fperm[err.column]),
        ) from None

    # coupling rows: solve L1 z = (row j of A21, fill-reordered)
    rows = []
    a21p = a21[:, fperm].tocsr() if n1 else a21
    work = np.zeros(n1, dtype=np.float64)
    indptr = a21p.indptr
    indices = a21p.indices
    data = a21p.data
    for j in range(n2):
        lo, hi = indptr[j], indptr[j + 1]
        work[:] = 0.0
        work[indices[lo:hi]] = data[lo:hi]
        if n1:
            _lsolve(l1.n, l1.indptr, l1.indices, l1.data, work)
        nz = np.nonzero(work)[0]
        rows.append((nz.copy(), work[nz].copy()))
    lengths = np.array([len(nz) for nz, _ in rows], dtype=np.int64)
    cp = np.zeros(n2 + 1, dtype=np.int64)
    np.cumsum(lengths, out=cp[1:])
    ci = np.concatenate([nz for nz, _ in rows]) if rows else np.empty(0, np.int64)
    cx = np.concatenate([vals for _, vals in rows]) if rows else np.empty(0, np.float64)
    coupling = sp.csr_matrix((cx, ci, cp), shape=(n2, n1))

    sigma0 = a22 - (coupling @ coupling.T).toarray()
    sigma0 = 0.5 * (sigma0 + sigma0.T)
    return PartialFactor(n1, n2, l1, fperm, coupling, sigma0)


def forward_sub(f: PartialFactor, b1: np.ndarray, b2: np.ndarray):
    """Step 1 of the three-step solve: y1 = L1^-1 b1 (factored basis) and
    y2 = b2 - A21 A11^-1 b1. Accepts single vectors or column stacks."""
    b1c, squeeze = _columns(b1)
    b2c, _ = _columns(b2)
    if b1c.shape[0] != f.n1 or b2c.shape[0] != f.n2:
        raise InvalidArgumentError("right-hand side sizes do not match the factor split")
    y1 = np.empty_like(b1c)
    for c in range(b1c.shape[1]):
        y1[:, c] = f.l1.solve_lower(b1c[f.fill_perm, c])
    y2 = b2c - f.coupling @ y1
    if squeeze:
        return y1[:, 0], y2[:, 0]
    return y1, y2


def backward_sub(f: PartialFactor, y1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Step 3 of the three-step solve: x1 = L1^-T (y1 - L1^-1 A12 x2), returned
    in the partition basis. y1 must be in the factored basis (forward_sub's)."""
    y1c, squeeze = _columns(y1)
    x2c, _ = _columns(x2)
    if y1c.shape[0] != f.n1 or x2c.shape[0] != f.n2:
        raise InvalidArgumentError("vector sizes do not match the factor split")
    rhs = y1c - f.coupling.T @ x2c
    x1 = np.empty_like(y1c)
    for c in range(y1c.shape[1]):
        x1[f.fill_perm, c] = f.l1.solve_lower_t(rhs[:, c])
    if squeeze:
        return x1[:, 0]
    return x1


# ------------------------------------------------------------------ dense SPD


@dataclass(frozen=True)
class DenseSPD:
    """Dense SPD matrix with its lower Cholesky factor."""

    h: np.ndarray
    chol: np.ndarray

    @property
    def m(self) -> int:
        return self.h.shape[0]


def dense_factor(h: np.ndarray) -> DenseSPD:
    h = np.ascontiguousarray(h, dtype=np.float64)
    if h.size == 0:
        return DenseSPD(h.reshape(0, 0), h.reshape(0, 0))
    try:
        chol = scipy.linalg.cholesky(h, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as err:
        raise IndefiniteMatrixError(f"dense factorization failed: {err}") from None
    return DenseSPD(h, chol)


def schur_assemble(sigma0: np.ndarray, c22: sp.spmatrix) -> DenseSPD:
    """Additive Schur update: factor sigma0 + c22 (dense, O(m^3/3))."""
    m = sigma0.shape[0]
    if c22.shape != (m, m):
        raise InvalidArgumentError(f"c22 shape {c22.shape} does not match sigma0 {sigma0.shape}")
    h = sigma0 + c22.toarray()
    return dense_factor(h)


def dense_solve(f: DenseSPD, g: np.ndarray) -> np.ndarray:
    """H^-1 g via the two triangular solves; g may carry several columns."""
    if f.m == 0:
        return np.zeros_like(np.asarray(g, dtype=np.float64))
    gc, squeeze = _columns(g)
    y = scipy.linalg.solve_triangular(f.chol, gc, lower=True, check_finite=False)
    x = scipy.linalg.solve_triangular(f.chol, y, lower=True, trans="T", check_finite=False)
    if squeeze:
        return x[:, 0]
    return x


# ------------------------------------------------------------------------ pcg


def pcg(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    jacobi_diag: np.ndarray,
    tol: float,
    max_iters: int,
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> Tuple[np.ndarray, int]:
    """Preconditioned conjugate gradients with a diagonal preconditioner.
    Returns (x, iterations); stops when ||r|| / ||b|| <= tol or at max_iters.
    Raises IndefiniteOperatorError on p'Ap <= 0."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    inv_d = 1.0 / np.asarray(jacobi_diag, dtype=np.float64)
    r = b.copy()
    z = inv_d * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        ap = apply_A(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise IndefiniteOperatorError(f"p'Ap = {pap:.3e} at iteration {it}")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if callback is not None:
            callback(x)
        if np.linalg.norm(r) / bnorm <= tol:
            return x, it
        z = inv_d * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iters
