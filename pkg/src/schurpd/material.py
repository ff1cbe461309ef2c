"""Corotated energy with per-element rotations as free variables, the
bi-phasic stretch-limited variant, and assembly of the constant scalar
stiffness block.

The 3x3 decompositions use a sign-carrying SVD: F = U diag(s) V^T with
U, V proper rotations and s[2] negative exactly when F is inverted. The
best-fit rotation U V^T and the singular-value clamp both fall out of that
convention with det +1 guaranteed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import InvalidArgumentError
from .linalg import ScalarSparseSym
from .mesh import RestData, TetMesh, deformation_gradients


@dataclass(frozen=True)
class MaterialParams:
    """Lame-style coefficients in Pa. lam is kept at 0; mu_prime = 0 disables
    the bi-phasic term, otherwise sigma_min/sigma_max bound principal stretch."""

    mu: float
    lam: float = 0.0
    mu_prime: float = 0.0
    sigma_min: float = 0.9
    sigma_max: float = 1.1

    def __post_init__(self):
        if self.mu <= 0:
            raise InvalidArgumentError(f"mu must be positive, got {self.mu}")
        if self.lam != 0.0:
            raise InvalidArgumentError("the volumetric lambda term is not supported; lam must be 0")
        if self.mu_prime < 0:
            raise InvalidArgumentError(f"mu_prime must be >= 0, got {self.mu_prime}")
        if not (0.0 < self.sigma_min <= 1.0 <= self.sigma_max):
            raise InvalidArgumentError(
                f"need 0 < sigma_min <= 1 <= sigma_max, got [{self.sigma_min}, {self.sigma_max}]"
            )

    @property
    def biphasic(self) -> bool:
        return self.mu_prime > 0.0


@dataclass
class RotationCache:
    """Per-element projection variables: best-fit rotations r and, for
    bi-phasic materials, the stretch-clamped factors q."""

    r: np.ndarray  # (ne, 3, 3)
    q: Optional[np.ndarray] = None  # (ne, 3, 3) when the bi-phasic term is on

    @classmethod
    def identity(cls, num_elements: int, biphasic: bool = False) -> "RotationCache":
        eye = np.broadcast_to(np.eye(3), (num_elements, 3, 3)).copy()
        return cls(r=eye, q=eye.copy() if biphasic else None)

    def copy(self) -> "RotationCache":
        return RotationCache(self.r.copy(), None if self.q is None else self.q.copy())


@njit(cache=True)
def _jacobi_eigh3(A, V):
    """Cyclic Jacobi diagonalization of a symmetric 3x3 in place; V gets the
    accumulated eigenvector rotations. Converges quadratically; the sweep cap
    is far beyond what diagonalizing a 3x3 ever needs."""
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    scale = 0.0
    for i in range(3):
        for j in range(3):
            scale = max(scale, abs(A[i, j]))
    if scale == 0.0:
        return
    for _ in range(30):
        off = abs(A[0, 1]) + abs(A[0, 2]) + abs(A[1, 2])
        if off <= 1e-30 * scale:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(3):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(3):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(3):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq


@njit(cache=True)
def _signed_svd_batch(F, U, S, V):
    """Sign-carrying SVD of each 3x3 in F.

    Eigen-decomposes F^T F for V and singular values, rebuilds U from F
    column by column with Gram-Schmidt and a cross product (exact
    orthonormality even for rank-deficient F), and pushes any reflection
    into the sign of the smallest singular value. All-zero input maps to
    U = V = I by convention.
    """
    ne = F.shape[0]
    A = np.empty((3, 3))
    Ve = np.empty((3, 3))
    for e in range(ne):
        f = F[e]
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += f[k, i] * f[k, j]
                A[i, j] = acc
        _jacobi_eigh3(A, Ve)
        d0, d1, d2 = A[0, 0], A[1, 1], A[2, 2]
        i0, i1, i2 = 0, 1, 2
        if d1 > d0:
            d0, d1 = d1, d0
            i0, i1 = i1, i0
        if d2 > d0:
            d0, d2 = d2, d0
            i0, i2 = i2, i0
        if d2 > d1:
            d1, d2 = d2, d1
            i1, i2 = i2, i1
        v = V[e]
        for r in range(3):
            v[r, 0] = Ve[r, i0]
            v[r, 1] = Ve[r, i1]
            v[r, 2] = Ve[r, i2]
        detv = (
            v[0, 0] * (v[1, 1] * v[2, 2] - v[1, 2] * v[2, 1])
            - v[0, 1] * (v[1, 0] * v[2, 2] - v[1, 2] * v[2, 0])
            + v[0, 2] * (v[1, 0] * v[2, 1] - v[1, 1] * v[2, 0])
        )
        if detv < 0.0:
            for r in range(3):
                v[r, 2] = -v[r, 2]
        u = U[e]
        # u0 = normalize(F v0); sigma0 = |F v0|
        w0x = f[0, 0] * v[0, 0] + f[0, 1] * v[1, 0] + f[0, 2] * v[2, 0]
        w0y = f[1, 0] * v[0, 0] + f[1, 1] * v[1, 0] + f[1, 2] * v[2, 0]
        w0z = f[2, 0] * v[0, 0] + f[2, 1] * v[1, 0] + f[2, 2] * v[2, 0]
        s0 = np.sqrt(w0x * w0x + w0y * w0y + w0z * w0z)
        if s0 <= 1e-300:
            for r in range(3):
                for c in range(3):
                    u[r, c] = 1.0 if r == c else 0.0
                    v[r, c] = 1.0 if r == c else 0.0
            S[e, 0] = 0.0
            S[e, 1] = 0.0
            S[e, 2] = 0.0
            continue
        u[0, 0] = w0x / s0
        u[1, 0] = w0y / s0
        u[2, 0] = w0z / s0
        # u1 = normalize(F v1 orthogonalized against u0)
        w1x = f[0, 0] * v[0, 1] + f[0, 1] * v[1, 1] + f[0, 2] * v[2, 1]
        w1y = f[1, 0] * v[0, 1] + f[1, 1] * v[1, 1] + f[1, 2] * v[2, 1]
        w1z = f[2, 0] * v[0, 1] + f[2, 1] * v[1, 1] + f[2, 2] * v[2, 1]
        dot01 = u[0, 0] * w1x + u[1, 0] * w1y + u[2, 0] * w1z
        w1x -= dot01 * u[0, 0]
        w1y -= dot01 * u[1, 0]
        w1z -= dot01 * u[2, 0]
        n1 = np.sqrt(w1x * w1x + w1y * w1y + w1z * w1z)
        if n1 > 1e-12 * s0:
            u[0, 1] = w1x / n1
            u[1, 1] = w1y / n1
            u[2, 1] = w1z / n1
            s1 = n1
        else:
            # rank-1 F: any unit vector orthogonal to u0 (pick deterministically)
            ax, ay, az = abs(u[0, 0]), abs(u[1, 0]), abs(u[2, 0])
            if ax <= ay and ax <= az:
                tx, ty, tz = 1.0, 0.0, 0.0
            elif ay <= az:
                tx, ty, tz = 0.0, 1.0, 0.0
            else:
                tx, ty, tz = 0.0, 0.0, 1.0
            dt = u[0, 0] * tx + u[1, 0] * ty + u[2, 0] * tz
            tx -= dt * u[0, 0]
            ty -= dt * u[1, 0]
            tz -= dt * u[2, 0]
            nt = np.sqrt(tx * tx + ty * ty + tz * tz)
            u[0, 1] = tx / nt
            u[1, 1] = ty / nt
            u[2, 1] = tz / nt
            s1 = 0.0
        # u2 = u0 x u1 keeps U a proper rotation; sigma2 then carries det(F)'s sign
        u[0, 2] = u[1, 0] * u[2, 1] - u[2, 0] * u[1, 1]
        u[1, 2] = u[2, 0] * u[0, 1] - u[0, 0] * u[2, 1]
        u[2, 2] = u[0, 0] * u[1, 1] - u[1, 0] * u[0, 1]
        S[e, 0] = s0
        S[e, 1] = s1
        w2x = f[0, 0] * v[0, 2] + f[0, 1] * v[1, 2] + f[0, 2] * v[2, 2]
        w2y = f[1, 0] * v[0, 2] + f[1, 1] * v[1, 2] + f[1, 2] * v[2, 2]
        w2z = f[2, 0] * v[0, 2] + f[2, 1] * v[1, 2] + f[2, 2] * v[2, 2]
        S[e, 2] = u[0, 2] * w2x + u[1, 2] * w2y + u[2, 2] * w2z


@njit(cache=True)
def _uvt_batch(U, V, out):
    ne = U.shape[0]
    for e in range(ne):
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += U[e, r, k] * V[e, c, k]
                out[e, r, c] = acc


@njit(cache=True)
def _u_diag_vt_batch(U, S, V, out):
    ne = U.shape[0]
    for e in range(ne):
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += U[e, r, k] * S[e, k] * V[e, c, k]
                out[e, r, c] = acc


def signed_svd(f: np.ndarray):
    """Single-matrix sign-carrying SVD: returns (U, s, V) with f = U diag(s) V^T,
    U and V proper rotations, s[0] >= s[1] >= |s[2]|, s[2] < 0 iff det(f) < 0."""
    F = np.ascontiguousarray(f, dtype=np.float64).reshape(1, 3, 3)
    U = np.empty((1, 3, 3))
    S = np.empty((1, 3))
    V = np.empty((1, 3, 3))
    _signed_svd_batch(F, U, S, V)
    return U[0], S[0], V[0]


def polar_rotations(F: np.ndarray) -> np.ndarray:
    """Best-fit rotations (Procrustes minimizers of |F - R|_F) for a stack of
    3x3 matrices; det +1 even for singular or inverted inputs."""
    F = np.ascontiguousarray(F, dtype=np.float64)
    U = np.empty_like(F)
    S = np.empty((len(F), 3))
    V = np.empty_like(F)
    _signed_svd_batch(F, U, S, V)
    R = np.empty_like(F)
    _uvt_batch(U, V, R)
    return R


def polar_rotation(f: np.ndarray) -> np.ndarray:
    return polar_rotations(np.reshape(f, (1, 3, 3)))[0]


def biphasic_projections(F: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Nearest matrices with all singular values inside [sigma_min, sigma_max]
    (proper-rotation factors); the sign-carrying convention keeps clamped
    values positive for inverted inputs."""
    if not params.biphasic:
        raise InvalidArgumentError("biphasic projection requires mu_prime > 0")
    F = np.ascontiguousarray(F, dtype=np.float64)
    U = np.empty_like(F)
    S = np.empty((len(F), 3))
    V = np.empty_like(F)
    _signed_svd_batch(F, U, S, V)
    np.clip(S, params.sigma_min, params.sigma_max, out=S)
    Q = np.empty_like(F)
    _u_diag_vt_batch(U, S, V, Q)
    return Q


def biphasic_projection(f: np.ndarray, params: MaterialParams) -> np.ndarray:
    return biphasic_projections(np.reshape(f, (1, 3, 3)), params)[0]


def energy_density(f, r, q, params: MaterialParams) -> float:
    """mu |f - r|_F^2, plus mu' |f - q|_F^2 when the bi-phasic factor is given."""
    d = f - r
    e = params.mu * float(np.sum(d * d))
    if q is not None:
        dq = f - q
        e += params.mu_prime * float(np.sum(dq * dq))
    return e


def piola_stress(f, r, q, params: MaterialParams) -> np.ndarray:
    """First Piola stress of the fixed-projection energy: 2 mu (f - r), plus
    2 mu' (f - q) for the bi-phasic term."""
    p = 2.0 * params.mu * (f - r)
    if q is not None:
        p = p + 2.0 * params.mu_prime * (f - q)
    return p


def element_forces(mesh: TetMesh, rest: RestData, e: int, p: np.ndarray) -> np.ndarray:
    """Nodal forces (4, 3) of one element from its Piola stress; rows follow
    the element's node order and always sum to zero."""
    if not 0 <= e < mesh.num_elements:
        raise InvalidArgumentError(f"element index {e} out of range")
    g = -rest.volume[e] * (p @ rest.dm_inverse[e].T)  # columns: nodes 1..3
    out = np.empty((4, 3))
    out[1:] = g.T
    out[0] = -g.sum(axis=1)
    return out


def elastic_forces(
    mesh: TetMesh,
    rest: RestData,
    x: np.ndarray,
    rotations: RotationCache,
    params: MaterialParams,
    elements: Optional[np.ndarray] = None,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Accumulated nodal forces of the fixed-projection elastic energy over
    the given element subset (all elements when None). Deterministic
    element-order accumulation."""
    if out is None:
        out = np.zeros((mesh.num_nodes, 3))
    tets = mesh.tets if elements is None else mesh.tets[elements]
    if len(tets) == 0:
        return out
    F = deformation_gradients(mesh, rest, x, elements)
    R = rotations.r if elements is None else rotations.r[elements]
    P = 2.0 * params.mu * (F - R)
    if rotations.q is not None and params.biphasic:
        Q = rotations.q if elements is None else rotations.q[elements]
        P += 2.0 * params.mu_prime * (F - Q)
    dmi = rest.dm_inverse if elements is None else rest.dm_inverse[elements]
    vol = rest.volume if elements is None else rest.volume[elements]
    G = -vol[:, None, None] * (P @ np.swapaxes(dmi, 1, 2))  # (k,3,3), cols = nodes 1..3
    np.add.at(out, tets[:, 0], -G.sum(axis=2))
    for a in range(3):
        np.add.at(out, tets[:, a + 1], G[:, :, a])
    return out


def elastic_energy(
    mesh: TetMesh,
    rest: RestData,
    x: np.ndarray,
    rotations: RotationCache,
    params: MaterialParams,
    elements: Optional[np.ndarray] = None,
) -> float:
    """Volume-integrated fixed-projection energy over the element subset."""
    F = deformation_gradients(mesh, rest, x, elements)
    R = rotations.r if elements is None else rotations.r[elements]
    vol = rest.volume if elements is None else rest.volume[elements]
    d = F - R
    dens = params.mu * np.einsum("eij,eij->e", d, d)
    if rotations.q is not None and params.biphasic:
        Q = rotations.q if elements is None else rotations.q[elements]
        dq = F - Q
        dens = dens + params.mu_prime * np.einsum("eij,eij->e", dq, dq)
    return float(np.dot(vol, dens))


def element_scalar_stiffness(rest: RestData, params: MaterialParams) -> np.ndarray:
    """Per-element 4x4 blocks of the shared coordinate block of the elastic
    Hessian: 2 (mu + mu') Vol B B^T, with B mapping the four node scalars of
    one coordinate to that coordinate's row of F."""
    ne = len(rest.volume)
    B = np.empty((ne, 4, 3))
    B[:, 1:, :] = rest.dm_inverse
    B[:, 0, :] = -rest.dm_inverse.sum(axis=1)
    coef = 2.0 * (params.mu + params.mu_prime) * rest.volume
    return coef[:, None, None] * np.einsum("eaj,ebj->eab", B, B)


def assemble_stiffness(mesh: TetMesh, rest: RestData, params: MaterialParams) -> ScalarSparseSym:
    """Constant n x n scalar stiffness block (identical for x, y and z).
    Symmetric with zero row sums; independent of positions and rotations."""
    ke = element_scalar_stiffness(rest, params)
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    return ScalarSparseSym.from_coo(mesh.num_nodes, rows, cols, ke.ravel())
