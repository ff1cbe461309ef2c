"""Split the mesh into collision-safe and collision-prone parts from the
proxy set: elements owning proxies form the prone set, the union of their
vertices becomes x2, and a node permutation puts x1 strictly first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import PartitionError
from .linalg import ScalarSparseSym, _chol_counts, _etree, fill_ordering
from .mesh import TetMesh

import scipy.sparse as sp


@dataclass(frozen=True)
class Partition:
    """Node permutation (perm[old] = new, x1 occupying [0, n1)) plus the
    element split into proxy-free (e_alpha) and proxy-owning (e_beta) sets."""

    perm: np.ndarray
    n1: int
    n2: int
    e_alpha: np.ndarray
    e_beta: np.ndarray

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def order(self) -> np.ndarray:
        """Inverse map: order[new] = old."""
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.perm] = np.arange(self.n)
        return inv

    def x2_nodes(self) -> np.ndarray:
        """Original indices of the collision-prone nodes, ascending."""
        return np.flatnonzero(self.perm >= self.n1)


def classify(mesh: TetMesh, proxies: Sequence) -> Partition:
    """Partition from the proxy set. Deterministic: ascending original index
    within each class, and invariant under proxy reordering."""
    n = mesh.num_nodes
    beta_mask = np.zeros(mesh.num_elements, dtype=bool)
    for p in proxies:
        beta_mask[p.element] = True
    e_beta = np.flatnonzero(beta_mask)
    e_alpha = np.flatnonzero(~beta_mask)
    x2_mask = np.zeros(n, dtype=bool)
    if len(e_beta):
        x2_mask[mesh.tets[e_beta].ravel()] = True
    n2 = int(x2_mask.sum())
    n1 = n - n2
    perm = np.empty(n, dtype=np.int64)
    perm[~x2_mask] = np.arange(n1)
    perm[x2_mask] = n1 + np.arange(n2)
    return Partition(perm=perm, n1=n1, n2=n2, e_alpha=e_alpha, e_beta=e_beta)


def permute_matrix(K: ScalarSparseSym, p: Partition) -> ScalarSparseSym:
    """Symmetric permutation of the scalar block, x1 degrees of freedom first."""
    if K.n != p.n:
        raise PartitionError(f"matrix is {K.n} x {K.n} but partition covers {p.n} nodes")
    return K.permuted(p.order)


@dataclass
class PartitionDiagnostics:
    n: int
    n1: int
    n2: int
    num_alpha: int
    num_beta: int
    constrained_factor_nnz: int
    free_factor_nnz: int

    @property
    def prone_fraction(self) -> float:
        return self.n2 / self.n if self.n else 0.0

    @property
    def fill_ratio(self) -> float:
        """Constrained-ordering factor size relative to the unconstrained one."""
        if self.free_factor_nnz == 0:
            return 1.0
        return self.constrained_factor_nnz / self.free_factor_nnz

    def report(self) -> str:
        lines = [
            "partition diagnostics",
            f"  nodes: {self.n} = {self.n1} collision-safe + {self.n2} collision-prone "
            f"({100.0 * self.prone_fraction:.2f}% prone)",
            f"  elements: {self.num_alpha} proxy-free + {self.num_beta} proxy-owning",
            f"  factor nnz: constrained {self.constrained_factor_nnz}, "
            f"unconstrained {self.free_factor_nnz} "
            f"(fill ratio {self.fill_ratio:.4f})",
        ]
        if self.n and self.prone_fraction > 0.10:
            lines.append(
                "  warning: collision-prone fraction exceeds 10%; the dense Schur "
                "update will dominate the solve"
            )
        return "\n".join(lines)


def _symbolic_factor_nnz(upper: sp.csc_matrix) -> int:
    n = upper.shape[0]
    if n == 0:
        return 0
    ap = upper.indptr.astype(np.int64)
    ai = upper.indices.astype(np.int64)
    parent = _etree(n, ap, ai)
    return int(_chol_counts(n, ap, ai, parent).sum())


def validate(
    mesh: TetMesh,
    p: Partition,
    K_permuted: Optional[ScalarSparseSym] = None,
    proxies: Optional[Sequence] = None,
) -> PartitionDiagnostics:
    """Check the structural assumptions the Schur solver relies on and report
    fill statistics of the constrained ordering.

    Raises PartitionError naming the offending element or proxy when a
    proxy-owning element has a node outside the collision-prone range or a
    proxy sits in a proxy-free element.
    """
    if sorted(p.perm.tolist()) != list(range(p.n)):
        raise PartitionError("perm is not a bijection on node indices")
    for e in p.e_beta:
        new_ids = p.perm[mesh.tets[e]]
        if (new_ids < p.n1).any():
            raise PartitionError(
                f"element {int(e)} owns proxies but node "
                f"{int(mesh.tets[e][np.argmin(new_ids)])} is outside the "
                "collision-prone range"
            )
    if proxies is not None:
        beta = set(int(e) for e in p.e_beta)
        for j, pr in enumerate(proxies):
            if pr.element not in beta:
                raise PartitionError(
                    f"proxy {j} lives in element {pr.element}, outside the "
                    "collision-prone element set"
                )

    constrained_nnz = 0
    free_nnz = 0
    if K_permuted is not None:
        if K_permuted.n != p.n:
            raise PartitionError("permuted matrix size does not match partition")
        full = K_permuted.full()
        # constrained: fill-reduce inside x1 only, x2 pinned last
        a11 = full[: p.n1, : p.n1]
        fperm = fill_ordering(a11) if p.n1 > 1 else np.arange(p.n1)
        order = np.concatenate([fperm, p.n1 + np.arange(p.n2)])
        constrained = full[order][:, order]
        constrained_nnz = _symbolic_factor_nnz(sp.triu(constrained, format="csc"))
        # unconstrained: fill-reduce over everything
        free_perm = fill_ordering(full) if p.n > 1 else np.arange(p.n)
        free = full[free_perm][:, free_perm]
        free_nnz = _symbolic_factor_nnz(sp.triu(free, format="csc"))

    return PartitionDiagnostics(
        n=p.n,
        n1=p.n1,
        n2=p.n2,
        num_alpha=len(p.e_alpha),
        num_beta=len(p.e_beta),
        constrained_factor_nnz=constrained_nnz,
        free_factor_nnz=free_nnz,
    )
