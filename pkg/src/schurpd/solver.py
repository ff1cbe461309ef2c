"""Quasistatic projective-dynamics engine.

Each frame minimizes the fixed-projection elastic energy plus attachment
springs plus frozen-target collision penalties, by alternating per-element
projection updates with global linear solves. Three global-step backends:

* schur: the prefactored partial-Cholesky path. An outer pass updates the
  collision-safe rotations, forward-substitutes once, then runs an inner loop
  that only touches the collision-prone block: re-detect, re-project the
  prone elements' rotations, add C22 to the retained Schur complement, dense
  solve, and maintain the reduced right-hand side. One backward substitution
  reconstructs the safe block at the end of the pass. All inner-loop work
  scales with the prone-block size m, never with the mesh size n.
* full_refactor: assembles the collision-augmented matrix and sparse-factors
  it from scratch every pass (the baseline the Schur path is measured
  against).
* pcg: Jacobi-preconditioned conjugate gradients on the same operator.

The reduced right-hand side is maintained against the retained Schur
complement: sigma0 is the Schur complement of the full constant matrix
(prone-element stiffness and prone-node attachments are assembled into the
trailing block before factorization), so the maintenance update after an
inner solve subtracts (sigma0 - K22_beta) u2. The prone-element elastic and
collision forces are recomputed fresh each inner pass; the attachment and
safe-element contributions ride inside the maintained vector, which keeps
every inner solve an exact Newton step on the reduced quadratic. With
rotations and active set frozen, one outer pass therefore reproduces the
monolithic direct solution of the collision-augmented system.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import collision as col
from . import material as mat
from .errors import InvalidArgumentError, SolverSetupError
from .linalg import (
    PartialFactor,
    ScalarSparseSym,
    backward_sub,
    dense_solve,
    forward_sub,
    partial_cholesky,
    pcg,
    schur_assemble,
)
from .mesh import RestData, TetMesh, deformation_gradients
from .partition import Partition, permute_matrix

SOLVER_KINDS = ("schur", "full_refactor", "pcg")
DETECTION_CADENCES = ("inner", "frame", "never")


@dataclass
class Attachment:
    """Zero-restlength spring pinning one node to a scripted target."""

    node: int
    target: np.ndarray
    stiffness: float

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).copy()
        if self.stiffness <= 0:
            raise InvalidArgumentError("attachment stiffness must be positive")


@dataclass
class SolverConfig:
    outer_iters: int = 1
    inner_iters: int = 1
    solver_kind: str = "schur"
    pcg_tol: float = 1e-10
    pcg_max_iters: int = 20000
    collision_stiffness: Optional[float] = None  # None: scenario supplies the default
    detection_cadence: str = "inner"  # "inner": every inner pass; "frame": once per
    # frame; "never": reuse whatever active set the state already carries
    early_exit_residual: Optional[float] = None  # RMS total force (N) below which
    # remaining outer passes are skipped; None (default) always runs the full count

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise InvalidArgumentError("outer_iters and inner_iters must be >= 1")
        if self.solver_kind not in SOLVER_KINDS:
            raise InvalidArgumentError(f"solver_kind must be one of {SOLVER_KINDS}")
        if self.detection_cadence not in DETECTION_CADENCES:
            raise InvalidArgumentError(f"detection_cadence must be one of {DETECTION_CADENCES}")


@dataclass
class FrameMetrics:
    """Per-frame phase times and solve diagnostics. t_dense_ms covers the
    inner-loop system work: C22 assembly, the dense update/factor/solve and
    right-hand-side upkeep (for the baselines, their factor or CG solve).
    residual is the relative residual of the frame's final linear solve."""

    t_local_ms: float = 0.0
    t_forward_ms: float = 0.0
    t_detect_ms: float = 0.0
    t_dense_ms: float = 0.0
    t_backward_ms: float = 0.0
    t_total_ms: float = 0.0
    energy: float = 0.0
    active_proxies: int = 0
    max_penetration: float = 0.0
    residual: float = 0.0
    pcg_iterations: int = 0


@dataclass
class SolverState:
    """Mutable per-simulation state; exclusively owned by one frame at a time."""

    x: np.ndarray  # (n, 3), mesh node order
    rotations: mat.RotationCache
    active: col.ActiveSet
    f_tilde2: np.ndarray  # (m, 3) maintained reduced RHS
    u2_accum: np.ndarray  # (m, 3) prone-block correction this outer pass
    metrics: List[FrameMetrics] = field(default_factory=list)

    @classmethod
    def at_rest(cls, mesh: TetMesh, params: mat.MaterialParams, num_proxies: int, m: int):
        return cls(
            x=mesh.rest_positions.copy(),
            rotations=mat.RotationCache.identity(mesh.num_elements, params.biphasic),
            active=col.ActiveSet.empty(num_proxies),
            f_tilde2=np.zeros((m, 3)),
            u2_accum=np.zeros((m, 3)),
        )

    def copy(self) -> "SolverState":
        return SolverState(
            x=self.x.copy(),
            rotations=self.rotations.copy(),
            active=col.ActiveSet(self.active.active.copy(), self.active.target.copy()),
            f_tilde2=self.f_tilde2.copy(),
            u2_accum=self.u2_accum.copy(),
            metrics=list(self.metrics),
        )


@dataclass(frozen=True)
class GlobalSystem:
    """Constant global-step system in the partition's node order."""

    partition: Partition
    A: ScalarSparseSym  # permuted scalar block: elastic stiffness + attachment diagonal
    factor: PartialFactor
    k22_beta: sp.csr_matrix  # prone-element stiffness on the trailing block (no attachments)
    tets_beta_local: np.ndarray  # (len(e_beta), 4) trailing-block-local node ids
    x1_ids: np.ndarray  # original node ids of the leading block (order[:n1])
    x2_ids: np.ndarray  # original node ids of the trailing block


def local_step(
    mesh: TetMesh,
    rest: RestData,
    x: np.ndarray,
    elements: Optional[np.ndarray],
    params: mat.MaterialParams,
    rotations: mat.RotationCache,
) -> None:
    """Re-project the subset's rotations (and bi-phasic factors) from the
    current deformation gradients; other elements' entries are untouched."""
    if elements is not None and len(elements) == 0:
        return
    F = deformation_gradients(mesh, rest, x, elements)
    R = mat.polar_rotations(F)
    if elements is None:
        rotations.r[:] = R
    else:
        rotations.r[elements] = R
    if params.biphasic:
        Q = mat.biphasic_projections(F, params)
        if elements is None:
            rotations.q[:] = Q
        else:
            rotations.q[elements] = Q


def attachment_forces(attachments: Sequence[Attachment], x: np.ndarray, out: np.ndarray) -> np.ndarray:
    for a in attachments:
        out[a.node] += a.stiffness * (a.target - x[a.node])
    return out


def attachment_energy(attachments: Sequence[Attachment], x: np.ndarray) -> float:
    e = 0.0
    for a in attachments:
        d = x[a.node] - a.target
        e += 0.5 * a.stiffness * float(d @ d)
    return e


def compute_forces(
    mesh: TetMesh,
    rest: RestData,
    x: np.ndarray,
    rotations: mat.RotationCache,
    params: mat.MaterialParams,
    elements: Optional[np.ndarray],
    attachments: Sequence[Attachment] = (),
) -> np.ndarray:
    """Elastic forces of the element subset plus the listed attachments'
    spring forces, accumulated in mesh order."""
    f = mat.elastic_forces(mesh, rest, x, rotations, params, elements)
    return attachment_forces(attachments, x, f)


def total_energy(
    mesh: TetMesh,
    rest: RestData,
    x: np.ndarray,
    rotations: mat.RotationCache,
    params: mat.MaterialParams,
    attachments: Sequence[Attachment],
    proxies: Sequence[col.CollisionProxy],
    active: col.ActiveSet,
) -> float:
    """Elastic + attachment + frozen-target collision energy."""
    return (
        mat.elastic_energy(mesh, rest, x, rotations, params)
        + attachment_energy(attachments, x)
        + col.collision_energy(proxies, active, mesh, x)
    )


def default_collision_stiffness(mesh: TetMesh, params: mat.MaterialParams) -> float:
    """10 mu times the mean element edge length: penalty scales with material
    stiffness and mesh resolution."""
    p = mesh.rest_positions
    edges = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
    total = 0.0
    for a, b in edges:
        total += float(np.linalg.norm(p[mesh.tets[:, a]] - p[mesh.tets[:, b]], axis=1).sum())
    mean_edge = total / (6 * mesh.num_elements)
    return 10.0 * params.mu * mean_edge


def build_system(
    mesh: TetMesh,
    rest: RestData,
    params: mat.MaterialParams,
    attachments: Sequence[Attachment],
    partition: Partition,
) -> GlobalSystem:
    """Assemble the constant scalar matrix (elastic stiffness + attachment
    diagonal), permute it prone-last, and partially factor it. The retained
    dense block is the Schur complement of the full matrix, so prone-element
    stiffness and prone-node attachments are already inside it."""
    K = mat.assemble_stiffness(mesh, rest, params)
    diag = np.zeros(mesh.num_nodes)
    for a in attachments:
        diag[a.node] += a.stiffness
    A_mesh = ScalarSparseSym(
        sp.triu(K.full() + sp.diags(diag), format="csc") if diag.any() else K.upper
    )
    A = permute_matrix(A_mesh, partition)
    try:
        factor = partial_cholesky(A, partition.n1)
    except Exception as err:
        raise SolverSetupError(
            "global matrix is not positive definite on the collision-safe block; "
            "a free-floating mesh needs attachments anchoring it "
            f"(underlying error: {err})"
        ) from err

    # prone-element stiffness block, trailing-local indices, for RHS maintenance
    m = partition.n2
    if len(partition.e_beta):
        ke = mat.element_scalar_stiffness(rest, params)[partition.e_beta]
        tets_beta_local = partition.perm[mesh.tets[partition.e_beta]] - partition.n1
        rows = np.repeat(tets_beta_local, 4, axis=1).ravel()
        cols = np.tile(tets_beta_local, (1, 4)).ravel()
        k22_beta = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(m, m)).tocsr()
        k22_beta.sum_duplicates()
    else:
        tets_beta_local = np.zeros((0, 4), dtype=np.int64)
        k22_beta = sp.csr_matrix((m, m))

    order = partition.order
    return GlobalSystem(
        partition=partition,
        A=A,
        factor=factor,
        k22_beta=k22_beta,
        tets_beta_local=tets_beta_local,
        x1_ids=order[: partition.n1],
        x2_ids=order[partition.n1 :],
    )


@dataclass
class Model:
    """Everything constant within a frame that a solve needs. Attachment
    targets and collider transforms are posed by the caller between frames."""

    mesh: TetMesh
    rest: RestData
    params: mat.MaterialParams
    attachments: List[Attachment]
    proxies: List[col.CollisionProxy]
    colliders: List[col.Collider]

    def __post_init__(self):
        self.proxy_elements = np.array([p.element for p in self.proxies], dtype=np.int64)
        self.proxy_weights = (
            np.array([p.weights for p in self.proxies])
            if self.proxies
            else np.zeros((0, 4))
        )
        self.proxy_stiffness = np.array([p.stiffness for p in self.proxies])

    def energy(self, state: SolverState) -> float:
        return total_energy(
            self.mesh, self.rest, state.x, state.rotations, self.params,
            self.attachments, self.proxies, state.active,
        )


def _beta_forces_local(model: Model, system: GlobalSystem, state: SolverState) -> np.ndarray:
    """Prone-element elastic forces accumulated directly in trailing-local
    indices: (m, 3), touching only prone-block-sized data."""
    m = system.partition.n2
    out = np.zeros((m, 3))
    e_beta = system.partition.e_beta
    if len(e_beta) == 0:
        return out
    F = deformation_gradients(model.mesh, model.rest, state.x, e_beta)
    P = 2.0 * model.params.mu * (F - state.rotations.r[e_beta])
    if model.params.biphasic:
        P += 2.0 * model.params.mu_prime * (F - state.rotations.q[e_beta])
    dmi = model.rest.dm_inverse[e_beta]
    vol = model.rest.volume[e_beta]
    G = -vol[:, None, None] * (P @ np.swapaxes(dmi, 1, 2))
    tl = system.tets_beta_local
    np.add.at(out, tl[:, 0], -G.sum(axis=2))
    for a in range(3):
        np.add.at(out, tl[:, a + 1], G[:, :, a])
    return out


def _collision_forces_local(model: Model, system: GlobalSystem, state: SolverState) -> np.ndarray:
    """Active-proxy penalty forces in trailing-local indices: (m, 3)."""
    m = system.partition.n2
    out = np.zeros((m, 3))
    act = state.active.active
    if len(model.proxies) == 0 or not act.any():
        return out
    nodes = model.mesh.tets[model.proxy_elements]  # (p, 4) global ids
    local = system.partition.perm[nodes] - system.partition.n1
    W = model.proxy_weights
    pj = np.einsum("pa,pad->pd", W, state.x[nodes])
    coef = np.where(act, model.proxy_stiffness, 0.0)
    f = -coef[:, None] * (pj - state.active.target)
    for a in range(4):
        np.add.at(out, local[:, a], W[:, a, None] * f)
    return out


def _detect_or_reuse(model: Model, state: SolverState, fresh: bool) -> col.ActiveSet:
    if fresh:
        return col.detect(model.proxies, model.mesh, state.x, model.colliders)
    return state.active


def _finish_metrics(model: Model, state: SolverState, metrics: FrameMetrics, t_frame: float) -> FrameMetrics:
    metrics.active_proxies = state.active.count
    metrics.energy = model.energy(state)
    metrics.max_penetration = float(
        np.max(
            col.penetration_depths(model.proxies, model.mesh, state.x, model.colliders),
            initial=0.0,
        )
    )
    metrics.t_total_ms = 1e3 * (time.perf_counter() - t_frame)
    state.metrics.append(metrics)
    return metrics


def solve_frame_schur(
    model: Model,
    system: GlobalSystem,
    state: SolverState,
    config: SolverConfig,
) -> FrameMetrics:
    """One frame of the nested Schur-complement iteration (mutates state)."""
    metrics = FrameMetrics()
    t_frame = time.perf_counter()
    part = system.partition
    x1_ids, x2_ids = system.x1_ids, system.x2_ids
    first_detection_done = False
    residual = 0.0

    for _ in range(config.outer_iters):
        t0 = time.perf_counter()
        local_step(model.mesh, model.rest, state.x, part.e_alpha, model.params, state.rotations)
        metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

        f = compute_forces(
            model.mesh, model.rest, state.x, state.rotations, model.params,
            part.e_alpha, model.attachments,
        )
        t0 = time.perf_counter()
        y1, f_tilde2 = forward_sub(system.factor, f[x1_ids], f[x2_ids])
        metrics.t_forward_ms += 1e3 * (time.perf_counter() - t0)
        state.f_tilde2 = f_tilde2
        state.u2_accum = np.zeros_like(f_tilde2)

        for _ in range(config.inner_iters):
            t0 = time.perf_counter()
            fresh = config.detection_cadence == "inner" or (
                config.detection_cadence == "frame" and not first_detection_done
            )
            state.active = _detect_or_reuse(model, state, fresh)
            first_detection_done = True
            metrics.t_detect_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            local_step(model.mesh, model.rest, state.x, part.e_beta, model.params, state.rotations)
            metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            c22 = col.assemble_c22(model.proxies, state.active, part, model.mesh)
            H = schur_assemble(system.factor.sigma0, c22.full())
            g = state.f_tilde2 + _beta_forces_local(model, system, state)
            g += _collision_forces_local(model, system, state)
            u2 = dense_solve(H, g)
            state.x[x2_ids] += u2
            state.f_tilde2 -= system.factor.sigma0 @ u2 - system.k22_beta @ u2
            state.u2_accum += u2
            residual = float(
                np.linalg.norm(H.h @ u2 - g) / max(np.linalg.norm(g), np.finfo(float).tiny)
            )
            metrics.t_dense_ms += 1e3 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        u1 = backward_sub(system.factor, y1, state.u2_accum)
        state.x[x1_ids] += u1
        metrics.t_backward_ms += 1e3 * (time.perf_counter() - t0)

        if (
            config.early_exit_residual is not None
            and _equilibrium_residual(model, state) <= config.early_exit_residual
        ):
            break

    metrics.residual = residual
    return _finish_metrics(model, state, metrics, t_frame)


def _collision_augmented(system: GlobalSystem, c22: ScalarSparseSym) -> ScalarSparseSym:
    """A + C22 scattered into the trailing block (partition order)."""
    n, n1 = system.partition.n, system.partition.n1
    if c22.nnz_upper == 0:
        return system.A
    up = c22.upper.tocoo()
    scatter = sp.coo_matrix((up.data, (up.row + n1, up.col + n1)), shape=(n, n)).tocsc()
    return ScalarSparseSym((system.A.upper + scatter).tocsc())


def _equilibrium_residual(model: Model, state: SolverState) -> float:
    """RMS of the total nodal force; the early-exit measure when enabled."""
    f = _pose_forces(model, state)
    return float(np.sqrt(np.mean(f * f)))


def _pose_forces(model: Model, state: SolverState) -> np.ndarray:
    """Total forces: all elements, all attachments, active collisions."""
    f = compute_forces(
        model.mesh, model.rest, state.x, state.rotations, model.params,
        None, model.attachments,
    )
    col.collision_forces(model.proxies, state.active, model.mesh, state.x, out=f)
    return f


def solve_frame_full(
    model: Model,
    system: GlobalSystem,
    state: SolverState,
    config: SolverConfig,
) -> FrameMetrics:
    """Baseline: refactor the collision-augmented sparse matrix every pass.
    Same projection and detection schedule as the Schur path, but each inner
    pass solves for all nodes."""
    metrics = FrameMetrics()
    t_frame = time.perf_counter()
    part = system.partition
    order = part.order
    first_detection_done = False
    residual = 0.0

    for _ in range(config.outer_iters):
        t0 = time.perf_counter()
        local_step(model.mesh, model.rest, state.x, part.e_alpha, model.params, state.rotations)
        metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

        for _ in range(config.inner_iters):
            t0 = time.perf_counter()
            fresh = config.detection_cadence == "inner" or (
                config.detection_cadence == "frame" and not first_detection_done
            )
            state.active = _detect_or_reuse(model, state, fresh)
            first_detection_done = True
            metrics.t_detect_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            local_step(model.mesh, model.rest, state.x, part.e_beta, model.params, state.rotations)
            metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            c22 = col.assemble_c22(model.proxies, state.active, part, model.mesh)
            A_col = _collision_augmented(system, c22)
            factor = partial_cholesky(A_col, A_col.n)  # full sparse factorization
            b = _pose_forces(model, state)[order]
            y1, _ = forward_sub(factor, b, b[:0])
            dx = backward_sub(factor, y1, b[:0])
            state.x[order] += dx
            residual = float(
                np.linalg.norm(A_col.matvec(dx) - b)
                / max(np.linalg.norm(b), np.finfo(float).tiny)
            )
            metrics.t_dense_ms += 1e3 * (time.perf_counter() - t0)

        if (
            config.early_exit_residual is not None
            and _equilibrium_residual(model, state) <= config.early_exit_residual
        ):
            break

    metrics.residual = residual
    return _finish_metrics(model, state, metrics, t_frame)


def solve_frame_pcg(
    model: Model,
    system: GlobalSystem,
    state: SolverState,
    config: SolverConfig,
) -> FrameMetrics:
    """Baseline: Jacobi-preconditioned CG on the collision-augmented operator,
    one solve per coordinate; records the worst per-pass iteration count."""
    metrics = FrameMetrics()
    t_frame = time.perf_counter()
    part = system.partition
    order = part.order
    first_detection_done = False
    residual = 0.0

    for _ in range(config.outer_iters):
        t0 = time.perf_counter()
        local_step(model.mesh, model.rest, state.x, part.e_alpha, model.params, state.rotations)
        metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

        for _ in range(config.inner_iters):
            t0 = time.perf_counter()
            fresh = config.detection_cadence == "inner" or (
                config.detection_cadence == "frame" and not first_detection_done
            )
            state.active = _detect_or_reuse(model, state, fresh)
            first_detection_done = True
            metrics.t_detect_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            local_step(model.mesh, model.rest, state.x, part.e_beta, model.params, state.rotations)
            metrics.t_local_ms += 1e3 * (time.perf_counter() - t0)

            t0 = time.perf_counter()
            c22 = col.assemble_c22(model.proxies, state.active, part, model.mesh)
            A_col = _collision_augmented(system, c22)
            op = A_col.full()
            jacobi = A_col.diagonal()
            b = _pose_forces(model, state)[order]
            dx = np.zeros_like(b)
            res = 0.0
            for c in range(3):
                xc, iters = pcg(
                    lambda v: op @ v, b[:, c], jacobi, config.pcg_tol, config.pcg_max_iters
                )
                dx[:, c] = xc
                metrics.pcg_iterations = max(metrics.pcg_iterations, iters)
                bn = float(np.linalg.norm(b[:, c]))
                if bn > 0:
                    res = max(res, float(np.linalg.norm(op @ xc - b[:, c]) / bn))
            state.x[order] += dx
            residual = res
            metrics.t_dense_ms += 1e3 * (time.perf_counter() - t0)

        if (
            config.early_exit_residual is not None
            and _equilibrium_residual(model, state) <= config.early_exit_residual
        ):
            break

    metrics.residual = residual
    return _finish_metrics(model, state, metrics, t_frame)


SOLVE_FUNCTIONS = {
    "schur": solve_frame_schur,
    "full_refactor": solve_frame_full,
    "pcg": solve_frame_pcg,
}


def solve_frame(model: Model, system: GlobalSystem, state: SolverState, config: SolverConfig) -> FrameMetrics:
    return SOLVE_FUNCTIONS[config.solver_kind](model, system, state, config)
