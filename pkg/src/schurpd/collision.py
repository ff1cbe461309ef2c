"""Collision proxies embedded in surface elements, kinematic implicit
colliders with per-frame rigid transforms, detection into an active set, and
assembly of the collision energy, forces, and the scalar C22 block.

Targets are frozen at detection time: between detections the collision energy
is an exact quadratic in positions, which is what lets the penalty terms ride
along in the global step as an additive update to the Schur complement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import EmptyRegionError, InvalidArgumentError, PartitionError
from .linalg import ScalarSparseSym
from .mesh import TetMesh, _TET_FACES


@dataclass(frozen=True)
class CollisionProxy:
    """A point embedded barycentrically in one tet, with its penalty spring
    stiffness (N/m)."""

    element: int
    weights: np.ndarray  # (4,) barycentric, sum to 1, each in [0, 1]
    stiffness: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (4,):
            raise InvalidArgumentError("proxy weights must be a 4-vector")
        if abs(w.sum() - 1.0) > 1e-12 or (w < -1e-12).any() or (w > 1 + 1e-12).any():
            raise InvalidArgumentError(f"proxy weights must be a convex combination, got {w}")
        if self.stiffness < 0:
            raise InvalidArgumentError("proxy stiffness must be >= 0")
        object.__setattr__(self, "weights", w)


@dataclass
class RigidTransform:
    """World pose of a collider: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_local(self, p: np.ndarray) -> np.ndarray:
        return (p - self.translation) @ self.rotation

    def vector_to_world(self, v: np.ndarray) -> np.ndarray:
        return v @ self.rotation.T


class HalfSpace:
    """Prohibited region: the side the outward normal points away from
    (signed distance n . (p - point) < 0)."""

    def __init__(self, point, normal):
        normal = np.asarray(normal, dtype=np.float64)
        nn = np.linalg.norm(normal)
        if abs(nn - 1.0) > 1e-12:
            raise InvalidArgumentError(f"half-space normal must be unit length, |n| = {nn}")
        self.point = np.asarray(point, dtype=np.float64)
        self.normal = normal

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return (p - self.point) @ self.normal

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, p.shape).copy()


class Sphere:
    """Prohibited region: the interior."""

    def __init__(self, center, radius: float):
        if radius <= 0:
            raise InvalidArgumentError("sphere radius must be positive")
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def gradient(self, p: np.ndarray) -> np.ndarray:
        d = p - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        g = np.divide(d, r, out=np.zeros_like(d), where=r > 0)
        g[(r == 0)[..., 0]] = (1.0, 0.0, 0.0)  # center is a gradient singularity
        return g


class Capsule:
    """Segment p0-p1 swept by a sphere; prohibited inside."""

    def __init__(self, p0, p1, radius: float):
        if radius <= 0:
            raise InvalidArgumentError("capsule radius must be positive")
        self.p0 = np.asarray(p0, dtype=np.float64)
        self.p1 = np.asarray(p1, dtype=np.float64)
        self.radius = float(radius)

    def _closest(self, p: np.ndarray) -> np.ndarray:
        axis = self.p1 - self.p0
        denom = float(axis @ axis)
        if denom == 0.0:
            return np.broadcast_to(self.p0, p.shape).copy()
        t = np.clip(((p - self.p0) @ axis) / denom, 0.0, 1.0)
        return self.p0 + t[..., None] * axis

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self._closest(p), axis=-1) - self.radius

    def gradient(self, p: np.ndarray) -> np.ndarray:
        d = p - self._closest(p)
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        g = np.divide(d, r, out=np.zeros_like(d), where=r > 0)
        g[(r == 0)[..., 0]] = (1.0, 0.0, 0.0)
        return g


class GridLevelset:
    """Signed distance sampled on a regular grid; trilinear values,
    central-difference gradients. Queries outside the grid report +inf
    (treated as non-colliding)."""

    def __init__(self, origin, spacing: float, dims, values: np.ndarray):
        if spacing <= 0:
            raise InvalidArgumentError("grid spacing must be positive")
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise InvalidArgumentError("grid dims must be three counts >= 2")
        values = np.asarray(values, dtype=np.float64)
        if values.size != dims[0] * dims[1] * dims[2]:
            raise InvalidArgumentError("value count does not match dims")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.spacing = float(spacing)
        self.dims = dims
        # stored x-fastest: values[i + nx*(j + ny*k)]
        self.values = values.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).copy()

    def _sample(self, q: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        g = (q - self.origin) / self.spacing
        out = np.full(q.shape[:-1], np.inf)
        inside = (
            (g[..., 0] >= 0) & (g[..., 0] <= nx - 1)
            & (g[..., 1] >= 0) & (g[..., 1] <= ny - 1)
            & (g[..., 2] >= 0) & (g[..., 2] <= nz - 1)
        )
        if not inside.any():
            return out
        gi = g[inside]
        i0 = np.minimum(gi.astype(np.int64), np.array(self.dims) - 2)
        f = gi - i0
        v = self.values
        ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        c00 = v[ix, iy, iz] * (1 - fx) + v[ix + 1, iy, iz] * fx
        c10 = v[ix, iy + 1, iz] * (1 - fx) + v[ix + 1, iy + 1, iz] * fx
        c01 = v[ix, iy, iz + 1] * (1 - fx) + v[ix + 1, iy, iz + 1] * fx
        c11 = v[ix, iy + 1, iz + 1] * (1 - fx) + v[ix + 1, iy + 1, iz + 1] * fx
        out[inside] = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz
        return out

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return self._sample(p)

    def gradient(self, p: np.ndarray) -> np.ndarray:
        h = 0.5 * self.spacing
        g = np.empty_like(p)
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            g[..., a] = (self._sample(p + dp) - self._sample(p - dp)) / (2 * h)
        g[~np.isfinite(g).all(axis=-1)] = 0.0
        return g


Shape = Union[HalfSpace, Sphere, Capsule, GridLevelset]


@dataclass
class Collider:
    """A kinematic implicit shape posed by a per-frame rigid transform."""

    shape: Shape
    transform: RigidTransform = field(default_factory=RigidTransform)

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return self.shape.signed_distance(self.transform.to_local(p))

    def project(self, p: np.ndarray) -> np.ndarray:
        """Closest-surface targets t = p - phi grad(phi), computed in the
        collider's local frame and carried back to world."""
        q = self.transform.to_local(p)
        phi = self.shape.signed_distance(q)
        grad = self.shape.gradient(q)
        phi = np.where(np.isfinite(phi), phi, 0.0)
        return p - phi[..., None] * self.transform.vector_to_world(grad)


@dataclass
class ActiveSet:
    """Per-proxy collision flags and frozen targets (valid where active)."""

    active: np.ndarray  # (m,) bool
    target: np.ndarray  # (m, 3), zeros where inactive

    @property
    def count(self) -> int:
        return int(self.active.sum())

    @classmethod
    def empty(cls, m: int) -> "ActiveSet":
        return cls(np.zeros(m, dtype=bool), np.zeros((m, 3)))


def _surface_owner_map(mesh: TetMesh):
    """sorted face triple -> (element, per-face tet-local weights slots)."""
    owners = {}
    for e in range(mesh.num_elements):
        tet = mesh.tets[e]
        for face in _TET_FACES:
            tri = (int(tet[face[0]]), int(tet[face[1]]), int(tet[face[2]]))
            owners.setdefault(tuple(sorted(tri)), (e, tri))
    return owners


def _subdivision_points(count: int) -> np.ndarray:
    """Deterministic barycentric sample points: triangle centroid for one,
    centroids of recursive 4-way midpoint subdivision afterwards."""
    tris = [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])]
    while len(tris) < count:
        nxt = []
        for t in tris:
            m01 = 0.5 * (t[0] + t[1])
            m12 = 0.5 * (t[1] + t[2])
            m02 = 0.5 * (t[0] + t[2])
            nxt.extend(
                [
                    np.array([t[0], m01, m02]),
                    np.array([m01, t[1], m12]),
                    np.array([m02, m12, t[2]]),
                    np.array([m01, m12, m02]),
                ]
            )
        tris = nxt
    return np.array([t.mean(axis=0) for t in tris[:count]])


def scatter_proxies(
    mesh: TetMesh,
    region: Union[Sequence[int], np.ndarray, Callable[[np.ndarray], np.ndarray]],
    per_element: int = 1,
    stiffness: float = 1.0,
) -> List[CollisionProxy]:
    """Place proxies on every surface triangle whose three vertices lie in
    the region (a node index set, boolean mask, or predicate over rest
    positions). per_element points per triangle, deterministically placed.
    """
    if per_element < 1:
        raise InvalidArgumentError("per_element must be >= 1")
    n = mesh.num_nodes
    if callable(region):
        mask = np.asarray(region(mesh.rest_positions), dtype=bool)
        if mask.shape != (n,):
            raise InvalidArgumentError("region predicate must return one flag per node")
    else:
        idx = np.asarray(region)
        if idx.dtype == bool:
            mask = idx
        else:
            mask = np.zeros(n, dtype=bool)
            mask[idx] = True
    if not mask.any():
        raise EmptyRegionError("region contains no nodes")

    owners = _surface_owner_map(mesh)
    bary = _subdivision_points(per_element)
    proxies: List[CollisionProxy] = []
    for tri in mesh.surface_tris:
        if not mask[tri].all():
            continue
        e, ordered = owners[tuple(sorted(int(v) for v in tri))]
        tet = mesh.tets[e]
        # slot of each face vertex within the owning tet; the opposite vertex
        # keeps weight 0 so the proxy stays on the surface
        slots = [int(np.nonzero(tet == v)[0][0]) for v in ordered]
        for b in bary:
            w = np.zeros(4)
            for local in range(3):
                w[slots[local]] = b[local]
            proxies.append(CollisionProxy(element=int(e), weights=w, stiffness=stiffness))
    if not proxies:
        raise EmptyRegionError("region touches no surface triangle")
    return proxies


def proxy_positions(proxies: Sequence[CollisionProxy], mesh: TetMesh, x: np.ndarray) -> np.ndarray:
    """p_j = sum_i w_ji x_i for every proxy, stacked (m, 3)."""
    if not proxies:
        return np.zeros((0, 3))
    elems = np.array([p.element for p in proxies])
    W = np.array([p.weights for p in proxies])
    return np.einsum("ma,mad->md", W, x[mesh.tets[elems]])


def proxy_position(proxy: CollisionProxy, mesh: TetMesh, x: np.ndarray) -> np.ndarray:
    return proxy_positions([proxy], mesh, x)[0]


def detect(
    proxies: Sequence[CollisionProxy],
    mesh: TetMesh,
    x: np.ndarray,
    colliders: Sequence[Collider],
) -> ActiveSet:
    """Flag proxies inside any collider (union); targets come from the
    deepest-penetration collider, first-listed winning ties."""
    m = len(proxies)
    out = ActiveSet.empty(m)
    if m == 0 or not colliders:
        return out
    p = proxy_positions(proxies, mesh, x)
    best_phi = np.full(m, np.inf)
    best_idx = np.full(m, -1)
    for ci, col in enumerate(colliders):
        phi = col.signed_distance(p)
        deeper = phi < best_phi
        best_phi = np.where(deeper, phi, best_phi)
        best_idx = np.where(deeper, ci, best_idx)
    active = best_phi < 0.0
    out.active[:] = active
    for ci, col in enumerate(colliders):
        sel = active & (best_idx == ci)
        if sel.any():
            out.target[sel] = col.project(p[sel])
    return out


def penetration_depths(
    proxies: Sequence[CollisionProxy],
    mesh: TetMesh,
    x: np.ndarray,
    colliders: Sequence[Collider],
) -> np.ndarray:
    """max(0, -phi) per proxy against the deepest collider."""
    m = len(proxies)
    if m == 0 or not colliders:
        return np.zeros(m)
    p = proxy_positions(proxies, mesh, x)
    best = np.full(m, np.inf)
    for col in colliders:
        best = np.minimum(best, col.signed_distance(p))
    return np.where(np.isfinite(best), np.maximum(0.0, -best), 0.0)


def collision_energy(
    proxies: Sequence[CollisionProxy],
    active: ActiveSet,
    mesh: TetMesh,
    x: np.ndarray,
) -> float:
    """Sum over active proxies of (c/2) |p(x) - t|^2 with t frozen."""
    if not proxies or not active.active.any():
        return 0.0
    p = proxy_positions(proxies, mesh, x)
    c = np.array([pr.stiffness for pr in proxies])
    d = p - active.target
    return float(0.5 * np.sum(c * active.active * np.einsum("md,md->m", d, d)))


def collision_forces(
    proxies: Sequence[CollisionProxy],
    active: ActiveSet,
    mesh: TetMesh,
    x: np.ndarray,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-node forces -W' C (W x - t) with frozen targets; support is the
    nodes of proxy-owning elements only."""
    if out is None:
        out = np.zeros((mesh.num_nodes, 3))
    if not proxies or not active.active.any():
        return out
    p = proxy_positions(proxies, mesh, x)
    for j, pr in enumerate(proxies):
        if not active.active[j]:
            continue
        f = -pr.stiffness * (p[j] - active.target[j])
        nodes = mesh.tets[pr.element]
        for a in range(4):
            out[nodes[a]] += pr.weights[a] * f
    return out


def assemble_c22(
    proxies: Sequence[CollisionProxy],
    active: ActiveSet,
    partition,
    mesh: TetMesh,
) -> ScalarSparseSym:
    """Scalar m x m block sum_j c_j w_j w_j' over active proxies, scattered
    in collision-prone-local indices (new index minus n1)."""
    m = partition.n2
    if not proxies:
        return ScalarSparseSym(sp.csc_matrix((m, m)))
    elems = np.array([p.element for p in proxies])
    beta_mask = np.zeros(mesh.num_elements, dtype=bool)
    beta_mask[partition.e_beta] = True
    if not beta_mask[elems].all():
        j = int(np.argmin(beta_mask[elems]))
        raise PartitionError(
            f"proxy {j} lives in element {int(elems[j])}, which is not in the "
            "collision-prone element set"
        )
    local = partition.perm[mesh.tets[elems]] - partition.n1  # (p, 4)
    if (local < 0).any():
        j = int(np.argmax((local < 0).any(axis=1)))
        raise PartitionError(f"proxy {j} touches a node outside the collision-prone range")
    sel = np.asarray(active.active, dtype=bool)
    if not sel.any():
        return ScalarSparseSym(sp.csc_matrix((m, m)))
    W = np.array([p.weights for p in proxies])[sel]
    c = np.array([p.stiffness for p in proxies])[sel]
    loc = local[sel]
    blocks = c[:, None, None] * (W[:, :, None] * W[:, None, :])
    rows = np.repeat(loc, 4, axis=1).ravel()
    cols = np.tile(loc, (1, 4)).ravel()
    return ScalarSparseSym.from_coo(m, rows, cols, blocks.ravel())


# ------------------------------------------------------------- levelset file


def parse_levelset(text: str) -> GridLevelset:
    """ASCII grid file: 'levelset nx ny nz ox oy oz spacing' then nx*ny*nz
    values in x-fastest order (whitespace separated)."""
    tokens = text.split()
    if len(tokens) < 8 or tokens[0] != "levelset":
        raise InvalidArgumentError("levelset file must start with 'levelset nx ny nz ox oy oz spacing'")
    try:
        nx, ny, nz = int(tokens[1]), int(tokens[2]), int(tokens[3])
        ox, oy, oz = float(tokens[4]), float(tokens[5]), float(tokens[6])
        spacing = float(tokens[7])
        values = np.array([float(t) for t in tokens[8:]])
    except ValueError as err:
        raise InvalidArgumentError(f"malformed levelset file: {err}") from None
    if values.size != nx * ny * nz:
        raise InvalidArgumentError(
            f"levelset declares {nx * ny * nz} samples but carries {values.size}"
        )
    return GridLevelset((ox, oy, oz), spacing, (nx, ny, nz), values)


def levelset_text(grid: GridLevelset) -> str:
    nx, ny, nz = grid.dims
    ox, oy, oz = (float(c) for c in grid.origin)
    head = f"levelset {nx} {ny} {nz} {ox!r} {oy!r} {oz!r} {grid.spacing!r}\n"
    flat = grid.values.transpose(2, 1, 0).ravel()  # back to x-fastest
    body = "\n".join(repr(float(v)) for v in flat)
    return head + body + "\n"
