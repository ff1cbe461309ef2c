"""Tetrahedral meshes: lattice generation, TetGen-style IO, rest-state data,
and per-element deformation gradients.

Positions are plain (n, 3) float64 arrays throughout; nothing in this module
mutates a mesh after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateElementError, InvalidArgumentError, MeshFileError

# Corner tets + central tet of the 5-tet cube split, for the two mirror
# parities. Corner numbering is bit order (dx, dy, dz) -> dx + 2*dy + 4*dz.
_FIVE_TETS_EVEN = ((0, 1, 2, 4), (1, 3, 7, 2), (1, 7, 5, 4), (2, 7, 4, 6), (1, 2, 4, 7))
_FIVE_TETS_ODD = ((1, 0, 5, 3), (0, 2, 3, 6), (0, 6, 4, 5), (3, 6, 5, 7), (0, 3, 5, 6))

# Outward-oriented faces of a positively oriented tet (v0, v1, v2, v3).
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))


@dataclass(frozen=True)
class TetMesh:
    """Rest geometry plus connectivity.

    rest_positions: (n, 3) rest-state node coordinates in meters.
    tets: (ne, 4) node indices, positively oriented.
    surface_tris: (ns, 3) outward-oriented boundary triangles.
    """

    rest_positions: np.ndarray
    tets: np.ndarray
    surface_tris: np.ndarray

    def __post_init__(self):
        n = len(self.rest_positions)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise InvalidArgumentError("tet index out of range")
        if self.surface_tris.size:
            used = np.zeros(n, dtype=bool)
            used[self.tets.ravel()] = True
            if not used[self.surface_tris.ravel()].all():
                raise InvalidArgumentError("surface triangle references a node outside all tets")

    @property
    def num_nodes(self) -> int:
        return len(self.rest_positions)

    @property
    def num_elements(self) -> int:
        return len(self.tets)


@dataclass(frozen=True)
class RestData:
    """Per-element inverse rest-shape matrices and rest volumes."""

    dm_inverse: np.ndarray  # (ne, 3, 3)
    volume: np.ndarray  # (ne,), all positive


def _signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    d = positions[tets[:, 1:]] - positions[tets[:, :1]]
    return np.linalg.det(d) / 6.0


def _extract_surface(tets: np.ndarray) -> np.ndarray:
    """Boundary faces (those not shared by two tets), outward-oriented."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inverse] == 1
    return np.ascontiguousarray(faces[boundary])


def build_box_lattice(extent, cells) -> TetMesh:
    """Regular box lattice split into 5 tets per cube with alternating parity
    so faces of neighboring cubes conform.

    extent: (3,) box dimensions in meters, all > 0.
    cells: (3,) cube counts per axis, all >= 1.
    """
    extent = np.asarray(extent, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    if extent.shape != (3,) or cells.shape != (3,):
        raise InvalidArgumentError("extent and cells must be 3-vectors")
    if (extent <= 0).any():
        raise InvalidArgumentError(f"extents must be positive, got {extent.tolist()}")
    if (cells < 1).any():
        raise InvalidArgumentError(f"cell counts must be >= 1, got {cells.tolist()}")

    ax, ay, az = (int(c) for c in cells)
    nx, ny, nz = ax + 1, ay + 1, az + 1
    xs = np.linspace(0.0, extent[0], nx)
    ys = np.linspace(0.0, extent[1], ny)
    zs = np.linspace(0.0, extent[2], nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    # node id = i + nx*(j + ny*k), x fastest
    positions = np.stack(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1
    )

    ii, jj, kk = np.meshgrid(np.arange(ax), np.arange(ay), np.arange(az), indexing="ij")
    ii = ii.ravel(order="F")
    jj = jj.ravel(order="F")
    kk = kk.ravel(order="F")
    base = ii + nx * (jj + ny * kk)
    # cube corners in bit order (dx, dy, dz)
    offsets = np.array([dx + nx * (dy + ny * dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    corners = base[:, None] + offsets[None, :]
    parity = (ii + jj + kk) % 2

    even = np.array(_FIVE_TETS_EVEN)
    odd = np.array(_FIVE_TETS_ODD)
    tets = np.where(parity[:, None, None] == 0, corners[:, even], corners[:, odd])
    tets = tets.reshape(-1, 4)

    vols = _signed_volumes(positions, tets)
    flip = vols < 0
    if flip.any():
        tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
    return TetMesh(positions, tets, _extract_surface(tets))


def _parse_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_tetgen(node_text: str, ele_text: str) -> TetMesh:
    """Build a mesh from TetGen-style .node/.ele file contents (1-indexed).

    Element windings with non-positive signed volume are repaired by swapping
    two indices; elements with |volume| below 1e-14 of the mean are rejected.
    """
    lines = _parse_lines(node_text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFileError("empty node file") from None
    try:
        n_nodes = int(header[0])
    except (ValueError, IndexError):
        raise MeshFileError(f"bad node header {header!r}", line=lineno) from None
    positions = np.empty((n_nodes, 3), dtype=np.float64)
    seen = 0
    for lineno, parts in lines:
        if seen >= n_nodes:
            break
        if len(parts) < 4:
            raise MeshFileError(f"expected '<index> <x> <y> <z>', got {parts!r}", line=lineno)
        try:
            idx = int(parts[0]) - 1
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise MeshFileError(f"non-numeric node entry {parts!r}", line=lineno) from None
        if not 0 <= idx < n_nodes:
            raise MeshFileError(f"node index {idx + 1} out of range 1..{n_nodes}", line=lineno)
        positions[idx] = xyz
        seen += 1
    if seen != n_nodes:
        raise MeshFileError(f"node file declares {n_nodes} nodes but contains {seen}")

    lines = _parse_lines(ele_text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFileError("empty element file") from None
    try:
        n_tets = int(header[0])
    except (ValueError, IndexError):
        raise MeshFileError(f"bad element header {header!r}", line=lineno) from None
    tets = np.empty((n_tets, 4), dtype=np.int64)
    tet_lines = np.empty(n_tets, dtype=np.int64)
    seen = 0
    for lineno, parts in lines:
        if seen >= n_tets:
            break
        if len(parts) < 5:
            raise MeshFileError(f"expected '<index> <v0> <v1> <v2> <v3>', got {parts!r}", line=lineno)
        try:
            idx = int(parts[0]) - 1
            verts = [int(v) - 1 for v in parts[1:5]]
        except ValueError:
            raise MeshFileError(f"non-numeric element entry {parts!r}", line=lineno) from None
        if not 0 <= idx < n_tets:
            raise MeshFileError(f"element index {idx + 1} out of range 1..{n_tets}", line=lineno)
        for v in verts:
            if not 0 <= v < n_nodes:
                raise MeshFileError(f"vertex index {v + 1} out of range 1..{n_nodes}", line=lineno)
        tets[idx] = verts
        tet_lines[idx] = lineno
        seen += 1
    if seen != n_tets:
        raise MeshFileError(f"element file declares {n_tets} elements but contains {seen}")

    vols = _signed_volumes(positions, tets)
    mean_vol = np.abs(vols).mean() if n_tets else 0.0
    degenerate = np.abs(vols) < 1e-14 * mean_vol
    if degenerate.any():
        e = int(np.argmax(degenerate))
        raise MeshFileError(
            f"element {e + 1} is degenerate (|volume| {abs(vols[e]):.3e} < 1e-14 of mean)",
            line=int(tet_lines[e]),
        )
    flip = vols < 0
    if flip.any():
        tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
    return TetMesh(positions, tets, _extract_surface(tets))


def compute_rest_data(mesh: TetMesh) -> RestData:
    """Invert the rest shape matrix Dm = [x1-x0 | x2-x0 | x3-x0] per element."""
    dm = np.swapaxes(mesh.rest_positions[mesh.tets[:, 1:]] - mesh.rest_positions[mesh.tets[:, :1]], 1, 2)
    det = np.linalg.det(dm)
    bad = det <= 0
    if bad.any():
        e = int(np.argmax(bad))
        raise DegenerateElementError(
            f"element {e} has non-positive rest volume (det Dm = {det[e]:.3e})", element=e
        )
    return RestData(dm_inverse=np.linalg.inv(dm), volume=det / 6.0)


def deformation_gradient(mesh: TetMesh, rest: RestData, x: np.ndarray, e: int) -> np.ndarray:
    """F = Ds(x) * Dm^-1 for one element; 3x3, possibly singular or inverted."""
    if not 0 <= e < mesh.num_elements:
        raise InvalidArgumentError(f"element index {e} out of range")
    tet = mesh.tets[e]
    ds = (x[tet[1:]] - x[tet[0]]).T
    return ds @ rest.dm_inverse[e]


def deformation_gradients(mesh: TetMesh, rest: RestData, x: np.ndarray, elements=None) -> np.ndarray:
    """Deformation gradients for all elements (or an index subset), stacked (k, 3, 3)."""
    tets = mesh.tets if elements is None else mesh.tets[elements]
    dmi = rest.dm_inverse if elements is None else rest.dm_inverse[elements]
    ds = np.swapaxes(x[tets[:, 1:]] - x[tets[:, :1]], 1, 2)
    return ds @ dmi


def obj_text(positions: np.ndarray, surface_tris: np.ndarray) -> str:
    """Wavefront OBJ: one v line per node (in order), 1-indexed f lines.

    Floats are written with repr so output is byte-identical across runs.
    """
    parts = []
    for p in positions:
        parts.append(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
    for t in surface_tris:
        parts.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return "".join(parts)


def write_obj(path, positions: np.ndarray, surface_tris: np.ndarray) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(obj_text(positions, surface_tris))
