"""Scenario configuration, scripted kinematics, frame loop, and cross-solver
comparison reports.

Scenario files are YAML with a strict schema: unknown keys are rejected with
their full key path. Three scenes ship with the package (beam_press,
hinge_fold, untangle); see the commented files under schurpd/scenes/.

Outputs of run(): one OBJ per frame, an RFC-4180 metrics.csv with the fixed
column set, and summary.txt. All floats are written with repr, so outputs
are byte-identical across runs (pass record_timings=False to zero the wall
-time columns, which makes the whole CSV reproducible too).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import collision as col
from . import solver as sol
from .errors import ScenarioError
from .material import MaterialParams
from .mesh import TetMesh, build_box_lattice, compute_rest_data, load_tetgen, write_obj
from .partition import classify, validate

CSV_COLUMNS = (
    "frame",
    "t_local_ms",
    "t_forward_ms",
    "t_detect_ms",
    "t_dense_ms",
    "t_backward_ms",
    "t_total_ms",
    "energy",
    "active_proxies",
    "max_penetration",
    "residual",
)


# ------------------------------------------------------------------- schema


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ScenarioError("missing required key", key=f"{path}.{key}" if path else key)
    return d.pop(key)

def _optional(d: dict, key: str, default):
    return d.pop(key, default)

def _no_leftovers(d: dict, path: str):
    if d:
        raise ScenarioError(
            f"unknown key(s): {sorted(d.keys())}", key=path or "<root>"
        )

def _vec3(v, path: str) -> Tuple[float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ScenarioError(f"expected a 3-vector, got {v!r}", key=path)
    try:
        return tuple(float(c) for c in v)
    except (TypeError, ValueError):
        raise ScenarioError(f"non-numeric component in {v!r}", key=path) from None

def _num(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"expected a number, got {v!r}", key=path)
    return float(v)

def _int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"expected an integer, got {v!r}", key=path)
    return v


@dataclass(frozen=True)
class BoxRegion:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def mask(self, positions: np.ndarray) -> np.ndarray:
        lo = np.array(self.lo)
        hi = np.array(self.hi)
        return ((positions >= lo) & (positions <= hi)).all(axis=1)

    def to_dict(self) -> dict:
        return {"box": {"min": list(self.lo), "max": list(self.hi)}}


def _parse_region(d, path: str) -> BoxRegion:
    if not isinstance(d, dict):
        raise ScenarioError("region must be a mapping with a 'box' key", key=path)
    d = dict(d)
    box = _require(d, "box", path)
    _no_leftovers(d, path)
    if not isinstance(box, dict):
        raise ScenarioError("box must be a mapping with min/max", key=f"{path}.box")
    box = dict(box)
    lo = _vec3(_require(box, "min", f"{path}.box"), f"{path}.box.min")
    hi = _vec3(_require(box, "max", f"{path}.box"), f"{path}.box.max")
    _no_leftovers(box, f"{path}.box")
    return BoxRegion(lo, hi)


@dataclass(frozen=True)
class Motion:
    """Scripted rigid motion: 'fixed', constant-rate 'rotate' about an axis,
    or constant-velocity 'translate'. Rates are per frame; the motion runs
    from start_frame until stop_frame and then holds."""

    kind: str = "fixed"
    axis_point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_dir: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    degrees_per_frame: float = 0.0
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_frame: int = 0
    stop_frame: Optional[int] = None

    def transform_at(self, frame: int) -> col.RigidTransform:
        stop = self.stop_frame if self.stop_frame is not None else frame
        t = float(min(max(frame - self.start_frame, 0), max(stop - self.start_frame, 0)))
        if self.kind == "fixed" or t == 0.0:
            return col.RigidTransform()
        if self.kind == "translate":
            return col.RigidTransform(np.eye(3), t * np.array(self.velocity))
        # rotate: x -> P + R (x - P)
        angle = math.radians(self.degrees_per_frame * t)
        axis = np.array(self.axis_dir, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        kx, ky, kz = axis
        K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
        R = np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)
        P = np.array(self.axis_point)
        return col.RigidTransform(R, P - R @ P)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "rotate":
            d.update(
                axis_point=list(self.axis_point),
                axis_dir=list(self.axis_dir),
                degrees_per_frame=self.degrees_per_frame,
            )
        if self.kind == "translate":
            d["velocity"] = list(self.velocity)
        if self.kind != "fixed":
            if self.start_frame:
                d["start_frame"] = self.start_frame
            if self.stop_frame is not None:
                d["stop_frame"] = self.stop_frame
        return d


def _parse_motion(d, path: str) -> Motion:
    if d is None:
        return Motion()
    if not isinstance(d, dict):
        raise ScenarioError("motion must be a mapping", key=path)
    d = dict(d)
    kind = _require(d, "kind", path)
    if kind not in ("fixed", "rotate", "translate"):
        raise ScenarioError(f"unknown motion kind {kind!r}", key=f"{path}.kind")
    start = _int(_optional(d, "start_frame", 0), f"{path}.start_frame")
    stop = _optional(d, "stop_frame", None)
    if stop is not None:
        stop = _int(stop, f"{path}.stop_frame")
    if kind == "fixed":
        m = Motion(kind="fixed")
    elif kind == "rotate":
        m = Motion(
            kind="rotate",
            axis_point=_vec3(_require(d, "axis_point", path), f"{path}.axis_point"),
            axis_dir=_vec3(_require(d, "axis_dir", path), f"{path}.axis_dir"),
            degrees_per_frame=_num(_require(d, "degrees_per_frame", path), f"{path}.degrees_per_frame"),
            start_frame=start,
            stop_frame=stop,
        )
    else:
        m = Motion(
            kind="translate",
            velocity=_vec3(_require(d, "velocity", path), f"{path}.velocity"),
            start_frame=start,
            stop_frame=stop,
        )
    _no_leftovers(d, path)
    return m


@dataclass(frozen=True)
class AttachmentGroupSpec:
    name: str
    region: BoxRegion
    stiffness: float
    motion: Motion

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "region": self.region.to_dict(),
            "stiffness": self.stiffness,
            "motion": self.motion.to_dict(),
        }


@dataclass(frozen=True)
class ColliderSpec:
    shape_kind: str  # half_space | sphere | capsule | levelset
    params: Tuple[Tuple[str, object], ...]  # sorted key/value pairs
    motion: Motion
    active_from_frame: int = 1

    def param(self, key):
        return dict(self.params)[key]

    def to_dict(self) -> dict:
        d = {
            "shape": {self.shape_kind: {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params}},
            "motion": self.motion.to_dict(),
        }
        if self.active_from_frame != 1:
            d["active_from_frame"] = self.active_from_frame
        return d


def _parse_collider(d, path: str) -> ColliderSpec:
    if not isinstance(d, dict):
        raise ScenarioError("collider must be a mapping", key=path)
    d = dict(d)
    shape = _require(d, "shape", path)
    motion = _parse_motion(_optional(d, "motion", None), f"{path}.motion")
    active_from = _int(_optional(d, "active_from_frame", 1), f"{path}.active_from_frame")
    _no_leftovers(d, path)
    if not isinstance(shape, dict) or len(shape) != 1:
        raise ScenarioError("shape must be a one-key mapping", key=f"{path}.shape")
    kind, body = next(iter(shape.items()))
    spath = f"{path}.shape.{kind}"
    body = dict(body) if isinstance(body, dict) else None
    if body is None:
        raise ScenarioError("shape body must be a mapping", key=spath)
    if kind == "half_space":
        params = (
            ("normal", _vec3(_require(body, "normal", spath), f"{spath}.normal")),
            ("point", _vec3(_require(body, "point", spath), f"{spath}.point")),
        )
    elif kind == "sphere":
        params = (
            ("center", _vec3(_require(body, "center", spath), f"{spath}.center")),
            ("radius", _num(_require(body, "radius", spath), f"{spath}.radius")),
        )
    elif kind == "capsule":
        params = (
            ("p0", _vec3(_require(body, "p0", spath), f"{spath}.p0")),
            ("p1", _vec3(_require(body, "p1", spath), f"{spath}.p1")),
            ("radius", _num(_require(body, "radius", spath), f"{spath}.radius")),
        )
    elif kind == "levelset":
        params = (("file", str(_require(body, "file", spath))),)
    else:
        raise ScenarioError(f"unknown shape kind {kind!r}", key=f"{path}.shape")
    _no_leftovers(body, spath)
    return ColliderSpec(kind, params, motion, active_from)


@dataclass(frozen=True)
class ProxySpec:
    region: BoxRegion
    per_element: int = 1
    stiffness: object = "auto"  # "auto" or a number

    def to_dict(self) -> dict:
        return {
            "region": self.region.to_dict(),
            "per_element": self.per_element,
            "stiffness": self.stiffness,
        }


@dataclass(frozen=True)
class MeshSpec:
    extent: Optional[Tuple[float, float, float]] = None
    cells: Optional[Tuple[int, int, int]] = None
    node_file: Optional[str] = None
    ele_file: Optional[str] = None

    def to_dict(self) -> dict:
        if self.extent is not None:
            return {"lattice": {"extent": list(self.extent), "cells": list(self.cells)}}
        return {"files": {"node": self.node_file, "ele": self.ele_file}}


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "schur"
    outer_iters: int = 1
    inner_iters: int = 1
    pcg_tol: float = 1e-10
    pcg_max_iters: int = 20000
    detection_cadence: str = "inner"
    early_exit_residual: Optional[float] = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "outer_iters": self.outer_iters,
            "inner_iters": self.inner_iters,
            "pcg_tol": self.pcg_tol,
            "pcg_max_iters": self.pcg_max_iters,
            "detection_cadence": self.detection_cadence,
        }
        if self.early_exit_residual is not None:
            d["early_exit_residual"] = self.early_exit_residual
        return d


@dataclass(frozen=True)
class Scenario:
    name: str
    mesh: MeshSpec
    material: Tuple[Tuple[str, float], ...]  # sorted key/value pairs
    attachments: Tuple[AttachmentGroupSpec, ...]
    proxies: ProxySpec
    colliders: Tuple[ColliderSpec, ...]
    solver: SolverSpec
    frames: int

    def material_params(self) -> MaterialParams:
        return MaterialParams(**dict(self.material))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mesh": self.mesh.to_dict(),
            "material": dict(self.material),
            "attachments": [a.to_dict() for a in self.attachments],
            "proxies": self.proxies.to_dict(),
            "colliders": [c.to_dict() for c in self.colliders],
            "solver": self.solver.to_dict(),
            "frames": self.frames,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def parse_scenario(text: str) -> Scenario:
    """Parse and fully validate a scenario; unknown keys are rejected with
    their key path (YAML syntax errors carry line/column from the parser)."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ScenarioError(f"not valid YAML: {err}") from None
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping at top level")
    d = dict(raw)

    name = str(_require(d, "name", ""))

    mesh_d = _require(d, "mesh", "")
    if not isinstance(mesh_d, dict):
        raise ScenarioError("mesh must be a mapping", key="mesh")
    mesh_d = dict(mesh_d)
    if "lattice" in mesh_d:
        lat = dict(_require(mesh_d, "lattice", "mesh"))
        extent = _vec3(_require(lat, "extent", "mesh.lattice"), "mesh.lattice.extent")
        cells_raw = _require(lat, "cells", "mesh.lattice")
        if not isinstance(cells_raw, (list, tuple)) or len(cells_raw) != 3:
            raise ScenarioError("cells must be three counts", key="mesh.lattice.cells")
        cells = tuple(_int(c, "mesh.lattice.cells") for c in cells_raw)
        _no_leftovers(lat, "mesh.lattice")
        mesh_spec = MeshSpec(extent=extent, cells=cells)
    elif "files" in mesh_d:
        files = dict(_require(mesh_d, "files", "mesh"))
        mesh_spec = MeshSpec(
            node_file=str(_require(files, "node", "mesh.files")),
            ele_file=str(_require(files, "ele", "mesh.files")),
        )
        _no_leftovers(files, "mesh.files")
    else:
        raise ScenarioError("mesh needs either 'lattice' or 'files'", key="mesh")
    _no_leftovers(mesh_d, "mesh")

    mat_d = _require(d, "material", "")
    if not isinstance(mat_d, dict):
        raise ScenarioError("material must be a mapping", key="material")
    mat_d = dict(mat_d)
    material = {"mu": _num(_require(mat_d, "mu", "material"), "material.mu")}
    for k in ("mu_prime", "sigma_min", "sigma_max"):
        if k in mat_d:
            material[k] = _num(mat_d.pop(k), f"material.{k}")
    _no_leftovers(mat_d, "material")
    if "sigma_min" in material and "sigma_max" in material:
        if material["sigma_min"] > material["sigma_max"]:
            raise ScenarioError(
                f"sigma_min ({material['sigma_min']}) exceeds sigma_max ({material['sigma_max']})",
                key="material.sigma_min/material.sigma_max",
            )

    atts = []
    for i, a in enumerate(_optional(d, "attachments", []) or []):
        path = f"attachments[{i}]"
        if not isinstance(a, dict):
            raise ScenarioError("attachment group must be a mapping", key=path)
        a = dict(a)
        atts.append(
            AttachmentGroupSpec(
                name=str(_require(a, "name", path)),
                region=_parse_region(_require(a, "region", path), f"{path}.region"),
                stiffness=_num(_require(a, "stiffness", path), f"{path}.stiffness"),
                motion=_parse_motion(_optional(a, "motion", None), f"{path}.motion"),
            )
        )
        _no_leftovers(a, path)

    prox_d = _require(d, "proxies", "")
    if not isinstance(prox_d, dict):
        raise ScenarioError("proxies must be a mapping", key="proxies")
    prox_d = dict(prox_d)
    stiff = _optional(prox_d, "stiffness", "auto")
    if stiff != "auto":
        stiff = _num(stiff, "proxies.stiffness")
    proxies = ProxySpec(
        region=_parse_region(_require(prox_d, "region", "proxies"), "proxies.region"),
        per_element=_int(_optional(prox_d, "per_element", 1), "proxies.per_element"),
        stiffness=stiff,
    )
    _no_leftovers(prox_d, "proxies")

    colliders = tuple(
        _parse_collider(c, f"colliders[{i}]")
        for i, c in enumerate(_optional(d, "colliders", []) or [])
    )

    sol_d = _optional(d, "solver", {}) or {}
    if not isinstance(sol_d, dict):
        raise ScenarioError("solver must be a mapping", key="solver")
    sol_d = dict(sol_d)
    kind = str(_optional(sol_d, "kind", "schur"))
    if kind not in sol.SOLVER_KINDS:
        raise ScenarioError(f"solver kind must be one of {sol.SOLVER_KINDS}", key="solver.kind")
    cadence = str(_optional(sol_d, "detection_cadence", "inner"))
    early = _optional(sol_d, "early_exit_residual", None)
    if early is not None:
        early = _num(early, "solver.early_exit_residual")
    solver_spec = SolverSpec(
        kind=kind,
        outer_iters=_int(_optional(sol_d, "outer_iters", 1), "solver.outer_iters"),
        inner_iters=_int(_optional(sol_d, "inner_iters", 1), "solver.inner_iters"),
        pcg_tol=_num(_optional(sol_d, "pcg_tol", 1e-10), "solver.pcg_tol"),
        pcg_max_iters=_int(_optional(sol_d, "pcg_max_iters", 20000), "solver.pcg_max_iters"),
        detection_cadence=cadence,
        early_exit_residual=early,
    )
    _no_leftovers(sol_d, "solver")

    frames = _int(_require(d, "frames", ""), "frames")
    if frames < 1:
        raise ScenarioError("frames must be >= 1", key="frames")
    _no_leftovers(d, "")

    scenario = Scenario(
        name=name,
        mesh=mesh_spec,
        material=tuple(sorted(material.items())),
        attachments=tuple(atts),
        proxies=proxies,
        colliders=colliders,
        solver=solver_spec,
        frames=frames,
    )
    # eagerly validate numeric constraints
    scenario.material_params()
    return scenario


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def builtin_scene_path(name: str) -> Path:
    p = Path(__file__).parent / "scenes" / f"{name}.yaml"
    if not p.exists():
        raise ScenarioError(f"no built-in scene named {name!r}")
    return p


# --------------------------------------------------------------- simulation


def _build_shape(spec: ColliderSpec, base_dir: Optional[Path]):
    p = dict(spec.params)
    if spec.shape_kind == "half_space":
        return col.HalfSpace(p["point"], p["normal"])
    if spec.shape_kind == "sphere":
        return col.Sphere(p["center"], p["radius"])
    if spec.shape_kind == "capsule":
        return col.Capsule(p["p0"], p["p1"], p["radius"])
    path = Path(p["file"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return col.parse_levelset(path.read_text())


class Simulation:
    """A posed scenario: mesh, model, prefactored system, and state, with a
    frame loop. Frames are numbered from 1."""

    def __init__(self, scenario: Scenario, base_dir: Optional[Path] = None,
                 solver_overrides: Optional[dict] = None):
        self.scenario = scenario
        spec = scenario.solver.to_dict()
        spec.update(solver_overrides or {})
        kind = spec.pop("kind")
        self.config = sol.SolverConfig(solver_kind=kind, **spec)

        ms = scenario.mesh
        if ms.extent is not None:
            self.mesh: TetMesh = build_box_lattice(ms.extent, ms.cells)
        else:
            node = Path(ms.node_file)
            ele = Path(ms.ele_file)
            if base_dir is not None:
                node = node if node.is_absolute() else base_dir / node
                ele = ele if ele.is_absolute() else base_dir / ele
            self.mesh = load_tetgen(node.read_text(), ele.read_text())
        self.rest = compute_rest_data(self.mesh)
        self.params = scenario.material_params()

        stiff = scenario.proxies.stiffness
        if stiff == "auto":
            if self.config.collision_stiffness is not None:
                stiff = self.config.collision_stiffness
            else:
                stiff = sol.default_collision_stiffness(self.mesh, self.params)
        proxies = col.scatter_proxies(
            self.mesh,
            scenario.proxies.region.mask(self.mesh.rest_positions),
            per_element=scenario.proxies.per_element,
            stiffness=float(stiff),
        )
        self.partition = classify(self.mesh, proxies)

        self.attachment_groups: List[Tuple[AttachmentGroupSpec, np.ndarray]] = []
        attachments: List[sol.Attachment] = []
        for g in scenario.attachments:
            nodes = np.flatnonzero(g.region.mask(self.mesh.rest_positions))
            if len(nodes) == 0:
                raise ScenarioError("attachment region selects no nodes", key=f"attachments.{g.name}")
            self.attachment_groups.append((g, nodes))
            for nd in nodes:
                attachments.append(
                    sol.Attachment(int(nd), self.mesh.rest_positions[nd], g.stiffness)
                )

        self.system = sol.build_system(self.mesh, self.rest, self.params, attachments, self.partition)
        self.collider_specs = scenario.colliders
        self.all_colliders = [
            col.Collider(_build_shape(c, base_dir)) for c in scenario.colliders
        ]
        self.model = sol.Model(
            self.mesh, self.rest, self.params, attachments, proxies, []
        )
        self.state = sol.SolverState.at_rest(
            self.mesh, self.params, len(proxies), self.partition.n2
        )
        self.diagnostics = validate(self.mesh, self.partition, self.system.A, proxies)
        self.frame = 0

    def pose(self, frame: int) -> None:
        """Script attachments and colliders to the given frame."""
        i = 0
        for g, nodes in self.attachment_groups:
            tf = g.motion.transform_at(frame)
            targets = self.mesh.rest_positions[nodes] @ tf.rotation.T + tf.translation
            for k in range(len(nodes)):
                self.model.attachments[i].target = targets[k]
                i += 1
        active_colliders = []
        for spec, collider in zip(self.collider_specs, self.all_colliders):
            if frame >= spec.active_from_frame:
                tf = spec.motion.transform_at(frame)
                collider.transform = tf
                active_colliders.append(collider)
        self.model.colliders = active_colliders

    def step(self) -> sol.FrameMetrics:
        """Pose and solve the next frame."""
        self.frame += 1
        self.pose(self.frame)
        return sol.solve_frame(self.model, self.system, self.state, self.config)


# ------------------------------------------------------------------ reports


@dataclass
class RunReport:
    scenario: Scenario
    solver_kind: str
    rows: List[sol.FrameMetrics] = field(default_factory=list)
    config_echo: str = ""

    def aggregate(self) -> Dict[str, float]:
        if not self.rows:
            return {}
        tot = lambda k: float(sum(getattr(r, k) for r in self.rows))
        return {
            "frames": len(self.rows),
            "t_total_ms": tot("t_total_ms"),
            "t_local_ms": tot("t_local_ms"),
            "t_forward_ms": tot("t_forward_ms"),
            "t_detect_ms": tot("t_detect_ms"),
            "t_dense_ms": tot("t_dense_ms"),
            "t_backward_ms": tot("t_backward_ms"),
            "final_energy": self.rows[-1].energy,
            "max_penetration": max(r.max_penetration for r in self.rows),
            "max_active_proxies": max(r.active_proxies for r in self.rows),
        }


def _metrics_row(frame: int, m: sol.FrameMetrics, timings: bool) -> list:
    t = (lambda v: repr(float(v))) if timings else (lambda v: repr(0.0))
    return [
        str(frame),
        t(m.t_local_ms),
        t(m.t_forward_ms),
        t(m.t_detect_ms),
        t(m.t_dense_ms),
        t(m.t_backward_ms),
        t(m.t_total_ms),
        repr(float(m.energy)),
        str(m.active_proxies),
        repr(float(m.max_penetration)),
        repr(float(m.residual)),
    ]


def run(
    scenario: Scenario,
    output_dir,
    base_dir: Optional[Path] = None,
    solver_overrides: Optional[dict] = None,
    record_timings: bool = True,
    write_frames: bool = True,
) -> RunReport:
    """Simulate every frame: pose, solve, write an OBJ per frame, then the
    metrics CSV and a text summary."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(scenario, base_dir=base_dir, solver_overrides=solver_overrides)
    report = RunReport(scenario, sim.config.solver_kind, config_echo=scenario.to_yaml())

    with open(out / "metrics.csv", "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for frame in range(1, scenario.frames + 1):
            metrics = sim.step()
            report.rows.append(metrics)
            if write_frames:
                write_obj(out / f"frame_{frame:04d}.obj", sim.state.x, sim.mesh.surface_tris)
            writer.writerow(_metrics_row(frame, metrics, record_timings))

    agg = report.aggregate()
    with open(out / "summary.txt", "w", encoding="ascii") as fh:
        fh.write(f"scenario: {scenario.name}\n")
        fh.write(f"solver: {sim.config.solver_kind}\n")
        fh.write(sim.diagnostics.report() + "\n")
        for k, v in agg.items():
            fh.write(f"{k}: {v}\n")
        fh.write("\n# config echo (reparses to the same scenario)\n")
        for line in report.config_echo.splitlines():
            fh.write(f"# {line}\n")
    return report


@dataclass
class CompareRow:
    frame: int
    outer: int
    solver: str
    diff_rel: float
    solve_ms: float
    pcg_iterations: int
    pcg_iters_to_1e3: int


@dataclass
class CompareReport:
    scenario: Scenario
    solver_kinds: List[str]
    rows: List[CompareRow] = field(default_factory=list)

    def max_diff(self, solver: str) -> float:
        diffs = [r.diff_rel for r in self.rows if r.solver == solver]
        return max(diffs) if diffs else 0.0


def compare(
    scenario: Scenario,
    solver_kinds: Sequence[str],
    output_dir,
    base_dir: Optional[Path] = None,
) -> CompareReport:
    """Run several solvers in lockstep: per frame and outer iteration, every
    solver takes one outer pass from the same state snapshot (detection is a
    pure function of positions, so all see identical active sets); the first
    solver's result advances the shared trajectory. Reports per-pass solution
    differences, solve-stage times (substitutions and system solve; detection
    and projection excluded), and PCG iteration counts, including iterations
    to a 1e-3 residual."""
    if len(solver_kinds) < 2:
        raise ScenarioError("compare needs at least two solver kinds")
    for k in solver_kinds:
        if k not in sol.SOLVER_KINDS:
            raise ScenarioError(f"unknown solver kind {k!r}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    primary = solver_kinds[0]
    sim = Simulation(scenario, base_dir=base_dir, solver_overrides={"kind": primary, "outer_iters": 1})
    outer_iters = scenario.solver.outer_iters
    report = CompareReport(scenario, list(solver_kinds))

    for frame in range(1, scenario.frames + 1):
        sim.frame = frame
        sim.pose(frame)
        for outer in range(1, outer_iters + 1):
            snapshot = sim.state.copy()
            results = {}
            for kind in solver_kinds:
                trial = snapshot.copy() if kind != primary else sim.state
                cfg_kw = {"kind": kind, "outer_iters": 1,
                          "inner_iters": scenario.solver.inner_iters,
                          "pcg_tol": scenario.solver.pcg_tol,
                          "pcg_max_iters": scenario.solver.pcg_max_iters}
                spec = scenario.solver.to_dict()
                spec.update(cfg_kw)
                kind_v = spec.pop("kind")
                cfg = sol.SolverConfig(solver_kind=kind_v, **spec)
                metrics = sol.SOLVE_FUNCTIONS[kind](sim.model, sim.system, trial, cfg)
                results[kind] = (trial.x.copy(), metrics)
            base_x, _ = results[primary]
            step = base_x - snapshot.x
            step_norm = max(float(np.linalg.norm(step)), np.finfo(float).tiny)
            for kind in solver_kinds:
                x_k, metrics = results[kind]
                diff = float(np.linalg.norm(x_k - base_x)) / step_norm
                iters_1e3 = 0
                if kind == "pcg":
                    probe = snapshot.copy()
                    spec = scenario.solver.to_dict()
                    spec.update({"kind": "pcg", "outer_iters": 1,
                                 "inner_iters": scenario.solver.inner_iters,
                                 "pcg_tol": 1e-3})
                    kv = spec.pop("kind")
                    pm = sol.SOLVE_FUNCTIONS["pcg"](sim.model, sim.system, probe, sol.SolverConfig(solver_kind=kv, **spec))
                    iters_1e3 = pm.pcg_iterations
                solve_ms = metrics.t_forward_ms + metrics.t_dense_ms + metrics.t_backward_ms
                report.rows.append(
                    CompareRow(frame, outer, kind, diff, solve_ms, metrics.pcg_iterations, iters_1e3)
                )

    with open(out / "comparison.csv", "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["frame", "outer", "solver", "diff_rel_vs_" + primary, "solve_ms", "pcg_iterations", "pcg_iters_to_1e3"]
        )
        for r in report.rows:
            writer.writerow(
                [r.frame, r.outer, r.solver, repr(r.diff_rel), repr(r.solve_ms), r.pcg_iterations, r.pcg_iters_to_1e3]
            )
    with open(out / "comparison_summary.txt", "w", encoding="ascii") as fh:
        fh.write(f"scenario: {scenario.name}\nprimary: {primary}\n")
        for kind in solver_kinds:
            fh.write(f"max relative difference {kind} vs {primary}: {report.max_diff(kind)!r}\n")
        pcg_rows = [r for r in report.rows if r.solver == "pcg"]
        if pcg_rows:
            fh.write("pcg iterations to 1e-3, per frame (max over outer passes):\n")
            per_frame: Dict[int, int] = {}
            for r in pcg_rows:
                per_frame[r.frame] = max(per_frame.get(r.frame, 0), r.pcg_iters_to_1e3)
            for f_, it in sorted(per_frame.items()):
                fh.write(f"  frame {f_}: {it}\n")
    return report
