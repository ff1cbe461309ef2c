"""Quasistatic projective dynamics on tetrahedral meshes with penalty
collisions handled through a partial-Cholesky Schur complement on the
collision-prone node set."""

from .errors import (
    DegenerateElementError,
    EmptyRegionError,
    IndefiniteMatrixError,
    IndefiniteOperatorError,
    InvalidArgumentError,
    MeshFileError,
    PartitionError,
    ScenarioError,
    SchurPDError,
    SolverSetupError,
)
from .mesh import (
    RestData,
    TetMesh,
    build_box_lattice,
    compute_rest_data,
    deformation_gradient,
    deformation_gradients,
    load_tetgen,
    obj_text,
    write_obj,
)
from .material import (
    MaterialParams,
    RotationCache,
    assemble_stiffness,
    biphasic_projection,
    biphasic_projections,
    elastic_energy,
    elastic_forces,
    element_forces,
    energy_density,
    piola_stress,
    polar_rotation,
    polar_rotations,
    signed_svd,
)
from .collision import (
    ActiveSet,
    Capsule,
    Collider,
    CollisionProxy,
    GridLevelset,
    HalfSpace,
    RigidTransform,
    Sphere,
    assemble_c22,
    collision_energy,
    collision_forces,
    detect,
    levelset_text,
    parse_levelset,
    penetration_depths,
    proxy_position,
    proxy_positions,
    scatter_proxies,
)
from .partition import Partition, PartitionDiagnostics, classify, permute_matrix, validate
from .linalg import (
    CscLower,
    DenseSPD,
    PartialFactor,
    ScalarSparseSym,
    backward_sub,
    dense_factor,
    dense_solve,
    fill_ordering,
    forward_sub,
    partial_cholesky,
    pcg,
    schur_assemble,
    write_matrix_market,
)
from .solver import (
    Attachment,
    FrameMetrics,
    GlobalSystem,
    Model,
    SolverConfig,
    SolverState,
    build_system,
    compute_forces,
    default_collision_stiffness,
    local_step,
    solve_frame,
    solve_frame_full,
    solve_frame_pcg,
    solve_frame_schur,
    total_energy,
)
from .harness import (
    CompareReport,
    RunReport,
    Scenario,
    Simulation,
    builtin_scene_path,
    compare,
    load_scenario,
    parse_scenario,
    run,
)

__version__ = "0.1.0"
