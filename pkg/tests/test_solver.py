import numpy as np
import pytest

from schurpd import collision as col
from schurpd import solver as sol
from schurpd.errors import SolverSetupError
from schurpd.linalg import forward_sub
from schurpd.material import MaterialParams
from schurpd.mesh import build_box_lattice, compute_rest_data, load_tetgen
from schurpd.partition import classify


PARAMS = MaterialParams(mu=1e4)


def make_scene(cells=(6, 2, 2), extent=(1.5, 0.4, 0.4), press_depth=0.05, biphasic=False):
    """Anchored bar with proxies on the +x end face and a pressing half-space."""
    mesh = build_box_lattice(extent, cells)
    rest = compute_rest_data(mesh)
    params = MaterialParams(mu=1e4, mu_prime=5e3 if biphasic else 0.0, sigma_min=0.7, sigma_max=1.3)
    left = np.flatnonzero(mesh.rest_positions[:, 0] < 1e-9)
    atts = [sol.Attachment(int(i), mesh.rest_positions[i], 1e6) for i in left]
    stiff = sol.default_collision_stiffness(mesh, params)
    prox = col.scatter_proxies(
        mesh, lambda p: p[:, 0] > extent[0] - 1e-9, per_element=1, stiffness=stiff
    )
    part = classify(mesh, prox)
    system = sol.build_system(mesh, rest, params, atts, part)
    wall = col.Collider(col.HalfSpace((extent[0] - press_depth, 0, 0), (-1.0, 0, 0)))
    model = sol.Model(mesh, rest, params, atts, prox, [wall])
    state = sol.SolverState.at_rest(mesh, params, len(prox), part.n2)
    return model, system, state, part


def monolithic_step(model, system, state_pre, rotations, active):
    """Oracle: direct dense solve of the collision-augmented block system with
    given rotations and active set, at the pre-step positions."""
    part = system.partition
    c22 = col.assemble_c22(model.proxies, active, part, model.mesh)
    A = sol._collision_augmented(system, c22).toarray()
    f = sol.compute_forces(
        model.mesh, model.rest, state_pre.x, rotations, model.params, None, model.attachments
    )
    col.collision_forces(model.proxies, active, model.mesh, state_pre.x, out=f)
    b = f[part.order]
    return np.linalg.solve(A, b)


def test_local_step_rest_gives_identity():
    model, system, state, part = make_scene()
    sol.local_step(model.mesh, model.rest, state.x, None, model.params, state.rotations)
    assert np.abs(state.rotations.r - np.eye(3)).max() < 1e-12


def test_local_step_subset_untouched(rng):
    model, system, state, part = make_scene()
    state.x += 0.02 * rng.normal(size=state.x.shape)
    before = state.rotations.r.copy()
    sol.local_step(model.mesh, model.rest, state.x, part.e_beta, model.params, state.rotations)
    assert np.array_equal(state.rotations.r[part.e_alpha], before[part.e_alpha])
    assert not np.array_equal(state.rotations.r[part.e_beta], before[part.e_beta])


def test_local_step_decreases_energy(rng):
    model, system, state, part = make_scene()
    state.x += 0.05 * rng.normal(size=state.x.shape)
    e_before = model.energy(state)
    sol.local_step(model.mesh, model.rest, state.x, None, model.params, state.rotations)
    e_after = model.energy(state)
    assert e_after <= e_before + 1e-12 * abs(e_before)


def test_build_system_positive_definite():
    mesh = load_tetgen(
        "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n", "1 4 0\n1 1 2 3 4\n"
    )
    rest = compute_rest_data(mesh)
    atts = [sol.Attachment(0, mesh.rest_positions[0], 1e5)]
    part = classify(mesh, [])
    system = sol.build_system(mesh, rest, PARAMS, atts, part)
    w = np.linalg.eigvalsh(system.A.toarray())
    assert w.min() > 0


def test_build_system_requires_anchoring():
    mesh = build_box_lattice((1, 1, 1), (2, 2, 2))
    rest = compute_rest_data(mesh)
    part = classify(mesh, [])
    with pytest.raises(SolverSetupError):
        sol.build_system(mesh, rest, PARAMS, [], part)


def test_build_system_attachments_only_on_x1():
    model, system, state, part = make_scene()
    # this scene anchors the -x face while proxies sit at +x, so all
    # attachment nodes are collision-safe and the factorization succeeded
    x2 = set(part.x2_nodes().tolist())
    assert all(a.node not in x2 for a in model.attachments)


def test_no_collision_schur_equals_monolithic(rng):
    model, system, state, part = make_scene()
    model.colliders = []  # plain projective dynamics step
    state.x += 0.03 * rng.normal(size=state.x.shape)
    pre = state.copy()
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    sol.solve_frame_schur(model, system, state, cfg)
    dx_ref = monolithic_step(model, system, pre, state.rotations, state.active)
    dx = (state.x - pre.x)[part.order]
    assert np.linalg.norm(dx - dx_ref) / np.linalg.norm(dx_ref) < 1e-10


def test_compute_forces_zero_at_rest():
    model, system, state, part = make_scene()
    f = sol.compute_forces(
        model.mesh, model.rest, state.x, state.rotations, model.params, None, model.attachments
    )
    assert np.abs(f).max() < 1e-9


def test_compute_forces_translation_invariant(rng):
    model, system, state, part = make_scene()
    x = state.x + 0.03 * rng.normal(size=state.x.shape)
    sol.local_step(model.mesh, model.rest, x, None, model.params, state.rotations)
    f0 = sol.compute_forces(model.mesh, model.rest, x, state.rotations, model.params, None, [])
    f1 = sol.compute_forces(
        model.mesh, model.rest, x + np.array([0.3, -0.1, 0.2]), state.rotations, model.params, None, []
    )
    assert np.abs(f1 - f0).max() < 1e-9 * max(1.0, np.abs(f0).max())


def test_compute_forces_matches_fd(rng):
    model, system, state, part = make_scene(cells=(3, 2, 2))
    x = state.x + 0.05 * rng.normal(size=state.x.shape)
    sol.local_step(model.mesh, model.rest, x, None, model.params, state.rotations)
    f = sol.compute_forces(
        model.mesh, model.rest, x, state.rotations, model.params, None, model.attachments
    )

    def energy(xq):
        return (
            sol.total_energy(
                model.mesh, model.rest, xq, state.rotations, model.params,
                model.attachments, [], col.ActiveSet.empty(0),
            )
        )

    h = 1e-6
    scale = np.abs(f).max()
    for node in [0, 7, model.mesh.num_nodes - 1]:
        for c in range(3):
            xp = x.copy(); xp[node, c] += h
            xm = x.copy(); xm[node, c] -= h
            fd = -(energy(xp) - energy(xm)) / (2 * h)
            assert abs(fd - f[node, c]) < 1e-4 * scale


@pytest.mark.parametrize("biphasic", [False, True])
def test_schur_single_pass_is_monolithic_solve(rng, biphasic):
    """Central check: one outer pass (with its own detection and local steps)
    equals the direct solve of the collision-augmented system assembled from
    the post-step rotations and active set."""
    model, system, state, part = make_scene(press_depth=0.08, biphasic=biphasic)
    # reach a contact-rich configuration first
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    for _ in range(3):
        sol.solve_frame_schur(model, system, state, cfg)
    assert state.active.count > 0
    pre = state.copy()
    sol.solve_frame_schur(model, system, state, cfg)
    dx_ref = monolithic_step(model, system, pre, state.rotations, state.active)
    dx = (state.x - pre.x)[part.order]
    assert np.linalg.norm(dx - dx_ref) / max(np.linalg.norm(dx_ref), 1e-300) < 1e-6


def test_schur_multi_inner_exactness(rng):
    """With detection frozen and rotations frozen (already converged), extra
    inner iterations change nothing: the inner solve is an exact Newton step."""
    model, system, state, part = make_scene(press_depth=0.08)
    cfg = sol.SolverConfig(outer_iters=2, inner_iters=1)
    sol.solve_frame_schur(model, system, state, cfg)
    base = state.copy()
    cfg_frozen = sol.SolverConfig(outer_iters=1, inner_iters=4, detection_cadence="never")
    a = base.copy()
    sol.solve_frame_schur(model, system, a, cfg_frozen)
    b = base.copy()
    # freeze rotations too: replay with beta elements already projected
    sol.local_step(model.mesh, model.rest, b.x, None, model.params, b.rotations)
    a2 = b.copy()
    cfg_one = sol.SolverConfig(outer_iters=1, inner_iters=1, detection_cadence="never")
    sol.solve_frame_schur(model, system, a2, cfg_one)
    a4 = b.copy()
    sol.solve_frame_schur(model, system, a4, cfg_frozen)
    # second..fourth inner passes were no-ops up to roundoff
    assert np.abs(a4.x - a2.x).max() < 1e-9 * max(1.0, np.abs(a2.x).max())


def test_inner_loop_keeps_x1_bitwise_frozen(monkeypatch):
    model, system, state, part = make_scene(press_depth=0.08)
    x1_ids = system.x1_ids
    seen = []
    orig = col.detect

    def spy(proxies, mesh, x, colliders):
        seen.append(x[x1_ids].copy())
        return orig(proxies, mesh, x, colliders)

    monkeypatch.setattr(col, "detect", spy)
    monkeypatch.setattr(sol.col, "detect", spy)
    cfg = sol.SolverConfig(outer_iters=2, inner_iters=4)
    sol.solve_frame_schur(model, system, state, cfg)
    assert len(seen) == 8
    # within each outer pass, every inner detection saw identical x1
    for outer in range(2):
        block = seen[outer * 4 : (outer + 1) * 4]
        for snap in block[1:]:
            assert np.array_equal(snap, block[0])


def test_full_refactor_agrees_with_schur(rng):
    model, system, state, part = make_scene(press_depth=0.08)
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    for _ in range(2):
        sol.solve_frame_schur(model, system, state, cfg)
    pre = state.copy()
    a = pre.copy()
    sol.solve_frame_schur(model, system, a, cfg)
    b = pre.copy()
    sol.solve_frame_full(model, system, b, cfg)
    step = np.linalg.norm(a.x - pre.x)
    assert np.linalg.norm(a.x - b.x) / step < 1e-6


def test_full_refactor_no_collision_matches_prefactored(rng):
    model, system, state, part = make_scene()
    model.colliders = []
    state.x += 0.02 * rng.normal(size=state.x.shape)
    pre = state.copy()
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    a = pre.copy()
    sol.solve_frame_schur(model, system, a, cfg)
    b = pre.copy()
    sol.solve_frame_full(model, system, b, cfg)
    assert np.linalg.norm(a.x - b.x) / np.linalg.norm(a.x - pre.x) < 1e-10


def test_pcg_matches_direct(rng):
    model, system, state, part = make_scene(press_depth=0.08)
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    for _ in range(2):
        sol.solve_frame_schur(model, system, state, cfg)
    pre = state.copy()
    a = pre.copy()
    sol.solve_frame_schur(model, system, a, cfg)
    b = pre.copy()
    met = sol.solve_frame_pcg(model, system, b, sol.SolverConfig(solver_kind="pcg", pcg_tol=1e-10))
    assert met.pcg_iterations > 1
    assert np.linalg.norm(a.x - b.x) / max(np.linalg.norm(a.x - pre.x), 1e-300) < 1e-8


def test_energy_descent_frozen_detection():
    model, system, state, part = make_scene(press_depth=0.08)
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=1)
    sol.solve_frame_schur(model, system, state, cfg)  # establishes contact
    state.active = col.detect(model.proxies, model.mesh, state.x, model.colliders)
    cfg_frozen = sol.SolverConfig(outer_iters=1, inner_iters=1, detection_cadence="never")
    e_prev = model.energy(state)
    for _ in range(8):
        sol.solve_frame_schur(model, system, state, cfg_frozen)
        e = model.energy(state)
        assert e <= e_prev + 1e-10 * abs(e_prev)
        e_prev = e


def test_determinism_bitwise(rng):
    runs = []
    for _ in range(2):
        model, system, state, part = make_scene(press_depth=0.08)
        cfg = sol.SolverConfig(outer_iters=2, inner_iters=3)
        for _ in range(4):
            sol.solve_frame_schur(model, system, state, cfg)
        runs.append(state.x.copy())
    assert np.array_equal(runs[0], runs[1])


def test_reduced_rhs_maintenance_matches_scratch(rng):
    """The maintained reduced RHS after several inner solves must equal the
    one recomputed from scratch with a fresh forward substitution at the
    positions the inner loop ended on (pre-pass x1, updated x2)."""
    model, system, state, part = make_scene(press_depth=0.08)
    warm = sol.SolverConfig(outer_iters=1, inner_iters=1)
    sol.solve_frame_schur(model, system, state, warm)
    pre = state.copy()
    cfg = sol.SolverConfig(outer_iters=1, inner_iters=3)
    sol.solve_frame_schur(model, system, state, cfg)
    x_inner = state.x.copy()
    x_inner[system.x1_ids] = pre.x[system.x1_ids]  # x1 was frozen inside the loop
    f = sol.compute_forces(
        model.mesh, model.rest, x_inner, state.rotations, model.params,
        part.e_alpha, model.attachments,
    )
    _, scratch = forward_sub(system.factor, f[system.x1_ids], f[system.x2_ids])
    scale = max(np.abs(scratch).max(), np.abs(state.f_tilde2).max(), 1e-300)
    assert np.abs(state.f_tilde2 - scratch).max() < 1e-9 * scale


def test_early_exit_skips_remaining_outer_passes(monkeypatch):
    model, system, state, part = make_scene(press_depth=0.08)
    calls = []
    orig = col.detect

    def spy(proxies, mesh, x, colliders):
        calls.append(1)
        return orig(proxies, mesh, x, colliders)

    monkeypatch.setattr(sol.col, "detect", spy)
    cfg = sol.SolverConfig(outer_iters=6, inner_iters=1, early_exit_residual=1e12)
    sol.solve_frame_schur(model, system, state, cfg)
    assert len(calls) == 1  # exited after the first outer pass
    calls.clear()
    cfg_off = sol.SolverConfig(outer_iters=6, inner_iters=1)
    sol.solve_frame_schur(model, system, state, cfg_off)
    assert len(calls) == 6  # default: loops always run their configured count
