import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schurpd.errors import DegenerateElementError, InvalidArgumentError, MeshFileError
from schurpd.mesh import (
    build_box_lattice,
    compute_rest_data,
    deformation_gradient,
    deformation_gradients,
    load_tetgen,
    obj_text,
)

from conftest import axis_angle


def test_unit_cube_lattice():
    m = build_box_lattice((1, 1, 1), (1, 1, 1))
    rest = compute_rest_data(m)
    assert m.num_nodes == 8
    assert m.num_elements == 5
    assert rest.volume.sum() == pytest.approx(1.0, abs=1e-14)


def test_two_cube_lattice():
    m = build_box_lattice((2, 1, 1), (2, 1, 1))
    rest = compute_rest_data(m)
    assert m.num_nodes == 12
    assert m.num_elements == 10
    assert rest.volume.sum() == pytest.approx(2.0, abs=1e-14)


def test_4x4x4_volume_and_positivity():
    m = build_box_lattice((1, 1, 1), (4, 4, 4))
    rest = compute_rest_data(m)
    # oracle: direct summation over all elements
    assert abs(rest.volume.sum() - 1.0) < 1e-12
    assert (rest.volume > 0).all()


@given(
    st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
    st.tuples(
        st.floats(0.1, 5.0, allow_nan=False),
        st.floats(0.1, 5.0, allow_nan=False),
        st.floats(0.1, 5.0, allow_nan=False),
    ),
)
@settings(max_examples=25, deadline=None)
def test_volume_conservation_property(cells, extent):
    m = build_box_lattice(extent, cells)
    rest = compute_rest_data(m)
    box = extent[0] * extent[1] * extent[2]
    assert abs(rest.volume.sum() - box) < 1e-10 * box


def test_lattice_faces_conform():
    m = build_box_lattice((1, 1, 1), (3, 3, 3))
    faces = np.sort(m.tets[:, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}


def test_lattice_bad_args():
    with pytest.raises(InvalidArgumentError):
        build_box_lattice((0, 1, 1), (1, 1, 1))
    with pytest.raises(InvalidArgumentError):
        build_box_lattice((1, 1, 1), (0, 1, 1))
    with pytest.raises(InvalidArgumentError):
        build_box_lattice((1, 1, -1), (1, 1, 1))


SINGLE_TET_NODE = """4 3 0 0
1 0.0 0.0 0.0
2 1.0 0.0 0.0
3 0.0 1.0 0.0
4 0.0 0.0 1.0
"""


def test_load_tetgen_positive():
    m = load_tetgen(SINGLE_TET_NODE, "1 4 0\n1 1 2 3 4\n")
    assert m.num_elements == 1
    assert list(m.tets[0]) == [0, 1, 2, 3]  # winding untouched


def test_load_tetgen_repairs_winding():
    m = load_tetgen(SINGLE_TET_NODE, "1 4 0\n1 2 1 3 4\n")
    rest = compute_rest_data(m)
    assert rest.volume[0] > 0


def test_load_tetgen_cube():
    m0 = build_box_lattice((1, 1, 1), (1, 1, 1))
    node = "8 3 0 0\n" + "".join(
        f"{i + 1} {p[0]} {p[1]} {p[2]}\n" for i, p in enumerate(m0.rest_positions)
    )
    ele = "5 4 0\n" + "".join(
        f"{i + 1} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}\n" for i, t in enumerate(m0.tets)
    )
    m = load_tetgen(node, ele)
    rest = compute_rest_data(m)
    assert abs(rest.volume.sum() - 1.0) < 1e-12


def test_load_tetgen_errors_carry_line_numbers():
    with pytest.raises(MeshFileError) as exc:
        load_tetgen("4 3 0 0\n1 0 0 0\n2 bad 0 0\n3 0 1 0\n4 0 0 1\n", "1 4 0\n1 1 2 3 4\n")
    assert exc.value.line == 3
    with pytest.raises(MeshFileError):
        load_tetgen(SINGLE_TET_NODE, "1 4 0\n1 1 2 3 9\n")  # index out of range


def test_load_tetgen_rejects_degenerate():
    node = "5 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n5 0.5 0.5 0.0\n"
    # second element is flat (all four nodes coplanar)
    ele = "2 4 0\n1 1 2 3 4\n2 1 2 3 5\n"
    with pytest.raises(MeshFileError):
        load_tetgen(node, ele)


def test_rest_data_reference_tet():
    m = load_tetgen(SINGLE_TET_NODE, "1 4 0\n1 1 2 3 4\n")
    rest = compute_rest_data(m)
    assert np.allclose(rest.dm_inverse[0], np.eye(3))
    assert rest.volume[0] == pytest.approx(1 / 6)


def test_rest_data_scaled_tet():
    node = "4 3 0 0\n1 0 0 0\n2 2 0 0\n3 0 2 0\n4 0 0 2\n"
    rest = compute_rest_data(load_tetgen(node, "1 4 0\n1 1 2 3 4\n"))
    assert np.allclose(rest.dm_inverse[0], 0.5 * np.eye(3))
    assert rest.volume[0] == pytest.approx(8 / 6)


def test_rest_data_random_tet_inverse(rng):
    for _ in range(20):
        pts = rng.normal(size=(4, 3))
        dm = (pts[1:] - pts[0]).T
        if np.linalg.det(dm) < 1e-3:
            continue
        node = "4 3 0 0\n" + "".join(
            f"{i + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n" for i, p in enumerate(pts)
        )
        m = load_tetgen(node, "1 4 0\n1 1 2 3 4\n")
        rest = compute_rest_data(m)
        dm_used = (m.rest_positions[m.tets[0, 1:]] - m.rest_positions[m.tets[0, 0]]).T
        assert np.abs(rest.dm_inverse[0] @ dm_used - np.eye(3)).max() < 1e-12


def test_rest_data_rejects_nonpositive():
    m = build_box_lattice((1, 1, 1), (1, 1, 1))
    bad = m.tets.copy()
    bad[2, [2, 3]] = bad[2, [3, 2]]  # invert one element
    with pytest.raises(DegenerateElementError) as exc:
        compute_rest_data(type(m)(m.rest_positions, bad, m.surface_tris))
    assert exc.value.element == 2


def test_deformation_gradient_basics(rng):
    m = build_box_lattice((1, 1, 1), (2, 2, 2))
    rest = compute_rest_data(m)
    x = m.rest_positions
    for e in (0, 7, m.num_elements - 1):
        assert np.abs(deformation_gradient(m, rest, x, e) - np.eye(3)).max() < 1e-13
    assert np.abs(deformation_gradients(m, rest, 2.0 * x) - 2.0 * np.eye(3)).max() < 1e-12
    Q = axis_angle((1, 2, 3), 37.0)
    xr = x @ Q.T
    assert np.abs(deformation_gradients(m, rest, xr) - Q).max() < 1e-12


def test_deformation_gradient_affine(rng):
    m = build_box_lattice((1, 2, 1), (2, 1, 2))
    rest = compute_rest_data(m)
    x = m.rest_positions + 0.3 * rng.normal(size=m.rest_positions.shape)
    F = deformation_gradients(m, rest, x)
    for alpha in (0.0, 0.25, 1.0, 1.7):
        xa = alpha * x + (1 - alpha) * m.rest_positions
        Fa = deformation_gradients(m, rest, xa)
        assert np.abs(Fa - (alpha * F + (1 - alpha) * np.eye(3))).max() < 1e-12


def test_obj_text_format():
    m = build_box_lattice((1, 1, 1), (1, 1, 1))
    text = obj_text(m.rest_positions, m.surface_tris)
    lines = text.splitlines()
    vlines = [l for l in lines if l.startswith("v ")]
    flines = [l for l in lines if l.startswith("f ")]
    assert len(vlines) == 8 and len(flines) == 12
    ids = {int(tok) for l in flines for tok in l.split()[1:]}
    assert "np.float" not in text
    assert min(ids) >= 1 and max(ids) <= 8
    assert text == obj_text(m.rest_positions, m.surface_tris)  # deterministic
