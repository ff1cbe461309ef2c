import numpy as np
import pytest

from schurpd.collision import CollisionProxy, scatter_proxies
from schurpd.errors import PartitionError
from schurpd.linalg import ScalarSparseSym
from schurpd.material import MaterialParams, assemble_stiffness
from schurpd.mesh import build_box_lattice, compute_rest_data
from schurpd.partition import Partition, classify, permute_matrix, validate


@pytest.fixture
def box():
    return build_box_lattice((1.0, 1.0, 1.0), (3, 3, 3))


def centroid_proxy(element):
    return CollisionProxy(element, np.full(4, 0.25), 1.0)


def test_classify_no_proxies(box):
    p = classify(box, [])
    assert p.n2 == 0 and len(p.e_beta) == 0
    assert np.array_equal(p.perm, np.arange(box.num_nodes))


def test_classify_single_element(box):
    p = classify(box, [centroid_proxy(0)])
    assert p.n2 == 4
    assert list(p.e_beta) == [0]
    assert (p.perm[box.tets[0]] >= p.n1).all()


def test_classify_stable_under_reordering(box):
    prox = [centroid_proxy(0), centroid_proxy(7), centroid_proxy(12)]
    a = classify(box, prox)
    b = classify(box, list(reversed(prox)) + [centroid_proxy(7)])
    assert np.array_equal(a.perm, b.perm)
    assert np.array_equal(a.e_beta, b.e_beta)


def test_prone_fraction_warning(box):
    prox = [centroid_proxy(e) for e in range(box.num_elements)]
    p = classify(box, prox)
    diag = validate(box, p)
    assert diag.prone_fraction > 0.10
    assert "warning" in diag.report()


def test_permute_identity_is_bitwise(box):
    rest = compute_rest_data(box)
    K = assemble_stiffness(box, rest, MaterialParams(mu=3.0))
    p = classify(box, [])
    K2 = permute_matrix(K, p)
    assert np.array_equal(K.upper.data, K2.upper.data)
    assert np.array_equal(K.upper.indices, K2.upper.indices)
    assert np.array_equal(K.upper.indptr, K2.upper.indptr)


def test_permute_preserves_spectrum_and_nnz(box):
    rest = compute_rest_data(box)
    K = assemble_stiffness(box, rest, MaterialParams(mu=3.0))
    p = classify(box, [centroid_proxy(4), centroid_proxy(40)])
    Kp = permute_matrix(K, p)
    assert Kp.nnz_upper == K.nnz_upper
    w0 = np.linalg.eigvalsh(K.toarray())
    w1 = np.linalg.eigvalsh(Kp.toarray())
    assert np.abs(w0 - w1).max() < 1e-10 * max(1.0, np.abs(w0).max())
    # round-trip with the inverse permutation restores the matrix bitwise
    inv = Partition(
        perm=p.order.copy(), n1=p.n1, n2=p.n2, e_alpha=p.e_alpha, e_beta=p.e_beta
    )
    # applying the inverse ordering = permuting by perm itself
    back = Kp.permuted(p.perm)
    assert np.array_equal(back.upper.data, K.upper.data)
    assert np.array_equal(back.upper.indices, K.upper.indices)


def test_permute_size_mismatch(box):
    other = build_box_lattice((1, 1, 1), (1, 1, 1))
    rest = compute_rest_data(other)
    K = assemble_stiffness(other, rest, MaterialParams(mu=1.0))
    with pytest.raises(PartitionError):
        permute_matrix(K, classify(box, []))


def test_validate_consistent_scene(box):
    rest = compute_rest_data(box)
    prox = scatter_proxies(box, lambda q: q[:, 2] > 0.99, stiffness=1.0)
    p = classify(box, prox)
    K = permute_matrix(assemble_stiffness(box, rest, MaterialParams(mu=1.0)), p)
    diag = validate(box, p, K, prox)
    assert diag.n1 + diag.n2 == box.num_nodes
    assert diag.constrained_factor_nnz >= diag.free_factor_nnz > 0
    report = diag.report()
    assert "fill ratio" in report


def test_validate_detects_stray_proxy(box):
    prox = scatter_proxies(box, lambda q: q[:, 2] > 0.99, stiffness=1.0)
    p = classify(box, prox)
    stray = centroid_proxy(int(p.e_alpha[0]))
    with pytest.raises(PartitionError):
        validate(box, p, None, prox + [stray])


def test_beta_elements_only_touch_trailing_block(box):
    """Prone elements contribute nothing to the (1,1) or (1,2) blocks."""
    rest = compute_rest_data(box)
    prox = scatter_proxies(box, lambda q: q[:, 0] > 0.99, stiffness=1.0)
    p = classify(box, prox)
    params = MaterialParams(mu=2.0)
    K_all = permute_matrix(assemble_stiffness(box, rest, params), p).toarray()
    # assemble with prone elements removed: leading blocks must be unchanged
    import scipy.sparse as sp
    from schurpd.material import element_scalar_stiffness

    def block_matrix(elements):
        ke = element_scalar_stiffness(rest, params)[elements]
        tets = p.perm[box.tets[elements]]
        rows = np.repeat(tets, 4, axis=1).ravel()
        cols = np.tile(tets, (1, 4)).ravel()
        return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(p.n, p.n)).toarray()

    K_alpha = block_matrix(p.e_alpha)
    K_beta = block_matrix(p.e_beta)
    n1 = p.n1
    # prone elements are structurally confined to the trailing block
    assert np.abs(K_beta[:n1, :]).max() == 0.0
    assert np.abs(K_beta[:, :n1]).max() == 0.0
    assert np.abs(K_beta[n1:, n1:]).max() > 0.0
    scale = np.abs(K_all).max()
    assert np.abs(K_all - (K_alpha + K_beta)).max() < 1e-12 * scale
