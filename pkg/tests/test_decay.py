import itertools

import numpy as np
import pytest

from wlattice.decay import (DecayOperator, ExcitedSites, LatticeGeometry, LocalizedVector,
                            MultilinearDecayOperator, compose, contract, gamma_from_dict, gamma_to_dict,
                            localization_weight, localized_vector_norm, make_decay_function,
                            operator_from_json, operator_norms, operator_to_json, verify_decay_axioms)
from wlattice.errors import EmptyExcitedSet, NoValidNormalization, OrderMismatch


def brute_norm(A, gamma):
    """``sup_i sum_j |A_ij| / Gamma(i - j)`` with |.| the block infinity norm, by loops."""
    geo = gamma.geometry
    sites = geo.sites
    best = 0.0
    for i in range(geo.n_sites):
        for j in range(geo.n_sites):
            blk = A.blocks[i, j]
            size = np.abs(blk).sum(axis=1).max()
            best = max(best, size / gamma(sites[i] - sites[j]))
    return best


def test_geometry_indexing_roundtrip():
    geo = LatticeGeometry(2, 2)
    for k, s in enumerate(geo.sites):
        assert geo.index(s) == k
    assert geo.n_sites == 25 and geo.block == 3
    with pytest.raises(ValueError):
        geo.index([3, 0])


def test_periodic_displacement_is_minimal_image():
    geo = LatticeGeometry(1, 3, boundary="periodic")
    assert geo.displacement(np.array([3]), np.array([-3]))[0] == -1
    assert geo.distance_matrix().max() == 3


@pytest.mark.parametrize("alpha,p,N,R", [(1.0, 2.0, 1, 6), (0.5, 0.0, 1, 5), (0.0, 3.0, 2, 2)])
def test_axioms_by_brute_force(alpha, p, N, R):
    geo = LatticeGeometry(N, R)
    g = make_decay_function(alpha, p, geo)
    sites = [np.array(s) for s in itertools.product(range(-R, R + 1), repeat=N)]

    def G(v):
        r = np.abs(v).max()
        return g.a * np.exp(-alpha * r) * (1 + r) ** (-p)

    assert sum(G(s) for s in sites) <= 1.0 + 1e-15
    for i in sites:
        for j in sites:
            conv = sum(G(i - k) * G(k - j) for k in sites)
            assert conv <= G(i - j) * (1 + 1e-12)
    rep = verify_decay_axioms(g)
    assert rep["axiom1_margin"] >= 0 and rep["axiom2_worst_ratio"] <= 1.0


def test_normalization_is_nearly_sharp():
    g = make_decay_function(1.0, 2.0, LatticeGeometry(1, 4))
    G = g.matrix() * (1 + 1e-6)
    origin = g.geometry.index([0])
    assert g.a > 0
    assert G[origin].sum() > 1.0 or np.any(G @ G > G)


def test_no_decay_raises():
    with pytest.raises(NoValidNormalization):
        make_decay_function(0.0, 0.0, LatticeGeometry(1, 3))


def test_operator_norm_matches_loops():
    geo = LatticeGeometry(1, 3)
    g = make_decay_function(1.0, 2.0, geo)
    rng = np.random.default_rng(4)
    n, b = geo.n_sites, geo.block
    A = DecayOperator(rng.standard_normal((n, n, b, b)) * g.matrix()[:, :, None, None], g)
    assert operator_norms(A) == pytest.approx(brute_norm(A, g), rel=1e-13)


def test_compose_matches_dense_product():
    geo = LatticeGeometry(1, 2)
    g = make_decay_function(1.0, 2.0, geo)
    rng = np.random.default_rng(5)
    n, b = geo.n_sites, geo.block
    A = DecayOperator(rng.standard_normal((n, n, b, b)), g)
    B = DecayOperator(rng.standard_normal((n, n, b, b)), g)
    np.testing.assert_allclose(compose(A, B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)
    v = rng.standard_normal((n, b))
    np.testing.assert_allclose(A @ v, (A.matrix() @ v.ravel()).reshape(n, b), atol=1e-13)


def test_identity_norm_is_inverse_of_gamma_at_zero():
    g = make_decay_function(1.0, 2.0, LatticeGeometry(1, 3))
    assert operator_norms(DecayOperator.identity(g)) == pytest.approx(1.0 / g.a)


def test_multilinear_contract_against_einsum():
    geo = LatticeGeometry(1, 1)
    g = make_decay_function(1.0, 2.0, geo)
    rng = np.random.default_rng(6)
    n, b = geo.n_sites, geo.block
    Bm = MultilinearDecayOperator(rng.standard_normal((n, n, n, b, b, b)), g, 2)
    A1 = DecayOperator(rng.standard_normal((n, n, b, b)), g)
    A2 = DecayOperator(rng.standard_normal((n, n, b, b)), g)
    u, v = rng.standard_normal((n, b)), rng.standard_normal((n, b))
    got = contract(Bm, A1, A2).apply(u, v)
    ref = Bm.apply(A1 @ u, A2 @ v)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    outer = contract(A1, Bm).apply(u, v)
    np.testing.assert_allclose(outer, A1 @ Bm.apply(u, v), atol=1e-12)
    with pytest.raises(OrderMismatch):
        Bm.apply(u)


def test_localized_norm_and_weight():
    geo = LatticeGeometry(1, 3)
    g = make_decay_function(1.0, 2.0, geo)
    c = ExcitedSites.from_list([[-1], [2]], geo)
    w = localization_weight(g, c)
    for k, s in enumerate(geo.sites):
        d = min(abs(s[0] + 1), abs(s[0] - 2))
        assert w[k] == pytest.approx(1.0 / g.radial(d))
    v = np.zeros((geo.n_sites, geo.block))
    v[geo.index([3])] = [0.0, 2.0, -1.0]
    assert localized_vector_norm(LocalizedVector(v, geo), c, g) == pytest.approx(2.0 / g.radial(1))
    with pytest.raises(EmptyExcitedSet):
        localized_vector_norm(v, [], g)


def test_duplicate_excited_sites_rejected():
    geo = LatticeGeometry(1, 2)
    with pytest.raises(ValueError):
        ExcitedSites.from_list([[0], [0]], geo)


def test_gamma_and_operator_json_roundtrip():
    geo = LatticeGeometry(1, 2)
    g = make_decay_function(1.0, 2.0, geo)
    assert gamma_from_dict(gamma_to_dict(g)) == g
    rng = np.random.default_rng(7)
    n, b = geo.n_sites, geo.block
    A = DecayOperator(rng.standard_normal((n, n, b, b)), g)
    B = operator_from_json(operator_to_json(A))
    assert np.array_equal(A.blocks, B.blocks)
