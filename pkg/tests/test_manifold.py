from fractions import Fraction

import mpmath
import numpy as np
import pytest

from wlattice import manifold as M
from wlattice.errors import SeriesDiverging
from wlattice.fourier import ThetaGrid
from wlattice.jets import Jet, algebra
from wlattice.splitting import compute_splitting
from wlattice.torus import initial_torus, solve_invariant_torus

from conftest import rotor_model


def scalar_setup():
    """Single saddle site with no rotor frequency: x' = x/2 + x^2, y' = 2y + y^2/2."""
    m = rotor_model(0.0, R=0, omega=())
    K = solve_invariant_torus(m, initial_torus(m, 1))
    return m, K, compute_splitting(m, K)


def linear_conjugacy_coeffs(n):
    """Exact w_k for w(s/2) = w(s)/2 + w(s)^2 with w(s) = s + ..., in rationals."""
    w = [Fraction(0), Fraction(1)]
    half = Fraction(1, 2)
    for k in range(2, n + 1):
        conv = sum(w[i] * w[k - i] for i in range(1, k))
        w.append(conv / (half ** k - half))
    return w


def test_polynomial_style_gives_exact_reduced_map():
    m, K, spl = scalar_setup()
    pair = M.solve_manifold(m, K, spl, L=6, style="polynomial_P")
    alg = pair.alg
    expect_P = np.zeros(alg.size)
    expect_P[alg.index[(1,)]] = 0.5
    expect_P[alg.index[(2,)]] = 1.0
    np.testing.assert_allclose(pair.P[:, 0, 0], expect_P, atol=1e-14)
    W = pair.Wp[:, 0, 0, :]
    assert W[alg.index[(1,)], 1] == 1.0
    assert np.max(np.abs(np.delete(W, alg.index[(1,)], axis=0))) < 1e-14


def test_linear_style_matches_rational_recurrence():
    m, K, spl = scalar_setup()
    pair = M.solve_manifold(m, K, spl, L=6, style="linear_P")
    alg = pair.alg
    exact = linear_conjugacy_coeffs(alg.order)
    got = pair.Wp[:, 0, 0, 1]
    for k in range(1, alg.order + 1):
        assert got[alg.index[(k,)]] == pytest.approx(float(exact[k]), rel=1e-12)
    assert exact[2] == -4
    P = pair.P[:, 0, 0]
    assert P[alg.index[(1,)]] == 0.5 and np.all(P[alg.degree > 1] == 0)


def test_truncation_residual_against_high_precision():
    m, K, spl = scalar_setup()
    L = 4
    pair = M.solve_manifold(m, K, spl, L=L, style="linear_P")
    alg = pair.alg
    w = [float(pair.Wp[alg.index[(k,)], 0, 0, 1]) for k in range(L + 1)]

    def W(s):
        return sum(mpmath.mpf(c) * s ** k for k, c in enumerate(w))

    for s in (0.03, 0.05, 0.1):
        with mpmath.workdps(50):
            x = W(mpmath.mpf(s))
            ref = abs((x / 2 + x ** 2) - W(mpmath.mpf(s) / 2))
        got = M.truncation_residual(m, pair, np.zeros((1, 0)), np.array([[s]]))[0]
        assert got == pytest.approx(float(ref), rel=1e-10)


def test_contraction_tail_agrees_with_taylor_extension(run5):
    base = M.solve_manifold(run5.model, run5.K, run5.spl, L=5, tail="none")
    te = M.solve_tail(run5.model, base, "taylor_extend")
    co = M.solve_tail(run5.model, base, "contraction")
    hi = base.alg.degree > 5
    assert np.max(np.abs(co.Wp[hi] - te.Wp[hi])) < 1e-9
    np.testing.assert_array_equal(co.Wp[~hi], base.Wp[~hi])
    assert co.info["tail"]["lipschitz"] < 0.5


def test_invariance_jet_vanishes_through_L_max(run5):
    pair = run5.pair
    E = M.invariance_jet(run5.model, pair)
    for k in range(pair.alg.order + 1):
        assert np.max(np.abs(E.c[pair.alg.degree_slice(k)])) < 1e-10


def test_truncated_pair_drops_high_orders(run5):
    low = run5.pair.truncated(3)
    assert np.all(low.Wp[run5.pair.alg.degree > 3] == 0)
    s = np.array([[1e-3]])
    th = np.array([[0.2]])
    d = np.max(np.abs(low.evaluate(th, s) - run5.pair.evaluate(th, s)))
    assert d < 1e-10


def test_jacobian_matches_finite_difference(run5):
    pair = run5.pair
    th, s = np.array([[0.37]]), np.array([[0.02]])
    h = 1e-6
    fd = (pair.evaluate(th, s + h) - pair.evaluate(th, s - h)) / (2 * h)
    np.testing.assert_allclose(pair.jacobian_s(th, s)[0, :, 0], fd.reshape(-1), atol=1e-8)


def test_apply_S_inverse_series_and_divergence():
    grid = ThetaGrid(0, 1)
    alg = algebra(1, 3)
    eta = Jet(alg, np.zeros((alg.size, 1, 1)))
    eta.c[alg.index[(3,)], 0, 0] = 1.0
    P = Jet(alg, np.zeros((alg.size, 1, 1)))
    P.c[alg.index[(1,)], 0, 0] = 0.5
    H, rep = M.apply_S_inverse(eta, np.full((1, 1, 1), 1 / 3), P, grid, np.zeros(0), k_max=3, tol=1e-17)
    # 3 h - h / 8 = 1
    assert H.c[alg.index[(3,)], 0, 0] == pytest.approx(8 / 23, abs=1e-13)
    assert rep["ratio"] == pytest.approx(1 / 24, rel=1e-12)
    P.c[alg.index[(1,)], 0, 0] = 0.95
    with pytest.raises(SeriesDiverging):
        M.apply_S_inverse(eta, np.full((1, 1, 1), 2.0), P, grid, np.zeros(0), k_max=3)


def test_rescale_and_quadratic_reparam():
    alg = algebra(1, 4)
    c = np.arange(1.0, alg.size + 1)
    r = M.rescale(c, alg, 0.5)
    np.testing.assert_allclose(r, c * np.array([1, 1, 0.5, 0.25, 0.125]))
    q = M.quadratic_reparam(alg, 0.1)
    assert set(q) == {2}


def test_falling_factorial():
    assert M.falling(5, 0) == 1 and M.falling(5, 2) == 20 and M.falling(2, 3) == 0


def test_root_map_of_square_recovers_P(run5):
    from wlattice.models import IteratedMap
    from wlattice.torus import TorusEmbedding

    m, K = run5.model, run5.K
    F2 = IteratedMap(m, 2)
    K2 = TorusEmbedding(K.grid, 2 * K.omega, K.periodic, K.lift)
    pair2 = M.solve_manifold(F2, K2, compute_splitting(F2, K2), L=5)
    R, rep = M.derive_root_map_P(pair2, m, K.omega)
    assert rep["cu_defect"] < 1e-10
    assert np.max(np.abs(M.compose_root_map(R, pair2.alg, pair2.grid, K.omega, 2) - pair2.P)) < 1e-10


def test_loglog_slope():
    x = np.logspace(-3, -1, 5)
    assert M.loglog_slope(x, 3 * x ** 4) == pytest.approx(4.0)
