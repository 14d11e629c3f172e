import numpy as np
import pytest

from wlattice.decay import ExcitedSites, LatticeGeometry, make_decay_function
from wlattice.errors import RateCertificationFailed, ResonanceDetected
from wlattice.fourier import ThetaGrid
from wlattice.models import CoupledStandard
from wlattice.splitting import (Rates, TransferOperator, check_nonresonance, choose_power, compute_splitting,
                                estimate_rates, certify_rates, inverse_norm, stable_product_norms)
from wlattice.torus import initial_torus, solve_invariant_torus


def test_uncoupled_splitting_is_exact(run0):
    spl = run0.spl
    assert spl.dims == (1, spl.A.shape[-1] - 2, 1)
    np.testing.assert_allclose(spl.reduced("s"), 0.5, atol=0)
    np.testing.assert_allclose(spl.reduced("u"), 2.0, atol=0)
    assert spl.offdiagonal() == 0.0
    assert spl.equivariance_defect() <= 1e-15
    r = run0.rates
    assert r.mu1 == pytest.approx(0.5, abs=1e-14)
    assert r.mu2 == pytest.approx(0.5, abs=1e-14)
    assert r.mu3 == pytest.approx(1.0, abs=1e-12)


def test_perturbed_splitting_is_invariant(run5):
    spl = run5.spl
    assert spl.equivariance_defect() < 1e-12
    assert max(spl.projection_defects().values()) < 1e-12
    assert spl.offdiagonal() < 1e-12


def test_fixed_point_splitting_matches_eigenvectors():
    geo = LatticeGeometry(1, 2, l=1, d=1)
    g = make_decay_function(1.0, 2.0, geo)
    m = CoupledStandard(g, 0.8, 0.05, ExcitedSites.from_list([[0]], geo))
    K = solve_invariant_torus(m, initial_torus(m, 1))
    spl = compute_splitting(m, K)
    A = spl.A[0]
    w, v = np.linalg.eig(A)
    stable = np.sort(np.abs(w[np.abs(w) < 1 - 1e-6]))
    got = np.sort(np.abs(np.linalg.eigvals(spl.reduced("s")[0])))
    np.testing.assert_allclose(got, stable, rtol=1e-12)
    # the stable frame spans the stable eigenvector
    vs = np.real(v[:, np.argmin(np.abs(w))])
    Vs = spl.frame("s")[0]
    resid = vs - Vs @ np.linalg.lstsq(Vs, vs, rcond=None)[0]
    assert np.max(np.abs(resid)) < 1e-12


def test_transfer_radius_of_constant_cocycle():
    grid = ThetaGrid(1, 4)
    B = np.array([[0.6, 0.3], [0.0, 0.4]])
    T = TransferOperator(grid, [0.3], "L", B=np.broadcast_to(B, (grid.n, 2, 2)))
    r, _ = T.spectral_radius(n_max=2048)
    assert r == pytest.approx(0.6, abs=5e-3)
    T2 = TransferOperator(grid, [0.3], "R", A=np.broadcast_to(B, (grid.n, 2, 2)), k=2)
    r2, _ = T2.spectral_radius(n_max=2048)
    assert r2 == pytest.approx(0.36, abs=5e-3)


def test_transfer_radius_survives_long_products():
    grid = ThetaGrid(1, 2)
    T = TransferOperator(grid, [0.3], "L", B=np.full((grid.n, 1, 1), 1e-3))
    r, _ = T.spectral_radius(n_max=4096)
    assert r == pytest.approx(1e-3, rel=1e-12)


def test_transfer_apply_matches_definition():
    grid = ThetaGrid(1, 3)
    w = np.array([0.21])
    rng = np.random.default_rng(0)
    B = rng.standard_normal((grid.n, 2, 2))
    H = rng.standard_normal((grid.n, 2))
    out = TransferOperator(grid, w, "L", B=B).apply(H)
    ref = grid.shift(np.einsum("nij,nj->ni", B, H), -w)
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_rates_fail_without_hyperbolicity():
    with pytest.raises(RateCertificationFailed):
        certify_rates(Rates(1.01, 0.5, 1.0, 1.0, 0.9))
    with pytest.raises(RateCertificationFailed):
        certify_rates(Rates(0.9, 0.5, 1.2, 1.0, 0.9))


def test_fabricated_resonance_is_detected():
    rates = Rates(mu1=0.9, mu2=0.5, mu3=1.25, C_h=1.0, mu_s_min=0.9)
    with pytest.raises(ResonanceDetected) as info:
        check_nonresonance(rates, range(2, 6), 1.0)
    assert info.value.order == 2
    rep = check_nonresonance(rates, range(2, 6), 1.0, raise_on_resonance=False)
    assert [o[0] for o in rep["overlaps"]] == [2]


def test_nonresonance_orders_and_L(run5):
    spl, rates = run5.spl, run5.rates
    rep = check_nonresonance(rates, range(2, 6), inverse_norm(spl), stable_product_norms(spl, 8))
    assert not rep["overlaps"]
    assert rep["L"] is not None and rep["L"] <= 5
    assert rep["P_linear_ok"]


def test_choose_power():
    assert choose_power(Rates(0.5, 0.5, 1.0, 1.0, 0.5)) == 1
    assert choose_power(Rates(0.5, 0.5, 1.0, 3.0, 0.5)) == 2
    with pytest.raises(RateCertificationFailed):
        choose_power(Rates(0.999, 0.5, 1.0, 10.0, 0.5), n_cap=10)


def test_rate_series_envelope(run5):
    r = estimate_rates(run5.spl, n_max=32, certify=False)
    n = np.arange(33)
    assert np.all(r.series["stable"] <= r.C_h * r.mu1 ** n * (1 + 1e-12))
