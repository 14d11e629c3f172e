import json

import numpy as np
import pytest

from wlattice import manifold as M
from wlattice import verification as V
from wlattice.errors import NotInvertible, SmallDivisor
from wlattice.splitting import Rates
from wlattice.torus import TorusEmbedding


def test_graph_map_vanishes_at_zero_coupling(run0):
    cert, H = V.check_graph_property(run0.pair, [0.3])
    assert cert.passed
    assert np.max(np.abs(H.c)) < 1e-14


def test_graph_property_holds_when_perturbed(run5):
    cert, H = V.check_graph_property(run5.pair, [0.3])
    assert cert.passed
    assert cert.measured["graph_mismatch"] < 1e-10
    assert cert.measured["DH0"] < 1e-10


def test_graph_map_rejects_degenerate_tangent(run5):
    bad = run5.pair.copy()
    bad.Wp[bad.alg.linear_index(0)] = 0.0
    with pytest.raises(NotInvertible):
        V.graph_map(bad, [0.3])


def test_localization_is_exact_at_zero_coupling(run0):
    cert = V.check_localization(run0.pair, run0.gamma, run0.excited, run0.model.reference_state())
    assert cert.passed
    prof = cert.measured["profile"]
    assert prof[0] > 0 and all(p == 0.0 for p in prof[1:])


def test_localization_flags_boundary_growth(run5):
    bad = run5.pair.copy()
    edge = int(np.argmax(np.abs(run5.gamma.geometry.sites[:, 0])))
    bad.Wp[1, :, edge, 1] += 1e-2
    cert = V.check_localization(bad, run5.gamma, run5.excited, run5.model.reference_state())
    assert not cert.passed
    assert cert.measured["boundary_dominated"]


def test_torus_localization(run5):
    cert = V.check_localization(run5.K, run5.gamma, run5.excited, run5.model.reference_state())
    assert cert.passed


def test_normalization_conditions_hold(run5):
    cert = V.check_uniqueness_normalization(run5.pair, run5.K)
    assert cert.passed
    for key in ("c1_W0_minus_K", "c2_DsW_minus_Vs", "c3_DsP_minus_Lam_s", "c4_stable_part_orders_2_to_L"):
        assert cert.measured[key] <= 1e-12


def test_image_distance_of_pair_with_itself(run5):
    assert V.image_distance(run5.pair, run5.pair, n=50) < 1e-14


def test_image_distance_detects_a_different_manifold(run5):
    moved = run5.pair.copy()
    moved.Wp[moved.alg.degree == 2] += 1e-3 * moved.V[None, :, :, 1].reshape(1, moved.grid.n, *moved.state_shape)
    assert V.image_distance(run5.pair, moved, n=50) > 1e-7


def test_orbit_rate_fit_matches_multiplier(run0):
    # the exact fiber orbit is s -> s/2 + s^2, so consecutive ratios are 1/2 + d_k
    mu, C, d = V.fit_orbit_rate(run0.model, run0.pair, [0.1], s0=1e-3, n=12)
    np.testing.assert_allclose(d[1:] / d[:-1], 0.5 + d[:-1], rtol=1e-12)
    assert mu == pytest.approx(0.5, abs=1e-4)


def test_orbit_window_formula():
    eps = np.finfo(float).eps
    k = V.orbit_window(0.5, 0.5, 1e-3, 1.0, 50)
    assert 1e-3 * 0.25 ** k >= 1e3 * eps > 1e-3 * 0.25 ** (k + 1)
    assert V.orbit_window(0.5, None, 1e-3) == 20


def test_rates_and_orbits_certificate(run5):
    cert = V.check_rates_and_orbits(run5.model, run5.pair, run5.rates.mu1, mu2=run5.rates.mu2)
    assert cert.passed
    assert cert.measured["mu_fit"] <= run5.rates.mu1 + 0.05
    lied = V.check_rates_and_orbits(run5.model, run5.pair, 0.3, mu2=run5.rates.mu2)
    assert not lied.passed


def test_nonresonance_certificate_passes_for_computed_rates(run5):
    from wlattice.splitting import inverse_norm, stable_product_norms

    cert = V.check_nonresonance_certificate(run5.rates, 5, inverse_norm(run5.spl),
                                            stable_product_norms(run5.spl, 7))
    assert cert.passed and cert.measured["overlaps"] == []


def test_linear_style_needs_linear_certificate():
    rates = Rates(mu1=0.5, mu2=0.5, mu3=1.0, C_h=1.0, mu_s_min=0.2)
    assert V.check_nonresonance_certificate(rates, 5, 1.0, style="polynomial_P").passed
    assert not V.check_nonresonance_certificate(rates, 5, 1.0, style="linear_P").passed


@pytest.mark.parametrize("degree,shift", [(2, 1e-4), (3, 1e-3), (4, 1e-1)])
def test_invariance_detects_coefficient_faults(run5, degree, shift):
    bad = run5.pair.copy()
    bad.Wp[bad.alg.degree == degree] += shift
    cert = V.check_invariance(run5.model, bad)
    assert not cert.passed
    assert cert.measured["sup_residual"] >= 1e-8


def test_torus_fault(run5):
    K = run5.K
    bad = TorusEmbedding(K.grid, K.omega, K.periodic * (1 + 1e-4), K.lift)
    assert not V.check_torus(run5.model, bad).passed


def test_run_checks_turns_errors_into_failures():
    def boom():
        raise SmallDivisor(1e-9, 1e-6)

    ok = V._cert("zeta", "x", {"a": 1.0}, {}, True)
    certs = V.run_checks({"zeta": lambda: ok, "alpha": boom}, threads=2)
    assert [c.name for c in certs] == ["alpha", "zeta"]
    assert certs[0].verdict == "fail" and "SmallDivisor" in certs[0].measured["error"]
    assert certs[1].passed


def test_digest_and_certificate_serialization():
    a = np.arange(6.0).reshape(2, 3)
    assert V.digest(a, 1.5) == V.digest(a.copy(), 1.5)
    assert V.digest(a) != V.digest(a.T)
    c = V._cert("x", V.digest(a), {"v": np.float64(2.0), "flag": True}, {"tol": 1.0}, False)
    doc = json.loads(json.dumps(c.as_dict()))
    assert doc["verdict"] == "fail" and doc["measured"]["flag"] is True


def test_truncation_slope_reference(run5):
    ss = np.logspace(-4, -2, 7)
    r = M.truncation_residual(run5.model, run5.pair, np.full((7, 1), 0.6), ss[:, None])
    assert M.loglog_slope(ss, r) == pytest.approx(6.0, abs=0.2)
