"""One pass/fail test per acceptance criterion, each at its stated tolerance."""
import time

import numpy as np
import scipy.linalg

from wlattice import manifold as M
from wlattice import verification as V
from wlattice.decay import (DecayOperator, ExcitedSites, LatticeGeometry, localized_vector_norm,
                            make_decay_function, operator_norms)
from wlattice.fourier import ThetaGrid
from wlattice.jets import Jet, algebra
from wlattice.models import IteratedMap, KleinGordon, TimeTMap, integrate_flow
from wlattice.splitting import Rates, TransferOperator, compute_splitting
from wlattice.torus import TorusEmbedding, initial_torus

from conftest import NONLIN


def brute_force_axioms(alpha, p, a, R):
    """Both axioms by explicit loops over the box of radius R in one dimension."""
    sites = range(-R, R + 1)

    def g(j):
        r = abs(j)
        return a * np.exp(-alpha * r) * (1.0 + r) ** (-p)

    total = sum(g(j) for j in sites)
    worst = 0.0
    for i in sites:
        for j in sites:
            conv = 0.0
            for k in sites:
                conv += g(i - k) * g(k - j)
            worst = max(worst, conv / g(i - j))
    return total, worst


def test_criterion_01_decay_algebra():
    geo = LatticeGeometry(1, 3)
    g = make_decay_function(1.0, 2.0, geo)
    c = ExcitedSites.from_list([[0]], geo)
    G = g.matrix()
    n, b = geo.n_sites, geo.block
    rng = np.random.default_rng(0)
    w = g.to_site(c.indices)
    t0 = time.perf_counter()
    worst = [-np.inf, -np.inf, -np.inf]
    for _ in range(1000):
        A = DecayOperator(rng.uniform(-1, 1, (n, n, b, b)) * G[:, :, None, None] / b * rng.uniform(0.1, 2), g)
        B = DecayOperator(rng.uniform(-1, 1, (n, n, b, b)) * G[:, :, None, None] / b * rng.uniform(0.1, 2), g)
        AB = A @ B
        worst[0] = max(worst[0], operator_norms(AB) - operator_norms(A) * operator_norms(B))
        worst[1] = max(worst[1], operator_norms(AB, c) - operator_norms(A, c) * operator_norms(B, c))
        v = rng.uniform(-1, 1, (n, b)) * w[:, None]
        worst[2] = max(worst[2], localized_vector_norm(A @ v, c, g) - operator_norms(A) * localized_vector_norm(v, c, g))
    elapsed = time.perf_counter() - t0
    assert max(worst) <= 1e-12, worst
    assert elapsed < 10.0


def test_criterion_02_decay_axioms():
    t0 = time.perf_counter()
    geo = LatticeGeometry(1, 8)
    g = make_decay_function(1.0, 2.0, geo)
    total, worst = brute_force_axioms(1.0, 2.0, g.a, 8)
    elapsed = time.perf_counter() - t0
    assert total <= 1.0
    assert worst <= 1.0
    assert elapsed < 5.0


def test_criterion_03_exactness_at_zero_coupling(run0):
    r = run0
    torus = V.check_torus(r.model, r.K, tol=1e-12)
    split = V.check_splitting(r.spl, tol=1e-12)
    inv = V.check_invariance(r.model, r.pair, tol=1e-12)
    orbit = V.check_rates_and_orbits(r.model, r.pair, r.rates.mu1, mu2=r.rates.mu2)
    assert torus.measured["sup_residual"] <= 1e-12
    assert split.measured["worst"] <= 1e-12
    assert inv.measured["sup_residual"] <= 1e-12
    assert abs(orbit.measured["mu_fit"] - 0.5) <= 1e-6


def test_criterion_04_perturbed_run(tmp_path):
    from wlattice.config import parse_config
    from wlattice.pipeline import run_pipeline

    cfg = parse_config({"model": "rotor_saddle", "lambda": 0.5, "omega": [(np.sqrt(5) - 1) / 2],
                        "epsilon": 0.005, "gamma": {"alpha": 1.0, "p": 2.0}, "R": 4, "N": 1,
                        "excited_sites": [[0]], "nonlinearity": NONLIN, "N_theta": 32, "L": 5})
    t0 = time.perf_counter()
    res = run_pipeline(cfg, tmp_path / "run")
    elapsed = time.perf_counter() - t0
    certs = {c.name: c for c in res.certificates}
    assert certs["torus_residual"].measured["sup_residual"] < 1e-10
    assert certs["invariance"].measured["sup_residual"] < 1e-8
    model, pair = res.objects["model"], res.objects["pair"]
    ss = np.logspace(-4, -2, 9)
    th = np.full((9, 1), 0.3)
    slope = M.loglog_slope(ss, M.truncation_residual(model, pair, th, ss[:, None]))
    assert abs(slope - (cfg.L + 1)) <= 0.2
    assert elapsed < 300.0


def test_criterion_05_localization_under_box_doubling(run5, run5_R8):
    ratios = []
    for r in (run5, run5_R8):
        cert = V.check_localization(r.pair, r.gamma, r.excited, r.model.reference_state())
        assert cert.passed
        ratios.append(cert.measured["C_loc"])
    assert np.isfinite(ratios).all()
    assert abs(ratios[1] - ratios[0]) / ratios[0] < 0.10


def test_criterion_06_spectral_rate_consistency(run5):
    spl, rates = run5.spl, run5.rates
    T = TransferOperator(spl.grid, spl.omega, "L", B=spl.reduced("s"))
    radius, _ = T.spectral_radius()
    assert abs(radius - rates.mu1) <= 0.05
    # A = 2, P(s) = s/2, eta = s^2: the solution is (4/7) s^2
    grid = ThetaGrid(0, 1)
    alg = algebra(1, 2)
    eta = Jet(alg, np.zeros((alg.size, 1, 1)))
    eta.c[alg.index[(2,)], 0, 0] = 1.0
    P = Jet(alg, np.zeros((alg.size, 1, 1)))
    P.c[alg.index[(1,)], 0, 0] = 0.5
    H, _ = M.apply_S_inverse(eta, np.full((1, 1, 1), 0.5), P, grid, np.zeros(0), k_max=2, tol=1e-17)
    assert abs(H.c[alg.index[(2,)], 0, 0] - 4.0 / 7.0) <= 1e-12


def test_criterion_07_uniqueness_and_reparameterization(run5):
    r = run5
    cert = V.check_uniqueness_normalization(r.pair, r.K, r.model)
    assert cert.measured["restart_delta"] <= 1e-9
    q = M.quadratic_reparam(r.pair.alg, 0.1)
    alt = M.solve_manifold(r.model, r.K, r.spl, L=5, q=q)
    d = max(V.image_distance(r.pair, alt, n=1000), V.image_distance(alt, r.pair, n=1000))
    assert d <= 1e-8


def test_criterion_08_power_reduction(run5):
    m, K = run5.model, run5.K
    F2 = IteratedMap(m, 2)
    K2 = TorusEmbedding(K.grid, 2 * K.omega, K.periodic, K.lift)
    pair = M.solve_manifold(F2, K2, compute_splitting(F2, K2), L=5)
    R, _ = M.derive_root_map_P(pair, m, K.omega)
    R2 = M.compose_root_map(R, pair.alg, pair.grid, K.omega, 2)
    assert np.max(np.abs(R2 - pair.P)) <= 1e-9
    root = M.with_map(pair, R, K.omega)
    rng = np.random.default_rng(1)
    th = rng.random((100, 1))
    s = rng.uniform(-0.05, 0.05, (100, 1))
    assert np.max(M.pointwise_residual(m, root, th, s)) <= 1e-8


def _kg_field(eps=0.01):
    geo = LatticeGeometry(1, 3, l=0, d=2)
    g = make_decay_function(1.0, 2.0, geo)
    return KleinGordon(g, 1.0, 1.3, eps, ExcitedSites.from_list([[0]], geo), beta=0.5)


def test_criterion_09_flows():
    field = _kg_field()
    K = initial_torus(TimeTMap(field, 1.0, 0.01), 1)
    pair, maps, rep = M.solve_flow_manifold(field, K, 1.0, [0.3, 1.7], 0.01, L=4)
    assert rep["vector_field_defect"] < 1e-9
    s = np.linspace(-0.1, 0.1, 21)[:, None]
    th = np.zeros((21, 0))
    for t in (0.3, 1.7):
        lhs = integrate_flow(field, pair.evaluate(th, s), t, 0.01)
        rhs = pair.evaluate(th, M.with_map(pair, maps[t], np.zeros(0)).evaluate_P(th, s))
        assert np.max(np.abs(lhs - rhs)) <= 1e-7
    # step convergence on the linearized field against the matrix exponential
    n = field.geometry.n_sites * 2
    x0 = np.zeros(field.state_shape)
    Amat = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1e-6
        Amat[:, k] = ((field(x0 + e.reshape(x0.shape)) - field(x0 - e.reshape(x0.shape))) / 2e-6).ravel()

    def linear(x):
        return (x.reshape(-1, n) @ Amat.T).reshape(x.shape)

    y0 = np.random.default_rng(0).standard_normal(field.state_shape)
    exact = (scipy.linalg.expm(Amat) @ y0.ravel()).reshape(y0.shape)
    errs = [np.max(np.abs(integrate_flow(linear, y0, 1.0, h) - exact)) for h in (0.1, 0.05)]
    assert 16 * 0.8 <= errs[0] / errs[1] <= 16 * 1.2


def _fabricated_resonant_rates():
    return Rates(mu1=0.9, mu2=0.5, mu3=1.25, C_h=1.0, mu_s_min=0.9)


def test_criterion_10_fault_injection(run5):
    r = run5
    faults = []
    bad = r.pair.copy()
    bad.Wp[r.pair.alg.degree == 3] += 1e-3
    faults.append(V.check_invariance(r.model, bad))
    faults.append(V.check_uniqueness_normalization(bad, r.K))
    badP = r.pair.copy()
    badP.P[r.pair.alg.degree == 2] += 1e-3
    faults.append(V.check_invariance(r.model, badP))
    badK = TorusEmbedding(r.K.grid, r.K.omega, r.K.periodic + 1e-3, r.K.lift)
    faults.append(V.check_torus(r.model, badK))
    rates = _fabricated_resonant_rates()
    faults.append(V.check_rates(rates))
    nonres = V.check_nonresonance_certificate(rates, 5, 2.0)
    assert nonres.measured["overlaps"] == [2]
    faults.append(nonres)
    verdicts = [(c.name, c.verdict) for c in faults]
    assert all(not c.passed for c in faults), verdicts
    # the untouched objects still pass, so the failures come from the faults
    assert V.check_invariance(r.model, r.pair).passed
    assert V.check_torus(r.model, r.K).passed
    assert V.check_rates(r.rates).passed
