"""Pass/fail certificates for the computed torus, bundles and manifolds.

Each check measures a few numbers, compares them with thresholds and
returns a :class:`Certificate`.  Diagnostic rows for CSV export are kept in
``Certificate.rows`` (long format, first entry the header).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import hashlib
import json

import numpy as np

from .decay import localization_weight
from .errors import NotInvertible, RateCertificationFailed, WLError
from .jets import Jet
from .manifold import ManifoldPair, solve_tail
from .splitting import certify_rates, check_nonresonance

THRESHOLDS = {
    "tol_total": 1e-8,
    "tol_torus": 1e-10,
    "tol_split": 1e-10,
    "tol_normalization": 1e-12,
    "tol_restart": 1e-9,
    "tol_image": 1e-8,
    "tol_graph": 1e-8,
    "rate_slack": 0.05,
    "orbit_n": 20,
    "orbit_fit_start": 5,
    "orbit_s0": 1e-6,
}


def digest(*objs) -> str:
    """Stable hash of arrays and JSON-able values."""
    h = hashlib.sha256()
    for o in objs:
        if isinstance(o, np.ndarray):
            a = np.ascontiguousarray(o, dtype=float)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        else:
            h.update(json.dumps(o, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


@dataclass
class Certificate:
    name: str
    inputs_digest: str
    measured: dict
    thresholds: dict
    verdict: str
    artifacts: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def as_dict(self) -> dict:
        return {"name": self.name, "inputs_digest": self.inputs_digest, "measured": self.measured,
                "thresholds": self.thresholds, "verdict": self.verdict, "artifacts": list(self.artifacts)}


def _cert(name, dig, measured, thresholds, ok, rows=None):
    measured = {k: (float(v) if isinstance(v, (np.floating, float, int)) and not isinstance(v, bool) else v)
                for k, v in measured.items()}
    return Certificate(name, dig, measured, thresholds, "pass" if ok else "fail", [], rows or [])


def _samples(pair: ManifoldPair, n_theta: int, radii, seed: int = 0):
    """Deterministic ``(theta, s)`` samples with ``|s| = r`` for each radius."""
    rng = np.random.default_rng(seed)
    D, ds = pair.grid.D, pair.d_s
    theta = rng.random((n_theta, D))
    dirs = rng.standard_normal((n_theta, ds))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    th, ss = [], []
    for r in radii:
        th.append(theta)
        ss.append(dirs * r)
    return np.concatenate(th), np.concatenate(ss)


# ---------------------------------------------------------------------------
# torus and bundles


def check_torus(model, K, tol=None, n_points=128) -> Certificate:
    from .torus import torus_residual
    tol = THRESHOLDS["tol_torus"] if tol is None else tol
    res = torus_residual(model, K, n_points)
    return _cert("torus_residual", digest(K.periodic), {"sup_residual": res}, {"tol": tol}, res < tol)


def check_splitting(spl, tol=None) -> Certificate:
    tol = THRESHOLDS["tol_split"] if tol is None else tol
    eq = spl.equivariance_defect()
    pd = spl.projection_defects()
    worst = max(eq, *pd.values())
    m = {"equivariance": eq, **{f"projection_{k}": v for k, v in pd.items()}, "worst": worst}
    return _cert("splitting", digest(spl.V), m, {"tol": tol}, worst < tol)


def check_rates(rates) -> Certificate:
    m = {"mu1": rates.mu1, "mu2": rates.mu2, "mu3": rates.mu3, "C_h": rates.C_h,
         "mu1_mu3": rates.mu1 * rates.mu3, "mu2_mu3": rates.mu2 * rates.mu3}
    try:
        certify_rates(rates)
        ok, why = True, ""
    except RateCertificationFailed as exc:
        ok, why = False, str(exc)
    m["reason"] = why
    return _cert("rates", digest(m["mu1"], m["mu2"], m["mu3"]), m, {"product_below": 1.0}, ok)


def check_nonresonance_certificate(rates, L: int, norm_Ainv: float, stable_norms=None,
                                   style: str = "polynomial_P") -> Certificate:
    orders = range(2, L + 1)
    rep = check_nonresonance(rates, orders, norm_Ainv, stable_norms, raise_on_resonance=False)
    ok = not rep["overlaps"] and rates.mu1 * rates.mu3 < 1
    if style == "linear_P":
        ok = ok and rep["P_linear_ok"]
    m = {"overlaps": [o[0] for o in rep["overlaps"]], "L_certified": rep["L"], "L_rate": rep["L_rate"],
         "P_linear_ok": rep["P_linear_ok"], "mu1_mu3": rates.mu1 * rates.mu3}
    return _cert("nonresonance", digest(rates.mu1, rates.mu3, L), m, {"orders": [2, L]}, ok)


# ---------------------------------------------------------------------------
# manifold conclusions


def check_invariance(model, pair: ManifoldPair, grid=None, s_samples=None, tol=None,
                     n_theta: int = 16, radii=(1e-3, 1e-2, 5e-2)) -> Certificate:
    """Sup of ``|F(W(theta, s)) - W(theta + omega, P(theta, s))|`` over samples."""
    from .manifold import pointwise_residual
    tol = THRESHOLDS["tol_total"] if tol is None else tol
    if s_samples is None:
        theta, s = _samples(pair, n_theta, radii)
    else:
        theta, s = s_samples
    res = pointwise_residual(model, pair, theta, s)
    rows = [("theta", "s_magnitude", "residual")]
    rows += [(float(t[0]) if t.size else 0.0, float(np.linalg.norm(x)), float(r)) for t, x, r in zip(theta, s, res)]
    sup = float(np.max(res))
    return _cert("invariance", digest(pair.Wp, pair.P, theta, s), {"sup_residual": sup}, {"tol_total": tol},
                 sup < tol, rows)


def _stable_coords_jet(pair: ManifoldPair, theta):
    """Frame coordinates ``V(theta)^{-1} (W(theta, s) - K(theta))`` as a jet in ``s``."""
    alg = pair.alg
    cw = pair.coeffs_at(pair.Wp, theta)[0].reshape(alg.size, -1)
    cw = cw.copy()
    cw[0] = 0.0
    Vinv = pair.grid.evaluate(pair.Vinv, theta)[0]
    return Jet(alg, cw @ Vinv.T)


def graph_map(pair: ManifoldPair, theta, cond_max: float = 1e10) -> Jet:
    """``H_theta = W^{cu} o (W^s)^{-1}`` by truncated series reversion (frame coordinates)."""
    alg, ds = pair.alg, pair.d_s
    xi = _stable_coords_jet(pair, theta)
    xs, xcu = xi[..., :ds], xi[..., ds:]
    B = np.stack([xs.c[alg.linear_index(j)] for j in range(ds)], axis=-1)
    if np.linalg.cond(B) > cond_max:
        raise NotInvertible("D_s W^s(theta, 0) is singular; tangency fails")
    Binv = np.linalg.inv(B)
    Nl = xs - xs.truncate(1)
    sig = [Jet.variable(alg, j) for j in range(ds)]
    sig = Jet(alg, np.stack([v.c for v in sig], axis=-1))
    s = sig @ Binv.T
    for _ in range(alg.order):
        comps = [s[..., j] for j in range(ds)]
        s = (sig - Nl.compose(comps)) @ Binv.T
    comps = [s[..., j] for j in range(ds)]
    return xcu.compose(comps)


def check_graph_property(pair: ManifoldPair, theta, radius: float = 1e-2, n: int = 32, tol=None):
    """Graph points ``(sigma, H(sigma))`` against Newton-projected manifold points."""
    tol = THRESHOLDS["tol_graph"] if tol is None else tol
    theta = np.asarray(theta, float).reshape(1, pair.grid.D)
    H = graph_map(pair, theta)
    alg, ds = pair.alg, pair.d_s
    xi = _stable_coords_jet(pair, theta)
    rng = np.random.default_rng(1)
    sig = rng.standard_normal((n, ds))
    sig *= radius / np.linalg.norm(sig, axis=1, keepdims=True)
    worst, newton_res = 0.0, 0.0
    for sv in sig:
        s = sv.copy()
        for _ in range(30):
            val = xi.evaluate(s)[:ds]
            Jd = _jet_jacobian(Jet(alg, xi.c[:, :ds]), s)
            step = np.linalg.solve(Jd, val - sv)
            s = s - step
            if np.max(np.abs(step)) < 1e-16:
                break
        newton_res = max(newton_res, float(np.max(np.abs(xi.evaluate(s)[:ds] - sv))))
        worst = max(worst, float(np.max(np.abs(xi.evaluate(s)[ds:] - H.evaluate(sv)))))
    dH0 = float(max(np.max(np.abs(H.c[alg.linear_index(j)])) for j in range(ds)))
    m = {"graph_mismatch": worst, "newton_residual": newton_res, "DH0": dH0, "H_sup": float(np.max(np.abs(H.c)))}
    ok = worst < tol and dH0 < 1e-10
    return _cert("graph_property", digest(pair.Wp, theta), m, {"tol": tol, "DH0": 1e-10}, ok), H


def _jet_jacobian(j: Jet, s) -> np.ndarray:
    """``d/ds`` of a vector-valued jet at the point ``s`` (value shape ``(m,)``)."""
    alg = j.alg
    ex = alg.exponents
    s = np.asarray(s, float)
    cols = []
    for k in range(alg.nvars):
        red = ex.copy()
        red[:, k] = np.maximum(red[:, k] - 1, 0)
        mono = np.prod(s[None, :] ** red, axis=-1) * ex[:, k]
        cols.append(mono @ j.c)
    return np.stack(cols, axis=-1)


def project_onto(pair: ManifoldPair, theta, x, s0, iters: int = 30):
    """Gauss-Newton for ``s`` minimizing ``|W(theta, s) - x|``; returns ``(s, distance)``."""
    s = np.asarray(s0, float).copy()
    k = s.shape[0]
    x = x.reshape(k, -1)
    for _ in range(iters):
        r = pair.evaluate(theta, s).reshape(k, -1) - x
        Jm = pair.jacobian_s(theta, s)
        step = np.stack([np.linalg.lstsq(Jm[i], r[i], rcond=None)[0] for i in range(k)])
        s = s - step
        if np.max(np.abs(step)) < 1e-17:
            break
    d = np.abs(pair.evaluate(theta, s).reshape(k, -1) - x).max(axis=1)
    return s, d


def image_distance(pair_a: ManifoldPair, pair_b: ManifoldPair, n: int = 1000, radius: float = 0.05,
                   seed: int = 2) -> float:
    """Sampled one-sided Hausdorff distance from the image of ``b`` to that of ``a``."""
    rng = np.random.default_rng(seed)
    theta = rng.random((n, pair_b.grid.D))
    s = rng.uniform(-radius, radius, (n, pair_b.d_s))
    x = pair_b.evaluate(theta, s)
    _, d = project_onto(pair_a, theta, x, s)
    return float(np.max(d))


def check_uniqueness_normalization(pair: ManifoldPair, K=None, model=None, alt_pair=None,
                                   tol=None, seed: int = 0) -> Certificate:
    """Normalization conditions, tail restart and (optionally) a reparameterized pair."""
    tol = THRESHOLDS["tol_normalization"] if tol is None else tol
    alg, ds = pair.alg, pair.d_s
    n = pair.grid.n
    m = {}
    ok = True
    if K is not None:
        m["c1_W0_minus_K"] = float(np.max(np.abs(pair.Wp[0] - K.periodic)))
        ok &= m["c1_W0_minus_K"] <= tol
    Vs = pair.V[:, :, :ds]
    W1 = np.stack([pair.Wp[alg.linear_index(j)].reshape(n, -1) for j in range(ds)], axis=-1)
    m["c2_DsW_minus_Vs"] = float(np.max(np.abs(W1 - Vs)))
    P1 = np.stack([pair.P[alg.linear_index(j)] for j in range(ds)], axis=-1)
    m["c3_DsP_minus_Lam_s"] = float(np.max(np.abs(P1 - pair.info["Lam"][:, :ds, :ds])))
    c4 = 0.0
    if pair.style == "polynomial_P":
        for i in range(2, pair.L + 1):
            sl = alg.degree_slice(i)
            Wi = pair.Wp[sl].reshape(sl.stop - sl.start, n, -1)
            c4 = max(c4, float(np.max(np.abs(np.einsum("gab,igb->iga", pair.Vinv[:, :ds], Wi)), initial=0.0)))
    m["c4_stable_part_orders_2_to_L"] = c4
    ok &= m["c2_DsW_minus_Vs"] <= tol and m["c3_DsP_minus_Lam_s"] <= tol and c4 <= tol
    thr = {"tol": tol}
    if model is not None:
        base = pair.truncated(pair.L)
        ref = solve_tail(model, base, "contraction")
        rng = np.random.default_rng(seed)
        hi = (alg.degree > pair.L).reshape((-1,) + (1,) * (pair.Wp.ndim - 1))
        pert = solve_tail(model, base, "contraction", H0=1e-3 * rng.standard_normal(pair.Wp.shape) * hi)
        m["restart_delta"] = float(np.max(np.abs(pert.Wp - ref.Wp)))
        m["restart_vs_pair"] = float(np.max(np.abs(ref.Wp - pair.Wp)))
        thr["tol_restart"] = THRESHOLDS["tol_restart"]
        ok &= m["restart_delta"] < thr["tol_restart"] and m["restart_vs_pair"] < thr["tol_restart"]
    if alt_pair is not None:
        m["image_distance"] = max(image_distance(pair, alt_pair), image_distance(alt_pair, pair))
        m["coefficient_difference"] = float(np.max(np.abs(alt_pair.Wp - pair.Wp)))
        thr["tol_image"] = THRESHOLDS["tol_image"]
        ok &= m["image_distance"] < thr["tol_image"]
    return _cert("uniqueness_normalization", digest(pair.Wp, pair.P), m, thr, bool(ok))


def site_profile(pair_or_K, gamma, excited, reference=None):
    """Per-site deviation norms, envelope ratios and distances to the excited set.

    For a pair, every Taylor coefficient of the periodic part counts (the
    constant term after subtracting the reference state); for a torus only
    its periodic part does.
    """
    geo = gamma.geometry
    if isinstance(pair_or_K, ManifoldPair):
        c = pair_or_K.Wp.copy()
        if reference is not None:
            c[0] = c[0] - reference[None]
        a = np.abs(c).max(axis=(0, 1, 3))
    else:
        c = pair_or_K.periodic - (0.0 if reference is None else reference[None])
        a = np.abs(c).max(axis=(0, 2))
    w = localization_weight(gamma, excited)
    ratio = a * w
    disp = np.stack([np.abs(geo.sites - geo.sites[k]).max(axis=1) for k in excited.indices])
    dist = disp.min(axis=0)
    return a, ratio, dist, 1.0 / w


def check_localization(pair_or_K, gamma, excited, reference=None, C_loc=None,
                       edge_growth: float = 1.5) -> Certificate:
    """Envelope ratio ``sup_i |W_i| / min_k Gamma(i - c_k)`` and its radial profile."""
    a, ratio, dist, env = site_profile(pair_or_K, gamma, excited, reference)
    rmax = int(dist.max())
    prof = np.array([ratio[dist == r].max() for r in range(rmax + 1)])
    C = float(prof.max())
    tiny = 1e-13 * max(1.0, float(a.max()))
    edge = float(prof[-1])
    inner = float(prof[:-1].max()) if rmax > 0 else 0.0
    boundary = rmax > 0 and edge > edge_growth * inner and edge * env[dist == rmax].max() > tiny
    ok = np.isfinite(C) and not boundary and (C_loc is None or C <= C_loc)
    # derivative localization: first-order coefficients decay with distance
    mono = True
    if isinstance(pair_or_K, ManifoldPair):
        p = pair_or_K
        d1 = np.abs(p.Wp[p.alg.degree == 1]).max(axis=(0, 1, 3))
        dprof = np.array([d1[dist == r].max() for r in range(rmax + 1)])
        mono = bool(np.all(np.diff(dprof) <= 1e-14 + 1e-9 * dprof[:-1]))
    rows = [("site_distance", "profile_ratio", "gamma_envelope")]
    rows += [(int(d), float(r), float(e)) for d, r, e in zip(dist, ratio, env)]
    m = {"C_loc": C, "edge_ratio": edge, "inner_ratio": inner, "boundary_dominated": bool(boundary),
         "derivative_monotone": mono, "profile": [float(x) for x in prof]}
    thr = {"edge_growth": edge_growth, "C_loc": C_loc}
    src = pair_or_K.Wp if isinstance(pair_or_K, ManifoldPair) else pair_or_K.periodic
    return _cert("localization", digest(src), m, thr, bool(ok and mono), rows)


def orbit_window(mu1: float, mu2: float | None, s0: float, scale: float = 1.0, n: int = 20,
                 margin: float = 1e3) -> int:
    """Largest ``k <= n`` with ``s0 mu1^k >= margin * eps * scale * mu2^{-k}``.

    Round-off along the unstable bundle grows like ``mu2^{-k}`` while the
    signal decays like ``mu1^k``; beyond this step the distance measures
    noise, not the fiber contraction.
    """
    if mu2 is None or mu2 <= 0:
        return n
    eps = np.finfo(float).eps
    rate = -np.log(mu1 * mu2)
    if rate <= 0:
        return n
    k = int(np.floor(np.log(s0 / (margin * eps * scale)) / rate))
    return max(0, min(n, k))


def fit_orbit_rate(model, pair: ManifoldPair, theta, s0=None, n=None, start=None):
    """Fit ``d(F^k(W(theta, s0)), K(theta + k omega)) ~ C mu^k`` for ``start <= k <= n``.

    The torus point is carried along by the same map, ``F^k(K(theta))``,
    which equals ``K(theta + k omega)`` in exact arithmetic; the torus error
    drifting along the unstable bundle is shared by both orbits and cancels
    in the distance.
    """
    n = THRESHOLDS["orbit_n"] if n is None else n
    start = THRESHOLDS["orbit_fit_start"] if start is None else start
    s0 = THRESHOLDS["orbit_s0"] if s0 is None else s0
    theta = np.asarray(theta, float).reshape(1, pair.grid.D)
    s = np.full((1, pair.d_s), s0 / np.sqrt(pair.d_s))
    x = pair.evaluate(theta, s)
    y = pair.evaluate(theta, np.zeros((1, pair.d_s)))
    dists = []
    for k in range(n + 1):
        dists.append(float(np.max(np.abs(x - y))))
        if k < n:
            x, y = model(x), model(y)
    d = np.array(dists)
    ks = np.arange(n + 1)
    sel = ks >= min(start, max(n - 3, 1))
    slope, icpt = np.polyfit(ks[sel], np.log(d[sel]), 1)
    return float(np.exp(slope)), float(np.exp(icpt)), d


def check_rates_and_orbits(model, pair: ManifoldPair, mu1: float, n=None, n_theta: int = 4,
                           slack=None, mu2=None) -> Certificate:
    """Fitted fiber contraction against the certified ``mu1`` plus pointwise fiber invariance.

    With ``mu2`` given, the orbit length is capped by :func:`orbit_window`
    (and the start radius raised, up to ``1e-3``, to keep at least four
    points in the fit).
    """
    slack = THRESHOLDS["rate_slack"] if slack is None else slack
    n = THRESHOLDS["orbit_n"] if n is None else n
    start = THRESHOLDS["orbit_fit_start"]
    scale = max(1.0, float(np.max(np.abs(pair.evaluate(np.zeros((1, pair.grid.D)), np.zeros((1, pair.d_s)))))))
    for s0 in (THRESHOLDS["orbit_s0"], 1e-5, 1e-4, 1e-3):
        n_eff = orbit_window(mu1, mu2, s0, scale, n)
        if n_eff >= start + 3:
            break
    rng = np.random.default_rng(3)
    thetas = rng.random((n_theta, pair.grid.D))
    mus, Cs = [], []
    rows = [("theta", "n", "distance")]
    for th in thetas:
        mu, C, d = fit_orbit_rate(model, pair, th, s0=s0, n=n_eff, start=start)
        mus.append(mu)
        Cs.append(C)
        rows += [(float(th[0]) if th.size else 0.0, k, float(v)) for k, v in enumerate(d)]
    from .manifold import pointwise_residual
    th, s = _samples(pair, 8, (1e-2,))
    fiber = float(np.max(pointwise_residual(model, pair, th, s)))
    m = {"mu_fit": float(max(mus)), "C_fit": float(max(Cs)), "mu1": mu1, "fiber_invariance": fiber,
         "orbit_length": n_eff, "s0": s0}
    ok = max(mus) <= mu1 + slack and fiber < THRESHOLDS["tol_total"]
    return _cert("rates_and_orbits", digest(pair.Wp, mu1), m, {"slack": slack, "tol_total": THRESHOLDS["tol_total"]},
                 ok, rows)


# ---------------------------------------------------------------------------


def run_checks(checks: dict, threads: int = 1) -> list:
    """Run named zero-argument callables; certificates sorted by name.

    A check that raises a library error becomes a failing certificate.
    """
    def one(item):
        name, fn = item
        try:
            out = fn()
            return out[0] if isinstance(out, tuple) else out
        except WLError as exc:
            return Certificate(name, "", {"error": f"{type(exc).__name__}: {exc}"}, {}, "fail")

    items = sorted(checks.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            certs = list(ex.map(one, items))
    else:
        certs = [one(it) for it in items]
    return sorted(certs, key=lambda c: c.name)
