"""End-to-end run: decay function, model, torus, bundles, manifolds, checks."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .decay import ExcitedSites, LatticeGeometry, gamma_to_dict, make_decay_function, verify_decay_axioms
from .errors import BlowUp, NoConvergence, OutOfDomain, SmallDivisor, SplittingDivergence, WLError
from .manifold import (derive_root_map_P, pointwise_residual, solve_flow_manifold, solve_manifold,
                       truncation_residual, with_map)
from .models import CoupledStandard, InverseMap, IteratedMap, KleinGordon, RotorSaddle, TimeTMap, integrate_flow
from .splitting import (choose_power, compute_splitting, estimate_rates, inverse_norm,
                        rate_series_rows, stable_product_norms)
from .torus import TorusEmbedding, cohomology_divisors, continue_torus, initial_torus, solve_invariant_torus
from . import verification as V

log = logging.getLogger(__name__)

STAGES = ("gamma", "torus", "splitting", "manifold", "verify")


class HypothesisFailure(WLError):
    """A hypothesis certificate failed; the run stops at the named check."""

    def __init__(self, name, reason):
        super().__init__(f"hypothesis check '{name}' failed: {reason}")
        self.name = name


@dataclass
class RunResult:
    out: Path
    stage: str
    certificates: list = field(default_factory=list)
    objects: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [c.name for c in self.certificates if not c.passed]


def build_gamma(cfg: RunConfig):
    l, d = {"rotor_saddle": (1, 2), "coupled_standard": (1, 1), "klein_gordon": (0, 2)}[cfg.model]
    geo = LatticeGeometry(cfg.N, cfg.R, cfg.boundary, l, d)
    gamma = make_decay_function(cfg.gamma["alpha"], cfg.gamma["p"], geo)
    excited = ExcitedSites.from_list(cfg.excited_sites, geo)
    return gamma, excited


def build_model(cfg: RunConfig, gamma, excited):
    """The lattice map; for a flow, the time-``t0`` map of the field."""
    if cfg.model == "rotor_saddle":
        kw = {} if cfg.beta is None else {"beta": cfg.beta}
        return RotorSaddle(gamma, cfg.lam, cfg.omega, cfg.epsilon, excited, nonlinearity=cfg.nonlinearity, **kw)
    if cfg.model == "coupled_standard":
        return CoupledStandard(gamma, cfg.k, cfg.epsilon, excited)
    field_ = KleinGordon(gamma, cfg.nu, cfg.kappa, cfg.epsilon, excited, beta=cfg.quartic)
    return TimeTMap(field_, cfg.t0, cfg.h)


def _meta(cfg: RunConfig, step: str, statement: str) -> dict:
    return {"step": step, "statement": statement, "model": cfg.model, "R": cfg.R, "N": cfg.N,
            "N_theta": cfg.N_theta, "L": cfg.L, "L_max": cfg.L_max_eff,
            "units": "angles in turns (period 1); time in flow units"}


def _hyp(cert):
    if not cert.passed:
        raise HypothesisFailure(cert.name, cert.measured)
    return cert


def run_pipeline(cfg: RunConfig, out=None, until: str = "verify", threads: int = 1) -> RunResult:
    """Run the stages up to ``until``, writing artifacts into ``out``.

    Hypothesis checks (decay axioms, torus, splitting, rates, non-resonance)
    abort with :class:`HypothesisFailure`; conclusion checks are collected
    as certificates.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out, "gamma")
    io.write_json(out / "config.json", cfg.as_dict())
    try:
        return _run_stages(cfg, res, until, threads)
    except HypothesisFailure:
        _finish(res, cfg)
        raise


def _run_stages(cfg: RunConfig, res: RunResult, until: str, threads: int) -> RunResult:
    out = res.out
    certs = res.certificates

    # -- decay function --------------------------------------------------------
    gamma, excited = build_gamma(cfg)
    rep = verify_decay_axioms(gamma)
    ok = rep["axiom1_margin"] >= 0 and rep["axiom2_worst_ratio"] <= 1.0
    cg = V._cert("gamma_axioms", V.digest(gamma.matrix()), dict(rep), {"axiom2_worst_ratio": 1.0}, ok)
    certs.append(cg)
    io.write_json(out / "gamma.json", {**gamma_to_dict(gamma), "meta": _meta(cfg, "decay function",
                  "Gamma = a exp(-alpha|j|)(1+|j|)^-p with sum Gamma <= 1 and Gamma*Gamma <= Gamma")})
    _hyp(cg)
    res.objects.update(gamma=gamma, excited=excited)
    if until == "gamma":
        return _finish(res, cfg)

    # -- model and torus -----------------------------------------------------
    res.stage = "torus"
    model = build_model(cfg, gamma, excited)
    try:
        if model.D == 0:
            K = solve_invariant_torus(model, initial_torus(model, 1), cfg.tol("tol_torus"))
        else:
            K, _ = continue_torus(model, cfg.epsilon, cfg.N_theta, cfg.continuation_steps, cfg.tol("tol_torus"))
    except (NoConvergence, SmallDivisor, SplittingDivergence, OutOfDomain, BlowUp) as exc:
        raise HypothesisFailure("torus", str(exc)) from exc
    ct = V.check_torus(model, K, max(cfg.tol("tol_torus"), 1e-10))
    certs.append(ct)
    io.write_json(out / "torus.json", io.torus_to_dict(K, _meta(cfg, "invariant torus", "F(K(theta)) = K(theta + omega)")))
    modes, div = cohomology_divisors(K.grid, K.omega)
    io.write_csv(out / "cohomology_divisors.csv",
                 [("mode", "divisor")] + [(" ".join(map(str, m)), float(d)) for m, d in zip(modes.tolist(), div)],
                 "small divisors |1 - exp(2 pi i m.omega)| of the torus grid")
    _hyp(ct)
    res.objects.update(model=model, K=K)
    if isinstance(model, TimeTMap):
        from .manifold import vector_field_defect
        vf = vector_field_defect(model.field, K)
        cv = V._cert("vector_field_identity", V.digest(K.periodic), {"defect": vf}, {"tol": 1e-9}, vf < 1e-9)
        certs.append(_hyp(cv))
    if until == "torus":
        return _finish(res, cfg)

    # -- splitting and rates -------------------------------------------------
    res.stage = "splitting"
    try:
        spl = compute_splitting(model, K, cfg.tol("tol_split"))
    except SplittingDivergence as exc:
        raise HypothesisFailure("splitting", str(exc)) from exc
    rates = estimate_rates(spl, certify=False)
    io.write_json(out / "splitting.json", io.splitting_to_dict(spl, _meta(cfg, "invariant splitting",
                  "A(theta) E^sigma(theta) = E^sigma(theta + omega)")))
    io.write_csv(out / "rates.csv", [("n", "bundle", "sup_norm")] + rate_series_rows(rates),
                 "sup over theta of n-step cocycle norms in frame coordinates")
    certs.append(_hyp(V.check_splitting(spl, 1e-10)))
    certs.append(_hyp(V.check_rates(rates)))
    nA = inverse_norm(spl)
    cn = V.check_nonresonance_certificate(rates, cfg.L, nA, stable_product_norms(spl, cfg.L + 2), cfg.style)
    certs.append(_hyp(cn))
    res.objects.update(splitting=spl, rates=rates)
    if until == "splitting":
        return _finish(res, cfg)

    # -- manifolds -------------------------------------------------------------
    res.stage = "manifold"
    n_pow = choose_power(rates) if cfg.power == "auto" else int(cfg.power)
    if n_pow > 1:
        Fn = IteratedMap(model, n_pow)
        Kn = TorusEmbedding(K.grid, K.omega * n_pow, K.periodic, K.lift)
        spl_n = compute_splitting(Fn, Kn, cfg.tol("tol_split"))
        pair_n = solve_manifold(Fn, Kn, spl_n, cfg.L, cfg.L_max_eff, cfg.style, cfg.tail, tol_order=cfg.tol("tol_order"))
        R, _ = derive_root_map_P(pair_n, model, K.omega)
        pair = with_map(pair_n, R, K.omega)
        pair.info["Lam"] = spl.Lam
    else:
        pair = solve_manifold(model, K, spl, cfg.L, cfg.L_max_eff, cfg.style, cfg.tail, tol_order=cfg.tol("tol_order"))
    pair.info["power"] = n_pow
    sites = gamma.geometry.sites.tolist()
    io.write_json(out / "pair_stable.json", io.pair_to_dict(pair, sites, _meta(cfg, "stable manifold",
                  "F(W(theta, s)) = W(theta + omega, P(theta, s))")))
    res.objects.update(pair=pair)
    if cfg.unstable and spl.dims[2] > 0 and not isinstance(model, TimeTMap):
        Fi = InverseMap(model)
        Ki = TorusEmbedding(K.grid, -K.omega, K.periodic, K.lift)
        spl_i = compute_splitting(Fi, Ki, cfg.tol("tol_split"))
        pair_u = solve_manifold(Fi, Ki, spl_i, cfg.L, cfg.L_max_eff, cfg.style, cfg.tail, tol_order=cfg.tol("tol_order"))
        io.write_json(out / "pair_unstable.json", io.pair_to_dict(pair_u, sites, _meta(cfg, "unstable manifold",
                      "stable manifold of the inverse map")))
        res.objects.update(pair_unstable=pair_u, inverse=Fi, splitting_unstable=spl_i)
    flow_maps = {}
    if isinstance(model, TimeTMap):
        _, flow_maps, frep = solve_flow_manifold(model.field, K, cfg.t0, cfg.t_list, cfg.h, cfg.L, cfg.L_max_eff,
                                                 cfg.style, splitting_fn=lambda m, k: spl)
        res.objects.update(flow_maps=flow_maps)
    # residual profile along |s|
    th = np.zeros((9, K.grid.D)) + 0.25
    ss = np.logspace(-4, -2, 9)[:, None] * np.ones((1, pair.d_s)) / np.sqrt(pair.d_s)
    tr = truncation_residual(model, pair, th, ss)
    full = pointwise_residual(model, pair, th, ss)
    io.write_csv(out / "residual.csv", [("s_magnitude", "residual", "kind")]
                 + [(float(np.linalg.norm(s)), float(r), "truncated_L") for s, r in zip(ss, tr)]
                 + [(float(np.linalg.norm(s)), float(r), "full") for s, r in zip(ss, full)],
                 "invariance residual sup-norm against |s|")
    if until == "manifold":
        return _finish(res, cfg)

    # -- verification ----------------------------------------------------------
    res.stage = "verify"
    ref = model.reference_state()
    tol_total = cfg.tol("tol_total")
    checks = {
        "invariance": lambda: V.check_invariance(model, pair, tol=tol_total),
        "graph_property": lambda: V.check_graph_property(pair, np.full(K.grid.D, 0.25)),
        "uniqueness_normalization": lambda: V.check_uniqueness_normalization(
            pair, K, model if (cfg.style == "polynomial_P" and n_pow == 1) else None),
        "localization": lambda: V.check_localization(pair, gamma, excited, ref),
        "rates_and_orbits": lambda: V.check_rates_and_orbits(model, pair, rates.mu1, mu2=rates.mu2),
    }
    if "pair_unstable" in res.objects:
        pu, Fi = res.objects["pair_unstable"], res.objects["inverse"]

        def _unstable():
            ru = estimate_rates(res.objects["splitting_unstable"], certify=False)
            c = V.check_rates_and_orbits(Fi, pu, ru.mu1, mu2=ru.mu2)
            c.name = "unstable_rates_and_orbits"
            return c

        def _unstable_inv():
            c = V.check_invariance(Fi, pu, tol=tol_total)
            c.name = "unstable_invariance"
            return c

        checks["unstable_rates_and_orbits"] = _unstable
        checks["unstable_invariance"] = _unstable_inv
    for t, Rt in flow_maps.items():
        checks[f"flow_invariance_t{t}"] = (lambda t=t, Rt=Rt: flow_invariance_certificate(model, pair, t, Rt))
    vc = V.run_checks(checks, threads)
    certs.extend(vc)
    for c in vc:
        if c.rows:
            name = f"{c.name}.csv"
            io.write_csv(out / name, c.rows, f"diagnostics of certificate {c.name}")
            c.artifacts.append(name)
    return _finish(res, cfg)


def flow_invariance_certificate(model: TimeTMap, pair, t, Rt, tol: float = 1e-7, n: int = 16):
    """``|S_t(W(theta, s)) - W(theta + t omega, P_t(theta, s))|`` on samples."""
    field_ = model.field
    p_t = with_map(pair, Rt, np.asarray(pair.omega) / model.t * t)
    th, ss = V._samples(p_t, n, (1e-2, 5e-2))
    lhs = integrate_flow(field_, p_t.evaluate(th, ss), t, model.h)
    rhs = p_t.evaluate(th + p_t.omega, p_t.evaluate_P(th, ss))
    d = float(np.max(np.abs(lhs - rhs)))
    return V._cert(f"flow_invariance_t{t}", V.digest(pair.Wp, Rt), {"sup_residual": d}, {"tol": tol}, d < tol)


def _finish(res: RunResult, cfg: RunConfig) -> RunResult:
    io.write_json(res.out / "certificates.json", io.certificates_to_dict(res.certificates))
    (res.out / "report.md").write_text(render_report(res, cfg))
    return res


STEP_TEXT = {
    "gamma_axioms": "decay function: sum_j Gamma(j) <= 1 and sum_k Gamma(i-k)Gamma(k-j) <= Gamma(i-j)",
    "torus_residual": "invariant torus: F(K(theta)) = K(theta + omega)",
    "vector_field_identity": "flow torus: X(K(theta)) = DK(theta) omega",
    "splitting": "invariant splitting: A(theta) V(theta) = V(theta + omega) Lambda(theta), projections complementary",
    "rates": "rates: mu1 mu3 < 1 and mu2 mu3 < 1",
    "nonresonance": "non-resonance: mu1^i < 1/mu3 for 2 <= i <= L",
    "invariance": "stable manifold: F(W(theta, s)) = W(theta + omega, P(theta, s))",
    "graph_property": "graph property: W is a graph over the stable bundle near the torus",
    "uniqueness_normalization": "normalization: W(theta, 0) = K, D_s W = V^s, stable parts of orders 2..L vanish",
    "localization": "localization: sup_i norm(W_i) / min_k Gamma(i - c_k) finite without edge growth",
    "rates_and_orbits": "fibers: d(F^n(W(theta, s)), K(theta + n omega)) <= C mu^n",
    "unstable_invariance": "unstable manifold: stable manifold of the inverse map",
    "unstable_rates_and_orbits": "unstable fibers under the inverse map",
}


def render_report(res: RunResult, cfg: RunConfig) -> str:
    lines = [f"# Run report ({cfg.model})", "",
             f"Box radius R={cfg.R}, lattice dimension N={cfg.N}, epsilon={cfg.epsilon!r}, "
             f"N_theta={cfg.N_theta}, L={cfg.L}, L_max={cfg.L_max_eff}, style={cfg.style}.", "",
             f"Last stage reached: {res.stage}.", "",
             "| certificate | verdict | statement |", "|---|---|---|"]
    for c in sorted(res.certificates, key=lambda c: c.name):
        text = STEP_TEXT.get(c.name, "flow: S_t(W(theta, s)) = W(theta + t omega, P_t(theta, s))"
                             if c.name.startswith("flow_") else "")
        lines.append(f"| {c.name} | {c.verdict} | {text} |")
    lines.append("")
    return "\n".join(lines)
