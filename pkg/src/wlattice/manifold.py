"""Parameterization method for stable manifolds of whiskered tori.

Unknowns are ``W(theta, s)`` and ``P(theta, s)`` with
``F(W(theta, s)) = W(theta + omega, P(theta, s))``.  Both are stored as
Taylor coefficients in ``s`` (graded monomials of a :class:`TaylorAlgebra`)
whose entries are grid values in ``theta``:

* ``Wp``: shape ``(n_mono, n_grid, n_sites, b)``, periodic part of ``W``;
  the integer lift of the rotating angles is added back on evaluation;
* ``P``: shape ``(n_mono, n_grid, d_s)``, in stable frame coordinates.

Order ``i`` is solved in frame coordinates at ``theta + omega``.  Writing
``S_i(theta)`` for the substitution ``w -> w o P_1(theta)`` on degree ``i``
polynomials, the equation reads

    Lam(theta) w(theta) - w(theta + omega) S_i(theta) - (P_i, 0, 0) = -rho(theta)

with ``rho = V(theta + omega)^{-1} r_i``; it is solved by the forward
fixed-point iterations that the spectral gap makes contracting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
import logging

import numpy as np

from .errors import (BallEscape, ContractionFailure, NoConvergence, SeriesDiverging,
                     SingularFactor, TruncationOverflow)
from .fourier import ThetaGrid, as_points
from .jets import Jet, TaylorAlgebra, algebra, substitution_matrices

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# coefficient helpers


def shift_coeffs(grid: ThetaGrid, c: np.ndarray, t) -> np.ndarray:
    """Shift theta-grid values stored in axis 1 of a coefficient array."""
    if grid.D == 0:
        return c.copy()
    return np.moveaxis(grid.shift(np.moveaxis(c, 1, 0), t), 0, 1)


def falling(n: int, k: int) -> int:
    return factorial(n) // factorial(n - k) if n >= k else 0


def omega_norm(c: np.ndarray, alg: TaylorAlgebra, grid: ThetaGrid, k_max: int,
               weights=None, rho: float = 0.0) -> float:
    """Surrogate of ``max_{k <= k_max} sup ||D^k_s H||`` on the unit ball.

    Uses ``sum_alpha |alpha|_(k) |h_alpha|`` with weighted l1 Fourier sums in
    theta and, when ``weights`` are given, per-site localization weights.
    ``c`` has shape ``(n_mono, n_grid, n_sites[, b])``.
    """
    a = grid.analytic_norm(np.moveaxis(c, 1, 0), rho)  # (n_mono, sites, ...)
    a = a.reshape(a.shape[0], a.shape[1], -1).max(axis=-1) if a.ndim > 2 else a.reshape(a.shape[0], -1)
    if weights is not None:
        a = a * np.asarray(weights)[None]
    deg = alg.degree
    best = 0.0
    for k in range(min(k_max, alg.order) + 1):
        ff = np.array([falling(int(d), k) for d in deg], dtype=float)
        best = max(best, float(np.max(ff @ a)))
    return best


def rescale(c: np.ndarray, alg: TaylorAlgebra, delta: float) -> np.ndarray:
    """``G^delta(theta, s) = delta^{-1} G(theta, delta s)`` for the nonconstant part.

    The order-k coefficient is multiplied by ``delta^(k-1)`` (k >= 1); the
    constant term (the torus) is left alone.
    """
    fac = np.where(alg.degree >= 1, float(delta) ** (alg.degree - 1.0), 1.0)
    return c * fac.reshape((-1,) + (1,) * (c.ndim - 1))


def nonlinear_part(c: np.ndarray, alg: TaylorAlgebra) -> np.ndarray:
    """``N = G - G(theta, 0) - D_s G(theta, 0) s``."""
    out = c.copy()
    out[alg.degree <= 1] = 0.0
    return out


def derivative_norms(c: np.ndarray, alg: TaylorAlgebra, grid: ThetaGrid, k_max: int) -> list:
    """``sup ||D^k_s G||`` surrogates on the unit ball for ``k = 0..k_max``."""
    a = grid.analytic_norm(np.moveaxis(c, 1, 0))
    a = a.reshape(a.shape[0], -1)
    out = []
    for k in range(k_max + 1):
        ff = np.array([falling(int(d), k) for d in alg.degree], dtype=float)
        out.append(float(np.max(ff @ a)))
    return out


def quadratic_reparam(alg: TaylorAlgebra, coef: float) -> dict:
    """Stable-coordinate prescription for ``Q(s) = s + coef * s*s`` (componentwise)."""
    sl = alg.degree_slice(2)
    ds = alg.nvars
    q = np.zeros((sl.stop - sl.start, ds))
    for j in range(ds):
        e = [0] * ds
        e[j] = 2
        q[alg.index[tuple(e)] - sl.start, j] = coef
    return {2: q}


# ---------------------------------------------------------------------------
# the pair


@dataclass
class ManifoldPair:
    grid: ThetaGrid
    omega: np.ndarray
    alg: TaylorAlgebra
    Wp: np.ndarray
    P: np.ndarray
    lift: np.ndarray
    V: np.ndarray  # ambient frames (n_grid, N, N) from the splitting
    Vinv: np.ndarray
    dims: tuple
    L: int
    style: str = "polynomial_P"
    solved: int = 1
    info: dict = field(default_factory=dict)

    @property
    def d_s(self):
        return self.alg.nvars

    @property
    def state_shape(self):
        return self.Wp.shape[2:]

    def copy(self):
        return ManifoldPair(self.grid, self.omega, self.alg, self.Wp.copy(), self.P.copy(), self.lift,
                            self.V, self.Vinv, self.dims, self.L, self.style, self.solved, dict(self.info))

    def lift_values(self, theta):
        theta = as_points(theta, self.grid.D)
        return np.einsum("sbd,nd->nsb", self.lift, theta)

    def truncated(self, degree: int) -> "ManifoldPair":
        out = self.copy()
        out.Wp[self.alg.degree > degree] = 0.0
        out.P[self.alg.degree > degree] = 0.0
        out.solved = min(self.solved, degree)
        return out

    # -- jets -----------------------------------------------------------------
    def W_jet(self, upto=None) -> Jet:
        c = self.Wp.copy()
        c[0] = c[0] + self.lift_values(self.grid.nodes)
        if upto is not None:
            c[self.alg.degree > upto] = 0.0
        return Jet(self.alg, c)

    def W_shift_jet(self, t, upto=None) -> Jet:
        c = shift_coeffs(self.grid, self.Wp, t)
        c[0] = c[0] + self.lift_values(self.grid.nodes + np.asarray(t))
        if upto is not None:
            c[self.alg.degree > upto] = 0.0
        return Jet(self.alg, c)

    def P_jet(self, upto=None) -> Jet:
        c = self.P.copy()
        if upto is not None:
            c[self.alg.degree > upto] = 0.0
        return Jet(self.alg, c)

    def compose_shifted(self, t, R: Jet, upto=None) -> Jet:
        """``W(theta + t, R(theta, s))`` as a jet."""
        Wsh = self.W_shift_jet(t, upto)
        n = self.grid.n
        subs = [R[:, j].reshape(n, 1, 1) for j in range(self.d_s)]
        return Wsh.compose(subs)

    def frames_at(self, t):
        return self.grid.shift(self.V, t), self.grid.shift(self.Vinv, t)

    # -- pointwise evaluation -------------------------------------------------
    def coeffs_at(self, arr, theta):
        theta = as_points(theta, self.grid.D)
        return self.grid.evaluate(np.moveaxis(arr, 1, 0), theta)  # (k, n_mono, ...)

    def evaluate(self, theta, s) -> np.ndarray:
        theta = as_points(theta, self.grid.D)
        s = np.asarray(s, float).reshape(theta.shape[0], self.d_s)
        cw = self.coeffs_at(self.Wp, theta)
        mono = self.alg.monomial_values(s)  # (n_mono, k)
        return np.einsum("kmsb,mk->ksb", cw, mono) + self.lift_values(theta)

    def jacobian_s(self, theta, s) -> np.ndarray:
        """``D_s W(theta, s)``, shape ``(k, n_state, d_s)``."""
        theta = as_points(theta, self.grid.D)
        s = np.asarray(s, float).reshape(theta.shape[0], self.d_s)
        cw = self.coeffs_at(self.Wp, theta).reshape(theta.shape[0], self.alg.size, -1)
        ex = self.alg.exponents
        cols = []
        for j in range(self.d_s):
            red = ex.copy()
            red[:, j] = np.maximum(red[:, j] - 1, 0)
            mono = np.prod(s[None, :, :] ** red[:, None, :], axis=-1) * ex[:, j][:, None]
            cols.append(np.einsum("kmn,mk->kn", cw, mono))
        return np.stack(cols, axis=-1)

    def evaluate_P(self, theta, s) -> np.ndarray:
        theta = as_points(theta, self.grid.D)
        s = np.asarray(s, float).reshape(theta.shape[0], self.d_s)
        cp = self.coeffs_at(self.P, theta)
        mono = self.alg.monomial_values(s)
        return np.einsum("kmj,mk->kj", cp, mono)


# ---------------------------------------------------------------------------
# order 0 and 1


def init_orders(K, spl, L: int, L_max: int | None = None, style: str = "polynomial_P") -> ManifoldPair:
    """``W_0 = K``, ``P_0 = 0``, ``W_1 = V^s`` and ``P_1 = A^s`` (frame coordinates)."""
    if style not in ("polynomial_P", "linear_P"):
        raise ValueError(f"unknown style {style!r}")
    L_max = 2 * L if L_max is None else L_max
    if L_max < L:
        raise TruncationOverflow("L_max must be at least L")
    ds = spl.dims[0]
    alg = algebra(ds, L_max)
    n = K.grid.n
    shape = K.periodic.shape[1:]
    Wp = np.zeros((alg.size, n) + shape)
    P = np.zeros((alg.size, n, ds))
    Wp[0] = K.periodic
    Vs = spl.frame("s")
    Lss = spl.reduced("s")
    for j in range(ds):
        idx = alg.linear_index(j)
        Wp[idx] = Vs[:, :, j].reshape((n,) + shape)
        P[idx] = Lss[:, :, j]
    return ManifoldPair(K.grid, np.asarray(K.omega, float), alg, Wp, P, K.lift, spl.V, spl.Vinv,
                        spl.dims, L, style, 1, {"Lam": spl.Lam})


def invariance_jet(model, pair: ManifoldPair, upto=None) -> Jet:
    """Jet of ``F o W - W o (T_omega, P)`` (ambient coordinates)."""
    Y = model(pair.W_jet(upto))
    Z = pair.compose_shifted(pair.omega, pair.P_jet(upto), upto)
    return Y - Z


def rhs_r_i(model, pair: ManifoldPair, i: int) -> np.ndarray:
    """Order-``i`` coefficients of ``F o W^{<i} - W^{<i} o (T_omega, P^{<i})``."""
    if i > pair.alg.order:
        raise TruncationOverflow(f"order {i} exceeds L_max = {pair.alg.order}")
    R = invariance_jet(model, pair, upto=i - 1)
    return R.c[pair.alg.degree_slice(i)]


def localized_norm_of(c: np.ndarray, weights) -> float:
    """``sup_i w_i |c_i|`` over sites of a coefficient array ``(..., n_grid, n_sites, b)``."""
    a = np.abs(c).max(axis=-1)
    a = a.reshape(-1, a.shape[-1]).max(axis=0)
    return float(np.max(a * weights))


# ---------------------------------------------------------------------------
# order i


def solve_projected_order(pair: ManifoldPair, i: int, r_i: np.ndarray, style: str | None = None,
                          q=None, tol: float = 1e-10, max_iter: int = 2000, full: bool = False):
    """Solve order ``i`` in frame coordinates; returns ``(W_i, P_i, report)``.

    ``full`` solves the whole equation with ``P_i = 0`` (orders above L).
    ``q`` prescribes the stable coordinates of ``W_i`` in the polynomial
    style (default zero, the normalization ``Pi^s W_i = 0``).
    """
    style = pair.style if style is None else style
    grid, alg = pair.grid, pair.alg
    n = grid.n
    ds, dc, du = pair.dims
    N = ds + dc + du
    sl = alg.degree_slice(i)
    ni = sl.stop - sl.start
    Lam = pair.info["Lam"]
    _, Vinv_sh = pair.frames_at(pair.omega)
    rho = np.einsum("gab,igb->iga", Vinv_sh, r_i.reshape(ni, n, N))
    # P_1 as a matrix per node: lin_mat[g, a, j] = coefficient of s_j in P_a
    lin_mat = np.moveaxis(pair.P[[alg.linear_index(j) for j in range(ds)]], 0, -1)
    S = substitution_matrices(alg, i, lin_mat)  # (n, ni, ni)
    Ss, Scu = slice(0, ds), slice(ds, N)
    Lcc_inv = np.linalg.inv(Lam[:, Scu, Scu]) if N > ds else np.zeros((n, 0, 0))
    Lss = Lam[:, Ss, Ss]
    Lss_inv = np.linalg.inv(Lss)
    w = np.zeros((ni, n, N))
    if q is not None and i in q and style == "polynomial_P" and not full:
        w[:, :, Ss] = np.asarray(q[i])[:, None, :]
    solve_s = full or style == "linear_P"
    scale = max(1.0, float(np.max(np.abs(rho))))
    hist = []
    for it in range(1, max_iter + 1):
        T = np.einsum("gab,agk->bgk", S, shift_coeffs(grid, w, pair.omega))
        w_new = w.copy()
        cu_rhs = T[:, :, Scu] - rho[:, :, Scu] - np.einsum("gks,igs->igk", Lam[:, Scu, Ss], w[:, :, Ss])
        w_new[:, :, Scu] = np.einsum("gkl,igl->igk", Lcc_inv, cu_rhs)
        if solve_s:
            s_rhs = T[:, :, Ss] - rho[:, :, Ss] - np.einsum("gsk,igk->igs", Lam[:, Ss, Scu], w_new[:, :, Scu])
            w_new[:, :, Ss] = np.einsum("gab,igb->iga", Lss_inv, s_rhs)
        inc = float(np.max(np.abs(w_new - w), initial=0.0))
        hist.append(inc)
        w = w_new
        if inc <= 1e-3 * tol * scale or inc == 0.0:
            break
        if it > 20 and inc > hist[-10]:
            raise NoConvergence(f"order {i} iteration not contracting (ratio {inc / hist[-2]:.3g})", it, hist)
    else:
        raise NoConvergence(f"order {i} iteration did not converge", max_iter, hist)
    T = np.einsum("gab,agk->bgk", S, shift_coeffs(grid, w, pair.omega))
    Lw = np.einsum("gkl,igl->igk", Lam, w)
    if solve_s:
        P_i = np.zeros((ni, n, ds))
    else:
        P_i = Lw[:, :, Ss] - T[:, :, Ss] + rho[:, :, Ss]
    resid = Lw - T + rho
    resid[:, :, Ss] -= P_i
    ratio = hist[-1] / hist[-2] if len(hist) > 1 and hist[-2] > 0 else 0.0
    W_i = np.einsum("gkl,igl->igk", pair.V, w).reshape((ni, n) + pair.state_shape)
    report = {"iterations": it, "contraction": ratio, "projected_residual": float(np.max(np.abs(resid), initial=0.0))}
    return W_i, P_i, report


def solve_manifold(model, K, spl, L: int, L_max: int | None = None, style: str = "polynomial_P",
                   tail: str = "taylor_extend", q=None, tol_order: float = 1e-10,
                   weights=None) -> ManifoldPair:
    """Order matching up to ``L``; then the tail by ``taylor_extend`` or ``contraction``."""
    pair = init_orders(K, spl, L, L_max, style)
    pair.info["orders"] = {}
    for i in range(2, L + 1):
        pair = _solve_order(model, pair, i, style, q, tol_order, full=False, weights=weights)
    if tail == "taylor_extend":
        for i in range(L + 1, pair.alg.order + 1):
            pair = _solve_order(model, pair, i, style, None, tol_order, full=True, weights=weights)
    elif tail == "contraction":
        pair = solve_tail(model, pair, mode="contraction")
    elif tail != "none":
        raise ValueError(f"unknown tail mode {tail!r}")
    return pair


def _solve_order(model, pair, i, style, q, tol, full, weights=None):
    r = rhs_r_i(model, pair, i)
    W_i, P_i, rep = solve_projected_order(pair, i, r, style, q, tol, full=full)
    if weights is not None:
        rep["r_localized_norm"] = localized_norm_of(r, weights)
    sl = pair.alg.degree_slice(i)
    pair.Wp[sl] = W_i
    pair.P[sl] = P_i
    pair.solved = i
    pair.info.setdefault("orders", {})[i] = rep
    return pair


# ---------------------------------------------------------------------------
# tail: S^{-1} and the contraction


def apply_S_inverse(eta: Jet, Ainv: np.ndarray, P: Jet, grid: ThetaGrid, omega, k_max: int,
                    tol: float = 1e-15, max_terms: int = 200, margin: float = 1e-3,
                    weights=None):
    """Solve ``A(theta) H(theta, s) - H(theta + omega, P(theta, s)) = eta``.

    Uses ``H = sum_j term_j`` with ``term_0 = A^{-1} eta`` and
    ``term_{j+1}(theta, s) = A(theta)^{-1} term_j(theta + omega, P(theta, s))``.
    ``eta`` has value shape ``(n_grid, N)``; ``Ainv`` shape ``(n_grid, N, N)``;
    ``P`` value shape ``(n_grid, d_s)``.  Returns ``(H, report)``.
    """
    alg = eta.alg
    n = grid.n
    subs = [P[:, j].reshape(n, 1) for j in range(alg.nvars)]

    def Ainv_apply(c):
        return np.einsum("gab,mgb->mga", Ainv, c)

    term = Jet(alg, Ainv_apply(eta.c))
    H = term.copy()
    norms = [omega_norm(term.c, alg, grid, k_max, weights)]
    up = 0
    for j in range(1, max_terms + 1):
        if norms[-1] < tol:
            break
        shifted = Jet(alg, shift_coeffs(grid, term.c, omega))
        term = Jet(alg, Ainv_apply(shifted.compose(subs).c))
        H = H + term
        norms.append(omega_norm(term.c, alg, grid, k_max, weights))
        if norms[-2] > 0 and norms[-1] / norms[-2] > 1 - margin:
            up += 1
            if up >= 3:
                raise SeriesDiverging(f"term ratio {norms[-1] / norms[-2]:.3g} for three terms")
        else:
            up = 0
    ratios = [b / a for a, b in zip(norms[:-1], norms[1:]) if a > 0]
    q = max(ratios) if ratios else 0.0
    return H, {"terms": len(norms), "term_norms": norms, "ratio": q}


class TailMap:
    """The scaled map ``T(H) = S^{-1} eta(H)`` on tails of degree ``> L``.

    In scaled variables ``U^delta`` (order-k coefficients times ``delta^(k-1)``),
    ``F^delta_theta(u) = delta^{-1} [F(K(theta) + delta u) - F(K(theta))]`` and
    ``eta(H) = -F^delta(U^{<=L} + H) + A H + U^{<=L}(theta + omega, P^delta)``.
    """

    def __init__(self, model, pair: ManifoldPair, delta: float = 1.0):
        self.model, self.pair, self.delta = model, pair, float(delta)
        alg, grid = pair.alg, pair.grid
        self.alg, self.grid = alg, grid
        L = pair.L
        U = pair.Wp.copy()
        U[0] = 0.0
        U[alg.degree > L] = 0.0
        self.U_low = rescale(U, alg, delta)
        Pc = pair.P.copy()
        Pc[alg.degree > L] = 0.0
        self.P_delta = Jet(alg, rescale(Pc, alg, delta))
        K_vals = pair.W_jet(0).value
        self.K_vals = K_vals
        self.FK = model(K_vals)
        n = grid.n
        N = int(np.prod(pair.state_shape))
        A = model.differential(K_vals)
        self.A = A
        self.Ainv = np.linalg.inv(A)
        self.N = N
        subs = [self.P_delta[:, j].reshape(n, 1, 1) for j in range(alg.nvars)]
        Ush = Jet(alg, shift_coeffs(grid, self.U_low, pair.omega))
        self.U_low_shift = Ush.compose(subs).c

    def eta(self, H: np.ndarray) -> np.ndarray:
        alg, d = self.alg, self.delta
        U = Jet(alg, self.U_low + H)
        Fv = self.model(U * d + self.K_vals)
        Fd = (Fv - self.FK) * (1.0 / d)
        n = self.grid.n
        AH = np.einsum("gab,mgb->mga", self.A, H.reshape(alg.size, n, self.N)).reshape(H.shape)
        out = -Fd.c + AH + self.U_low_shift
        out[alg.degree <= self.pair.L] = 0.0
        return out

    def __call__(self, H: np.ndarray, weights=None) -> tuple:
        e = self.eta(H)
        n = self.grid.n
        shape = e.shape
        ej = Jet(self.alg, e.reshape(self.alg.size, n, self.N))
        Hn, rep = apply_S_inverse(ej, self.Ainv, self.P_delta, self.grid, self.pair.omega,
                                  self.pair.L + 1, weights=weights)
        out = Hn.c.reshape(shape)
        out[self.alg.degree <= self.pair.L] = 0.0
        return out, rep

    def norm(self, H, weights=None) -> float:
        return omega_norm(H, self.alg, self.grid, self.pair.L + 1, weights)

    def lipschitz(self, n_probes: int = 3, radius: float = 1e-3, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        shape = self.pair.Wp.shape
        mask = (self.alg.degree > self.pair.L).reshape((-1,) + (1,) * (len(shape) - 1))
        worst = 0.0
        for _ in range(n_probes):
            H1 = rng.standard_normal(shape) * mask
            H2 = rng.standard_normal(shape) * mask
            H1 *= radius / max(self.norm(H1), 1e-300)
            H2 *= radius / max(self.norm(H2), 1e-300)
            T1, _ = self(H1)
            T2, _ = self(H2)
            den = self.norm(H1 - H2)
            if den > 0:
                worst = max(worst, self.norm(T1 - T2) / den)
        return worst


def choose_delta(model, pair: ManifoldPair, target: float = 0.5, n_halvings: int = 30, rho2: float = 1.0):
    """Largest ``delta`` in ``{1, 1/2, 1/4, ...}`` with a certified contraction.

    Requires a measured Lipschitz constant below ``target`` and the ball
    condition ``|T(0)| <= (1 - Lip) rho2 / 3``.
    """
    delta = 1.0
    history = []
    for _ in range(n_halvings):
        T = TailMap(model, pair, delta)
        lip = T.lipschitz()
        T0 = T.norm(T(np.zeros_like(pair.Wp))[0]) if lip < target else np.inf
        history.append((delta, lip, T0))
        if lip < target and T0 <= (1 - lip) * rho2 / 3.0:
            return delta, lip, history
        delta *= 0.5
    raise ContractionFailure(history[-1][1])


def solve_tail(model, pair: ManifoldPair, mode: str = "contraction", tol_tail: float = 1e-13,
               max_iter: int = 200, H0=None, delta=None, rho2: float = 1.0) -> ManifoldPair:
    """Degrees ``L+1..L_max`` of ``W``: order matching or the scaled contraction."""
    if mode == "taylor_extend":
        out = pair.copy()
        for i in range(pair.L + 1, pair.alg.order + 1):
            out = _solve_order(model, out, i, out.style, None, 1e-10, full=True)
        return out
    if mode != "contraction":
        raise ValueError(f"unknown tail mode {mode!r}")
    alg = pair.alg
    if delta is None:
        delta, lip, hist = choose_delta(model, pair, rho2=rho2)
    else:
        lip, hist = TailMap(model, pair, delta).lipschitz(), []
    T = TailMap(model, pair, delta)
    if lip >= 1:
        raise ContractionFailure(lip)
    T0, _ = T(np.zeros_like(pair.Wp))
    ball = rho2 / 3.0
    if T.norm(T0) > (1 - lip) * ball:
        raise BallEscape(f"T(0) has norm {T.norm(T0):.3e} beyond {(1 - lip) * ball:.3e}")
    H = np.zeros_like(pair.Wp) if H0 is None else rescale(np.asarray(H0, float), alg, delta)
    incs = []
    for it in range(1, max_iter + 1):
        Hn, rep = T(H)
        inc = T.norm(Hn - H)
        incs.append(inc)
        H = Hn
        if inc < tol_tail:
            break
    else:
        raise NoConvergence("tail contraction did not converge", max_iter, incs)
    out = pair.copy()
    tail = rescale(H, alg, 1.0 / delta)
    hi = alg.degree > pair.L
    out.Wp[hi] = tail[hi]
    out.P[hi] = 0.0
    out.solved = alg.order
    out.info["tail"] = {"delta": delta, "lipschitz": lip, "iterations": it, "increments": incs,
                        "ball_radius": ball, "T0_norm": T.norm(T0), "delta_history": hist}
    return out


# ---------------------------------------------------------------------------
# F^n reduction and flows


def derive_root_map_P(pair: ManifoldPair, G, t_shift, cond_max: float = 1e12):
    """``R`` with ``G(W(theta, s)) = W(theta + t_shift, R(theta, s))``, order by order.

    ``pair`` solves the invariance problem for some power (or time) of ``G``.
    Returns ``(R coefficients, report)``; ``report['cu_defect']`` measures how
    far the image leaves the manifold jet.
    """
    alg, grid = pair.alg, pair.grid
    n = grid.n
    ds = pair.d_s
    N = int(np.prod(pair.state_shape))
    Y = G(pair.W_jet()).c.reshape(alg.size, n, N)
    _, Vinv_sh = pair.frames_at(t_shift)
    R = np.zeros((alg.size, n, ds))
    sl1 = alg.degree_slice(1)
    coords1 = np.einsum("gab,mgb->mga", Vinv_sh, Y[sl1])
    R[sl1] = coords1[:, :, :ds]
    lin = np.moveaxis(R[[alg.linear_index(j) for j in range(ds)]], 0, -1)
    c = np.linalg.cond(lin)
    if not np.all(np.isfinite(c)) or np.max(c) > cond_max:
        raise SingularFactor(f"stable block of G is numerically singular (cond {np.max(c):.2e})")
    cu_defect = float(np.max(np.abs(coords1[:, :, ds:]), initial=0.0))
    for i in range(2, alg.order + 1):
        Z = pair.compose_shifted(t_shift, Jet(alg, R)).c.reshape(alg.size, n, N)
        sl = alg.degree_slice(i)
        coords = np.einsum("gab,mgb->mga", Vinv_sh, Y[sl] - Z[sl])
        R[sl] = coords[:, :, :ds]
        cu_defect = max(cu_defect, float(np.max(np.abs(coords[:, :, ds:]), initial=0.0)))
    return R, {"cu_defect": cu_defect}


def compose_root_map(R: np.ndarray, alg: TaylorAlgebra, grid: ThetaGrid, t, n_fold: int) -> np.ndarray:
    """``R(theta + (n-1)t, .) o ... o R(theta, .)`` as coefficients."""
    n = grid.n
    cur = Jet(alg, R.copy())
    for j in range(1, n_fold):
        Rj = Jet(alg, shift_coeffs(grid, R, np.asarray(t) * j))
        subs = [cur[:, k].reshape(n, 1) for k in range(alg.nvars)]
        cur = Rj.compose(subs)
    return cur.c


def flow_pair_from_map(pair: ManifoldPair, R: np.ndarray) -> ManifoldPair:
    out = pair.copy()
    out.P = R.copy()
    return out


def vector_field_defect(field, K) -> float:
    """``max |X(K(theta)) - DK(theta) omega|`` on the grid (spectral derivative)."""
    grid = K.grid
    X = field(K.values())
    if grid.D == 0:
        return float(np.max(np.abs(X)))
    c = grid.fft(K.periodic)
    fac = (2j * np.pi * grid.modes @ np.asarray(K.omega)).reshape((-1,) + (1,) * (c.ndim - 1))
    dK = grid.ifft(c * fac) + np.einsum("sbd,d->sb", K.lift, K.omega)[None]
    return float(np.max(np.abs(X - dK)))


def solve_flow_manifold(field, K, t0: float, t_list, h: float, L: int, L_max: int | None = None,
                        style: str = "polynomial_P", splitting_fn=None):
    """Manifold of the time-``t0`` map and reduced maps ``P(t)`` for each ``t``.

    ``K`` is an invariant torus of the flow with frequency ``field.omega``.
    Returns ``(pair, {t: R_t coefficients}, report)``.
    """
    from .models import TimeTMap
    from .splitting import compute_splitting
    from .torus import TorusEmbedding

    Fm = TimeTMap(field, t0, h)
    Km = TorusEmbedding(K.grid, np.asarray(K.omega) * t0, K.periodic, K.lift, K.rho)
    spl = (splitting_fn or compute_splitting)(Fm, Km)
    pair = solve_manifold(Fm, Km, spl, L, L_max, style)
    maps, report = {}, {"vector_field_defect": vector_field_defect(field, K), "t0": t0, "h": h}
    for t in t_list:
        R, rep = derive_root_map_P(pair, Fm.with_time(t), np.asarray(K.omega) * t)
        maps[float(t)] = R
        report[f"cu_defect_t{t}"] = rep["cu_defect"]
    return pair, maps, report


def with_map(pair: ManifoldPair, R: np.ndarray, omega) -> ManifoldPair:
    """Same ``W`` with reduced map ``R`` over the rotation ``omega``."""
    out = pair.copy()
    out.P = np.asarray(R, float).copy()
    out.omega = np.asarray(omega, float)
    return out


# ---------------------------------------------------------------------------
# residuals


def pointwise_residual(model, pair: ManifoldPair, theta, s) -> np.ndarray:
    """``|F(W(theta, s)) - W(theta + omega, P(theta, s))|_inf`` per sample."""
    lhs = model(pair.evaluate(theta, s))
    rhs = pair.evaluate(np.asarray(theta) + pair.omega, pair.evaluate_P(theta, s))
    d = np.abs(lhs - rhs)
    return d.reshape(d.shape[0], -1).max(axis=1)


def truncation_residual(model, pair: ManifoldPair, theta, s, degree: int | None = None) -> np.ndarray:
    """Residual of the Taylor-only pair ``W^{<=L}, P^{<=L}`` at the samples.

    Computed from the jet of ``F o W^{<=L} - W^{<=L} o (T_omega, P^{<=L})``
    in the order-``L_max`` algebra: the degrees ``<= L`` vanish to round-off
    and are dropped, the remaining homogeneous parts are evaluated exactly
    as a polynomial, which avoids cancellation at tiny ``|s|``.
    """
    L = pair.L if degree is None else degree
    low = pair.truncated(L)
    E = invariance_jet(model, low)
    c = E.c.copy()
    c[pair.alg.degree <= L] = 0.0
    tmp = low.copy()
    tmp.Wp = c
    tmp.lift = np.zeros_like(pair.lift)
    vals = tmp.evaluate(theta, s)
    return np.abs(vals).reshape(vals.shape[0], -1).max(axis=1)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x)), np.log(np.asarray(y)), 1)[0])
