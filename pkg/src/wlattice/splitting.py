"""Invariant splittings over a torus, hyperbolicity rates and transfer operators.

Everything is expressed in the reference basis ``B0`` supplied by the model
(eigenbasis of the uncoupled linearization), reordered as ``(s, c, u)``.  The
four bundles are computed as graphs over blocks of that basis:

* stable ``E^s``: graph of ``h`` over ``s`` into ``(c, u)``, backward transform;
* unstable ``E^u``: graph of ``g`` over ``u`` into ``(s, c)``, forward transform;
* center-stable ``E^s + E^c``: graph of ``k`` over ``(s, c)`` into ``u``;
* center-unstable ``E^c + E^u``: graph of ``m`` over ``(c, u)`` into ``s``;

and ``E^c`` is their intersection.  Frames are graph normalized (the identity
on their own block), which keeps them smooth in theta.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import RateCertificationFailed, ResonanceDetected, SplittingDivergence
from .fourier import ThetaGrid
from .jets import algebra, substitution_matrices

log = logging.getLogger(__name__)


def _inv(M):
    if M.shape[-1] == 0:
        return M.copy()
    return np.linalg.inv(M)


def _solve_right(X, M):
    """``X @ inv(M)`` batched."""
    if M.shape[-1] == 0:
        return X.copy()
    return np.swapaxes(np.linalg.solve(np.swapaxes(M, -1, -2), np.swapaxes(X, -1, -2)), -1, -2)


@dataclass
class Rates:
    mu1: float
    mu2: float
    mu3: float
    C_h: float
    mu_s_min: float
    series: dict = field(default_factory=dict)

    def as_dict(self):
        return {"mu1": self.mu1, "mu2": self.mu2, "mu3": self.mu3, "C_h": self.C_h,
                "mu_s_min": self.mu_s_min}


@dataclass
class Splitting:
    grid: ThetaGrid
    omega: np.ndarray
    A: np.ndarray  # (n, N, N) ambient differential on the grid
    basis: np.ndarray  # B0 with columns ordered (s, c, u)
    dims: tuple  # (d_s, d_c, d_u)
    V: np.ndarray  # (n, N, N) ambient frames [V^s V^c V^u]
    Vinv: np.ndarray
    Lam: np.ndarray  # (n, N, N) reduced cocycle V(theta+omega)^{-1} A V(theta)
    iterations: int = 0
    rates: Rates | None = None

    # -- slices ---------------------------------------------------------------
    def _sl(self, sigma):
        ds, dc, du = self.dims
        return {"s": slice(0, ds), "c": slice(ds, ds + dc), "u": slice(ds + dc, ds + dc + du),
                "cu": slice(ds, ds + dc + du), "sc": slice(0, ds + dc)}[sigma]

    def frame(self, sigma) -> np.ndarray:
        return self.V[:, :, self._sl(sigma)]

    def coords(self, sigma) -> np.ndarray:
        """Rows of ``V^{-1}`` giving the ``sigma`` coordinates."""
        return self.Vinv[:, self._sl(sigma), :]

    def projection(self, sigma) -> np.ndarray:
        return self.frame(sigma) @ self.coords(sigma)

    def reduced(self, sigma, tau=None) -> np.ndarray:
        tau = sigma if tau is None else tau
        return self.Lam[:, self._sl(sigma), self._sl(tau)]

    def shifted(self, arr, t=None):
        t = self.omega if t is None else t
        return self.grid.shift(arr, t)

    # -- certificates -----------------------------------------------------------
    def equivariance_defect(self) -> float:
        """``max ||A V^sigma - V^sigma(theta+omega) G^sigma||`` over bundles and nodes."""
        Vsh = self.shifted(self.V)
        worst = 0.0
        for sig in "scu":
            sl = self._sl(sig)
            lhs = self.A @ self.V[:, :, sl]
            rhs = Vsh[:, :, sl] @ self.Lam[:, sl, sl]
            if lhs.size:
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        return worst

    def projection_defects(self) -> dict:
        P = {s: self.projection(s) for s in "scu"}
        eye = np.eye(self.A.shape[-1])
        out = {"sum": float(np.max(np.abs(P["s"] + P["c"] + P["u"] - eye)))}
        out["idempotent"] = max(float(np.max(np.abs(P[s] @ P[s] - P[s]), initial=0.0)) for s in "scu")
        out["orthogonal"] = max(float(np.max(np.abs(P[a] @ P[b]), initial=0.0))
                                for a in "scu" for b in "scu" if a != b)
        return out

    def offdiagonal(self) -> float:
        ds, dc, du = self.dims
        L = self.Lam.copy()
        for sig in "scu":
            sl = self._sl(sig)
            L[:, sl, sl] = 0.0
        return float(np.max(np.abs(L), initial=0.0))


def compute_splitting(model, K, tol: float = 1e-14, max_iter: int = 2000,
                      gap_floor: float = 1e-3) -> Splitting:
    """Invariant splitting along the torus ``K`` by bundle graph transforms."""
    grid = K.grid
    omega = K.omega
    A = model.differential(K.values())
    n_g, N = A.shape[0], A.shape[-1]
    B0, s_idx, c_idx, u_idx = model.reference_basis()
    perm = np.concatenate([s_idx, c_idx, u_idx]).astype(int)
    B = B0[:, perm]
    ds, dc, du = len(s_idx), len(c_idx), len(u_idx)
    Ar = np.linalg.solve(B[None], A @ B[None])
    S, C, U = slice(0, ds), slice(ds, ds + dc), slice(ds + dc, N)
    X = slice(ds, N)  # c + u
    Y = slice(0, ds + dc)  # s + c

    sh = lambda f: grid.shift(f, omega)
    shb = lambda f: grid.shift(f, -omega)

    Axx_inv = _inv(Ar[:, X, X])
    Auu_inv = _inv(Ar[:, U, U])
    h = np.zeros((n_g, N - ds, ds))
    g = np.zeros((n_g, ds + dc, du))
    k = np.zeros((n_g, du, ds + dc))
    m = np.zeros((n_g, ds, dc + du))
    prev = np.inf
    for it in range(1, max_iter + 1):
        G = Ar[:, S, S] + Ar[:, S, X] @ h
        h_new = Axx_inv @ (sh(h) @ G - Ar[:, X, S])
        Gu = Ar[:, U, Y] @ g + Ar[:, U, U]
        g_new = shb(_solve_right(Ar[:, Y, Y] @ g + Ar[:, Y, U], Gu))
        Gk = Ar[:, Y, Y] + Ar[:, Y, U] @ k
        k_new = Auu_inv @ (sh(k) @ Gk - Ar[:, U, Y])
        Gm = Ar[:, X, S] @ m + Ar[:, X, X]
        m_new = shb(_solve_right(Ar[:, S, S] @ m + Ar[:, S, X], Gm))
        inc = max(float(np.max(np.abs(a - b), initial=0.0))
                  for a, b in ((h, h_new), (g, g_new), (k, k_new), (m, m_new)))
        h, g, k, m = h_new, g_new, k_new, m_new
        if not np.isfinite(inc) or inc > 1e8:
            raise SplittingDivergence(f"graph transform blew up at iteration {it}")
        if inc < tol:
            break
        if it > 50 and inc > (1 - gap_floor) * prev and inc > 1e3 * tol:
            raise SplittingDivergence(f"graph transform stalled (increment ratio {inc / prev:.4f})")
        prev = inc
    else:
        raise SplittingDivergence(f"graph transform did not converge in {max_iter} iterations")

    # center frame: intersection of the center-stable and center-unstable graphs
    ks, kc = k[:, :, :ds], k[:, :, ds:]
    mc, mu = m[:, :, :dc], m[:, :, dc:]
    lhs = np.eye(ds)[None] - mu @ ks
    a = np.linalg.solve(lhs, mc + mu @ kc) if ds else np.zeros((n_g, 0, dc))
    b = ks @ a + kc
    Vr = np.zeros((n_g, N, N))
    Vr[:, S, S] = np.eye(ds)
    Vr[:, X, S] = h
    Vr[:, S, C] = a
    Vr[:, C, C] = np.eye(dc)
    Vr[:, U, C] = b
    Vr[:, Y, U] = g
    Vr[:, U, U] = np.eye(du)
    V = B[None] @ Vr
    Vinv = np.linalg.inv(V)
    Lam = np.linalg.solve(sh(V), A @ V)
    return Splitting(grid, np.asarray(omega, float), A, B, (ds, dc, du), V, Vinv, Lam, it)


# ---------------------------------------------------------------------------
# rates


def _cocycle_log_norms(grid, omega, M, n_max, inverse=False):
    """``log sup_theta ||M(theta+(n-1)w) ... M(theta)||_2`` for n = 0..n_max.

    With ``inverse`` the inverse cocycle ``(...)^{-1}`` is used.  The running
    product is rescaled every step so long products neither underflow nor
    overflow.
    """
    n_g, d = M.shape[0], M.shape[-1]
    out = np.zeros(n_max + 1)
    if d == 0:
        return out - np.inf
    Mi = np.linalg.inv(M) if inverse else M
    coeffs = grid.fft(Mi)
    ph = grid.phase(omega).reshape(-1, 1, 1)
    P = np.broadcast_to(np.eye(d), (n_g, d, d)).copy()
    log_scale = 0.0
    cur = coeffs.copy()
    for n in range(1, n_max + 1):
        Mn = grid.ifft(cur)
        P = P @ Mn if inverse else Mn @ P
        top = float(np.max(np.linalg.norm(P, ord=2, axis=(1, 2))))
        if top == 0.0:
            out[n:] = -np.inf
            break
        log_scale += np.log(top)
        out[n] = log_scale
        P /= top
        cur = cur * ph
    return out


def _cocycle_norms(grid, omega, M, n_max, inverse=False):
    """``sup_theta ||M(theta+(n-1)w) ... M(theta)||_2`` for n = 0..n_max."""
    return np.exp(_cocycle_log_norms(grid, omega, M, n_max, inverse))


def _fit_rate(a):
    """Log-linear fit on the second half of the window; ``C = max a_n / mu^n``."""
    n = np.arange(a.size)
    if not np.any(a > 0):
        return 0.0, 1.0
    lo = a.size // 2
    sel = n[lo:]
    la = np.log(np.maximum(a[lo:], 1e-300))
    slope = np.polyfit(sel, la, 1)[0]
    mu = float(np.exp(slope))
    C = float(np.max(a / mu ** n))
    return mu, C


def estimate_rates(spl: Splitting, n_max: int = 64, certify: bool = True) -> Rates:
    """Fit ``C_h mu^n`` envelopes to the bundle cocycles in frame coordinates."""
    g, w = spl.grid, spl.omega
    a_s = _cocycle_norms(g, w, spl.reduced("s"), n_max)
    a_sb = _cocycle_norms(g, w, spl.reduced("s"), n_max, inverse=True)
    a_u = _cocycle_norms(g, w, spl.reduced("u"), n_max, inverse=True)
    a_c = _cocycle_norms(g, w, spl.reduced("c"), n_max)
    a_cb = _cocycle_norms(g, w, spl.reduced("c"), n_max, inverse=True)
    mu1, C1 = _fit_rate(a_s)
    mu2, C2 = _fit_rate(a_u)
    mf, Cf = _fit_rate(a_c)
    mb, Cb = _fit_rate(a_cb)
    mu3 = max(1.0, mf, mb)
    Cc = max(float(np.max(a_c / mu3 ** np.arange(a_c.size))), float(np.max(a_cb / mu3 ** np.arange(a_cb.size))))
    sb, _ = _fit_rate(a_sb)
    mu_s_min = 1.0 / sb if sb > 0 else 0.0
    rates = Rates(mu1, mu2, mu3, max(C1, C2, Cc, 1.0), mu_s_min,
                  {"stable": a_s, "unstable": a_u, "center_forward": a_c, "center_backward": a_cb})
    spl.rates = rates
    if certify:
        certify_rates(rates)
    return rates


def certify_rates(rates: Rates):
    r = rates
    fails = []
    if not r.mu1 < 1:
        fails.append(f"mu1={r.mu1:.4g} >= 1")
    if not r.mu2 < 1:
        fails.append(f"mu2={r.mu2:.4g} >= 1")
    if not r.mu3 >= 1:
        fails.append(f"mu3={r.mu3:.4g} < 1")
    if not r.mu1 * r.mu3 < 1:
        fails.append(f"mu1*mu3={r.mu1 * r.mu3:.4g} >= 1")
    if not r.mu2 * r.mu3 < 1:
        fails.append(f"mu2*mu3={r.mu2 * r.mu3:.4g} >= 1")
    if fails:
        raise RateCertificationFailed("; ".join(fails))


def rate_series_rows(rates: Rates):
    rows = []
    for name, arr in rates.series.items():
        for n, v in enumerate(arr):
            rows.append((n, name, float(v)))
    return rows


# ---------------------------------------------------------------------------
# transfer operators


class TransferOperator:
    """theta-shifted operators on grid families.

    flavor ``"L"``:  ``(L_B H)(theta) = B(theta - w) H(theta - w)``
    flavor ``"R"``:  ``(R_A H)(theta) = H(theta + w) o A(theta)^{(x)k}``
    flavor ``"LAB"``: ``H -> B(theta) H(theta + w) o A(theta)^{(x)k}``

    In the ``R`` flavors ``H`` holds coefficients of homogeneous degree-``k``
    polynomials, shape ``(n, m, n_k)``.
    """

    def __init__(self, grid: ThetaGrid, omega, flavor="L", A=None, B=None, k=1):
        if flavor not in ("L", "R", "LAB"):
            raise ValueError(f"unknown flavor {flavor!r}")
        self.grid, self.omega, self.flavor = grid, np.atleast_1d(omega).astype(float), flavor
        self.A = None if A is None else np.asarray(A, float)
        self.B = None if B is None else np.asarray(B, float)
        self.k = int(k)

    def _subst(self, A):
        alg = algebra(A.shape[-1], self.k)
        return substitution_matrices(alg, self.k, A)

    def apply(self, H):
        g, w = self.grid, self.omega
        if self.flavor == "L":
            return g.shift(self.B @ H, -w) if H.ndim == 3 else g.shift(np.einsum("nij,nj->ni", self.B, H), -w)
        S = self._subst(self.A)
        out = g.shift(H, w) @ S
        if self.flavor == "LAB":
            out = self.B @ out
        return out

    def spectral_radius(self, n_max: int = 4096):
        """``sup_theta ||prod||^{1/n}`` at ``n_max`` and a Richardson estimate of the limit."""
        g, w = self.grid, self.omega
        if self.flavor == "L":
            la = _cocycle_log_norms(g, w, self.B, n_max)
            lr_n, lr_h = la[n_max] / n_max, la[n_max // 2] * 2 / n_max
        else:
            la = _cocycle_log_norms(g, w, self.A, n_max)
            lr_n, lr_h = self.k * la[n_max] / n_max, self.k * la[n_max // 2] * 2 / n_max
            if self.flavor == "LAB":
                lb = _cocycle_log_norms(g, w, self.B, n_max)
                lr_n += lb[n_max] / n_max
                lr_h += lb[n_max // 2] * 2 / n_max
        r_n, r_h = np.exp(lr_n), np.exp(lr_h)
        return float(r_n), float(2 * r_n - r_h)


def spectral_radius(T: TransferOperator, n_max: int = 4096):
    return T.spectral_radius(n_max)


# ---------------------------------------------------------------------------
# non-resonance


def inverse_norm(spl: Splitting) -> float:
    """``sup_theta ||A(theta)^{-1}||`` in frame coordinates."""
    return float(np.max(np.linalg.norm(np.linalg.inv(spl.Lam), ord=2, axis=(1, 2))))


def stable_product_norms(spl: Splitting, n_max: int) -> np.ndarray:
    return _cocycle_norms(spl.grid, spl.omega, spl.reduced("s"), n_max)


def check_nonresonance(rates: Rates, i_range, norm_Ainv: float, stable_norms=None,
                       L_max: int = 64, raise_on_resonance: bool = True) -> dict:
    """Rate-based certificates for the order-i equations and the choice of L.

    For each ``i``: the spectrum of the transfer operator on ``c + u`` lies in
    ``|z| >= 1/mu3``; that of ``(R_{A^s})^i`` in ``|z| <= mu1^i``.  The
    annuli are disjoint iff ``mu1^i < 1/mu3``.
    """
    mu1, mu3 = rates.mu1, rates.mu3
    per_i = {}
    overlaps = []
    for i in i_range:
        outer = mu1 ** i
        inner_cu = 1.0 / mu3
        ok = outer < inner_cu
        per_i[int(i)] = {"stable_outer": outer, "cu_inner": inner_cu, "disjoint": bool(ok)}
        if not ok:
            overlaps.append((int(i), [rates.mu_s_min ** i, outer], [inner_cu, np.inf]))
    if overlaps and raise_on_resonance:
        raise ResonanceDetected(overlaps[0][0], overlaps)
    factor = max(1.0, norm_Ainv)
    L = None
    if stable_norms is not None:
        for Lc in range(1, min(L_max, len(stable_norms) - 2) + 1):
            if stable_norms[Lc + 1] * factor < 1:
                L = Lc
                break
    L_rate = next((Lc for Lc in range(1, L_max + 1) if mu1 ** (Lc + 1) * factor < 1), None)
    L_flow = None
    if stable_norms is not None and len(stable_norms) > 1:
        a1 = stable_norms[1]
        L_flow = next((Lc for Lc in range(1, L_max + 1) if a1 ** (Lc + 1) * norm_Ainv < 1), None)
    # linear P: stable block equation contracts for every i >= 2
    lin = [mu1 ** i / rates.mu_s_min < 1 if rates.mu_s_min > 0 else False for i in i_range if i >= 2]
    return {"orders": per_i, "overlaps": overlaps, "L": L, "L_rate": L_rate, "L_flow": L_flow,
            "P_linear_ok": bool(all(lin)), "norm_Ainv": norm_Ainv}


def choose_power(rates: Rates, target: float = 0.9, n_cap: int = 64) -> int:
    """Smallest ``n`` with ``C_h mu1^n < target`` (one-step stable norm of ``F^n``)."""
    for n in range(1, n_cap + 1):
        if rates.C_h * rates.mu1 ** n < target:
            return n
    raise RateCertificationFailed("no power of the map reaches the stable norm target")
