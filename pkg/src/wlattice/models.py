"""Lattice maps and lattice vector fields with decaying coupling.

States are arrays of shape ``(..., n_sites, b)`` with ``b = l + d`` the site
block.  Angles are lifted to the reals.  Every model evaluates on plain arrays
and on :class:`~wlattice.jets.Jet` objects through the same code path, which
gives analytic differentials (forward mode, order-one jets) and the Taylor
compositions needed by the manifold solver.

Three families are provided:

* :class:`RotorSaddle` -- excited sites carry a rigid rotor and a saddle,
  background sites an elliptic point; coupling is ``eps * J(i-j) h_j``.
* :class:`CoupledStandard` -- standard maps coupled through
  ``sin 2 pi (phi_i - phi_j)``; used at the hyperbolic fixed point.
* :class:`KleinGordon` -- the lattice field ``q'' = -W'(q) - sum C sin(q_i - q_j)``,
  turned into maps by :class:`TimeTMap`.
"""
from __future__ import annotations

import numpy as np

from . import jets as J
from .decay import DecayFunction, DecayOperator, ExcitedSites, block_norm
from .errors import BlowUp, NotInvertible, OutOfDomain
from .jets import Jet, algebra

TWO_PI = 2.0 * np.pi


def coupling_matrix(gamma: DecayFunction) -> np.ndarray:
    """Normalized coupling ``J(i - j) = Gamma(i - j) / Gamma(0)``."""
    return gamma.matrix() / gamma.a


def outside_weight(gamma: DecayFunction, extra: int = 64) -> np.ndarray:
    """``sum_{j outside the box} J(i - j)`` for each boxed site (frozen boundary)."""
    geo = gamma.geometry
    if geo.boundary == "periodic":
        return np.zeros(geo.n_sites)
    R = geo.box_radius
    big = geo.with_radius(R + extra)
    sites_big = big.sites
    inside = np.all(np.abs(sites_big) <= R, axis=1)
    out_sites = sites_big[~inside]
    w = np.empty(geo.n_sites)
    for k, s in enumerate(geo.sites):
        r = np.abs(out_sites - s).max(axis=1)
        w[k] = (np.exp(-gamma.alpha * r) * (1.0 + r) ** (-gamma.p)).sum()
    return w


def _flat(x):
    return x.reshape(x.shape[:-2] + (-1,)) if isinstance(x, Jet) else np.reshape(x, np.shape(x)[:-2] + (-1,))


def apply_batch_matrix(M, x):
    """``M @ x`` over the flattened state axis, for arrays or jets."""
    M = np.asarray(M)
    if isinstance(x, Jet):
        shape = x.shape
        flat = x.c.reshape(x.c.shape[: x.c.ndim - 2] + (-1,))
        out = np.einsum("...ij,...j->...i", M, flat)
        return Jet(x.alg, out.reshape(x.c.shape))
    shape = np.shape(x)
    flat = np.reshape(x, shape[:-2] + (-1,))
    return np.einsum("...ij,...j->...i", M, flat).reshape(shape)


class LatticeModel:
    """Common interface of every lattice map."""

    is_flow = False

    def __init__(self, gamma: DecayFunction, epsilon: float, excited: ExcitedSites, omega=()):
        if epsilon is None or epsilon < 0:
            raise ValueError("coupling scale epsilon must be given and non-negative")
        self.gamma = gamma
        self.geometry = gamma.geometry
        self.epsilon = float(epsilon)
        self.excited = excited
        self.omega = np.atleast_1d(np.asarray(omega, dtype=float)).reshape(-1)
        self.J = coupling_matrix(gamma)

    # -- sizes -------------------------------------------------------------
    @property
    def D(self) -> int:
        return self.omega.size

    @property
    def block(self) -> int:
        return self.geometry.block

    @property
    def n_sites(self) -> int:
        return self.geometry.n_sites

    @property
    def n_state(self) -> int:
        return self.n_sites * self.block

    @property
    def state_shape(self):
        return (self.n_sites, self.block)

    # -- to be provided by subclasses --------------------------------------
    def __call__(self, x):
        raise NotImplementedError

    def reference_state(self) -> np.ndarray:
        raise NotImplementedError

    def with_epsilon(self, epsilon: float) -> "LatticeModel":
        raise NotImplementedError

    def rigid_mask(self) -> np.ndarray:
        """Components that are rigid rotations ``phi' = phi + const``."""
        return np.zeros(self.state_shape, dtype=bool)

    def lift_matrix(self) -> np.ndarray:
        """``(n_sites, b, D)`` integer map from torus angles to lifted components."""
        return np.zeros(self.state_shape + (self.D,))

    def torus_guess(self, theta: np.ndarray) -> np.ndarray:
        """Uncoupled torus on grid nodes ``theta`` of shape ``(n, D)``."""
        base = self.reference_state()
        return base[None] + np.einsum("sbd,nd->nsb", self.lift_matrix(), theta)

    # -- derived quantities -------------------------------------------------
    def differential(self, x) -> np.ndarray:
        """Analytic ``DF(x)`` as a matrix over flattened states, shape ``(..., n, n)``."""
        x = np.asarray(x, dtype=float)
        n = self.n_state
        alg = algebra(n, 1)
        batch = x.shape[:-2]
        c = np.zeros((n + 1,) + x.shape)
        c[0] = x
        eye = np.eye(n).reshape((n,) + (1,) * len(batch) + self.state_shape)
        c[1:] = eye
        y = self(Jet(alg, c))
        d = y.c[1:].reshape((n,) + batch + (n,))
        return np.moveaxis(d, 0, -1)

    def decay_operator(self, x) -> DecayOperator:
        return DecayOperator.from_matrix(self.differential(x), self.gamma)

    def reference_basis(self):
        """Per-site eigenbasis of the uncoupled linearization at the reference state.

        Returns ``(B0, s_idx, c_idx, u_idx)``: columns of ``B0`` grouped into
        stable, center and unstable directions.  Complex pairs on the unit
        circle use real and imaginary parts so the center block is a rotation.
        """
        b = self.block
        A = self.with_epsilon(0.0).differential(self.reference_state())
        n = self.n_state
        B0 = np.zeros((n, n))
        s_idx, c_idx, u_idx = [], [], []
        for site in range(self.n_sites):
            sl = slice(site * b, (site + 1) * b)
            blk = A[sl, sl]
            cols, kinds = _real_eigenbasis(blk)
            B0[sl, sl] = cols
            for k, kind in enumerate(kinds):
                {"s": s_idx, "c": c_idx, "u": u_idx}[kind].append(site * b + k)
        return B0, np.array(s_idx, int), np.array(c_idx, int), np.array(u_idx, int)

    def inverse(self, y, x0=None, tol=1e-14, max_iter=50):
        """Pointwise Newton inversion of the map."""
        y = np.asarray(y, dtype=float)
        x = y.copy() if x0 is None else np.array(x0, dtype=float)
        for _ in range(max_iter):
            r = self(x) - y
            if np.max(np.abs(r)) < tol:
                return x
            M = self.differential(x)
            step = np.linalg.solve(M, _flat(r)[..., None])[..., 0]
            x = x - step.reshape(x.shape)
        r = self(x) - y
        if np.max(np.abs(r)) > 1e3 * tol:
            raise NotInvertible(f"Newton inversion stalled at residual {np.max(np.abs(r)):.2e}")
        return x


def _real_eigenbasis(blk, tol=1e-9):
    w, v = np.linalg.eig(blk)
    b = blk.shape[0]
    if np.linalg.cond(v) > 1e8:
        return np.eye(b), ["c"] * b
    order = np.argsort(np.abs(w), kind="stable")
    cols, kinds, used = [], [], set()
    for k in order:
        if k in used:
            continue
        lam, vec = w[k], v[:, k]
        if abs(lam.imag) > tol:
            partner = next(j for j in order if j not in used and j != k and abs(w[j] - lam.conjugate()) < 1e-8)
            used.update({k, partner})
            kind = "s" if abs(lam) < 1 - tol else "u" if abs(lam) > 1 + tol else "c"
            re, im = vec.real, vec.imag
            scale = np.sqrt((re @ re + im @ im) / 2)
            cols += [re / scale, im / scale]
            kinds += [kind, kind]
        else:
            used.add(k)
            vec = vec.real / np.linalg.norm(vec.real)
            kind = "s" if abs(lam) < 1 - tol else "u" if abs(lam) > 1 + tol else "c"
            cols.append(vec)
            kinds.append(kind)
    return np.array(cols).T, kinds


# ---------------------------------------------------------------------------
# rotor-saddle lattice


class RotorSaddle(LatticeModel):
    """Rotors with saddles at excited sites and elliptic points elsewhere.

    Per site ``(phi, x, y)``::

        phi' = phi + omega_site
        (x, y)' = L_i (x, y) + nonlinearity(x, y) + eps * sum_j J(i-j) h_j (1, 1)
        h_j = (1 - cos 2 pi phi_j) + x_j + y_j

    with ``L_i = diag(lam, 1/lam)`` at excited sites and a rotation by
    ``2 pi beta`` elsewhere.  The first ``len(omega)`` excited sites rotate.
    """

    def __init__(self, gamma, lam, omega, epsilon, excited, beta=np.sqrt(2) - 1,
                 nonlinearity=None, domain=10.0):
        super().__init__(gamma, epsilon, excited, omega)
        if gamma.geometry.l != 1 or gamma.geometry.d != 2:
            raise ValueError("rotor-saddle sites carry (phi, x, y)")
        if len(excited) == 0:
            raise ValueError("rotor-saddle needs at least one excited site")
        if self.D > len(excited):
            raise ValueError("more frequencies than excited sites")
        if not 0 < lam < 1:
            raise ValueError("saddle multiplier lambda must lie in (0, 1)")
        self.lam = float(lam)
        self.beta = float(beta)
        self.nonlinearity = nonlinearity or {"x": [], "y": []}
        self.domain = domain
        n = self.n_sites
        exc = np.zeros(n, dtype=bool)
        exc[excited.indices] = True
        self._exc = exc
        self._site_omega = np.zeros(n)
        for r, idx in enumerate(excited.indices[: self.D]):
            self._site_omega[idx] = self.omega[r]
        cb, sb = np.cos(TWO_PI * self.beta), np.sin(TWO_PI * self.beta)
        self._lin = np.where(exc[:, None, None],
                             np.array([[lam, 0.0], [0.0, 1.0 / lam]])[None],
                             np.array([[cb, -sb], [sb, cb]])[None])

    def with_epsilon(self, epsilon):
        return RotorSaddle(self.gamma, self.lam, self.omega, epsilon, self.excited, self.beta,
                           self.nonlinearity, self.domain)

    def with_omega(self, omega):
        return RotorSaddle(self.gamma, self.lam, omega, self.epsilon, self.excited, self.beta,
                           self.nonlinearity, self.domain)

    def reference_state(self):
        return np.zeros(self.state_shape)

    def rigid_mask(self):
        m = np.zeros(self.state_shape, dtype=bool)
        m[:, 0] = True
        return m

    def lift_matrix(self):
        L = np.zeros(self.state_shape + (self.D,))
        for r, idx in enumerate(self.excited.indices[: self.D]):
            L[idx, 0, r] = 1.0
        return L

    def _poly(self, terms, x, y):
        out = 0.0
        for px, py, coef in terms:
            out = out + coef * (x ** int(px)) * (y ** int(py))
        return out

    def __call__(self, state):
        if not isinstance(state, Jet):
            state = np.asarray(state, dtype=float)
            if np.any(np.abs(state[..., 1:]) > self.domain):
                raise OutOfDomain("saddle coordinates left the working neighborhood")
        phi, x, y = state[..., 0], state[..., 1], state[..., 2]
        L = self._lin
        xn = x * L[:, 0, 0] + y * L[:, 0, 1] + self._poly(self.nonlinearity.get("x", []), x, y)
        yn = x * L[:, 1, 0] + y * L[:, 1, 1] + self._poly(self.nonlinearity.get("y", []), x, y)
        if self.epsilon:
            h = (1.0 - J.cos(TWO_PI * phi)) + x + y
            force = (h @ self.J.T) * self.epsilon
            xn = xn + force
            yn = yn + force
        phin = phi + self._site_omega
        return J.stack([phin, xn, yn], axis=-1)


# ---------------------------------------------------------------------------
# coupled standard maps


class CoupledStandard(LatticeModel):
    """Standard maps ``I' = I - k/(2 pi) sin 2 pi phi - eps/(2 pi) sum J sin 2 pi (phi_i - phi_j)``.

    Excited sites sit at the hyperbolic point ``(1/2, 0)``, the background at
    the elliptic point ``(0, 0)``; this configuration is fixed for every eps.
    """

    def __init__(self, gamma, k, epsilon, excited):
        super().__init__(gamma, epsilon, excited, ())
        if gamma.geometry.l != 1 or gamma.geometry.d != 1:
            raise ValueError("standard-map sites carry (phi, I)")
        if not 0 < k < 4:
            raise ValueError("k must lie in (0, 4) for an elliptic background")
        self.k = float(k)
        self.w_out = outside_weight(gamma)

    def with_epsilon(self, epsilon):
        return CoupledStandard(self.gamma, self.k, epsilon, self.excited)

    def reference_state(self):
        x = np.zeros(self.state_shape)
        x[self.excited.indices, 0] = 0.5
        return x

    def __call__(self, state):
        phi, I = state[..., 0], state[..., 1]
        kick = J.sin(TWO_PI * phi) * (-self.k / TWO_PI)
        if self.epsilon:
            # sum_j J_ij sin 2 pi (phi_i - phi_j) = s_i (J c)_i - c_i (J s)_i
            s, c = J.sin(TWO_PI * phi), J.cos(TWO_PI * phi)
            inter = s * (c @ self.J.T) - c * (s @ self.J.T) + s * self.w_out
            kick = kick - inter * (self.epsilon / TWO_PI)
        In = I + kick
        return J.stack([phi + In, In], axis=-1)


# ---------------------------------------------------------------------------
# Klein-Gordon lattice field and time-t maps


class KleinGordon:
    """Vector field ``q' = p, p' = -W_i'(q) - sum_j C(i-j) sin(q_i - q_j)``.

    Saddle sites use ``W' = -nu^2 q + beta q^3``, background sites
    ``W' = kappa^2 q + beta q^3``; ``C = eps * J`` off the diagonal.
    """

    is_flow = True

    def __init__(self, gamma, nu, kappa, epsilon, excited, beta=0.0, domain=50.0):
        if gamma.geometry.l != 0 or gamma.geometry.d != 2:
            raise ValueError("Klein-Gordon sites carry (q, p)")
        if nu <= 0 or kappa <= 0:
            raise ValueError("nu and kappa must be positive")
        if epsilon is None or epsilon < 0:
            raise ValueError("epsilon must be given and non-negative")
        self.gamma = gamma
        self.geometry = gamma.geometry
        self.nu, self.kappa, self.beta = float(nu), float(kappa), float(beta)
        self.epsilon = float(epsilon)
        self.excited = excited
        self.omega = np.zeros(0)
        self.domain = domain
        n = self.geometry.n_sites
        exc = np.zeros(n, dtype=bool)
        exc[excited.indices] = True
        self._lin = np.where(exc, self.nu ** 2, -self.kappa ** 2)
        C = coupling_matrix(gamma).copy()
        np.fill_diagonal(C, 0.0)
        self.C = C
        self.w_out = outside_weight(gamma)

    def with_epsilon(self, epsilon):
        return KleinGordon(self.gamma, self.nu, self.kappa, epsilon, self.excited, self.beta, self.domain)

    @property
    def state_shape(self):
        return (self.geometry.n_sites, 2)

    def reference_state(self):
        return np.zeros(self.state_shape)

    def __call__(self, state):
        q, p = state[..., 0], state[..., 1]
        force = q * self._lin - (q ** 3) * self.beta
        if self.epsilon:
            s, c = J.sin(q), J.cos(q)
            inter = s * (c @ self.C.T) - c * (s @ self.C.T) + s * self.w_out
            force = force - inter * self.epsilon
        return J.stack([p, force], axis=-1)

    def energy(self, state):
        q, p = state[..., 0], state[..., 1]
        pot = -0.5 * self._lin * q ** 2 + 0.25 * self.beta * q ** 4
        dq = q[..., :, None] - q[..., None, :]
        coup = 0.5 * self.epsilon * (self.C * (1 - np.cos(dq))).sum(axis=-1)
        coup = coup + self.epsilon * self.w_out * (1 - np.cos(q))
        return (0.5 * p ** 2 + pot + coup).sum(axis=-1)


def rk4_step(field, x, h):
    k1 = field(x)
    k2 = field(x + k1 * (0.5 * h))
    k3 = field(x + k2 * (0.5 * h))
    k4 = field(x + k3 * h)
    return x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def integrate_flow(field, state, t, h):
    """Fixed-step classical RK4 from 0 to ``t`` (``t`` rounded to whole steps)."""
    n = int(round(abs(t) / h))
    if n and abs(n * h - abs(t)) > 1e-12 * max(1.0, abs(t)):
        n = int(np.ceil(abs(t) / h))
    step = (t / n) if n else 0.0
    x = state
    bound = getattr(field, "domain", np.inf)
    for _ in range(n):
        x = rk4_step(field, x, step)
        v = J.value(x)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > bound:
            raise BlowUp(f"state left the domain bound {bound}")
    return x


class TimeTMap(LatticeModel):
    """Time-``t`` map of a lattice field, integrated with fixed-step RK4."""

    def __init__(self, field, t, h):
        self.field = field
        self.t = float(t)
        self.h = float(h)
        self.gamma = field.gamma
        self.geometry = field.geometry
        self.epsilon = field.epsilon
        self.excited = field.excited
        self.omega = np.asarray(field.omega, dtype=float) * self.t
        self.J = coupling_matrix(field.gamma)

    def with_epsilon(self, epsilon):
        return TimeTMap(self.field.with_epsilon(epsilon), self.t, self.h)

    def with_time(self, t):
        return TimeTMap(self.field, t, self.h)

    def reference_state(self):
        return self.field.reference_state()

    def __call__(self, state):
        return integrate_flow(self.field, state, self.t, self.h)


class IteratedMap(LatticeModel):
    """``F^n``; the torus frequency is multiplied by ``n``."""

    def __init__(self, base: LatticeModel, n: int):
        if n < 1:
            raise ValueError("iteration count must be positive")
        self.base = base
        self.n = int(n)
        self.gamma = base.gamma
        self.geometry = base.geometry
        self.epsilon = base.epsilon
        self.excited = base.excited
        self.omega = base.omega * n
        self.J = base.J

    def with_epsilon(self, epsilon):
        return IteratedMap(self.base.with_epsilon(epsilon), self.n)

    def reference_state(self):
        return self.base.reference_state()

    def rigid_mask(self):
        return self.base.rigid_mask()

    def lift_matrix(self):
        return self.base.lift_matrix()

    def reference_basis(self):
        return self.base.reference_basis()

    def __call__(self, x):
        for _ in range(self.n):
            x = self.base(x)
        return x


class InverseMap(LatticeModel):
    """``F^{-1}`` by Newton's method; jets use a frozen inverse differential.

    The unstable manifold of ``F`` is the stable manifold of this map.
    """

    def __init__(self, base: LatticeModel):
        self.base = base
        self.gamma = base.gamma
        self.geometry = base.geometry
        self.epsilon = base.epsilon
        self.excited = base.excited
        self.omega = -base.omega
        self.J = base.J

    def with_epsilon(self, epsilon):
        return InverseMap(self.base.with_epsilon(epsilon))

    def reference_state(self):
        return self.base.reference_state()

    def rigid_mask(self):
        return self.base.rigid_mask()

    def lift_matrix(self):
        return self.base.lift_matrix()

    def reference_basis(self):
        B0, s, c, u = self.base.reference_basis()
        return B0, u, c, s

    def __call__(self, y):
        if not isinstance(y, Jet):
            return self.base.inverse(y)
        x0 = self.base.inverse(y.value)
        Minv = np.linalg.inv(self.base.differential(x0))
        x = y + (x0 - y.value)
        for _ in range(y.alg.order + 2):
            x = x - apply_batch_matrix(Minv, self.base(x) - y)
        return x


def coupling_decay_constant(model: LatticeModel, states) -> float:
    """``sup |dF_i/dx_j| / Gamma(i - j)`` over the given states (block infinity norms)."""
    G = model.gamma.matrix()
    n, b = model.n_sites, model.block
    worst = 0.0
    for x in np.asarray(states):
        D = model.differential(x).reshape(n, b, n, b).transpose(0, 2, 1, 3)
        worst = max(worst, float(np.max(block_norm(D) / G)))
    return worst
