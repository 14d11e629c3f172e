"""Invariant tori: cohomological equations and Newton continuation.

An embedding is stored as grid values of its periodic part plus an integer
lift ``Lambda theta`` for the rotating angles, ``K(theta) = K_p(theta) + Lambda theta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import NoConvergence, SmallDivisor, SplittingDivergence
from .fourier import ThetaGrid, as_points

log = logging.getLogger(__name__)


def solve_cohomology(eta, omega, grid: ThetaGrid, divisor_floor: float = 1e-6):
    """Solve ``phi(theta) - phi(theta + omega) = eta(theta) - mean(eta)``.

    Returns ``(phi, min_divisor)`` with ``phi`` mean-free.  The grid axis of
    ``eta`` is the leading one.
    """
    eta = np.asarray(eta, dtype=float)
    dmin = grid.min_divisor(omega)
    if dmin < divisor_floor:
        raise SmallDivisor(dmin, divisor_floor)
    if grid.D == 0:
        return np.zeros_like(eta), dmin
    c = grid.fft(eta)
    div = 1.0 - grid.phase(omega)
    div = div.reshape((-1,) + (1,) * (c.ndim - 1))
    zero = np.all(grid.modes == 0, axis=1)
    safe = np.where(zero.reshape(div.shape), 1.0, div)
    phi_hat = np.where(zero.reshape(div.shape), 0.0, c / safe)
    return grid.ifft(phi_hat), dmin


def cohomology_divisors(grid: ThetaGrid, omega):
    """Table ``(mode, |1 - exp(2 pi i m.omega)|)`` for CSV export."""
    d = np.abs(1.0 - grid.phase(omega))
    return grid.modes, d


@dataclass
class TorusEmbedding:
    grid: ThetaGrid
    omega: np.ndarray
    periodic: np.ndarray  # (n, n_sites, b)
    lift: np.ndarray  # (n_sites, b, D)
    rho: float = 0.0
    history: list = field(default_factory=list)

    @property
    def D(self):
        return self.grid.D

    def lift_values(self, theta):
        theta = as_points(theta, self.D)
        return np.einsum("sbd,nd->nsb", self.lift, theta)

    def values(self) -> np.ndarray:
        return self.periodic + self.lift_values(self.grid.nodes)

    def shifted(self, t=None) -> np.ndarray:
        """Grid values of ``K(theta + t)`` (default ``t = omega``)."""
        t = self.omega if t is None else np.atleast_1d(t)
        return self.grid.shift(self.periodic, t) + self.lift_values(self.grid.nodes + t)

    def evaluate(self, theta) -> np.ndarray:
        theta = as_points(theta, self.D)
        return self.grid.evaluate(self.periodic, theta) + self.lift_values(theta)

    def site_norms(self, reference=None, rho=None) -> np.ndarray:
        """``||K_i - ref_i||_rho`` per site from the weighted Fourier sum."""
        rho = self.rho if rho is None else rho
        dev = self.periodic if reference is None else self.periodic - reference[None]
        nrm = self.grid.analytic_norm(dev, rho)
        return nrm.max(axis=-1)

    def with_periodic(self, periodic):
        return TorusEmbedding(self.grid, self.omega, periodic, self.lift, self.rho, list(self.history))


def initial_torus(model, N_theta: int) -> TorusEmbedding:
    grid = ThetaGrid(model.D, N_theta)
    periodic = np.broadcast_to(model.reference_state(), (grid.n,) + model.state_shape).copy()
    return TorusEmbedding(grid, model.omega.copy(), periodic, model.lift_matrix())


def torus_error(model, K: TorusEmbedding) -> np.ndarray:
    """Grid values of ``F(K(theta)) - K(theta + omega)``."""
    return model(K.values()) - K.shifted()


def torus_residual(model, K: TorusEmbedding, n_points: int = 128, seed: int = 0) -> float:
    """Sup residual on a fresh set of points, evaluated through the Fourier sum."""
    if K.D == 0:
        return float(np.max(np.abs(torus_error(model, K))))
    rng = np.random.default_rng(seed)
    theta = rng.random((n_points, K.D))
    lhs = model(K.evaluate(theta))
    rhs = K.evaluate(theta + K.omega)
    return float(np.max(np.abs(lhs - rhs)))


def _newton_step(model, K: TorusEmbedding, E, divisor_floor):
    grid = K.grid
    n, (ns, b) = grid.n, model.state_shape
    rigid = model.rigid_mask().reshape(-1)
    free = ~rigid
    Ef = E.reshape(n, -1)
    delta = np.zeros((n, ns * b))
    # rigid rotor components: scalar cohomological equations
    if rigid.any():
        er = Ef[:, rigid]
        mean = er.mean(axis=0)
        if np.max(np.abs(mean)) > 1e-10:
            log.warning("rotor error has nonzero average %.2e; frequency mismatch", np.max(np.abs(mean)))
        phi, _ = solve_cohomology(-er, K.omega, grid, divisor_floor)
        delta[:, rigid] = phi
    A = model.differential(K.values())
    Aff = A[:, free][:, :, free]
    m = int(free.sum())
    rhs = -Ef[:, free] - np.einsum("nij,nj->ni", A[:, free][:, :, rigid], delta[:, rigid])
    Sh = grid.shift_matrix(K.omega)
    M = np.zeros((n, m, n, m))
    M[np.arange(n), :, np.arange(n), :] = Aff
    M -= np.einsum("gh,ab->gahb", Sh, np.eye(m))
    M = M.reshape(n * m, n * m)
    sol = np.linalg.solve(M, rhs.reshape(-1))
    delta[:, free] = sol.reshape(n, m)
    return delta.reshape(n, ns, b)


def solve_invariant_torus(model, K0: TorusEmbedding, tol: float = 1e-12, max_iter: int = 12,
                          divisor_floor: float = 1e-6) -> TorusEmbedding:
    """Newton iteration on ``E = F o K - K o T_omega``.

    Rotor components are corrected through the scalar cohomological
    equation; the remaining components through the linearized equation
    ``A(theta) Delta(theta) - Delta(theta + omega) = -E(theta)`` solved on
    the grid in one dense factorization (an exact Newton step).
    """
    K = K0.with_periodic(K0.periodic.copy())
    history = []
    for it in range(max_iter + 1):
        E = torus_error(model, K)
        res = float(np.max(np.abs(E)))
        history.append(res)
        log.debug("torus newton %d residual %.3e", it, res)
        if res < tol:
            K.history = history
            return K
        if it == max_iter or not np.isfinite(res) or (it > 3 and res > history[0]):
            break
        delta = _newton_step(model, K, E, divisor_floor)
        K = K.with_periodic(K.periodic + delta)
    raise NoConvergence(f"torus Newton did not reach {tol:.1e}", len(history) - 1, history)


def continue_torus(model, epsilon_target: float, N_theta: int, steps: int = 1, tol: float = 1e-12,
                   min_step: float = 1e-6, check=None):
    """Continue the uncoupled torus to ``epsilon_target``; halve the step on failure.

    ``check(model_eps, K)`` may raise :class:`SplittingDivergence` to reject a step.
    Returns the final torus and the list of accepted epsilons.
    """
    K = initial_torus(model.with_epsilon(0.0), N_theta)
    eps, accepted = 0.0, [0.0]
    step = epsilon_target / max(steps, 1)
    while eps < epsilon_target - 1e-15:
        trial = min(epsilon_target, eps + step)
        m = model.with_epsilon(trial)
        try:
            Kt = solve_invariant_torus(m, K, tol)
            if check is not None:
                check(m, Kt)
        except (NoConvergence, SplittingDivergence) as exc:
            step *= 0.5
            log.info("continuation step rejected at eps=%.4g (%s); step -> %.3g", trial, exc, step)
            if step < min_step:
                raise
            continue
        K, eps = Kt, trial
        accepted.append(eps)
    return K, accepted
