"""Uniform theta grids on T^D and Fourier operations on grid values.

Functions of theta are stored by their values on the ``(2 N + 1)^D`` node grid,
flattened to a leading axis of length ``n``.  Because the grid size is odd the
grid values and the retained Fourier modes ``|m_k| <= N`` determine each other
exactly, so the shift ``theta -> theta + omega`` is a phase multiplication.
A torus of dimension ``D = 0`` collapses to a single node.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np


def as_points(theta, D: int) -> np.ndarray:
    """Reshape angles to ``(k, D)``; for ``D = 0`` a leading length is kept."""
    theta = np.asarray(theta, dtype=float)
    if D == 0:
        return np.zeros((theta.shape[0] if theta.ndim == 2 else 1, 0))
    return theta.reshape(-1, D)


class ThetaGrid:
    def __init__(self, D: int, N: int):
        if D < 0 or N < 0:
            raise ValueError("grid dimension and cutoff must be non-negative")
        self.D = D
        self.N = N if D > 0 else 0
        self.side = 2 * self.N + 1
        self.n = self.side ** D

    def __repr__(self):
        return f"ThetaGrid(D={self.D}, N={self.N})"

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n, D)``, in [0, 1)."""
        if self.D == 0:
            return np.zeros((1, 0))
        t = np.arange(self.side) / self.side
        mesh = np.meshgrid(*([t] * self.D), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer wave vectors in FFT order, shape ``(n, D)``."""
        if self.D == 0:
            return np.zeros((1, 0), dtype=int)
        k = np.fft.fftfreq(self.side, 1.0 / self.side).round().astype(int)
        mesh = np.meshgrid(*([k] * self.D), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    # -- transforms ---------------------------------------------------------
    def _cube(self, values):
        return values.reshape((self.side,) * self.D + values.shape[1:])

    def fft(self, values) -> np.ndarray:
        """Fourier coefficients ``hat f_m`` (normalized), same layout as ``modes``."""
        values = np.asarray(values)
        if self.D == 0:
            return values.astype(complex)
        axes = tuple(range(self.D))
        c = np.fft.fftn(self._cube(values), axes=axes) / self.n
        return c.reshape(values.shape)

    def ifft(self, coeffs, real=True) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if self.D == 0:
            return coeffs.real if real else coeffs
        axes = tuple(range(self.D))
        v = np.fft.ifftn(self._cube(coeffs), axes=axes) * self.n
        v = v.reshape(coeffs.shape)
        return v.real if real else v

    def phase(self, t) -> np.ndarray:
        """``exp(2 pi i m . t)`` for every retained mode."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.D == 0:
            return np.ones(1, dtype=complex)
        return np.exp(2j * np.pi * (self.modes @ t))

    def shift(self, values, t) -> np.ndarray:
        """Values of ``f(theta + t)`` on the grid (exact for retained modes)."""
        values = np.asarray(values)
        if self.D == 0:
            return values.copy()
        ph = self.phase(t).reshape((-1,) + (1,) * (values.ndim - 1))
        return self.ifft(self.fft(values) * ph)

    def shift_matrix(self, t) -> np.ndarray:
        """Dense ``n x n`` real matrix of the shift by ``t``."""
        return self.shift(np.eye(self.n), t)

    def evaluate(self, values, theta) -> np.ndarray:
        """Trigonometric interpolant at arbitrary points ``theta`` of shape ``(k, D)``."""
        values = np.asarray(values)
        theta = as_points(theta, self.D)
        if self.D == 0:
            return np.broadcast_to(values[0], (theta.shape[0],) + values.shape[1:]).copy()
        c = self.fft(values).reshape(self.n, -1)
        basis = np.exp(2j * np.pi * theta @ self.modes.T)
        out = (basis @ c).real
        return out.reshape((theta.shape[0],) + values.shape[1:])

    def mean(self, values) -> np.ndarray:
        return np.asarray(values).mean(axis=0)

    # -- norms ----------------------------------------------------------------
    def analytic_norm(self, values, rho=0.0, axis_reduce=None) -> np.ndarray:
        """Weighted l1 Fourier sum ``sum_m |hat f_m| exp(2 pi rho |m|_1)``.

        Upper bound for the sup of ``f`` on the complex strip of width ``rho``.
        The leading (grid) axis is summed; other axes are kept.
        """
        c = np.abs(self.fft(values))
        w = np.exp(2 * np.pi * rho * np.abs(self.modes).sum(axis=1))
        w = w.reshape((-1,) + (1,) * (c.ndim - 1))
        return (c * w).sum(axis=0)

    def min_divisor(self, omega) -> float:
        """``min |1 - exp(2 pi i m . omega)|`` over retained nonzero modes."""
        if self.D == 0:
            return np.inf
        nz = np.any(self.modes != 0, axis=1)
        d = np.abs(1.0 - self.phase(omega)[nz])
        return float(d.min())
