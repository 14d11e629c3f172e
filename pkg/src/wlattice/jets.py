"""Truncated multivariate Taylor series ("jets") with numpy-valued coefficients.

A :class:`Jet` holds the coefficients of a polynomial in ``nvars`` variables
truncated at total degree ``order``.  Coefficients are arrays of an arbitrary
value shape, so a single jet can carry a whole theta-grid of lattice states.
Arithmetic is closed at the fixed truncation; composition with analytic site
functions is done through their derivative sequence (Faa di Bruno in Horner
form).

Model code is written once against the small dispatch layer at the bottom
(``sin``, ``cos``, ``stack``...) and then runs on plain arrays or on jets.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

from .errors import TruncationOverflow


class TaylorAlgebra:
    """Graded monomial basis and multiplication table for ``nvars`` variables."""

    def __init__(self, nvars: int, order: int):
        if nvars < 0 or order < 0:
            raise ValueError("nvars and order must be non-negative")
        self.nvars = nvars
        self.order = order
        exps = []
        for deg in range(order + 1):
            block = []
            for combo in combinations_with_replacement(range(nvars), deg):
                e = [0] * nvars
                for j in combo:
                    e[j] += 1
                block.append(tuple(e))
            # reversed lexicographic keeps s_0^k first inside each degree
            block.sort(reverse=True)
            exps.extend(block)
        self.exponents = np.array(exps, dtype=int).reshape(len(exps), nvars)
        self.degree = self.exponents.sum(axis=1)
        self.index = {e: k for k, e in enumerate(exps)}
        self.size = len(exps)
        starts = np.searchsorted(self.degree, np.arange(order + 2))
        self._deg_bounds = starts

        ia, ib, ic = [], [], []
        for a, ea in enumerate(exps):
            for b, eb in enumerate(exps):
                if self.degree[a] + self.degree[b] > order:
                    continue
                ia.append(a)
                ib.append(b)
                ic.append(self.index[tuple(x + y for x, y in zip(ea, eb))])
        ia, ib, ic = map(np.asarray, (ia, ib, ic))
        perm = np.argsort(ic, kind="stable")
        self._ia, self._ib, ic = ia[perm], ib[perm], ic[perm]
        self._starts = np.searchsorted(ic, np.arange(self.size))

        # predecessor table for building monomial powers incrementally
        self._pred = np.full(self.size, -1)
        self._pred_var = np.full(self.size, -1)
        for k in range(1, self.size):
            e = list(exps[k])
            j = next(i for i, v in enumerate(e) if v > 0)
            e[j] -= 1
            self._pred[k] = self.index[tuple(e)]
            self._pred_var[k] = j

    def __repr__(self):
        return f"TaylorAlgebra(nvars={self.nvars}, order={self.order})"

    def degree_slice(self, k: int) -> slice:
        if k > self.order:
            raise TruncationOverflow(f"degree {k} exceeds truncation {self.order}")
        return slice(self._deg_bounds[k], self._deg_bounds[k + 1])

    def linear_index(self, j: int) -> int:
        e = [0] * self.nvars
        e[j] = 1
        return self.index[tuple(e)]

    def monomial_values(self, s: np.ndarray) -> np.ndarray:
        """Values of every monomial at points ``s`` (last axis = variables)."""
        s = np.asarray(s, dtype=float)
        out = np.empty((self.size,) + s.shape[:-1])
        out[0] = 1.0
        for k in range(1, self.size):
            out[k] = out[self._pred[k]] * s[..., self._pred_var[k]]
        return out


@lru_cache(maxsize=64)
def algebra(nvars: int, order: int) -> TaylorAlgebra:
    return TaylorAlgebra(nvars, order)


def _align(c: np.ndarray, ndim: int) -> np.ndarray:
    """Insert axes after the Taylor axis so that ``c.ndim == ndim``."""
    extra = ndim - c.ndim
    if extra <= 0:
        return c
    return c.reshape(c.shape[:1] + (1,) * extra + c.shape[1:])


class Jet:
    """Truncated Taylor polynomial with array-valued coefficients.

    ``c[k]`` is the coefficient of monomial ``k`` of ``alg``; ``c.shape[1:]``
    is the value shape.
    """

    __slots__ = ("alg", "c")
    __array_priority__ = 100.0

    def __init__(self, alg: TaylorAlgebra, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != alg.size:
            raise ValueError(f"expected {alg.size} coefficients, got {coeffs.shape[0]}")
        self.alg = alg
        self.c = coeffs

    # -- construction -----------------------------------------------------
    @classmethod
    def constant(cls, alg: TaylorAlgebra, value) -> "Jet":
        value = np.asarray(value, dtype=float)
        c = np.zeros((alg.size,) + value.shape)
        c[0] = value
        return cls(alg, c)

    @classmethod
    def variable(cls, alg: TaylorAlgebra, j: int, value=0.0, scale=1.0) -> "Jet":
        value = np.asarray(value, dtype=float)
        shape = np.broadcast_shapes(value.shape, np.shape(scale))
        c = np.zeros((alg.size,) + shape)
        c[0] = value
        c[alg.linear_index(j)] = scale
        return cls(alg, c)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.c.shape[1:]

    @property
    def value(self) -> np.ndarray:
        return self.c[0]

    def copy(self) -> "Jet":
        return Jet(self.alg, self.c.copy())

    def reshape(self, *shape) -> "Jet":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.alg, self.c.reshape((self.alg.size,) + tuple(shape)))

    def degree_part(self, k: int) -> np.ndarray:
        return self.c[self.alg.degree_slice(k)]

    def truncate(self, k: int) -> "Jet":
        c = self.c.copy()
        c[self.alg.degree > k] = 0.0
        return Jet(self.alg, c)

    def strip(self, k: int) -> "Jet":
        """Drop every degree ``<= k`` (the part that vanishes to order ``k``)."""
        c = self.c.copy()
        c[self.alg.degree <= k] = 0.0
        return Jet(self.alg, c)

    def nonconstant(self) -> "Jet":
        return self.strip(0)

    def __repr__(self):
        return f"Jet({self.alg!r}, shape={self.shape})"

    # -- arithmetic -------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Jet):
            if other.alg is not self.alg:
                raise ValueError("jets from different algebras")
            return other.c
        return None

    def __add__(self, other):
        oc = self._coerce(other)
        if oc is not None:
            nd = max(self.c.ndim, oc.ndim)
            return Jet(self.alg, _align(self.c, nd) + _align(oc, nd))
        other = np.asarray(other, dtype=float)
        shape = np.broadcast_shapes(self.shape, other.shape)
        c = np.array(np.broadcast_to(self.c, (self.alg.size,) + shape))
        c[0] = c[0] + other
        return Jet(self.alg, c)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.alg, -self.c)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        oc = self._coerce(other)
        if oc is None:
            other = np.asarray(other, dtype=float)
            return Jet(self.alg, _align(self.c, 1 + other.ndim) * other)
        nd = max(self.c.ndim, oc.ndim)
        a, b = _align(self.c, nd), _align(oc, nd)
        alg = self.alg
        prod = a[alg._ia] * b[alg._ib]
        return Jet(alg, np.add.reduceat(prod, alg._starts, axis=0))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        return Jet(self.alg, _align(self.c, 1 + other.ndim) / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            return self.apply_series(_power_derivs(self.value, k, self.alg.order))
        result = Jet.constant(self.alg, np.ones(self.shape))
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def __matmul__(self, mat):
        return Jet(self.alg, self.c @ np.asarray(mat, dtype=float))

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Jet(self.alg, self.c[(slice(None),) + key])

    # -- analytic functions ----------------------------------------------
    def apply_series(self, derivs) -> "Jet":
        """Compose with an analytic f given ``derivs[k] = f^(k)(value)``."""
        order = self.alg.order
        v = self.nonconstant()
        result = Jet.constant(self.alg, np.asarray(derivs[order]) / factorial(order))
        for k in range(order - 1, -1, -1):
            result = result * v + np.asarray(derivs[k]) / factorial(k)
        return result

    def sin(self):
        s, c = np.sin(self.value), np.cos(self.value)
        cyc = (s, c, -s, -c)
        return self.apply_series([cyc[k % 4] for k in range(self.alg.order + 1)])

    def cos(self):
        s, c = np.sin(self.value), np.cos(self.value)
        cyc = (c, -s, -c, s)
        return self.apply_series([cyc[k % 4] for k in range(self.alg.order + 1)])

    def exp(self):
        e = np.exp(self.value)
        return self.apply_series([e] * (self.alg.order + 1))

    def reciprocal(self):
        u0 = self.value
        derivs = [(-1) ** k * factorial(k) / u0 ** (k + 1) for k in range(self.alg.order + 1)]
        return self.apply_series(derivs)

    # -- composition ------------------------------------------------------
    def compose(self, subs) -> "Jet":
        """Substitute jets ``subs[j]`` (zero constant term) for the variables.

        ``subs`` may live in a different algebra; the value shapes of the
        substituted jets must broadcast against this jet's value shape.
        """
        alg = self.alg
        if len(subs) != alg.nvars:
            raise ValueError("one substitution per variable required")
        out_alg = subs[0].alg
        vshape = np.broadcast_shapes(self.shape, *(s.shape for s in subs))
        one = Jet.constant(out_alg, np.ones(subs[0].shape))
        powers = [one]
        for k in range(1, alg.size):
            powers.append(powers[alg._pred[k]] * subs[alg._pred_var[k]])
        nd = 1 + len(vshape)
        acc = np.zeros((out_alg.size,) + vshape)
        for k in range(alg.size):
            acc = acc + _align(powers[k].c, nd) * self.c[k]
        return Jet(out_alg, acc)

    def evaluate(self, s) -> np.ndarray:
        """Evaluate at points ``s``; ``s[..., j]`` must broadcast with the value shape."""
        mono = self.alg.monomial_values(s)
        nd = max(self.c.ndim, mono.ndim)
        return (_align(self.c, nd) * _align(mono, nd)).sum(axis=0)


def _power_derivs(u0, p, order):
    out = []
    coef = 1.0
    for k in range(order + 1):
        out.append(coef * np.power(u0, p - k))
        coef *= p - k
    return out


def substitution_matrices(alg: TaylorAlgebra, degree: int, lin: np.ndarray) -> np.ndarray:
    """Matrix of ``w -> w(lin @ s)`` on homogeneous polynomials of ``degree``.

    ``lin`` has shape ``(..., nvars, nvars)``; the result has shape
    ``(..., n_deg, n_deg)`` with ``out[..., a, b]`` the coefficient of
    monomial ``b`` in ``(lin s)^a``.
    """
    lin = np.asarray(lin, dtype=float)
    batch = lin.shape[:-2]
    sl = alg.degree_slice(degree)
    linear = []
    for j in range(alg.nvars):
        c = np.zeros((alg.size,) + batch)
        for k in range(alg.nvars):
            c[alg.linear_index(k)] = lin[..., j, k]
        linear.append(Jet(alg, c))
    powers = [Jet.constant(alg, np.ones(batch))]
    for k in range(1, sl.stop):
        powers.append(powers[alg._pred[k]] * linear[alg._pred_var[k]])
    rows = [powers[k].c[sl] for k in range(sl.start, sl.stop)]
    mat = np.stack(rows, axis=0)  # (a, b, *batch)
    return np.moveaxis(mat, (0, 1), (-2, -1))


# ---------------------------------------------------------------------------
# dispatch layer: the same model code runs on arrays and on jets


def is_jet(x) -> bool:
    return isinstance(x, Jet)


def sin(x):
    return x.sin() if isinstance(x, Jet) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Jet) else np.cos(x)


def exp(x):
    return x.exp() if isinstance(x, Jet) else np.exp(x)


def value(x):
    return x.value if isinstance(x, Jet) else np.asarray(x)


def stack(parts, axis=-1):
    jets = [p for p in parts if isinstance(p, Jet)]
    if not jets:
        return np.stack([np.asarray(p, dtype=float) for p in parts], axis=axis)
    alg = jets[0].alg
    shape = np.broadcast_shapes(*(np.shape(value(p)) for p in parts))
    cs = []
    for p in parts:
        if isinstance(p, Jet):
            c = _align(p.c, 1 + len(shape))
            cs.append(np.broadcast_to(c, (alg.size,) + shape))
        else:
            cs.append(Jet.constant(alg, np.broadcast_to(p, shape)).c)
    ax = axis if axis < 0 else axis + 1
    return Jet(alg, np.stack(cs, axis=ax))


def zeros_like_state(x):
    if isinstance(x, Jet):
        return Jet(x.alg, np.zeros_like(x.c))
    return np.zeros_like(x)
