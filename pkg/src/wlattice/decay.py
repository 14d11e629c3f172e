"""Decay functions on a truncated lattice and the localized operator algebra.

Sites live in the box ``{j in Z^N : |j|_inf <= R}``.  A decay function
``Gamma(j) = a exp(-alpha |j|) (1 + |j|)^(-p)`` is normalized so that the two
decay axioms hold exactly (in floating point) on that box, which is what makes
the operator norms below submultiplicative.

Block norms are the infinity operator norm (maximum absolute row sum), so that
``|A_ij B_jk| <= |A_ij| |B_jk|`` holds for the per-pair blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
import json

import numpy as np

from .errors import EmptyExcitedSet, NoValidNormalization, OrderMismatch


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class LatticeGeometry:
    """Truncated lattice ``[-R, R]^N`` with per-site phase space ``T^l x R^d``."""

    dim_N: int
    box_radius: int
    boundary: str = "frozen"
    l: int = 1
    d: int = 2

    def __post_init__(self):
        if self.dim_N < 1:
            raise ValueError("lattice dimension must be positive")
        if self.box_radius < 0:
            raise ValueError("box radius must be non-negative")
        if self.boundary not in ("frozen", "periodic"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if self.l < 0 or self.d < 0 or self.l + self.d == 0:
            raise ValueError("site block must be non-empty")

    @property
    def block(self) -> int:
        return self.l + self.d

    @property
    def width(self) -> int:
        return 2 * self.box_radius + 1

    @property
    def n_sites(self) -> int:
        return self.width ** self.dim_N

    @property
    def sites(self) -> np.ndarray:
        r = range(-self.box_radius, self.box_radius + 1)
        return np.array(list(product(r, repeat=self.dim_N)), dtype=int)

    def index(self, site) -> int:
        site = np.atleast_1d(np.asarray(site, dtype=int))
        if site.shape != (self.dim_N,):
            raise ValueError(f"site {site.tolist()} has wrong dimension")
        if np.any(np.abs(site) > self.box_radius):
            raise ValueError(f"site {site.tolist()} outside the box")
        k = 0
        for x in site:
            k = k * self.width + int(x) + self.box_radius
        return k

    def displacement(self, i, j) -> np.ndarray:
        """Lattice vector ``i - j``, wrapped to the minimal image when periodic."""
        disp = np.asarray(i) - np.asarray(j)
        if self.boundary == "periodic":
            w = self.width
            disp = (disp + self.box_radius) % w - self.box_radius
        return disp

    def distance_matrix(self) -> np.ndarray:
        s = self.sites
        disp = self.displacement(s[:, None, :], s[None, :, :])
        return np.abs(disp).max(axis=-1)

    def shell(self) -> np.ndarray:
        """Max-norm distance of every site from the origin."""
        return np.abs(self.sites).max(axis=1)

    def with_radius(self, R: int) -> "LatticeGeometry":
        return LatticeGeometry(self.dim_N, R, self.boundary, self.l, self.d)

    def with_blocks(self, l: int, d: int) -> "LatticeGeometry":
        return LatticeGeometry(self.dim_N, self.box_radius, self.boundary, l, d)


# ---------------------------------------------------------------------------
# decay functions


def _profile(alpha, p, r):
    r = np.asarray(r, dtype=float)
    return np.exp(-alpha * r) * (1.0 + r) ** (-p)


@dataclass(frozen=True)
class DecayFunction:
    alpha: float
    p: float
    a: float
    geometry: LatticeGeometry

    def __call__(self, disp) -> np.ndarray:
        """Gamma at lattice displacement(s); the last axis holds the N components."""
        r = np.abs(np.asarray(disp)).max(axis=-1)
        return self.a * _profile(self.alpha, self.p, r)

    def radial(self, r) -> np.ndarray:
        return self.a * _profile(self.alpha, self.p, r)

    def matrix(self) -> np.ndarray:
        """``Gamma(i - j)`` for all pairs of boxed sites."""
        return self.radial(self.geometry.distance_matrix())

    def to_site(self, c_indices) -> np.ndarray:
        """``max_k Gamma(i - c_k)`` for every site ``i``."""
        c_indices = list(c_indices)
        if not c_indices:
            raise EmptyExcitedSet("localized quantity needs at least one excited site")
        return self.matrix()[:, c_indices].max(axis=1)


def _axiom_sums(g_box: np.ndarray, G: np.ndarray):
    s1 = g_box.sum()
    conv = G @ G
    return s1, conv


def make_decay_function(alpha: float, p: float, geometry: LatticeGeometry) -> DecayFunction:
    """Decay function with the largest normalization satisfying both axioms on the box."""
    if alpha < 0 or p < 0:
        raise ValueError("alpha and p must be non-negative")
    if alpha == 0 and p == 0:
        raise NoValidNormalization("alpha = p = 0 gives no decay; the axioms have no meaning")
    dist = geometry.distance_matrix()
    G = _profile(alpha, p, dist)
    origin = geometry.index(np.zeros(geometry.dim_N, dtype=int))
    g_box = G[origin]
    s1, conv = _axiom_sums(g_box, G)
    bound = min(1.0 / s1, float(np.min(G / conv)))
    if not np.isfinite(bound) or bound <= 0:
        raise NoValidNormalization(f"no positive normalization (bound {bound})")

    def admissible(a):
        Ga = a * G
        return (a * g_box).sum() <= 1.0 and np.all(Ga @ Ga <= Ga)

    lo, hi = 0.0, bound * (1 + 1e-9)
    if admissible(hi):
        lo = hi
    else:
        cand = bound
        while not admissible(cand):
            cand *= 1 - 1e-12
            if cand < 0.5 * bound:
                raise NoValidNormalization("floating point certification failed")
        lo = cand
        while (hi - lo) > 1e-12 * hi:
            mid = 0.5 * (lo + hi)
            if admissible(mid):
                lo = mid
            else:
                hi = mid
    return DecayFunction(float(alpha), float(p), float(lo), geometry)


def verify_decay_axioms(gamma: DecayFunction) -> dict:
    G = gamma.matrix()
    geo = gamma.geometry
    origin = geo.index(np.zeros(geo.dim_N, dtype=int))
    s1 = G[origin].sum()
    conv = G @ G
    return {"axiom1_margin": float(1.0 - s1), "axiom2_worst_ratio": float(np.max(conv / G))}


def scaled(gamma: DecayFunction, factor: float) -> DecayFunction:
    return DecayFunction(gamma.alpha, gamma.p, gamma.a * factor, gamma.geometry)


# ---------------------------------------------------------------------------
# localized vectors and excited sites


@dataclass(frozen=True)
class ExcitedSites:
    sites: tuple
    geometry: LatticeGeometry

    def __post_init__(self):
        seen = set()
        for s in self.sites:
            t = tuple(int(x) for x in s)
            if t in seen:
                raise ValueError(f"duplicate excited site {t}")
            seen.add(t)
            self.geometry.index(t)

    @classmethod
    def from_list(cls, sites, geometry):
        return cls(tuple(tuple(int(x) for x in np.atleast_1d(s)) for s in sites), geometry)

    @property
    def indices(self) -> list:
        return [self.geometry.index(s) for s in self.sites]

    def __len__(self):
        return len(self.sites)


@dataclass
class LocalizedVector:
    blocks: np.ndarray
    geometry: LatticeGeometry

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.shape != (self.geometry.n_sites, self.geometry.block):
            raise ValueError("block array does not match the geometry")

    def sup_norm(self) -> float:
        return float(np.abs(self.blocks).max(initial=0.0))


def _c_indices(c, geometry):
    if isinstance(c, ExcitedSites):
        idx = c.indices
    else:
        idx = [geometry.index(s) for s in c]
    if not idx:
        raise EmptyExcitedSet("localized norm needs at least one excited site")
    return idx


def localization_weight(gamma: DecayFunction, c) -> np.ndarray:
    """``inf_k Gamma^{-1}(i - c_k)`` for every site ``i``."""
    return 1.0 / gamma.to_site(_c_indices(c, gamma.geometry))


def localized_vector_norm(v, c, gamma: DecayFunction) -> float:
    blocks = v.blocks if isinstance(v, LocalizedVector) else np.asarray(v, dtype=float)
    w = localization_weight(gamma, c)
    site_abs = np.abs(blocks.reshape(blocks.shape[0], -1)).max(axis=1)
    return float(np.max(site_abs * w))


# ---------------------------------------------------------------------------
# operators


def block_norm(blocks: np.ndarray, k: int = 1) -> np.ndarray:
    """Infinity operator norm of (multi)linear blocks stored in the last ``k+1`` axes."""
    lead = blocks.shape[: blocks.ndim - (k + 1)]
    b = blocks.shape[-(k + 1)]
    flat = np.abs(blocks).reshape(lead + (b, -1))
    return flat.sum(axis=-1).max(axis=-1)


@dataclass
class DecayOperator:
    """Linear map given by per-pair blocks ``A_ij``, shape ``(n, n, b, b)``."""

    blocks: np.ndarray
    gamma: DecayFunction
    drop_tol: float | None = None

    def __post_init__(self):
        geo = self.gamma.geometry
        n, b = geo.n_sites, geo.block
        self.blocks = np.array(self.blocks, dtype=float)
        if self.blocks.shape != (n, n, b, b):
            raise ValueError(f"expected blocks of shape {(n, n, b, b)}, got {self.blocks.shape}")
        if self.drop_tol is None:
            self.drop_tol = 1e-14 * self.gamma.a
        self.support = self.gamma.matrix() >= self.drop_tol
        self.blocks[~self.support] = 0.0

    @classmethod
    def from_matrix(cls, mat, gamma, drop_tol=None):
        geo = gamma.geometry
        n, b = geo.n_sites, geo.block
        blocks = np.asarray(mat, dtype=float).reshape(n, b, n, b).transpose(0, 2, 1, 3)
        return cls(blocks, gamma, drop_tol)

    @classmethod
    def identity(cls, gamma):
        geo = gamma.geometry
        return cls.from_matrix(np.eye(geo.n_sites * geo.block), gamma)

    def matrix(self) -> np.ndarray:
        n, _, b, _ = self.blocks.shape
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * b, n * b)

    def __matmul__(self, other):
        if isinstance(other, DecayOperator):
            return compose(self, other)
        v = np.asarray(other, dtype=float)
        return np.einsum("ijab,jb->ia", self.blocks, v)

    @property
    def order(self) -> int:
        return 1


@dataclass
class MultilinearDecayOperator:
    """k-linear map with blocks ``B[i, i_1..i_k, a, b_1..b_k]``."""

    blocks: np.ndarray
    gamma: DecayFunction
    order: int
    drop_tol: float | None = None

    def __post_init__(self):
        geo = self.gamma.geometry
        n, b, k = geo.n_sites, geo.block, self.order
        self.blocks = np.array(self.blocks, dtype=float)
        if k < 1 or self.blocks.shape != (n,) * (k + 1) + (b,) * (k + 1):
            raise ValueError("block array does not match order and geometry")
        if self.drop_tol is None:
            self.drop_tol = 1e-14 * self.gamma.a
        self.blocks[~self._support()] = 0.0

    def _support(self):
        G = self.gamma.matrix()
        k = self.order
        n = G.shape[0]
        env = np.full((n,) * (k + 1), np.inf)
        for m in range(k):
            shape = [n] + [1] * k
            shape[m + 1] = n
            env = np.minimum(env, G.reshape(shape))
        return env >= self.drop_tol

    def apply(self, *vectors):
        if len(vectors) != self.order:
            raise OrderMismatch(f"{self.order}-linear map applied to {len(vectors)} vectors")
        out = self.blocks
        for v in vectors:
            # contract the first remaining site axis and its component axis
            n_rem = out.ndim // 2
            out = np.tensordot(out, np.asarray(v, dtype=float), axes=([1, n_rem + 1], [0, 1]))
        return out


def _envelope(gamma: DecayFunction, k: int) -> np.ndarray:
    """``max_m Gamma^{-1}(i - i_m)`` over the factor sites."""
    Ginv = 1.0 / gamma.matrix()
    n = Ginv.shape[0]
    env = np.zeros((n,) * (k + 1))
    for m in range(k):
        shape = [n] + [1] * k
        shape[m + 1] = n
        env = np.maximum(env, Ginv.reshape(shape))
    return env


def operator_norms(op, c=None) -> float:
    """``||A||_Gamma`` (or the multilinear analogue); localized variant when ``c`` is given."""
    k = op.order
    gamma = op.gamma
    size = block_norm(op.blocks, k)
    env = _envelope(gamma, k)
    if c is not None:
        w = localization_weight(gamma, c).reshape((-1,) + (1,) * k)
        env = np.maximum(env, w)
    return float(np.max(size * env))


def compose(A: DecayOperator, B: DecayOperator) -> DecayOperator:
    if not isinstance(A, DecayOperator) or not isinstance(B, DecayOperator):
        raise OrderMismatch("compose expects two linear decay operators")
    if A.gamma.geometry != B.gamma.geometry:
        raise OrderMismatch("operators live on different lattices")
    blocks = np.einsum("ijab,jkbc->ikac", A.blocks, B.blocks, optimize=True)
    return DecayOperator(blocks, A.gamma, A.drop_tol)


def contract(A, *Bs):
    """``A(B_1 v_1, ..., B_k v_k)`` for a k-linear ``A`` and linear ``B_m``.

    A linear ``A`` with a single multilinear ``B`` gives ``A o B``.
    """
    if isinstance(A, DecayOperator):
        if len(Bs) != 1:
            raise OrderMismatch("a linear map contracts with exactly one operator")
        B = Bs[0]
        if isinstance(B, DecayOperator):
            return compose(A, B)
        blocks = np.tensordot(A.blocks, B.blocks, axes=([1, 3], [0, B.order + 1]))
        # tensordot leaves (i, a, i_1..i_k, b_1..b_k); move a behind the sites
        blocks = np.moveaxis(blocks, 1, B.order + 1)
        return MultilinearDecayOperator(blocks, A.gamma, B.order, A.drop_tol)
    if len(Bs) != A.order:
        raise OrderMismatch(f"{A.order}-linear map needs {A.order} inner operators")
    k = A.order
    out = A.blocks
    for m, B in enumerate(Bs):
        if not isinstance(B, DecayOperator):
            raise OrderMismatch("inner operators of a contraction must be linear here")
        site_ax, comp_ax = m + 1, k + 2 + m
        out = np.tensordot(out, B.blocks, axes=([site_ax, comp_ax], [0, 2]))
        # new axes (j_m, c_m) were appended at the end; put them back in place
        out = np.moveaxis(out, [-2, -1], [site_ax, comp_ax])
    return MultilinearDecayOperator(out, A.gamma, k, A.drop_tol)


# ---------------------------------------------------------------------------
# serialization (hex floats keep every bit)


def _hex(x) -> str:
    return float(x).hex()


def _unhex(s) -> float:
    return float.fromhex(s) if isinstance(s, str) else float(s)


def gamma_to_dict(gamma: DecayFunction) -> dict:
    g = gamma.geometry
    return {
        "alpha": _hex(gamma.alpha),
        "p": _hex(gamma.p),
        "a": _hex(gamma.a),
        "N": g.dim_N,
        "R": g.box_radius,
        "boundary": g.boundary,
        "l": g.l,
        "d": g.d,
    }


def gamma_from_dict(doc: dict) -> DecayFunction:
    geo = LatticeGeometry(int(doc["N"]), int(doc["R"]), doc.get("boundary", "frozen"),
                          int(doc.get("l", 1)), int(doc.get("d", 2)))
    return DecayFunction(_unhex(doc["alpha"]), _unhex(doc["p"]), _unhex(doc["a"]), geo)


def operator_to_json(op: DecayOperator) -> str:
    doc = gamma_to_dict(op.gamma)
    sites = op.gamma.geometry.sites
    entries = []
    for i, j in zip(*np.nonzero(op.support)):
        blk = op.blocks[i, j]
        if not np.any(blk):
            continue
        entries.append([sites[i].tolist(), sites[j].tolist(), [_hex(x) for x in blk.ravel()]])
    doc["drop_tol"] = _hex(op.drop_tol)
    doc["entries"] = entries
    return json.dumps(doc, sort_keys=True)


def operator_from_json(text: str) -> DecayOperator:
    doc = json.loads(text)
    gamma = gamma_from_dict(doc)
    geo = gamma.geometry
    n, b = geo.n_sites, geo.block
    blocks = np.zeros((n, n, b, b))
    for si, sj, vals in doc["entries"]:
        blocks[geo.index(si), geo.index(sj)] = np.array([_unhex(v) for v in vals]).reshape(b, b)
    return DecayOperator(blocks, gamma, _unhex(doc["drop_tol"]))
