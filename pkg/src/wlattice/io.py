"""Artifacts on disk: hex-float JSON documents and long-format CSV tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fourier import ThetaGrid
from .jets import algebra
from .manifold import ManifoldPair
from .torus import TorusEmbedding

FORMAT_VERSION = 1


def hexf(x) -> str:
    return float(x).hex()


def unhexf(s) -> float:
    return float.fromhex(s) if isinstance(s, str) else float(s)


def hex_array(a) -> list:
    return [hexf(v) for v in np.asarray(a, dtype=float).ravel()]


def unhex_array(items, shape) -> np.ndarray:
    return np.array([unhexf(v) for v in items], dtype=float).reshape(shape)


def dumps(doc) -> str:
    """Deterministic JSON text (sorted keys, fixed separators, trailing newline)."""
    return json.dumps(doc, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, rows, comment: str | None = None) -> Path:
    """Write ``rows`` (header first); floats use ``repr`` so they round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def read_csv(path):
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.reader(lines))


# ---------------------------------------------------------------------------
# torus


def torus_to_dict(K: TorusEmbedding, meta=None) -> dict:
    c = K.grid.fft(K.periodic)
    return {
        "kind": "torus", "version": FORMAT_VERSION, "meta": meta or {},
        "D": K.grid.D, "N_theta": K.grid.N, "omega": hex_array(K.omega),
        "shape": list(K.periodic.shape[1:]), "modes": K.grid.modes.tolist(),
        "fourier_re": hex_array(c.real), "fourier_im": hex_array(c.imag),
        "lift": hex_array(K.lift), "lift_shape": list(K.lift.shape),
    }


def torus_from_dict(doc) -> TorusEmbedding:
    grid = ThetaGrid(int(doc["D"]), int(doc["N_theta"]))
    shape = (grid.n,) + tuple(doc["shape"])
    c = unhex_array(doc["fourier_re"], shape) + 1j * unhex_array(doc["fourier_im"], shape)
    omega = np.array([unhexf(v) for v in doc["omega"]])
    return TorusEmbedding(grid, omega, grid.ifft(c), unhex_array(doc["lift"], doc["lift_shape"]))


# ---------------------------------------------------------------------------
# splitting


def splitting_to_dict(spl, meta=None) -> dict:
    out = {"kind": "splitting", "version": FORMAT_VERSION, "meta": meta or {},
           "dims": list(spl.dims), "D": spl.grid.D, "N_theta": spl.grid.N,
           "omega": hex_array(spl.omega), "frames_shape": list(spl.V.shape),
           "frames": hex_array(spl.V), "reduced": hex_array(spl.Lam)}
    if spl.rates is not None:
        r = spl.rates
        out["rates"] = {k: hexf(getattr(r, k)) for k in ("mu1", "mu2", "mu3", "C_h", "mu_s_min")}
    return out


# ---------------------------------------------------------------------------
# manifold pair


def pair_to_dict(pair: ManifoldPair, geometry_sites=None, meta=None) -> dict:
    """Coefficients keyed by site, Fourier mode and Taylor multi-index."""
    grid, alg = pair.grid, pair.alg
    Wc = grid.fft(np.moveaxis(pair.Wp, 1, 0))  # (n_modes, n_mono, sites, b)
    Pc = grid.fft(np.moveaxis(pair.P, 1, 0))
    sites = geometry_sites if geometry_sites is not None else [[i] for i in range(pair.Wp.shape[2])]
    modes = grid.modes.tolist()
    exps = alg.exponents.tolist()
    W_entries = []
    for m, mo in enumerate(modes):
        for a, ex in enumerate(exps):
            blk = Wc[m, a]
            for i in np.flatnonzero(np.any(blk != 0, axis=-1)):
                W_entries.append([list(map(int, sites[i])), mo, ex, hex_array(blk[i].real), hex_array(blk[i].imag)])
    P_entries = []
    for m, mo in enumerate(modes):
        for a, ex in enumerate(exps):
            v = Pc[m, a]
            if np.any(v != 0):
                P_entries.append([mo, ex, hex_array(v.real), hex_array(v.imag)])
    return {
        "kind": "manifold_pair", "version": FORMAT_VERSION, "meta": meta or {},
        "D": grid.D, "N_theta": grid.N, "d_s": alg.nvars, "L": pair.L, "L_max": alg.order,
        "style": pair.style, "dims": list(pair.dims), "omega": hex_array(pair.omega),
        "state_shape": list(pair.state_shape), "sites": [list(map(int, s)) for s in sites],
        "lift": hex_array(pair.lift), "lift_shape": list(pair.lift.shape),
        "frames": hex_array(pair.V), "frames_shape": list(pair.V.shape),
        "reduced": hex_array(pair.info["Lam"]),
        "W": W_entries, "P": P_entries,
    }


def pair_from_dict(doc) -> ManifoldPair:
    grid = ThetaGrid(int(doc["D"]), int(doc["N_theta"]))
    alg = algebra(int(doc["d_s"]), int(doc["L_max"]))
    n_sites, b = doc["state_shape"]
    site_index = {tuple(s): i for i, s in enumerate(doc["sites"])}
    mode_index = {tuple(m): i for i, m in enumerate(grid.modes.tolist())}
    Wc = np.zeros((grid.n, alg.size, n_sites, b), dtype=complex)
    for site, mo, ex, re, im in doc["W"]:
        Wc[mode_index[tuple(mo)], alg.index[tuple(ex)], site_index[tuple(site)]] = (
            np.array([unhexf(v) for v in re]) + 1j * np.array([unhexf(v) for v in im]))
    ds = alg.nvars
    Pc = np.zeros((grid.n, alg.size, ds), dtype=complex)
    for mo, ex, re, im in doc["P"]:
        Pc[mode_index[tuple(mo)], alg.index[tuple(ex)]] = (
            np.array([unhexf(v) for v in re]) + 1j * np.array([unhexf(v) for v in im]))
    Wp = np.moveaxis(grid.ifft(Wc), 0, 1)
    P = np.moveaxis(grid.ifft(Pc), 0, 1)
    V = unhex_array(doc["frames"], doc["frames_shape"])
    Lam = unhex_array(doc["reduced"], doc["frames_shape"])
    return ManifoldPair(grid, np.array([unhexf(v) for v in doc["omega"]]), alg, Wp, P,
                        unhex_array(doc["lift"], doc["lift_shape"]), V, np.linalg.inv(V),
                        tuple(doc["dims"]), int(doc["L"]), doc["style"], alg.order, {"Lam": Lam})


def certificates_to_dict(certs) -> dict:
    return {"kind": "certificates", "version": FORMAT_VERSION,
            "certificates": [c.as_dict() for c in sorted(certs, key=lambda c: c.name)],
            "failed": sorted(c.name for c in certs if not c.passed)}
