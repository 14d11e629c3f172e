"""Command line interface ``wl``.

Exit codes: 0 success, 1 hypothesis failure, 2 verification failure,
3 configuration error.  ``wl verify`` exits with the number of failed
certificates instead.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io
from .config import load_config
from .errors import ConfigError, WLError
from .pipeline import HypothesisFailure, run_pipeline

EXIT_OK, EXIT_HYPOTHESIS, EXIT_VERIFICATION, EXIT_CONFIG = 0, 1, 2, 3

_UNTIL = {"gamma-check": "gamma", "torus": "torus", "splitting": "splitting", "manifold": "manifold",
          "verify": "verify", "run": "verify"}

# flags that mirror config keys: (flag, key, type)
_OVERRIDES = [("--epsilon", "epsilon", float), ("--lambda", "lambda", float), ("--R", "R", int),
              ("--N", "N", int), ("--N-theta", "N_theta", int), ("--L", "L", int), ("--L-max", "L_max", int),
              ("--style", "style", str), ("--tail", "tail", str), ("--seed", "seed", int)]


def _setup_logging():
    level = os.environ.get("WL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wl", description="Whiskered tori and their invariant manifolds on lattices.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gamma-check", "torus", "splitting", "manifold", "verify", "run"):
        s = sub.add_parser(name, help=f"run the pipeline up to the '{_UNTIL[name]}' stage")
        s.add_argument("config", help="JSON run configuration")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for independent checks")
        for flag, key, typ in _OVERRIDES:
            s.add_argument(flag, dest=f"ov_{key}", type=typ, default=None, help=f"override config key {key}")
    e = sub.add_parser("export", help="write CSV coefficient tables from the JSON artifacts of a run directory")
    e.add_argument("config", help="run directory or a JSON config whose output directory to use")
    e.add_argument("--out", help="run directory (overrides the config)")
    return p


def _overrides(args) -> dict:
    return {key: getattr(args, f"ov_{key}") for _, key, _ in _OVERRIDES}


def export_run(run_dir: Path) -> list:
    """Long-format CSV tables of the manifold coefficients found in ``run_dir``."""
    written = []
    for name in ("pair_stable", "pair_unstable"):
        path = run_dir / f"{name}.json"
        if not path.exists():
            continue
        doc = io.read_json(path)
        rows = [("site", "mode", "multi_index", "component", "re", "im")]
        for site, mode, ex, re, im in doc["W"]:
            for comp, (a, b) in enumerate(zip(re, im)):
                rows.append((" ".join(map(str, site)), " ".join(map(str, mode)), " ".join(map(str, ex)), comp,
                             io.unhexf(a), io.unhexf(b)))
        written.append(io.write_csv(run_dir / f"{name}_coefficients.csv", rows,
                                    f"Fourier-Taylor coefficients of W ({name}); L={doc['L']} L_max={doc['L_max']}"))
    return written


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            target = Path(args.out) if args.out else Path(args.config)
            if target.is_file():
                target = Path(load_config(target).out)
            if not target.is_dir():
                raise ConfigError(f"run directory {target} does not exist")
            for w in export_run(target):
                print(w)
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        res = run_pipeline(cfg, args.out, _UNTIL[args.command], max(1, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_HYPOTHESIS
    except WLError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    for c in res.certificates:
        print(f"{c.verdict:4s}  {c.name}")
    print(f"artifacts in {res.out}")
    if args.command == "verify":
        return min(len(res.failed), 255)
    return EXIT_VERIFICATION if res.failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
