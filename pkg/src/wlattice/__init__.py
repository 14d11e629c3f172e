"""Whiskered tori of lattice maps, their invariant bundles and stable/unstable manifolds."""

__version__ = "0.1.0"
