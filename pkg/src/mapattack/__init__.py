"""Symmetry-bias attacks on online map construction: scenes, attacks, oracles and planning metrics."""

__version__ = "0.1.0"
