"""Map oracles: the built-in surrogate and an external-process adapter."""

from __future__ import annotations

from .base import MapOracle, PredictedElement, PredictedMap
from .surrogate import SurrogateModel, SurrogateOracle, SurrogateParams, edge_evidence, evidence_map, surrogate_predict

__all__ = [
    "MapOracle", "PredictedElement", "PredictedMap", "SurrogateModel", "SurrogateOracle", "SurrogateParams",
    "edge_evidence", "evidence_map", "surrogate_predict", "make_oracle",
]


def make_oracle(kind: str = "surrogate", params=None, **kwargs) -> MapOracle:
    from ..errors import ConfigError

    if kind == "surrogate":
        return SurrogateOracle(params)
    if kind == "external":
        from .external import ExternalOracle

        return ExternalOracle(**kwargs)
    raise ConfigError(f"unknown oracle kind {kind!r}")
