"""Predicted maps and the oracle interface."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from ..geometry import FIXED_POINTS, Polyline2D, resample_polyline


@dataclass(frozen=True)
class PredictedElement:
    polyline: Polyline2D
    confidence: float

    @property
    def class_tag(self) -> str:
        return self.polyline.class_tag


@dataclass(frozen=True)
class PredictedMap:
    elements: tuple[PredictedElement, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @classmethod
    def from_polylines(cls, polylines, confidences=None, n: int = FIXED_POINTS) -> "PredictedMap":
        confidences = confidences if confidences is not None else [1.0] * len(polylines)
        return cls(tuple(PredictedElement(resample_polyline(p, n), float(np.clip(c, 0.0, 1.0)))
                         for p, c in zip(polylines, confidences)))

    def of_class(self, tag: str) -> list[PredictedElement]:
        return [e for e in self.elements if e.class_tag == tag]

    def boundaries(self) -> list[Polyline2D]:
        return [e.polyline for e in self.elements if e.class_tag == "boundary"]

    def to_dict(self) -> dict:
        return {"elements": [{"class": e.class_tag, "points": e.polyline.to_list(), "confidence": e.confidence}
                             for e in self.elements]}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictedMap":
        return cls(tuple(PredictedElement(Polyline2D(np.array(e["points"], dtype=float), e["class"]),
                                          float(e.get("confidence", 1.0)))
                         for e in d.get("elements", [])))


@runtime_checkable
class MapOracle(Protocol):
    query_count: int

    def predict(self, frame, images: dict) -> PredictedMap: ...

    def clone(self) -> "MapOracle": ...
