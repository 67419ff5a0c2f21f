"""Timestamped, typed values exchanged between federates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..controls import ControlVector

KINDS = ("real_vector", "complex_vector", "control_vector", "scalar", "text")


@dataclass(frozen=True, eq=False)
class Payload:
    kind: str
    value: object
    labels: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        v = self.value
        if self.kind == "real_vector":
            v = np.asarray(v, dtype=float).ravel().copy()
        elif self.kind == "complex_vector":
            v = np.asarray(v, dtype=complex).ravel().copy()
        elif self.kind == "control_vector":
            if not isinstance(v, ControlVector):
                raise TypeError("control_vector payload needs a ControlVector")
        elif self.kind == "scalar":
            v = float(v)
        else:
            v = str(v)
        object.__setattr__(self, "value", v)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))

    def to_json(self):
        if self.kind == "real_vector":
            return [float(x) for x in self.value]
        if self.kind == "complex_vector":
            return [[float(z.real), float(z.imag)] for z in self.value]
        if self.kind == "control_vector":
            return self.value.to_dict()
        return self.value

    def flat(self) -> list[str]:
        """Cells for the CSV export."""
        if self.kind == "real_vector":
            return [repr(float(x)) for x in self.value]
        if self.kind == "complex_vector":
            return [f"{float(z.real)!r}{float(z.imag):+.17g}j" for z in self.value]
        if self.kind == "control_vector":
            return [repr(float(x)) for x in self.value.to_array()]
        if self.kind == "scalar":
            return [repr(self.value)]
        return [self.value]


@dataclass(frozen=True, eq=False)
class Message:
    topic: str
    timestamp: float
    payload: Payload
    source: str = ""
    seq: int = 0

    def to_json(self) -> dict:
        d = {"t": self.timestamp, "topic": self.topic, "source": self.source, "kind": self.payload.kind,
             "value": self.payload.to_json()}
        if self.payload.labels is not None:
            d["labels"] = list(self.payload.labels)
        return d
