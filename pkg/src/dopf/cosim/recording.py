"""What the recorder captured, and its file exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .messages import Message


@dataclass
class Recording:
    messages: list
    scenario_hash: str
    seed: int
    scenario_name: str = ""
    duration: float = 0.0
    meta: dict = field(default_factory=dict)

    def topics(self) -> list[str]:
        seen = []
        for m in self.messages:
            if m.topic not in seen:
                seen.append(m.topic)
        return seen

    def on(self, topic: str) -> list[Message]:
        return [m for m in self.messages if m.topic == topic]

    def header(self) -> dict:
        return {"scenario": self.scenario_name, "hash": self.scenario_hash, "seed": self.seed,
                "duration": self.duration, "messages": len(self.messages)}

    def to_ndjson(self) -> str:
        """One JSON object per line: a header, then every message in order."""
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(m.to_json(), sort_keys=True) for m in self.messages]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "topic", "value"])
        for m in self.messages:
            wr.writerow([repr(float(m.timestamp)), m.topic, *m.payload.flat()])
        return buf.getvalue()

    def regulation_summary(self, v_lo, v_hi, voltage_topic: str, setpoint_topic: str | None = None,
                           event_time: float | None = None, tol: float = 0.0) -> dict:
        """Voltage-limit violations in the recorded feeder publications.

        Publications count as "after control" once their timestamp is past the
        first setpoint message issued after ``event_time`` (or after the first
        setpoint message at all when no event time is given).
        """
        v_lo = np.asarray(v_lo, dtype=float)
        v_hi = np.asarray(v_hi, dtype=float)
        t_ctrl = None
        if setpoint_topic is not None:
            for m in self.on(setpoint_topic):
                if event_time is None or m.timestamp > event_time:
                    t_ctrl = m.timestamp
                    break
        total = after = 0
        worst = -np.inf
        worst_after = -np.inf
        first_bad = None
        for m in self.on(voltage_topic):
            vm = np.abs(m.payload.value)
            excess = float(max(np.max(vm - v_hi, initial=-np.inf), np.max(v_lo - vm, initial=-np.inf)))
            worst = max(worst, excess)
            bad = excess > tol
            total += bad
            if t_ctrl is not None and m.timestamp > t_ctrl:
                worst_after = max(worst_after, excess)
                if bad:
                    after += 1
                    first_bad = m.timestamp if first_bad is None else first_bad
        return {
            "voltage_topic": voltage_topic, "control_time": t_ctrl, "violations_total": int(total),
            "violations_after_control": int(after) if t_ctrl is not None else None,
            "worst_excess": None if worst == -np.inf else worst,
            "worst_excess_after_control": None if worst_after == -np.inf else worst_after,
            "first_violation_after_control": first_bad,
        }
