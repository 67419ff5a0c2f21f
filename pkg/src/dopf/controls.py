"""The controllable-injection vector and its device boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BoxViolation, ShapeMismatch

BLOCKS = ("p_fl", "q_cb", "t_rg", "p_pv", "q_pv")


@dataclass(frozen=True, eq=False)
class ControlVector:
    """Device setpoints ``{p_fl, q_cb, t_rg, p_pv, q_pv, p0, q0}``.

    ``p_fl`` is flexible-load shed, ``q_cb`` cap-bank reactive supply,
    ``t_rg`` regulator tap position (continuous relaxation), ``p_pv`` PV
    curtailment, ``q_pv`` PV reactive injection, ``p0``/``q0`` feed-in at the
    root.
    """

    p_fl: np.ndarray
    q_cb: np.ndarray
    t_rg: np.ndarray
    p_pv: np.ndarray
    q_pv: np.ndarray
    p0: float = 0.0
    q0: float = 0.0

    def __post_init__(self):
        for name in BLOCKS:
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel())
        if self.p_pv.shape != self.q_pv.shape:
            raise ShapeMismatch("p_pv and q_pv must have the same length")
        object.__setattr__(self, "p0", float(self.p0))
        object.__setattr__(self, "q0", float(self.q0))

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.p_fl), len(self.q_cb), len(self.t_rg), len(self.p_pv)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p_fl, self.q_cb, self.t_rg, self.p_pv, self.q_pv, [self.p0, self.q0]])

    @classmethod
    def from_array(cls, arr, sizes) -> "ControlVector":
        nfl, ncb, nrg, npv = sizes
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (nfl + ncb + nrg + 2 * npv + 2,):
            raise ShapeMismatch(f"control array of shape {arr.shape} does not match sizes {sizes}")
        cuts = np.cumsum([nfl, ncb, nrg, npv, npv])
        p_fl, q_cb, t_rg, p_pv, q_pv, rest = np.split(arr, cuts)
        return cls(p_fl, q_cb, t_rg, p_pv, q_pv, rest[0], rest[1])

    def replace(self, **changes) -> "ControlVector":
        kw = {name: getattr(self, name) for name in BLOCKS + ("p0", "q0")}
        kw.update(changes)
        return ControlVector(**kw)

    def allclose(self, other: "ControlVector", atol=1e-12) -> bool:
        return self.sizes == other.sizes and np.allclose(self.to_array(), other.to_array(), rtol=0, atol=atol)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name).tolist() for name in BLOCKS}
        d.update(p0=self.p0, q0=self.q0)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControlVector":
        return cls(**{k: d.get(k, []) for k in BLOCKS}, p0=d.get("p0", 0.0), q0=d.get("q0", 0.0))


def nominal_controls(net, p0: float = 0.0, q0: float = 0.0) -> ControlVector:
    """Rated reference setpoints: no shed, cap banks at rating, taps nominal."""
    dev = net.devices
    return ControlVector(
        p_fl=[d.nominal for d in dev.flexible_loads],
        q_cb=[d.rating for d in dev.cap_banks],
        t_rg=[d.tap for d in dev.regulators],
        p_pv=np.zeros(len(dev.pv_units)),
        q_pv=[d.q_nominal for d in dev.pv_units],
        p0=p0,
        q0=q0,
    )


def control_bounds(net) -> tuple[ControlVector, ControlVector]:
    """Device boxes; ``p0``/``q0`` are unbounded."""
    dev = net.devices
    lo = ControlVector(
        p_fl=[d.p_min for d in dev.flexible_loads],
        q_cb=[d.q_min for d in dev.cap_banks],
        t_rg=[d.tap_min for d in dev.regulators],
        p_pv=np.zeros(len(dev.pv_units)),
        q_pv=[d.q_min for d in dev.pv_units],
        p0=-np.inf,
        q0=-np.inf,
    )
    hi = ControlVector(
        p_fl=[d.p_max for d in dev.flexible_loads],
        q_cb=[d.q_max for d in dev.cap_banks],
        t_rg=[d.tap_max for d in dev.regulators],
        p_pv=[d.p_rating for d in dev.pv_units],
        q_pv=[d.q_max for d in dev.pv_units],
        p0=np.inf,
        q0=np.inf,
    )
    return lo, hi


def device_sizes(net) -> tuple[int, int, int, int]:
    dev = net.devices
    return len(dev.flexible_loads), len(dev.cap_banks), len(dev.regulators), len(dev.pv_units)


def check_box(net, u: ControlVector, tol: float = 1e-9) -> None:
    if u.sizes != device_sizes(net):
        raise ShapeMismatch(f"control sizes {u.sizes} do not match the network devices {device_sizes(net)}")
    lo, hi = control_bounds(net)
    x, a, b = u.to_array(), lo.to_array(), hi.to_array()
    bad = np.flatnonzero((x < a - tol) | (x > b + tol))
    if bad.size:
        k = int(bad[0])
        raise BoxViolation(f"control entry {k} = {x[k]:.6g} outside [{a[k]:.6g}, {b[k]:.6g}]")


def clip_to_box(net, u: ControlVector) -> ControlVector:
    lo, hi = control_bounds(net)
    return ControlVector.from_array(np.clip(u.to_array(), lo.to_array(), hi.to_array()), u.sizes)
