"""Weighted least-squares estimation of nodal injections from partial measurements.

The unknowns are deviations of selected injection channels (active or
reactive power at a node). Measurements are voltage magnitudes at some nodes
and the active/reactive power entering at the root; both depend on the
channels through the power flow, and the sensitivity matrices give the
Jacobian. A Gaussian prior on the channels keeps unobservable directions
well posed; without one the Jacobian must have full column rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import RankDeficient, ShapeMismatch
from ..grid_model import AdmittanceModel, IncidenceMaps, NetworkModel
from ..linearization import build_sensitivities
from ..power_flow import (
    PFConfig,
    no_load_voltage,
    nominal_taps,
    regulator_taus,
    root_injection,
    solve_fixed_point,
    tap_shift,
)


def wls_solve(H, z, sigma, prior_mean=None, prior_cov=None):
    """Minimize ``(z - Hx)' W (z - Hx) + (x - m)' P^-1 (x - m)`` through the normal equations.

    Parameters
    ----------
    H : (k, p) array
    z : (k,) array
    sigma : float or (k,) array
        Measurement standard deviations; the weights are ``1 / sigma**2``.
    prior_mean, prior_cov : optional
        Gaussian prior on ``x``. Without it ``H`` must have full column rank.

    Returns
    -------
    x : (p,) array
    cov : (p, p) array
        Posterior covariance ``(H'WH + P^-1)^-1``.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ShapeMismatch("H must be two-dimensional")
    z = np.asarray(z, dtype=float).ravel()
    if H.shape[0] != z.size:
        raise ShapeMismatch(f"H has {H.shape[0]} rows but z has {z.size} entries")
    w = 1.0 / np.broadcast_to(np.asarray(sigma, dtype=float), z.shape) ** 2
    G = H.T @ (w[:, None] * H)
    rhs = H.T @ (w * z)
    if prior_cov is not None:
        P_inv = np.linalg.inv(np.asarray(prior_cov, dtype=float))
        m = np.zeros(H.shape[1]) if prior_mean is None else np.asarray(prior_mean, dtype=float)
        G = G + P_inv
        rhs = rhs + P_inv @ m
    else:
        rank = np.linalg.matrix_rank(H * np.sqrt(w)[:, None])
        if rank < H.shape[1]:
            raise RankDeficient(f"measurement Jacobian has rank {rank} for {H.shape[1]} unknowns")
    cov = np.linalg.inv(G)
    return np.linalg.solve(G, rhs), cov


class WLSStateEstimator(BaseEstimator, RegressorMixin):
    """Linear weighted least squares with an optional isotropic Gaussian prior.

    Parameters
    ----------
    sigma : float
        Measurement standard deviation used when ``fit`` is not given one.
    sigma_prior : float or None
        Prior standard deviation of every unknown around ``prior_mean``.
        ``None`` fits without a prior.

    Examples
    --------
    >>> import numpy as np
    >>> H = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    >>> est = WLSStateEstimator().fit(H, H @ [0.5, -1.0])
    >>> np.round(est.coef_, 12)
    array([ 0.5, -1. ])
    """

    def __init__(self, sigma=0.002, sigma_prior=None):
        self.sigma = sigma
        self.sigma_prior = sigma_prior

    def fit(self, H, z, sigma=None, prior_mean=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        prior_cov = None if self.sigma_prior is None else np.eye(H.shape[1]) * self.sigma_prior ** 2
        self.coef_, self.covariance_ = wls_solve(H, z, self.sigma if sigma is None else sigma,
                                                 prior_mean, prior_cov)
        self.n_features_in_ = H.shape[1]
        return self

    def predict(self, H):
        check_is_fitted(self, "coef_")
        return np.atleast_2d(np.asarray(H, dtype=float)) @ self.coef_


@dataclass(frozen=True)
class Channel:
    node: int  # position among the non-root nodes
    kind: str  # "p" or "q"

    @property
    def direction(self) -> complex:
        return 1.0 if self.kind == "p" else 1j


def channels_for(net: NetworkModel, kinds: str = "pq", nodes=None) -> list[Channel]:
    """Channels of the given kinds at ``nodes`` (ids; default every non-root node)."""
    idx = net.node_index
    pos = range(net.n) if nodes is None else [idx[n] - 1 for n in nodes]
    return [Channel(k, kind) for kind in kinds for k in pos]


def parse_labels(net: NetworkModel, labels) -> list[tuple[str, int]]:
    """``"v:<node id>"``, ``"P0"`` and ``"Q0"`` labels to ``(kind, index)`` pairs."""
    idx = net.node_index
    out = []
    for lab in labels:
        if lab in ("P0", "Q0"):
            out.append((lab, -1))
        elif lab.startswith("v:") and idx.get(lab[2:], 0) > 0:
            out.append(("v", idx[lab[2:]] - 1))
        else:
            raise ShapeMismatch(f"unknown measurement label {lab!r}")
    return out


def measurement_model(sens, channels, meas):
    """Jacobian ``H`` (one row per measurement) and the values predicted at the linearization point."""
    one = np.ones(sens.n)
    s0 = -complex(sens.base.s_L.sum()) + complex(sens.c_hat, sens.d_hat)
    rows, pred = [], []
    for kind, k in meas:
        if kind == "v":
            dp, dq, val = sens.Mv_p[k], sens.Mv_q[k], sens.a_hat[k]
        elif kind == "P0":
            dp, dq, val = -one + sens.ml_p_p, sens.ml_p_q, s0.real
        else:
            dp, dq, val = sens.ml_q_p, -one + sens.ml_q_q, s0.imag
        rows.append([dp[c.node] if c.kind == "p" else dq[c.node] for c in channels])
        pred.append(val)
    return np.array(rows, dtype=float).reshape(len(meas), len(channels)), np.array(pred, dtype=float)


class InjectionFilter:
    """Recursive estimate of nodal injections from a stream of measurement snapshots.

    Each snapshot is folded in by a few Gauss-Newton steps of the WLS problem
    with the current Gaussian prior; the posterior becomes the next prior,
    widened by ``sigma_process``. A snapshot whose normalized innovation
    exceeds the ``reset_quantile`` chi-square bound resets the prior to
    ``sigma_prior`` so step changes are picked up at once.

    Parameters
    ----------
    s_init : (n,) complex array
        Initial injection guess (the forecast).
    sigma_prior : float or None
        ``None`` disables the prior; the Jacobian must then be full rank.
    """

    def __init__(self, net: NetworkModel, adm: AdmittanceModel, maps: IncidenceMaps, s_init, channels,
                 sigma=0.002, sigma_power=0.002, sigma_prior=0.05, sigma_process=0.001,
                 reset_quantile=0.999, iterations=3, cfg: PFConfig = PFConfig(tol=1e-10, max_iter=500)):
        self.net, self.adm, self.maps = net, adm, maps
        self.channels = list(channels)
        self.sigma, self.sigma_power = sigma, sigma_power
        self.sigma_prior, self.sigma_process = sigma_prior, sigma_process
        self.reset_quantile, self.iterations, self.cfg = reset_quantile, iterations, cfg
        self.s = np.asarray(s_init, dtype=complex).copy()
        p = len(self.channels)
        self.P = None if sigma_prior is None else np.eye(p) * sigma_prior ** 2
        self.taps = nominal_taps(net)
        self.resets = 0
        self._E = np.zeros((net.n, p), dtype=complex)
        for j, c in enumerate(self.channels):
            self._E[c.node, j] = c.direction

    def _shift(self):
        w = no_load_voltage(self.adm, self.net.base_voltage)
        return tap_shift(w, self.maps.C_r, regulator_taus(self.net), self.taps - nominal_taps(self.net))

    def _linearize(self, s, meas):
        base = solve_fixed_point(self.adm, s, self.net.base_voltage, self.cfg, w_shift=self._shift())
        taus = regulator_taus(self.net) if self.net.devices.regulators else 0.00625
        sens = build_sensitivities(self.adm, self.maps, base, taus)
        return measurement_model(sens, self.channels, meas)

    def shift(self, ds, taps=None):
        """Known change of the injections (and taps), e.g. new setpoints taking effect."""
        self.s = self.s + np.asarray(ds, dtype=complex)
        if taps is not None:
            self.taps = np.asarray(taps, dtype=float).copy()

    def update(self, labels, values) -> np.ndarray:
        """Fold one snapshot in; returns the new injection estimate."""
        meas = parse_labels(self.net, labels)
        z = np.asarray(values, dtype=float)
        if z.size != len(meas):
            raise ShapeMismatch(f"{z.size} values for {len(meas)} labels")
        sig = np.array([self.sigma if kind == "v" else self.sigma_power for kind, _ in meas])
        p = len(self.channels)
        P = None
        if self.P is not None:
            P = self.P + np.eye(p) * self.sigma_process ** 2
            H, pred = self._linearize(self.s, meas)
            r = z - pred
            S = H @ P @ H.T + np.diag(sig ** 2)
            if r @ np.linalg.solve(S, r) > chi2.ppf(self.reset_quantile, max(z.size, 1)):
                P = np.eye(p) * self.sigma_prior ** 2
                self.resets += 1
        m, s = self.s, self.s.copy()
        cov = None
        for _ in range(self.iterations):
            H, pred = self._linearize(s, meas)
            offset = np.real(np.conj(self._E).T @ (m - s))  # prior mean relative to s
            dx, cov = wls_solve(H, z - pred, sig, offset if P is not None else None, P)
            s = s + self._E @ dx
            if np.max(np.abs(dx), initial=0.0) < 1e-12:
                break
        self.s = s
        if P is not None:
            self.P = cov
        return self.s

    def voltages(self) -> np.ndarray:
        """|v| at every non-root node for the current estimate."""
        st = solve_fixed_point(self.adm, self.s, self.net.base_voltage, self.cfg, w_shift=self._shift())
        return np.abs(st.v_L)

    def root_power(self) -> complex:
        st = solve_fixed_point(self.adm, self.s, self.net.base_voltage, self.cfg, w_shift=self._shift())
        return root_injection(self.adm, st)


__all__ = ["Channel", "InjectionFilter", "WLSStateEstimator", "channels_for",
           "measurement_model", "parse_labels", "wls_solve"]
