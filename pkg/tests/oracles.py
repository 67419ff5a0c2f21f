"""Reference computations written independently of the package internals."""

import numpy as np
from scipy.optimize import root

from dopf.power_flow import solve_controls


def nodal_admittance(net):
    """Full nodal admittance matrix assembled line by line."""
    idx = {nid: k for k, nid in enumerate(net.nodes)}
    Y = np.zeros((len(net.nodes), len(net.nodes)), dtype=complex)
    for ln in net.lines:
        a, b = idx[ln.from_node], idx[ln.to_node]
        Y[a, a] += ln.y + ln.shunt / 2
        Y[b, b] += ln.y + ln.shunt / 2
        Y[a, b] -= ln.y
        Y[b, a] -= ln.y
    for k, sh in enumerate(net.node_shunts or ()):
        Y[k, k] += sh
    return Y


def injections(Y, v_full):
    """Complex power injected at every node: v conj(Y v)."""
    return v_full * np.conj(Y @ v_full)


def newton_solve(net, s_L, v0=1.0 + 0j):
    """Power flow by a generic nonlinear root finder on the rectangular mismatch."""
    Y = nodal_admittance(net)
    n = len(net.nodes) - 1

    def mismatch(x):
        v = np.concatenate([[v0], x[:n] + 1j * x[n:]])
        d = injections(Y, v)[1:] - s_L
        return np.concatenate([d.real, d.imag])

    x0 = np.concatenate([np.full(n, v0.real), np.full(n, v0.imag)])
    sol = root(mismatch, x0, method="hybr", tol=1e-13)
    assert np.max(np.abs(mismatch(sol.x))) < 1e-11, sol.message
    return sol.x[:n] + 1j * sol.x[n:]


def line_current_oracle(net, vf):
    """Sending-end current of every line, series plus half the charging."""
    idx = {nid: k for k, nid in enumerate(net.nodes)}
    return np.array([(vf[idx[ln.from_node]] - vf[idx[ln.to_node]]) * ln.y + vf[idx[ln.from_node]] * ln.shunt / 2
                     for ln in net.lines])


def two_bus_voltage(y, s_load, v0=1.0):
    """|v| at the far end of one line feeding a constant-power load (larger root)."""
    z = 1 / y
    R, X = z.real, z.imag
    P, Q = s_load.real, s_load.imag
    b = 2 * (P * R + Q * X) - abs(v0) ** 2
    c = (P * P + Q * Q) * (R * R + X * X)
    return np.sqrt((-b + np.sqrt(b * b - 4 * c)) / 2)


def state_quantities(net, adm, maps, u):
    """|v|, |i|, losses from the nonlinear power flow at setpoints u."""
    st = solve_controls(net, adm, maps, u, _tight())
    Y = nodal_admittance(net)
    vf = np.concatenate([[st.v0], st.v_ref])
    i = line_current_oracle(net, vf)
    loss = complex(np.sum(injections(Y, vf)))
    return np.abs(st.v_L), np.abs(i), loss


def _tight():
    from dopf.power_flow import PFConfig

    return PFConfig(tol=1e-13, max_iter=2000)


def finite_difference(net, adm, maps, u, field, k, eps=1e-5):
    """Central differences of (|v|, |i|, p_loss, q_loss) w.r.t. one control entry."""
    arr = getattr(u, field).copy()
    arr[k] += eps
    up = state_quantities(net, adm, maps, u.replace(**{field: arr}))
    arr = getattr(u, field).copy()
    arr[k] -= eps
    dn = state_quantities(net, adm, maps, u.replace(**{field: arr}))
    dv = (up[0] - dn[0]) / (2 * eps)
    di = (up[1] - dn[1]) / (2 * eps)
    dl = (up[2] - dn[2]) / (2 * eps)
    return dv, di, dl.real, dl.imag


def nodal_injection_fd(net, adm, s_L, node, direction, eps=1e-5):
    """Central differences of |v|, |i| and losses for a raw injection change at one node."""
    from dopf.power_flow import solve_fixed_point

    out = []
    for sgn in (1, -1):
        s = s_L.copy()
        s[node] += sgn * eps * direction
        st = solve_fixed_point(adm, s, net.base_voltage, _tight())
        Y = nodal_admittance(net)
        vf = np.concatenate([[st.v0], st.v_L])
        i = line_current_oracle(net, vf)
        out.append((np.abs(st.v_L), np.abs(i), complex(np.sum(injections(Y, vf)))))
    (v1, i1, l1), (v2, i2, l2) = out
    d = 2 * eps
    return (v1 - v2) / d, (i1 - i2) / d, ((l1 - l2) / d).real, ((l1 - l2) / d).imag
