"""Fixed-grid RK4 with optional forward sensitivities.

Integration runs on a uniform grid over the clamped span; if the requested
end time lies past the clamp, one explicit Euler step closes the gap (the
fields used here are singular exactly at t=1 but their Euler step is not).
"""

from __future__ import annotations

import numpy as np


def time_grid(s0: float, s1: float, n_steps: int, lo: float, hi: float):
    """Uniform RK4 nodes on [max(s0, lo), min(s1, hi)] plus the Euler tail end.

    Returns ``(nodes, tail)`` where ``tail`` is the end of the closing Euler
    step or ``None``.  ``nodes`` may have a single entry (nothing to
    integrate).
    """
    a = max(s0, lo)
    b = min(s1, hi)
    nodes = np.linspace(a, b, n_steps + 1) if b > a else np.array([a])
    tail = s1 if s1 > hi and s1 > nodes[-1] else None
    return nodes, tail


def rk4(field, y, nodes, tail=None):
    """Integrate dy/ds = field(y, s) over ``nodes``."""
    for s, s_next in zip(nodes[:-1], nodes[1:]):
        h = s_next - s
        k1 = field(y, s)
        k2 = field(y + 0.5 * h * k1, s + 0.5 * h)
        k3 = field(y + 0.5 * h * k2, s + 0.5 * h)
        k4 = field(y + h * k3, s_next)
        y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if tail is not None:
        y = y + (tail - nodes[-1]) * field(y, nodes[-1])
    return y


def rk4_tangent(field_jac, y, tangent, nodes, tail=None):
    """RK4 on the state and its sensitivity matrix jointly.

    ``field_jac(y, s)`` returns ``(u, J_y, J_p)`` with u of shape (n, d),
    J_y the (n, d, d) state Jacobian and J_p the (n, d, d) Jacobian with
    respect to an external parameter (or None).  The tangent obeys
    ``dT/ds = J_y T + J_p``; the result is the exact derivative of the
    discrete RK4 map.
    """

    def rhs(y, tan, s):
        u, jy, jp = field_jac(y, s)
        dt = jy @ tan
        if jp is not None:
            dt = dt + jp
        return u, dt

    for s, s_next in zip(nodes[:-1], nodes[1:]):
        h = s_next - s
        k1, l1 = rhs(y, tangent, s)
        k2, l2 = rhs(y + 0.5 * h * k1, tangent + 0.5 * h * l1, s + 0.5 * h)
        k3, l3 = rhs(y + 0.5 * h * k2, tangent + 0.5 * h * l2, s + 0.5 * h)
        k4, l4 = rhs(y + h * k3, tangent + h * l3, s_next)
        y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tangent = tangent + h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
    if tail is not None:
        h = tail - nodes[-1]
        k, l = rhs(y, tangent, nodes[-1])
        y = y + h * k
        tangent = tangent + h * l
    return y, tangent
