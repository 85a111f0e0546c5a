"""Independent reference computations used by several test modules.

Each oracle solves the defining optimisation problem numerically instead of
using the closed forms implemented in the package.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize_scalar


def control_cost_minimizer(phi, e, dy_recent, du_recent, lam, Ly, Lu):
    """argmin over du of (e - phi^T dH(du))^2 + lam*du^2, where the one-step
    prediction y(k+1) - y(k) = phi^T dH(k) has dH(k) = [dy(k) .. dy(k-Ly+1),
    du, du(k-1) .. du(k-Lu+1)] and e = y_d - y(k)."""
    phi = np.asarray(phi, dtype=float)
    known = np.dot(phi[:Ly], np.asarray(dy_recent, dtype=float)[:Ly])
    known += np.dot(phi[Ly + 1:], np.asarray(du_recent, dtype=float)[: Lu - 1])
    lead = phi[Ly]

    def cost(du):
        r = e - known - lead * du
        return r * r + lam * du * du

    # the minimiser lies in [-|e-known|/|lead|, +...]; bracket generously
    scale = 1.0 + abs(e - known) * (1.0 + 1.0 / max(abs(lead), 1e-12))
    res = minimize_scalar(cost, bounds=(-scale, scale), method="bounded", options={"xatol": 1e-12, "maxiter": 2000})
    return float(res.x)


def pg_cost_minimizer(phi_prev, dH_prev, dy_k, mu):
    """argmin over phi of (dy - phi^T dH)^2 + mu*||phi - phi_prev||^2, solved as
    the stacked least-squares problem [dH^T; sqrt(mu) I] phi = [dy; sqrt(mu) phi_prev]."""
    phi_prev = np.asarray(phi_prev, dtype=float)
    dH = np.asarray(dH_prev, dtype=float)
    n = len(phi_prev)
    A = np.vstack([dH[None, :], np.sqrt(mu) * np.eye(n)])
    b = np.concatenate([[dy_k], np.sqrt(mu) * phi_prev])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def numeric_gradient(f, x, h=1e-6):
    """Central differences of scalar f with respect to array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
