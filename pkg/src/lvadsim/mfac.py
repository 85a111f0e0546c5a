"""Full-form dynamic-linearization model-free adaptive control (FFDL-MFAC).

The plant is treated as an unknown SISO map from the control input u to the
per-cycle output y (here LV preload).  Locally,

    dy(k+1) = phi(k)^T dH(k),
    dH(k)   = [dy(k) ... dy(k-Ly+1), du(k) ... du(k-Lu+1)],

and the controller alternates a projection update of the pseudo gradient
``phi``, a reset rule that guards its magnitude and the sign of the
u-coefficient, and a one-step weighted tracking law.

The actuation seen by the algorithm is ``u = speed / u_scale``.  With
``u_scale = 1`` the controller works directly in rpm.  A negative ``u_scale``
flips the input direction so that a positive leading gain matches a plant
whose output falls as speed rises (preload versus pump speed).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MfacParams:
    Lu: int = 3
    Ly: int = 3
    lam: float = 1.0
    mu: float = 1.0
    eta: float = 0.3
    eps: float = 1e-4
    rho: tuple = (0.05,) * 6
    phi_init: tuple = (1.0,) * 6
    u_scale: float = -1000.0  # rpm per control unit; the sign maps rising speed to falling preload
    u_min: float = 1800.0  # rpm
    u_max: float = 4000.0  # rpm

    def __post_init__(self):
        n = self.Lu + self.Ly
        if self.Lu < 1 or self.Ly < 0:
            raise ValueError("need Lu >= 1 and Ly >= 0")
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("lam and mu must be positive")
        if not 0 < self.eta <= 2:
            raise ValueError("eta must lie in (0, 2]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if len(self.rho) != n or len(self.phi_init) != n:
            raise ValueError(f"rho and phi_init need length Lu+Ly = {n}")
        if any(not 0 < r <= 1 for r in self.rho):
            raise ValueError("each rho must lie in (0, 1]")
        if self.phi_init[self.Ly] == 0:
            raise ValueError("phi_init must fix the sign of the u(k) coefficient")
        if self.u_scale == 0:
            raise ValueError("u_scale must be non-zero")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")

    @property
    def n(self):
        return self.Lu + self.Ly

    def to_dict(self):
        d = asdict(self)
        d["rho"] = list(self.rho)
        d["phi_init"] = list(self.phi_init)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("rho", "phi_init"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MfacState:
    """Controller memory.

    ``y_hist`` holds y(k-1), y(k-2), ... (Ly+1 values, newest first) and
    ``u_hist`` holds u(k-1), u(k-2), ... (Lu+1 values), both in control units.
    Histories start flat, so every difference is zero until real data arrives.
    """

    phi: np.ndarray
    y_hist: np.ndarray
    u_hist: np.ndarray
    steps: int = 0
    log: list = field(default_factory=list, repr=False)

    @classmethod
    def initial(cls, params: MfacParams, u0_rpm: float, y0: float | None = None):
        u0 = u0_rpm / params.u_scale
        return cls(
            phi=np.array(params.phi_init, dtype=float),
            y_hist=np.full(params.Ly + 2, np.nan if y0 is None else float(y0)),
            u_hist=np.full(params.Lu + 1, float(u0)),
        )

    def copy(self):
        return MfacState(self.phi.copy(), self.y_hist.copy(), self.u_hist.copy(), self.steps, list(self.log))

    def last_speed(self, params: MfacParams):
        return float(self.u_hist[0] * params.u_scale)


def delta_h(dy, du, Ly, Lu):
    """Stack [dy_0..dy_{Ly-1}, du_0..du_{Lu-1}] (newest first)."""
    return np.concatenate([np.asarray(dy, dtype=float)[:Ly], np.asarray(du, dtype=float)[:Lu]])


def _diffs(h):
    return h[:-1] - h[1:]


def _history_with(state: MfacState, y_k):
    yh = np.concatenate([[y_k], state.y_hist])
    yh = np.where(np.isnan(yh), y_k, yh)
    return yh


def previous_delta_h(state: MfacState, y_k, params: MfacParams):
    """dH(k-1) = [dy(k-1) .. dy(k-Ly), du(k-1) .. du(k-Lu)] and dy(k)."""
    yh = _history_with(state, y_k)  # y(k), y(k-1), ..., y(k-Ly-1)
    dy = _diffs(yh)  # dy(k), dy(k-1), ..., dy(k-Ly)
    du = _diffs(state.u_hist)  # du(k-1), ..., du(k-Lu)
    return delta_h(dy[1:], du, params.Ly, params.Lu), float(dy[0])


def pg_update(phi_prev, dH_prev, dy_k, params: MfacParams):
    """Projection update of the pseudo gradient."""
    phi_prev = np.asarray(phi_prev, dtype=float)
    dH_prev = np.asarray(dH_prev, dtype=float)
    innov = dy_k - phi_prev @ dH_prev
    return phi_prev + params.eta * dH_prev * innov / (params.mu + dH_prev @ dH_prev)


def estimate_pg(state: MfacState, y_k, params: MfacParams):
    """Pseudo-gradient estimate phi(k) before the reset rule."""
    if state.steps == 0:
        return np.array(params.phi_init, dtype=float)
    dH, dy_k = previous_delta_h(state, y_k, params)
    return pg_update(state.phi, dH, dy_k, params)


def reset_reason(phi, dH, params: MfacParams):
    """Name of the first reset trigger that fires, or None."""
    phi = np.asarray(phi, dtype=float)
    if np.linalg.norm(phi) <= params.eps:
        return "phi_norm"
    if np.linalg.norm(dH) <= params.eps:
        return "dH_norm"
    if np.sign(phi[params.Ly]) != np.sign(params.phi_init[params.Ly]):
        return "sign"
    return None


def apply_reset(phi, dH, params: MfacParams):
    if reset_reason(phi, dH, params) is not None:
        return np.array(params.phi_init, dtype=float)
    return np.asarray(phi, dtype=float)


def control_increment(phi, e, dy_recent, du_recent, params: MfacParams):
    """Unclamped du(k) of the weighted one-step tracking law.

    ``e`` is y_d - y(k); ``dy_recent`` = dy(k) .. dy(k-Ly+1);
    ``du_recent`` = du(k-1) .. du(k-Lu+1).
    """
    Ly, Lu = params.Ly, params.Lu
    rho = np.asarray(params.rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    lead = phi[Ly]
    num = rho[Ly] * e
    num -= np.dot(rho[:Ly] * phi[:Ly], np.asarray(dy_recent, dtype=float)[:Ly])
    num -= np.dot(rho[Ly + 1:] * phi[Ly + 1:], np.asarray(du_recent, dtype=float)[: Lu - 1])
    return lead * num / (params.lam + lead * lead)


def compute_control(state: MfacState, phi, y_k, y_d, params: MfacParams, clamp=True):
    """Control u(k) in rpm from phi(k), the output and the histories."""
    yh = _history_with(state, y_k)
    dy_recent = _diffs(yh)[: params.Ly]
    du_recent = _diffs(state.u_hist)[: params.Lu - 1]
    du = control_increment(phi, y_d - y_k, dy_recent, du_recent, params)
    u_rpm = (state.u_hist[0] + du) * params.u_scale
    if clamp:
        u_rpm = min(max(u_rpm, params.u_min), params.u_max)
    return float(u_rpm)


def controller_step(state: MfacState, y_k, y_d, params: MfacParams, warmup: int | None = None):
    """One full controller cycle; returns (speed in rpm, new state).

    For the first ``warmup`` calls (default max(Lu, Ly)) the speed is held and
    phi stays at its initial value while the histories fill.
    """
    if not math.isfinite(y_k) or not math.isfinite(y_d):
        raise ValueError("controller output and target must be finite")
    warmup = max(params.Lu, params.Ly) if warmup is None else warmup
    new = state.copy()
    if new.steps == 0:
        new.y_hist[:] = np.where(np.isnan(new.y_hist), y_k, new.y_hist)
    dH, dy_k = previous_delta_h(new, y_k, params)
    if new.steps < warmup:
        phi = np.array(params.phi_init, dtype=float)
        reason = "warmup"
        u_rpm = new.last_speed(params)
    else:
        raw = pg_update(new.phi, dH, dy_k, params)
        reason = reset_reason(raw, dH, params)
        phi = np.array(params.phi_init, dtype=float) if reason else raw
        u_rpm = compute_control(new, phi, y_k, y_d, params)
    new.log.append({"phi": phi.copy(), "dH": dH, "dy": dy_k, "u": u_rpm,
                    "du": u_rpm / params.u_scale - new.u_hist[0], "reset": reason})
    new.phi = phi
    new.y_hist = np.concatenate([[y_k], new.y_hist[:-1]])
    new.u_hist = np.concatenate([[u_rpm / params.u_scale], new.u_hist[:-1]])
    new.steps += 1
    return u_rpm, new


def assumption_diagnostics(log):
    """Empirical Lipschitz ratio max|dy|/||dH|| and the reset counts.

    ``log`` is the per-step list recorded by :func:`controller_step`, or any
    iterable of dicts with keys ``dy``, ``dH`` and ``reset``.
    """
    ratio = 0.0
    counts = {"sign": 0, "phi_norm": 0, "dH_norm": 0}
    for rec in log:
        nrm = float(np.linalg.norm(rec["dH"]))
        if nrm > 0:
            ratio = max(ratio, abs(float(rec["dy"])) / nrm)
        if rec.get("reset") in counts:
            counts[rec["reset"]] += 1
    return {"lipschitz_ratio": ratio, "sign_resets": counts["sign"], "phi_norm_resets": counts["phi_norm"],
            "dH_norm_resets": counts["dH_norm"], "steps": len(log)}
