"""Rotary blood pump with inlet and outlet cannulae.

The pressure rise follows a quadratic head curve in speed and flow whose
coefficients are fitted to digitized HVAD characteristic points shipped in
``data/hvad_hq.json``.  Flow through the cannula branch is an inertial state
driven by the LV-aorta pressure difference plus the pump head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numba as nb
import numpy as np

ML_S_TO_L_MIN = 0.06
SPEED_MIN = 1800.0
SPEED_MAX = 4000.0
SUCTION_THRESHOLD = 1.0  # mmHg


def load_calibration():
    """Return (speed_rpm, flow_lpm, head_mmhg) arrays and the committed fit."""
    raw = resources.files("lvadsim").joinpath("data/hvad_hq.json").read_text()
    doc = json.loads(raw)
    pts = doc["points"]
    w = np.array([p["speed_rpm"] for p in pts], dtype=float)
    q = np.array([p["flow_lpm"] for p in pts], dtype=float)
    h = np.array([p["head_mmhg"] for p in pts], dtype=float)
    return w, q, h, doc["fitted"]


def fit_hq(speed, flow, head):
    """Least-squares fit of head = a0*w^2 + a1*w*Q + a2*Q^2."""
    speed, flow, head = (np.asarray(a, dtype=float) for a in (speed, flow, head))
    A = np.column_stack([speed**2, speed * flow, flow**2])
    coef, *_ = np.linalg.lstsq(A, head, rcond=None)
    return tuple(float(c) for c in coef)


_W, _Q, _H, _FIT = load_calibration()


@dataclass(frozen=True)
class PumpParameters:
    """Head-curve coefficients, cannula impedances and speed limits.

    Cannula values are literature-order assumptions (see the project notes);
    ``k_suc`` is the slope of the suction resistance below 1 mmHg LV pressure.
    """

    a0: float = _FIT["a0"]
    a1: float = _FIT["a1"]
    a2: float = _FIT["a2"]
    R_in: float = 0.0677
    R_out: float = 0.0677
    R_band: float = 0.0
    L_in: float = 0.0127
    L_out: float = 0.0644
    k_suc: float = 5.0  # left suction gain, mmHg.s/mL per mmHg below threshold
    k_rsuc: float = 5.0  # right (vena cava) suction gain
    speed_min: float = SPEED_MIN
    speed_max: float = SPEED_MAX

    def __post_init__(self):
        if not self.speed_min < self.speed_max:
            raise ValueError("speed_min must be below speed_max")
        if self.a0 <= 0 or self.a2 >= 0:
            raise ValueError("head curve needs a0 > 0 and a2 < 0")
        for n in ("R_in", "R_out", "R_band", "L_in", "L_out", "k_suc", "k_rsuc"):
            if getattr(self, n) < 0:
                raise ValueError(f"{n} must be non-negative")
        if self.L_in + self.L_out <= 0:
            raise ValueError("cannula branch needs a positive inertance")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PumpState:
    speed: float = 0.0  # rpm
    flow: float = 0.0  # mL/s


@nb.njit(cache=True)
def head_kernel(q_lpm, w, a0, a1, a2):
    # Q|Q| keeps the quadratic term dissipative for reverse flow
    return a0 * w * w + a1 * w * q_lpm + a2 * q_lpm * abs(q_lpm)


@nb.njit(cache=True)
def suction_resistance(p, k):
    if p < SUCTION_THRESHOLD:
        return k * (SUCTION_THRESHOLD - p)
    return 0.0


def pump_head(Q_p, omega, params: PumpParameters = PumpParameters()):
    """Pressure rise (mmHg) at flow ``Q_p`` (L/min) and speed ``omega`` (rpm)."""
    q = np.asarray(Q_p, dtype=float)
    out = params.a0 * omega**2 + params.a1 * omega * q + params.a2 * q * np.abs(q)
    return float(out) if np.ndim(out) == 0 else out


def cannula_derivative(P_lv, P_ao, state: PumpState, params: PumpParameters = PumpParameters()):
    """dQ_p/dt (mL/s^2) of the cannula branch."""
    q_lpm = state.flow * ML_S_TO_L_MIN
    r = params.R_in + params.R_out + params.R_band + suction_resistance(float(P_lv), params.k_suc)
    d = (P_lv - P_ao + head_kernel(q_lpm, float(state.speed), params.a0, params.a1, params.a2)
         - r * state.flow) / (params.L_in + params.L_out)
    if not np.isfinite(d):
        raise FloatingPointError("non-finite pump flow derivative")
    return float(d)


def steady_flow(P_lv, P_ao, omega, params: PumpParameters = PumpParameters()):
    """Flow (mL/s) that zeroes the branch equation at fixed pressures and speed."""
    from scipy.optimize import brentq

    f = lambda q: cannula_derivative(P_lv, P_ao, PumpState(omega, q), params)
    lo, hi = -500.0, 500.0
    while f(lo) < 0:
        lo *= 2
    while f(hi) > 0:
        hi *= 2
    return brentq(f, lo, hi, xtol=1e-12)


def clamp_speed(omega_cmd, params: PumpParameters | None = None):
    lo = SPEED_MIN if params is None else params.speed_min
    hi = SPEED_MAX if params is None else params.speed_max
    return min(max(float(omega_cmd), lo), hi)
