"""Closed-loop lumped-parameter model of the cardiovascular system.

Ten volume compartments (la, lv, ao, sa, sv, vc, ra, rv, pa, pu) joined by
resistive, inertial and diode branches.  Active chambers use a time-varying
elastance; passive compartments are linear compliances.  All pressures are in
mmHg, volumes in mL, flows in mL/s.

The scalar building blocks are numba-compiled so that the fixed-step kernel in
:mod:`lvadsim.kernel` and the Python-level API below share one implementation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numba as nb
import numpy as np

DYNE_TO_MMHG = 1.0 / 1333.22  # dyne.s.cm^-5 -> mmHg.s.mL^-1

# Reference parameter order; the ±20% patient multipliers follow this order as well.
TABLE_I_NAMES = (
    "Eeslvf", "Eesrvf", "Eao", "Eesla", "Eesra", "Epa", "Epu", "Esa", "Esv", "Evc",
    "Rao", "Rra", "Rpv", "Rsv", "Tc", "Tsys0",
    "V0la", "V0lvf", "V0ra", "V0rvf", "Vdla", "Vdlvf", "Vdra", "Vdrvf",
    "Rmt", "Rav",
    "Vuao", "Vupa", "Vupu", "Vusa", "Vusv", "Vuvc",
    "P0la", "P0lvf", "P0ra", "P0rvf",
    "Vtotal",
    "lam_la", "lam_lvf", "lam_ra", "lam_rvf",
    "Lao", "Lpa",
)

# Field name -> conventional symbol (used as JSON keys).
_JSON_KEYS = {"lam_la": "λla", "lam_lvf": "λlvf", "lam_ra": "λra", "lam_rvf": "λrvf"}
_FROM_JSON = {v: k for k, v in _JSON_KEYS.items()}

COMPARTMENTS = ("la", "lv", "ra", "rv", "ao", "sa", "sv", "vc", "pa", "pu")
STATE_NAMES = tuple(f"V{c}" for c in COMPARTMENTS) + ("Qao", "Qpa")

VENTRICLE, ATRIUM = 0, 1
ATRIAL_LEAD = 0.16  # s


@dataclass(frozen=True)
class CvsParameters:
    """Physiological constants of one virtual patient.

    The first 43 fields are the reference circulation parameters.
    The remaining fields close the circuit where the published table is
    silent; they are not perturbed when a cohort is generated.

    ``svr`` and ``pvr`` are total vascular resistances in dyne.s.cm^-5; the
    peripheral resistances ``Rsa`` and ``Rpa`` are whatever remains after the
    series resistances on the same path are subtracted (see
    :meth:`Rsa` / :meth:`Rpa`).
    """

    Eeslvf: float = 3.54
    Eesrvf: float = 1.75
    Eao: float = 1.04
    Eesla: float = 0.2
    Eesra: float = 0.2
    Epa: float = 0.15
    Epu: float = 0.04
    Esa: float = 0.37
    Esv: float = 0.013
    Evc: float = 0.03
    Rao: float = 0.2
    Rra: float = 0.012
    Rpv: float = 0.02
    Rsv: float = 0.12
    Tc: float = 1.0
    Tsys0: float = 0.5
    V0la: float = 20.0
    V0lvf: float = 40.0
    V0ra: float = 20.0
    V0rvf: float = 50.0
    Vdla: float = 10.0
    Vdlvf: float = 16.77
    Vdra: float = 10.0
    Vdrvf: float = 40.0
    Rmt: float = 0.01
    Rav: float = 0.02
    Vuao: float = 230.88
    Vupa: float = 91.67
    Vupu: float = 132.39
    Vusa: float = 231.04
    Vusv: float = 1976.1
    Vuvc: float = 136.17
    P0la: float = 0.5
    P0lvf: float = 0.98
    P0ra: float = 0.5
    P0rvf: float = 0.91
    Vtotal: float = 5200.0
    lam_la: float = 0.025
    lam_lvf: float = 0.028
    lam_ra: float = 0.025
    lam_rvf: float = 0.028
    Lao: float = 0.0001
    Lpa: float = 7.70e-05
    # --- circuit closure (closing resistances) ---
    P_thor: float = -4.0
    svr: float = 1300.0  # dyne.s.cm^-5
    pvr: float = 100.0  # dyne.s.cm^-5
    R_pula: float = 0.01  # pulmonary vein -> LA
    R_vcra: float = 0.01  # vena cava -> RA
    lv_contractility: float = 0.3  # failing-LV scaling of Eeslvf

    def __post_init__(self):
        for name in TABLE_I_NAMES:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.Tc > self.Tsys0 * math.sqrt(self.Tc):
            raise ValueError("systolic period must be shorter than the heart period")
        if self.Vtotal <= self.unstressed_volume():
            raise ValueError("Vtotal must exceed the sum of unstressed volumes")
        if self.Rsa <= 0 or self.Rpa <= 0:
            raise ValueError("svr/pvr too small for the series resistances on their path")
        if not 0 < self.lv_contractility <= 1:
            raise ValueError("lv_contractility must lie in (0, 1]")

    @property
    def Rsa(self) -> float:
        return self.svr * DYNE_TO_MMHG - self.Rao - self.Rsv - self.R_vcra

    @property
    def Rpa(self) -> float:
        return self.pvr * DYNE_TO_MMHG - self.R_pula

    @property
    def heart_rate(self) -> float:
        return 60.0 / self.Tc

    def unstressed_volume(self) -> float:
        return (self.V0la + self.V0lvf + self.V0ra + self.V0rvf + self.Vuao + self.Vupa
                + self.Vupu + self.Vusa + self.Vusv + self.Vuvc)

    def table_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TABLE_I_NAMES])

    def scaled(self, multipliers) -> "CvsParameters":
        """Return a copy with every reference parameter multiplied element-wise."""
        m = np.asarray(multipliers, dtype=float)
        if m.shape != (len(TABLE_I_NAMES),):
            raise ValueError(f"expected {len(TABLE_I_NAMES)} multipliers, got {m.shape}")
        return replace(self, **{n: getattr(self, n) * float(k) for n, k in zip(TABLE_I_NAMES, m)})

    def to_dict(self) -> dict:
        return {_JSON_KEYS.get(k, k): v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CvsParameters":
        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            name = _FROM_JSON.get(k, k)
            if name not in known:
                raise KeyError(f"unknown CVS parameter {k!r}")
            kw[name] = float(v)
        return cls(**kw)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False))

    @classmethod
    def from_json(cls, path) -> "CvsParameters":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class CvsState:
    """Instantaneous compartment volumes (mL), inertial flows (mL/s) and cycle phase (s)."""

    Vla: float
    Vlv: float
    Vra: float
    Vrv: float
    Vao: float
    Vsa: float
    Vsv: float
    Vvc: float
    Vpa: float
    Vpu: float
    Qao: float = 0.0
    Qpa: float = 0.0
    t_cycle: float = 0.0
    extra: dict = field(default_factory=dict, repr=False)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES])

    @classmethod
    def from_array(cls, x, t_cycle=0.0) -> "CvsState":
        return cls(*[float(v) for v in x[: len(STATE_NAMES)]], t_cycle=t_cycle)

    def total_volume(self) -> float:
        return float(sum(getattr(self, f"V{c}") for c in COMPARTMENTS))

    @classmethod
    def initial(cls, params: CvsParameters) -> "CvsState":
        """Plausible starting point: chambers slightly filled, the remaining
        stressed volume spread over the passive compartments by compliance."""
        p = params
        chambers = [p.V0la + 15.0, p.V0lvf + 40.0, p.V0ra + 15.0, p.V0rvf + 40.0]
        vu = np.array([p.Vuao, p.Vusa, p.Vusv, p.Vuvc, p.Vupa, p.Vupu])
        comp = 1.0 / np.array([p.Eao, p.Esa, p.Esv, p.Evc, p.Epa, p.Epu])
        stressed = p.Vtotal - sum(chambers) - vu.sum()
        if stressed <= 0:
            raise ValueError("total volume too small to fill the chambers")
        passive = vu + stressed * comp / comp.sum()
        return cls(*chambers, *passive)


@nb.njit(cache=True)
def systolic_period(heart_period, tsys0):
    return tsys0 * math.sqrt(heart_period)


@nb.njit(cache=True)
def _activation(t_cycle, heart_period, tsys0, chamber):
    ts = tsys0 * math.sqrt(heart_period)
    if chamber == ATRIUM:
        t_cycle = (t_cycle + ATRIAL_LEAD) % heart_period
    if t_cycle < ts:
        return 0.5 * (1.0 - math.cos(2.0 * math.pi * t_cycle / ts))
    return 0.0


@nb.njit(cache=True)
def active_pressure(v, e, ees, vd, p0, lam, v0, p_thor):
    return e * ees * (v - vd) + (1.0 - e) * p0 * (math.exp(lam * (v - v0)) - 1.0) + p_thor


@nb.njit(cache=True)
def diode_flow(p_up, p_down, r):
    if p_up > p_down:
        return (p_up - p_down) / r
    return 0.0


def activation(t_cycle: float, heart_period: float, params: CvsParameters, chamber=VENTRICLE) -> float:
    """Normalised elastance driver e(t) in [0, 1].

    Ventricles follow a raised cosine over the systolic window
    ``Tsys0 * sqrt(T)``; the atria use the same shape advanced by 0.16 s.
    """
    if heart_period <= 0:
        raise ValueError("heart_period must be positive")
    if isinstance(chamber, str):
        chamber = {"ventricle": VENTRICLE, "atrium": ATRIUM}[chamber]
    return _activation(float(t_cycle), float(heart_period), float(params.Tsys0), chamber)


def chamber_pressure(V, e, ees=None, vd=None, p0=None, lam=None, v0=None, p_thor=0.0, *, elastance=None,
                     unstressed=None):
    """Pressure of a heart chamber (time-varying elastance) or a passive compliance.

    Active form: ``e*Ees*(V-Vd) + (1-e)*P0*(exp(lam*(V-V0))-1) + P_thor``.
    Passive form (``elastance`` given): ``E*(V-Vu) + P_thor``.
    """
    if elastance is not None:
        return elastance * (V - unstressed) + p_thor
    return active_pressure(float(V), float(e), ees, vd, p0, lam, v0, float(p_thor))


def valve_flow(p_up: float, p_down: float, R: float) -> float:
    """Ideal diode in series with a resistance."""
    if R <= 0:
        raise ValueError("valve resistance must be positive")
    return diode_flow(float(p_up), float(p_down), float(R))


def cvs_derivatives(state: CvsState, params: CvsParameters, pump_flow: float, t_cycle: float | None = None,
                    heart_period: float | None = None) -> np.ndarray:
    """Time derivative of the 12 circulatory states (10 volumes, Qao, Qpa).

    ``pump_flow`` (mL/s) leaves the LV and enters the aorta.
    """
    from . import kernel

    t_cycle = state.t_cycle if t_cycle is None else t_cycle
    heart_period = params.Tc if heart_period is None else heart_period
    p = kernel.pack_params(params)
    x = np.zeros(kernel.N_STATE)
    x[:12] = state.as_array()
    x[kernel.I_QP] = float(pump_flow)
    dx = np.zeros(kernel.N_STATE)
    out = np.zeros(kernel.N_OUT)
    kernel.circulation_rhs(x, p, t_cycle, heart_period, 0.0, 0.0, kernel.empty_schedule(), dx, out)
    if not np.all(np.isfinite(dx[:12])):
        bad = [STATE_NAMES[i] for i in np.flatnonzero(~np.isfinite(dx[:12]))]
        raise FloatingPointError(f"non-finite derivative in {', '.join(bad)}")
    return dx[:12].copy()


def preload_of_cycle(lvp, activation_trace) -> float:
    """LV end-diastolic pressure: LVP at the last sample before ventricular
    activation rises above zero.  Uses the most recent complete cycle.

    A constant-pressure trace short-circuits to that constant.
    """
    lvp = np.asarray(lvp, dtype=float)
    act = np.asarray(activation_trace, dtype=float)
    if lvp.shape != act.shape:
        raise ValueError("traces must have equal length")
    onsets = end_diastole_indices(act)
    if onsets.size == 0:
        if lvp.size and np.ptp(lvp) == 0 and np.any(act > 0) and np.any(act == 0):
            return float(lvp[0])
        raise ValueError("trace contains no complete cardiac cycle")
    return float(lvp[onsets[-1]])


def end_diastole_indices(act) -> np.ndarray:
    """Indices i with act[i] == 0 and act[i+1] > 0, preceded by a systole."""
    act = np.asarray(act)
    idx = np.flatnonzero((act[:-1] == 0) & (act[1:] > 0))
    # needs a prior systole in the trace so the cycle is complete
    first_sys = np.flatnonzero(act > 0)
    if first_sys.size == 0:
        return idx[:0]
    return idx[idx > first_sys[0]]
