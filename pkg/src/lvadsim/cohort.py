"""Virtual patients and clinical scenarios.

Patients are the nominal parameter set with every tabulated value multiplied
by an independent uniform draw on [0.8, 1.2].  Scenarios are lists of timed
transitions of vascular resistance, heart rate or fluid volume, applied either
as steps or as first-order approaches with a 10 s time constant.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cvs import COMPARTMENTS, DYNE_TO_MMHG, TABLE_I_NAMES, CvsParameters
from .kernel import TGT_HR, TGT_RPA, TGT_RSA, TGT_VOLUME

SPREAD = 0.2
TAU = 10.0
TRAIN, TEST = 0, 1
COMPARTMENT_INDEX = {c: i for i, c in enumerate(COMPARTMENTS)}


@dataclass(frozen=True)
class PatientSpec:
    id: str
    multipliers: np.ndarray
    params: CvsParameters
    seed: int | None = None

    def to_dict(self):
        return {"id": self.id, "seed": self.seed, "multipliers": [float(m) for m in self.multipliers],
                "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], np.asarray(d["multipliers"], dtype=float), CvsParameters.from_dict(d["params"]),
                   d.get("seed"))


def patient_from_multipliers(multipliers, nominal: CvsParameters | None = None, pid="patient",
                             seed=None) -> PatientSpec:
    nominal = CvsParameters() if nominal is None else nominal
    m = np.asarray(multipliers, dtype=float)
    if np.any(m < 1 - SPREAD) or np.any(m > 1 + SPREAD):
        raise ValueError("multipliers must lie in [0.8, 1.2]")
    return PatientSpec(pid, m, nominal.scaled(m), seed)


def sample_patient(seed, nominal: CvsParameters | None = None, pid=None) -> PatientSpec:
    """Independent uniform multipliers on [0.8, 1.2], one per tabulated parameter."""
    rng = np.random.default_rng(seed)
    m = rng.uniform(1 - SPREAD, 1 + SPREAD, size=len(TABLE_I_NAMES))
    return patient_from_multipliers(m, nominal, pid or f"seed{seed}", seed)


def cohort_seed(root_seed: int, split: int, index: int):
    """Seed material for patient ``index`` of a split; the split id keeps
    train and test seed spaces disjoint."""
    return [int(root_seed), int(split), int(index)]


def make_cohort(n, split, root_seed=0, nominal=None):
    tag = "train" if split == TRAIN else "test"
    return [sample_patient(cohort_seed(root_seed, split, i), nominal, pid=f"{tag}{i:03d}") for i in range(n)]


def save_cohort(patients, path):
    Path(path).write_text(json.dumps([p.to_dict() for p in patients], indent=1, ensure_ascii=False) + "\n")


def load_cohort(path):
    return [PatientSpec.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class Transition:
    """One time-varying quantity.

    ``target`` is ``svr`` or ``pvr`` (dyne.s.cm^-5), ``hr`` (bpm) or
    ``volume`` (mL moved from ``src`` to ``dst``; None means outside the body).
    """

    target: str
    start: float
    end: float
    shape: str = "step"  # step | first_order
    tau: float = TAU
    src: str | None = None
    dst: str | None = None

    def __post_init__(self):
        if self.target not in ("svr", "pvr", "hr", "volume"):
            raise ValueError(f"unknown transition target {self.target!r}")
        if self.shape not in ("step", "first_order"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.target == "volume" and self.shape != "first_order":
            raise ValueError("volume transfers must use a first-order profile")
        for c in (self.src, self.dst):
            if c is not None and c not in COMPARTMENT_INDEX:
                raise ValueError(f"unknown compartment {c!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    onset: float = 70.0
    transitions: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {"kind": self.kind, "onset": self.onset, "transitions": [t.__dict__ for t in self.transitions]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("onset", 70.0)), tuple(Transition(**t) for t in d["transitions"]))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def net_volume_change(self):
        """Signed change of total body volume once the scenario has settled."""
        total = 0.0
        for tr in self.transitions:
            if tr.target == "volume":
                amount = tr.end - tr.start
                total += (amount if tr.dst is not None else 0.0) - (amount if tr.src is not None else 0.0)
        return total

    def volume_change_at(self, t):
        total = 0.0
        for tr in self.transitions:
            if tr.target == "volume":
                moved = transition_value(tr, t, self.onset) - tr.start
                total += (moved if tr.dst is not None else 0.0) - (moved if tr.src is not None else 0.0)
        return total


def _fo(target, a, b, **kw):
    return Transition(target, a, b, "first_order", TAU, **kw)


SCENARIOS = {
    "rising_Rpa": (Transition("pvr", 100.0, 500.0),),
    "falling_Rpa": (Transition("pvr", 100.0, 40.0),),
    "rising_Rsa": (Transition("svr", 1300.0, 2600.0),),
    "falling_Rsa": (Transition("svr", 1300.0, 600.0),),
    "rest_to_exercise": (
        _fo("hr", 60.0, 80.0),
        _fo("pvr", 100.0, 40.0),
        _fo("svr", 1300.0, 670.0),
        _fo("volume", 0.0, 500.0, src="sv", dst="ra"),
    ),
    "postural_change": (_fo("volume", 0.0, 300.0, src="sa", dst=None),),
}
SCENARIO_NAMES = tuple(SCENARIOS)


def scenario(kind: str, onset: float = 70.0) -> ScenarioSpec:
    if kind == "none":
        return ScenarioSpec("none", onset, ())
    try:
        return ScenarioSpec(kind, onset, SCENARIOS[kind])
    except KeyError:
        raise KeyError(f"unknown scenario {kind!r}; choose from {', '.join(SCENARIO_NAMES)}") from None


def transition_value(tr: Transition, t, onset):
    if t < onset:
        return tr.start
    if tr.shape == "step":
        return tr.end
    return tr.start + (tr.end - tr.start) * (1.0 - math.exp(-(t - onset) / tr.tau))


def scenario_value(spec: ScenarioSpec, target: str, t):
    """Scheduled value of ``target`` at time ``t`` in the scenario's own units
    (for ``volume`` the cumulative amount moved)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    for tr in spec.transitions:
        if tr.target == target:
            return transition_value(tr, t, spec.onset)
    raise KeyError(f"scenario {spec.kind} has no {target} transition")


def _series_systemic(p: CvsParameters):
    return p.Rao + p.Rsv + p.R_vcra


def resistance_from_dyne(target, total_dyne, p: CvsParameters):
    """Peripheral model resistance (mmHg.s/mL) realising a total vascular resistance."""
    if target == "svr":
        return total_dyne * DYNE_TO_MMHG - _series_systemic(p)
    return total_dyne * DYNE_TO_MMHG - p.R_pula


def _scaled_end(tr: Transition, base):
    """Scenario endpoints are quoted for the nominal patient; a patient whose
    baseline differs gets the same relative change."""
    return base * tr.end / tr.start


def to_schedule(spec: ScenarioSpec, p: CvsParameters) -> np.ndarray:
    """Rows (target, start, end, tau, onset, src, dst) for the compiled kernel."""
    rows = []
    for tr in spec.transitions:
        tau = 0.0 if tr.shape == "step" else tr.tau
        if tr.target in ("svr", "pvr"):
            base = p.svr if tr.target == "svr" else p.pvr
            r0 = resistance_from_dyne(tr.target, base, p)
            r1 = resistance_from_dyne(tr.target, _scaled_end(tr, base), p)
            if r1 <= 0:
                raise ValueError(f"{spec.kind}: {tr.target} end value leaves no peripheral resistance")
            code = TGT_RSA if tr.target == "svr" else TGT_RPA
            rows.append((code, r0, r1, tau, spec.onset, -1, -1))
        elif tr.target == "hr":
            rows.append((TGT_HR, p.heart_rate, _scaled_end(tr, p.heart_rate), tau, spec.onset, -1, -1))
        else:
            src = -1 if tr.src is None else COMPARTMENT_INDEX[tr.src]
            dst = -1 if tr.dst is None else COMPARTMENT_INDEX[tr.dst]
            rows.append((TGT_VOLUME, tr.start, tr.end, tau, spec.onset, src, dst))
    return np.array(rows, dtype=float).reshape(-1, 7)


def apply_scenario(spec: ScenarioSpec, p: CvsParameters, state, t):
    """Parameters in force at ``t`` and the volume-transfer rates (mL/s).

    Returns ``(params_t, rates)`` where ``rates`` maps compartment name to its
    signed inflow from the scenario.  Raises if a source compartment would be
    driven negative by the remaining transfer.
    """
    from dataclasses import replace

    kw = {}
    rates = {}
    for tr in spec.transitions:
        v = transition_value(tr, t, spec.onset)
        if tr.target in ("svr", "pvr"):
            base = getattr(p, tr.target)
            kw[tr.target] = base if t < spec.onset else base + (_scaled_end(tr, base) - base) * (
                (v - tr.start) / (tr.end - tr.start))
        elif tr.target == "hr":
            hr = p.heart_rate if t < spec.onset else p.heart_rate + (
                _scaled_end(tr, p.heart_rate) - p.heart_rate) * (v - tr.start) / (tr.end - tr.start)
            kw["Tc"] = 60.0 / hr
        else:
            amount = tr.end - tr.start
            rate = 0.0 if t < spec.onset else amount / tr.tau * math.exp(-(t - spec.onset) / tr.tau)
            remaining = tr.end - v
            if tr.src is not None:
                vol = getattr(state, f"V{tr.src}")
                if vol - remaining < 0:
                    raise ValueError(f"{spec.kind}: transfer would drive V{tr.src} negative")
                rates[tr.src] = rates.get(tr.src, 0.0) - rate
            if tr.dst is not None:
                rates[tr.dst] = rates.get(tr.dst, 0.0) + rate
    return (replace(p, **kw) if kw else p), rates
