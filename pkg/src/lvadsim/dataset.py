"""Constant-speed simulations turned into labelled pump-flow windows."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .cohort import SCENARIO_NAMES, scenario, to_schedule
from .engine import Simulator, SimulationBlowup
from .estimator.windows import WINDOW, cycle_windows

# timing of one dataset run (s): pump at its fixed speed from the start, the
# first part discarded as start-up transient, scenario switched on mid-run
DATASET_T_END = 70.0
DATASET_T_SCENARIO = 30.0
DATASET_T_DISCARD = 20.0
LABEL_ENVELOPE = (-5.0, 30.0)


def simulate_windows(patient, speed, scenario_kind, pump=None, t_end=DATASET_T_END, t_scenario=DATASET_T_SCENARIO,
                     t_discard=DATASET_T_DISCARD):
    """Windows and end-diastolic labels from one constant-speed run.

    Returns (windows (n, 600), labels (n,), cycle indices (n,)).
    """
    spec = scenario(scenario_kind, t_scenario)
    sim = Simulator(patient, pump, to_schedule(spec, patient), t_max=t_end)
    sim.speed = float(speed)
    sim.advance_to(t_end)
    flow = sim.rec[: sim.n_rec, 3]
    rows = [sim.rec_index(s) for s in sim.onset_steps]
    onset_t = np.asarray(sim.onset_steps) * sim.dt
    items = [(w, y, k) for w, y, k in cycle_windows(flow, rows, sim.onset_preload) if onset_t[k] >= t_discard]
    if not items:
        return np.zeros((0, WINDOW)), np.zeros(0), np.zeros(0, dtype=int)
    w, y, k = zip(*items)
    return np.stack(w), np.asarray(y), np.asarray(k)


def _job(args):
    pi, patient, speed, si, kind, pump = args
    try:
        w, y, k = simulate_windows(patient, speed, kind, pump)
        return pi, speed, si, w, y, k, None
    except SimulationBlowup as exc:
        return pi, speed, si, None, None, None, str(exc)


def worker_count():
    return max(1, int(os.environ.get("LVADSIM_WORKERS", "1")))


def build_dataset(patients, speeds, scenarios=SCENARIO_NAMES, pump=None, workers=None):
    """Run every (patient, speed, scenario) combination.

    ``patients`` is a list of (patient index, CvsParameters).  Results are
    assembled in canonical (patient, speed, scenario) order regardless of the
    worker count.  Returns (dataset dict, list of failure messages).
    """
    jobs = [(pi, p, float(s), si, kind, pump) for pi, p in patients for s in speeds
            for si, kind in enumerate(scenarios)]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    parts = {f: [] for f in ("windows", "labels", "patient", "scenario", "speed", "cycle")}
    failures = []
    for pi, speed, si, w, y, k, err in results:
        if err is not None:
            failures.append(f"patient {pi} speed {speed:g} scenario {scenarios[si]}: {err}")
            continue
        n = len(y)
        parts["windows"].append(w)
        parts["labels"].append(y)
        parts["patient"].append(np.full(n, pi))
        parts["scenario"].append(np.full(n, si))
        parts["speed"].append(np.full(n, speed))
        parts["cycle"].append(k)
    if not parts["labels"]:
        raise RuntimeError("every dataset simulation failed")
    ds = {f: np.concatenate(v) for f, v in parts.items()}
    ds["windows"] = ds["windows"].reshape(-1, WINDOW)
    return ds, failures


def label_envelope_warnings(labels, envelope=LABEL_ENVELOPE):
    lo, hi = envelope
    n_out = int(np.sum((labels < lo) | (labels > hi)))
    if n_out:
        return [f"{n_out} labels outside the plausible envelope [{lo:g}, {hi:g}] mmHg"]
    return []
