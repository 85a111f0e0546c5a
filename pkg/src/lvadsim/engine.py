"""Fixed-step simulation of the joint circulation and pump, the timed
experiment protocol, 200 Hz trace recording and hazard detection."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel
from .cvs import COMPARTMENTS, STATE_NAMES, CvsParameters, CvsState
from .mfac import MfacParams, MfacState, assumption_diagnostics, controller_step
from .pump import PumpParameters, PumpState, clamp_speed

DT = 1e-4
FS = 200.0
STRIDE = 50  # internal steps per recorded sample
SUCTION_LIMIT = 0.0
CONGESTION_LIMIT = 20.0
MODES = ("constant-speed", "mfac-sensor", "mfac-estimator")


class SimulationBlowup(FloatingPointError):
    def __init__(self, channel, t):
        super().__init__(f"non-finite {channel} at t = {t:.4f} s")
        self.channel = channel
        self.t = t


@dataclass(frozen=True)
class ProtocolConfig:
    t_pump_on: float = 25.0
    t_controller_on: float = 50.0
    t_scenario: float = 70.0
    t_end: float = 120.0
    target_window: tuple = (45.0, 50.0)
    co_range: tuple = (4.0, 6.0)
    maop_range: tuple = (70.0, 90.0)
    # preload preferences used when picking the tuned speed (mmHg); setting
    # preload_ceiling to None gives the plain lowest-feasible-speed rule
    preload_floor: float = 5.0
    preload_ceiling: float | None = 9.0
    preload_safe_ceiling: float = 12.0
    speed_step: float = 50.0
    tune_settle: float = 10.0
    tune_average: float = 10.0
    dt: float = DT

    def __post_init__(self):
        if not 0 < self.t_pump_on < self.t_controller_on < self.t_scenario < self.t_end:
            raise ValueError("protocol times must satisfy 0 < pump_on < controller_on < scenario < end")
        if round(0.005 / self.dt) * self.dt - 0.005 > 1e-12:
            raise ValueError("dt must divide the 5 ms sampling interval")

    @property
    def stride(self):
        return int(round(1.0 / (FS * self.dt)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("target_window", "co_range", "maop_range"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


class Simulator:
    """Stateful wrapper around the compiled kernel.

    ``advance_to(t)`` and ``next_beat()`` move time forward; recorded samples
    accumulate in ``rec`` (one row per 5 ms) and beat onsets in ``onsets``.
    """

    def __init__(self, patient: CvsParameters, pump: PumpParameters | None = None, schedule=None,
                 t_max=120.0, dt=DT, state: CvsState | None = None):
        self.patient = patient
        self.pump = PumpParameters() if pump is None else pump
        self.p = kernel.pack_params(patient, self.pump)
        self.sched = kernel.empty_schedule() if schedule is None else np.ascontiguousarray(schedule, dtype=float)
        self.dt = dt
        self.stride = int(round(1.0 / (FS * dt)))
        init = CvsState.initial(patient) if state is None else state
        self.x = np.zeros(kernel.N_STATE)
        self.x[:12] = init.as_array()
        self.T0 = patient.Tc
        nbeat = int(round(self.T0 / dt))
        self.clock = np.array([0, 0, nbeat, 0], dtype=np.int64)
        self.rec = np.zeros((int(math.ceil(t_max * FS)) + 1, kernel.N_REC))
        self.speed = 0.0
        self.onset_steps = [0]
        self.onset_preload = [np.nan]

    @property
    def t(self):
        return self.clock[0] * self.dt

    @property
    def step(self):
        return int(self.clock[0])

    @property
    def n_rec(self):
        return int(self.clock[3])

    def _ensure_capacity(self, i_stop):
        need = i_stop // self.stride + 2
        if need > self.rec.shape[0]:
            grown = np.zeros((max(need, 2 * self.rec.shape[0]), kernel.N_REC))
            grown[: self.rec.shape[0]] = self.rec
            self.rec = grown

    def _run(self, i_stop):
        self._ensure_capacity(i_stop)
        status, val = kernel.advance(self.x, self.p, self.sched, float(self.speed), self.T0, self.clock,
                                     int(i_stop), self.dt, self.stride, self.rec)
        if status == kernel.STATUS_BLOWUP:
            raise SimulationBlowup(kernel_state_name(int(val)), self.t)
        if status == kernel.STATUS_BEAT:
            self.onset_steps.append(self.step)
            self.onset_preload.append(val)
            if np.any(self.x[:10] < 0):
                bad = COMPARTMENTS[int(np.argmin(self.x[:10]))]
                raise SimulationBlowup(f"V{bad} (negative volume)", self.t)
        return status

    def next_beat(self, t_limit):
        """Run to the next beat onset, stopping early at ``t_limit``.
        Returns True when an onset was reached."""
        return self._run(self.steps_for(t_limit)) == kernel.STATUS_BEAT

    def advance_to(self, t):
        i_stop = self.steps_for(t)
        while self.step < i_stop:
            self._run(i_stop)

    def steps_for(self, t):
        return int(round(t / self.dt))

    def state(self) -> CvsState:
        return CvsState.from_array(self.x[:12], t_cycle=self.clock[1] * self.dt)

    def samples(self, start=0):
        return self.rec[start: self.n_rec]

    def rec_index(self, step):
        """First recorded row at or after internal step ``step``."""
        return -(-step // self.stride)

    def heart_period(self):
        return self.clock[2] * self.dt


def kernel_state_name(i):
    return (STATE_NAMES + ("Q_p",))[i] if 0 <= i < kernel.N_STATE else f"state[{i}]"


def integrate_step(cvs: CvsState, pump: PumpState, patient: CvsParameters, pump_params: PumpParameters | None = None,
                   dt_internal=DT, heart_period=None):
    """Single RK4 step of the joint ODE; returns new (CvsState, PumpState)."""
    pump_params = PumpParameters() if pump_params is None else pump_params
    x = np.zeros(kernel.N_STATE)
    x[:12] = cvs.as_array()
    x[kernel.I_QP] = pump.flow
    T = patient.Tc if heart_period is None else heart_period
    p = kernel.pack_params(patient, pump_params)
    bufs = [np.zeros(kernel.N_STATE) for _ in range(5)]
    kernel.rk4_step(x, p, cvs.t_cycle, T, float(pump.speed), 0.0, dt_internal, kernel.empty_schedule(), *bufs,
                    np.zeros(kernel.N_OUT))
    if not np.all(np.isfinite(x)):
        raise SimulationBlowup(kernel_state_name(int(np.flatnonzero(~np.isfinite(x))[0])), dt_internal)
    t_cycle = (cvs.t_cycle + dt_internal) % T
    return CvsState.from_array(x[:12], t_cycle), PumpState(pump.speed, float(x[kernel.I_QP]))


# ------------------------------------------------------------------ tuning

@dataclass
class SteadyState:
    speed: float
    co: float
    maop: float
    preload: float

    def in_box(self, config: ProtocolConfig):
        return (config.co_range[0] <= self.co <= config.co_range[1]
                and config.maop_range[0] <= self.maop <= config.maop_range[1])

    def box_distance(self, config: ProtocolConfig):
        def d(v, lo, hi):
            return max(0.0, lo - v, v - hi) / (hi - lo)
        return math.hypot(d(self.co, *config.co_range), d(self.maop, *config.maop_range))


def window_means(sim: Simulator, t0, t1):
    r = sim.rec[int(round(t0 * FS)): int(round(t1 * FS))]
    steps = np.asarray(sim.onset_steps)
    tt = steps * sim.dt
    pre = np.asarray(sim.onset_preload)[(tt >= t0) & (tt < t1)]
    co = float(np.mean(r[:, 3] + r[:, 4]))
    return co, float(np.mean(r[:, 1])), float(np.mean(pre)) if pre.size else float("nan")


def speed_sweep(patient, pump=None, config: ProtocolConfig = ProtocolConfig(), speeds=None):
    """Steady-state CO, MAoP and preload over a speed grid.

    The sweep starts from the pump-off steady state and carries the state from
    one speed to the next, so each point gets ``tune_settle`` seconds to settle
    before ``tune_average`` seconds of averaging.
    """
    pump = PumpParameters() if pump is None else pump
    if speeds is None:
        speeds = np.arange(pump.speed_min, pump.speed_max + 0.5 * config.speed_step, config.speed_step)
    seg = config.tune_settle + config.tune_average
    sim = Simulator(patient, pump, t_max=config.t_pump_on + seg * len(speeds), dt=config.dt)
    sim.advance_to(config.t_pump_on)
    out = []
    t = config.t_pump_on
    for w in speeds:
        sim.speed = float(w)
        sim.advance_to(t + seg)
        co, maop, pre = window_means(sim, t + config.tune_settle, t + seg)
        out.append(SteadyState(float(w), co, maop, pre))
        t += seg
    return out


@dataclass
class TuningResult:
    speed: float
    feasible: bool  # the chosen speed meets the CO and MAoP ranges
    box_reachable: bool  # some grid speed meets both ranges
    rule: str  # which preference tier produced the speed
    points: list = field(repr=False, default_factory=list)

    @property
    def flagged(self):
        return not self.feasible

    def point(self):
        return next(p for p in self.points if p.speed == self.speed)


def tune_constant_speed(patient, pump=None, config: ProtocolConfig = ProtocolConfig(), sweep=None) -> TuningResult:
    """Pick the constant speed used between pump start and controller start.

    Tiers, first match wins (``f``/``c``/``s`` are the preload floor, ceiling
    and safe ceiling of ``config``):

    1. lowest speed meeting the CO and MAoP ranges with preload in [f, c];
    2. among box-feasible speeds with preload in [f, s], the lowest preload;
    3. among speeds with preload in [f, s], the one nearest the CO/MAoP box
       (flagged: the box is traded for a safe preload);
    4. the speed nearest the box (flagged).

    With ``preload_ceiling`` None only the box matters: the lowest feasible
    speed, else tier 4.
    """
    pts = speed_sweep(patient, pump, config) if sweep is None else sweep
    box = [s for s in pts if s.in_box(config)]
    reachable = bool(box)
    nearest = min(pts, key=lambda s: (s.box_distance(config), s.speed))
    if config.preload_ceiling is None:
        if box:
            return TuningResult(box[0].speed, True, True, "lowest-feasible", pts)
        return TuningResult(nearest.speed, False, False, "nearest-box", pts)
    lo, hi, safe = config.preload_floor, config.preload_ceiling, config.preload_safe_ceiling
    tier1 = [s for s in box if lo <= s.preload <= hi]
    if tier1:
        return TuningResult(tier1[0].speed, True, reachable, "box+preferred-preload", pts)
    tier2 = [s for s in box if lo <= s.preload <= safe]
    if tier2:
        best = min(tier2, key=lambda s: (s.preload, s.speed))
        return TuningResult(best.speed, True, reachable, "box+safe-preload", pts)
    tier3 = [s for s in pts if lo <= s.preload <= safe]
    if tier3:
        best = min(tier3, key=lambda s: (s.box_distance(config), s.speed))
        return TuningResult(best.speed, best.in_box(config), reachable, "safe-preload", pts)
    return TuningResult(nearest.speed, nearest.in_box(config), reachable, "nearest-box", pts)


# ------------------------------------------------------------------ traces

TRACE_COLUMNS = ("time", "P_lv", "P_ao", "P_la", "Q_p", "Q_av", "speed", "preload_measured",
                 "preload_estimated", "preload_target", "event")
EVENT_NONE, EVENT_SUCTION, EVENT_CONGESTION = 0, 1, 2


@dataclass
class SimulationTrace:
    """200 Hz channels plus the per-cycle record they were built from.

    Per-cycle arrays are indexed by beat: ``cycle_time`` is the onset time,
    ``cycle_measured`` the end-diastolic LV pressure at that onset,
    ``cycle_estimated`` the estimate issued for that cycle (NaN when none) and
    ``cycle_speed`` the speed applied from that onset on.
    """

    channels: dict
    cycle_time: np.ndarray
    cycle_measured: np.ndarray
    cycle_estimated: np.ndarray
    cycle_speed: np.ndarray
    target: float = float("nan")
    t_controller_on: float = 50.0
    meta: dict = field(default_factory=dict)
    controller_log: list = field(default_factory=list, repr=False)
    volume: np.ndarray | None = field(default=None, repr=False)

    @property
    def time(self):
        return self.channels["time"]

    def __getitem__(self, k):
        return self.channels[k]

    def controlled_cycles(self):
        return self.cycle_time >= self.t_controller_on

    def write_csv(self, path, debug_controller=False):
        cols = list(TRACE_COLUMNS)
        data = [self.channels[c] for c in cols]
        if debug_controller and self.controller_log:
            phi, u = self._controller_channels()
            for j in range(phi.shape[1]):
                cols.append(f"phi{j + 1}")
                data.append(phi[:, j])
            cols.append("u_cmd")
            data.append(u)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([_fmt(v) for v in row])

    def _controller_channels(self):
        n = len(self.time)
        k = len(self.controller_log[0]["phi"])
        phi = np.full((n, k), np.nan)
        u = np.full(n, np.nan)
        ctimes = np.array([rec["t"] for rec in self.controller_log])
        idx = np.searchsorted(ctimes, self.time, side="right") - 1
        ok = idx >= 0
        phis = np.array([rec["phi"] for rec in self.controller_log])
        us = np.array([rec["u"] for rec in self.controller_log])
        phi[ok] = phis[idx[ok]]
        u[ok] = us[idx[ok]]
        return phi, u


def _fmt(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(round(v, 6))


def stepwise(times, values, cycle_time):
    """Sample-and-hold of per-cycle values onto the sample grid."""
    idx = np.searchsorted(cycle_time, times, side="right") - 1
    out = np.full(len(times), np.nan)
    ok = idx >= 0
    out[ok] = np.asarray(values)[idx[ok]]
    return out


def detect_events(trace: SimulationTrace, suction=SUCTION_LIMIT, congestion=CONGESTION_LIMIT):
    """Count controlled cycles whose measured preload leaves [suction, congestion]."""
    m = trace.controlled_cycles() & np.isfinite(trace.cycle_measured)
    pre = trace.cycle_measured[m]
    return {"suction_count": int(np.sum(pre < suction)), "congestion_count": int(np.sum(pre > congestion))}


# ---------------------------------------------------------------- protocol

def cycle_window(sim: Simulator, k, estimator):
    """Flow window for the cycle that began at onset ``k`` (ended at ``k+1``)."""
    from .estimator.windows import WindowUnavailable, detect_flow_peak, extract_window

    a = sim.rec_index(sim.onset_steps[k])
    b = sim.rec_index(sim.onset_steps[k + 1])
    flow = sim.rec[:b, 3]
    period = (sim.onset_steps[k + 1] - sim.onset_steps[k]) * sim.dt
    peak = detect_flow_peak(flow, period, start=a)
    if peak is None:
        return None
    try:
        return extract_window(flow, peak)
    except WindowUnavailable:
        return None


def run_protocol(patient: CvsParameters, pump: PumpParameters | None = None, scenario=None,
                 control_mode="mfac-sensor", config: ProtocolConfig = ProtocolConfig(), model=None,
                 mfac: MfacParams | None = None, tuned_speed=None) -> SimulationTrace:
    """Run the timed experiment.

    Pump off until ``t_pump_on``; tuned constant speed until
    ``t_controller_on``; then, outside constant-speed mode, one controller
    update per beat onset.  In sensor mode the controller sees the measured
    preload of the beat just completed; in estimator mode it sees the CNN
    estimate for the last completed cycle.  The scenario (if any) starts at
    ``t_scenario``.
    """
    from .cohort import ScenarioSpec, to_schedule
    from .cohort import scenario as named_scenario

    if control_mode not in MODES:
        raise ValueError(f"control_mode must be one of {MODES}")
    if control_mode == "mfac-estimator" and model is None:
        raise ValueError("estimator mode needs a trained model")
    pump = PumpParameters() if pump is None else pump
    mfac = MfacParams(u_min=pump.speed_min, u_max=pump.speed_max) if mfac is None else mfac
    if scenario is None:
        scenario = named_scenario("none", config.t_scenario)
    elif isinstance(scenario, str):
        scenario = named_scenario(scenario, config.t_scenario)
    elif scenario.onset != config.t_scenario:
        scenario = ScenarioSpec(scenario.kind, config.t_scenario, scenario.transitions)
    if tuned_speed is None:
        tuning = tune_constant_speed(patient, pump, config)
        tuned_speed, feasible = tuning.speed, tuning.feasible
    else:
        feasible = None
    tuned_speed = clamp_speed(tuned_speed, pump)

    sim = Simulator(patient, pump, to_schedule(scenario, patient), t_max=config.t_end, dt=config.dt)
    estimates = [np.nan]  # per onset: estimate for the cycle that began there
    speeds = [0.0]  # speed applied from each onset on
    target = float("nan")
    ctrl = None
    ctrl_log = []
    i_end = sim.steps_for(config.t_end)
    boundaries = [config.t_pump_on]

    while sim.step < i_end:
        next_stop = boundaries[0] if boundaries else config.t_end
        if not sim.next_beat(next_stop):
            if boundaries and sim.step >= sim.steps_for(boundaries[0]):
                boundaries.pop(0)
                sim.speed = tuned_speed
            continue
        t = sim.t
        k = len(sim.onset_steps) - 1
        y_meas = sim.onset_preload[-1]
        est = np.nan
        if control_mode == "mfac-estimator" and k >= 2:
            win = cycle_window(sim, k - 1, model)
            if win is not None:
                est = float(model.predict(win[None, :])[0])
                estimates[k - 1] = est
        estimates.append(np.nan)
        if t >= config.t_controller_on and math.isnan(target):
            steps = np.asarray(sim.onset_steps) * sim.dt
            pre = np.asarray(sim.onset_preload)
            sel = (steps >= config.target_window[0]) & (steps < config.target_window[1])
            target = float(np.mean(pre[sel]))
        if t >= config.t_controller_on and control_mode != "constant-speed":
            if control_mode == "mfac-sensor":
                y = y_meas
            else:
                y = _held_estimate(estimates, k, target)
            if ctrl is None:
                ctrl = MfacState.initial(mfac, tuned_speed)
            w, ctrl = controller_step(ctrl, y, target, mfac)
            ctrl.log[-1]["t"] = t
            sim.speed = w
        speeds.append(sim.speed)

    n = sim.n_rec
    rec = sim.rec[:n]
    time = np.arange(n) / FS
    ctime = np.asarray(sim.onset_steps) * sim.dt
    cmeas = np.asarray(sim.onset_preload)
    cest = np.asarray(estimates[: len(ctime)])
    cspeed = np.asarray(speeds[: len(ctime)])
    speed_ch = _speed_channel(time, ctime, cspeed, config, tuned_speed)
    meas_ch = stepwise(time, cmeas, ctime)
    est_ch = stepwise(time, _hold_forward(cest, ctime, config), ctime) if control_mode == "mfac-estimator" \
        else np.full(n, np.nan)
    ev = np.zeros(n)
    on = time >= config.t_controller_on
    ev[on & (meas_ch < SUCTION_LIMIT)] = EVENT_SUCTION
    ev[on & (meas_ch > CONGESTION_LIMIT)] = EVENT_CONGESTION
    channels = {
        "time": time, "P_lv": rec[:, 0], "P_ao": rec[:, 1], "P_la": rec[:, 2], "Q_p": rec[:, 3],
        "Q_av": rec[:, 4], "speed": speed_ch, "preload_measured": meas_ch, "preload_estimated": est_ch,
        "preload_target": np.where(time >= config.target_window[1], target, np.nan), "event": ev,
    }
    meta = {"mode": control_mode, "scenario": scenario.kind, "tuned_speed": tuned_speed,
            "tuning_feasible": feasible}
    if ctrl is not None:
        meta["mfac_diagnostics"] = assumption_diagnostics(ctrl.log)
        ctrl_log = ctrl.log
    return SimulationTrace(channels, ctime, cmeas, cest, cspeed, target, config.t_controller_on, meta, ctrl_log,
                           volume=rec[:, 6].copy())


def _held_estimate(estimates, k, target):
    """Latest available estimate, or the target while none exists."""
    for j in range(k, -1, -1):
        if not math.isnan(estimates[j]):
            return estimates[j]
    return target


def _hold_forward(cest, ctime, config):
    out = cest.copy()
    last = np.nan
    for i in range(len(out)):
        if math.isnan(out[i]):
            out[i] = last
        else:
            last = out[i]
    return out


def _speed_channel(time, ctime, cspeed, config, tuned):
    sp = stepwise(time, cspeed, ctime)
    sp[time < config.t_pump_on] = 0.0
    pre_ctrl = (time >= config.t_pump_on) & (time < config.t_controller_on)
    sp[pre_ctrl] = tuned
    # speed written at a beat onset is the controller command; beats before the
    # controller starts only carry the tuned constant
    return sp
