"""Compiled core of the simulator: right-hand side of the joint CVS + pump ODE
and a fixed-step RK4 loop that advances one heart beat at a time.

Everything here works on flat arrays so numba can compile it; the Python
front ends live in :mod:`lvadsim.cvs` and :mod:`lvadsim.engine`.

State vector (13): Vla Vlv Vra Vrv Vao Vsa Vsv Vvc Vpa Vpu Qao Qpa Qp.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

from .cvs import ATRIAL_LEAD, active_pressure, diode_flow
from .pump import ML_S_TO_L_MIN, head_kernel, suction_resistance

N_STATE = 13
N_OUT = 10
I_QP = 12

# packed parameter layout
_P_NAMES = (
    "Eeslv", "Eesrvf", "Eao", "Eesla", "Eesra", "Epa", "Epu", "Esa", "Esv", "Evc",
    "Rao", "Rra", "Rpv", "Rsv", "Rmt", "Rav", "Tsys0",
    "V0la", "V0lvf", "V0ra", "V0rvf", "Vdla", "Vdlvf", "Vdra", "Vdrvf",
    "Vuao", "Vupa", "Vupu", "Vusa", "Vusv", "Vuvc",
    "P0la", "P0lvf", "P0ra", "P0rvf", "lam_la", "lam_lvf", "lam_ra", "lam_rvf",
    "Lao", "Lpa", "P_thor", "Rsa", "Rpa", "R_pula", "R_vcra",
    "a0", "a1", "a2", "Rc", "Lc", "k_suc", "k_rsuc",
)
PI = {n: i for i, n in enumerate(_P_NAMES)}
N_PARAM = len(_P_NAMES)

# schedule rows: target, start, end, tau, onset, src, dst
TGT_RSA, TGT_RPA, TGT_HR, TGT_VOLUME = 0, 1, 2, 3

# recorded channels
REC_CHANNELS = ("P_lv", "P_ao", "P_la", "Q_p", "Q_av", "e_v", "V_sum", "P_ra")
N_REC = len(REC_CHANNELS)

STATUS_STOP, STATUS_BEAT, STATUS_BLOWUP = 0, 1, -1


def pack_params(cvs, pump=None) -> np.ndarray:
    from .pump import PumpParameters

    pump = PumpParameters() if pump is None else pump
    v = {n: getattr(cvs, n) for n in _P_NAMES if hasattr(cvs, n)}
    v["Eeslv"] = cvs.Eeslvf * cvs.lv_contractility
    v["Rsa"] = cvs.Rsa
    v["Rpa"] = cvs.Rpa
    v.update(a0=pump.a0, a1=pump.a1, a2=pump.a2, Rc=pump.R_in + pump.R_out + pump.R_band,
             Lc=pump.L_in + pump.L_out, k_suc=pump.k_suc, k_rsuc=pump.k_rsuc)
    return np.array([float(v[n]) for n in _P_NAMES])


def empty_schedule() -> np.ndarray:
    return np.zeros((0, 7))


@nb.njit(cache=True)
def schedule_value(row, t):
    if t < row[4]:
        return row[1]
    if row[3] <= 0.0:
        return row[2]
    return row[1] + (row[2] - row[1]) * (1.0 - math.exp(-(t - row[4]) / row[3]))


@nb.njit(cache=True)
def transfer_rate(row, t):
    """mL/s delivered along a first-order profile of total ``end - start``."""
    if t < row[4]:
        return 0.0
    return (row[2] - row[1]) / row[3] * math.exp(-(t - row[4]) / row[3])


@nb.njit(cache=True)
def heart_period_at(p_default_T, sched, t):
    T = p_default_T
    for r in range(sched.shape[0]):
        if sched[r, 0] == TGT_HR:
            T = 60.0 / schedule_value(sched[r], t)
    return T


@nb.njit(cache=True)
def _act(tc, T, ts):
    if tc < ts:
        return 0.5 * (1.0 - math.cos(2.0 * math.pi * tc / ts))
    return 0.0


@nb.njit(cache=True)
def circulation_rhs(x, p, tcyc, T, w, t, sched, dx, out):
    pth = p[41]
    ts = p[16] * math.sqrt(T)
    ev = _act(tcyc, T, ts)
    ea = _act((tcyc + ATRIAL_LEAD) % T, T, ts)

    Rsa = p[42]
    Rpa = p[43]
    for r in range(sched.shape[0]):
        tg = sched[r, 0]
        if tg == TGT_RSA:
            Rsa = schedule_value(sched[r], t)
        elif tg == TGT_RPA:
            Rpa = schedule_value(sched[r], t)

    Pla = active_pressure(x[0], ea, p[3], p[21], p[31], p[35], p[17], pth)
    Plv = active_pressure(x[1], ev, p[0], p[22], p[32], p[36], p[18], pth)
    Pra = active_pressure(x[2], ea, p[4], p[23], p[33], p[37], p[19], pth)
    Prv = active_pressure(x[3], ev, p[1], p[24], p[34], p[38], p[20], pth)
    Pao = p[2] * (x[4] - p[25]) + pth
    Psa = p[7] * (x[5] - p[28])
    Psv = p[8] * (x[6] - p[29])
    Pvc = p[9] * (x[7] - p[30])
    Ppa = p[5] * (x[8] - p[26]) + pth
    Ppu = p[6] * (x[9] - p[27]) + pth

    Qao = x[10]
    Qpa = x[11]
    Qp = x[12]
    Qmt = diode_flow(Pla, Plv, p[14])
    Qav = diode_flow(Plv, Pao, p[15])
    Qtv = diode_flow(Pra, Prv, p[11])
    Qpv = diode_flow(Prv, Ppa, p[12])
    Qpu = (Ppu - Pla) / p[44]
    Qvc = (Pvc - Pra) / (p[45] + suction_resistance(Pvc, p[52]))
    Qsa = (Psa - Psv) / Rsa
    Qsv = (Psv - Pvc) / p[13]

    q_lpm = Qp * ML_S_TO_L_MIN
    head = head_kernel(q_lpm, w, p[46], p[47], p[48])
    rpump = p[49] + suction_resistance(Plv, p[51])

    dx[0] = Qpu - Qmt
    dx[1] = Qmt - Qav - Qp
    dx[2] = Qvc - Qtv
    dx[3] = Qtv - Qpv
    dx[4] = Qav + Qp - Qao
    dx[5] = Qao - Qsa
    dx[6] = Qsa - Qsv
    dx[7] = Qsv - Qvc
    dx[8] = Qpv - Qpa
    dx[9] = Qpa - Qpu
    dx[10] = (Pao - Psa - p[10] * Qao) / p[39]
    dx[11] = (Ppa - Ppu - Rpa * Qpa) / p[40]
    dx[12] = (Plv - Pao + head - rpump * Qp) / p[50]

    for r in range(sched.shape[0]):
        if sched[r, 0] == TGT_VOLUME:
            q = transfer_rate(sched[r], t)
            src = int(sched[r, 5])
            dst = int(sched[r, 6])
            if src >= 0:
                dx[src] -= q
            if dst >= 0:
                dx[dst] += q

    out[0] = Plv
    out[1] = Pao
    out[2] = Pla
    out[3] = q_lpm
    out[4] = Qav * ML_S_TO_L_MIN
    out[5] = ev
    out[6] = Pra
    out[7] = Pvc
    out[8] = Ppa
    out[9] = Psa


@nb.njit(cache=True)
def rk4_step(x, p, tcyc, T, w, t, dt, sched, k1, k2, k3, k4, xt, o):
    n = x.shape[0]
    circulation_rhs(x, p, tcyc, T, w, t, sched, k1, o)
    for q in range(n):
        xt[q] = x[q] + 0.5 * dt * k1[q]
    circulation_rhs(xt, p, tcyc + 0.5 * dt, T, w, t + 0.5 * dt, sched, k2, o)
    for q in range(n):
        xt[q] = x[q] + 0.5 * dt * k2[q]
    circulation_rhs(xt, p, tcyc + 0.5 * dt, T, w, t + 0.5 * dt, sched, k3, o)
    for q in range(n):
        xt[q] = x[q] + dt * k3[q]
    circulation_rhs(xt, p, tcyc + dt, T, w, t + dt, sched, k4, o)
    for q in range(n):
        x[q] += dt / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])


@nb.njit(cache=True)
def advance(x, p, sched, w, T0, clock, i_stop, dt, stride, rec):
    """Integrate from ``clock`` until the next beat onset or step ``i_stop``.

    ``clock`` is an int64 array [global step, step within beat, steps per beat,
    next record row].  It is updated in place.  Rows of ``rec`` are filled
    whenever the global step is a multiple of ``stride``.

    Returns (status, value): status 1 at a beat onset with value = LV pressure
    at that instant (the end-diastolic pressure), 0 when ``i_stop`` is reached,
    -1 on a non-finite state with value = offending state index.
    """
    k1 = np.zeros(N_STATE)
    k2 = np.zeros(N_STATE)
    k3 = np.zeros(N_STATE)
    k4 = np.zeros(N_STATE)
    xt = np.zeros(N_STATE)
    o = np.zeros(N_OUT)
    i = clock[0]
    ic = clock[1]
    nbeat = clock[2]
    j = clock[3]
    T = nbeat * dt
    while i < i_stop:
        tc = ic * dt
        if i % stride == 0 and j < rec.shape[0]:
            circulation_rhs(x, p, tc, T, w, i * dt, sched, k1, o)
            rec[j, 0] = o[0]
            rec[j, 1] = o[1]
            rec[j, 2] = o[2]
            rec[j, 3] = o[3]
            rec[j, 4] = o[4]
            rec[j, 5] = o[5]
            s = 0.0
            for q in range(10):
                s += x[q]
            rec[j, 6] = s
            rec[j, 7] = o[6]
            j += 1
        rk4_step(x, p, tc, T, w, i * dt, dt, sched, k1, k2, k3, k4, xt, o)
        i += 1
        ic += 1
        if i % stride == 0:
            for q in range(N_STATE):
                if not math.isfinite(x[q]):
                    clock[0] = i
                    clock[1] = ic
                    clock[3] = j
                    return STATUS_BLOWUP, float(q)
        if ic >= nbeat:
            Tn = heart_period_at(T0, sched, i * dt)
            nbeat = int(round(Tn / dt))
            ic = 0
            clock[0] = i
            clock[1] = 0
            clock[2] = nbeat
            clock[3] = j
            circulation_rhs(x, p, 0.0, nbeat * dt, w, i * dt, sched, k1, o)
            return STATUS_BEAT, o[0]
    clock[0] = i
    clock[1] = ic
    clock[2] = nbeat
    clock[3] = j
    return STATUS_STOP, 0.0
