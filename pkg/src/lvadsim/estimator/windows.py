"""Pump-flow peak detection and fixed-length window extraction."""
from __future__ import annotations

import numpy as np

WINDOW = 600  # samples (3 s at 200 Hz)
FS = 200.0
FLAT_TOL = 1e-9  # L/min; peak-to-peak below this counts as a flat line


class WindowUnavailable(ValueError):
    pass


def detect_flow_peak(flow_history, heart_period, start=None, previous_peak=None, fs=FS):
    """Index of the pump-flow maximum in the current cardiac cycle.

    The current cycle is ``flow_history[start:]``, or the last
    ``heart_period * fs`` samples when ``start`` is omitted.  Candidates closer
    than half a heart period to ``previous_peak`` are ignored.  Returns None
    for a flat cycle or when no candidate remains.
    """
    flow = np.asarray(flow_history, dtype=float)
    if heart_period <= 0:
        raise ValueError("heart_period must be positive")
    n = flow.size
    if start is None:
        start = max(0, n - int(round(heart_period * fs)))
    if previous_peak is not None:
        start = max(start, previous_peak + int(np.ceil(0.5 * heart_period * fs)))
    if start >= n:
        return None
    seg = flow[start:]
    if np.ptp(seg) <= FLAT_TOL:
        return None
    return int(start + np.argmax(seg))


def extract_window(flow_history, peak_index, length=WINDOW):
    """The ``length`` samples ending at (and including) ``peak_index``."""
    if peak_index < length - 1:
        raise WindowUnavailable(f"peak at {peak_index} leaves less than {length} samples of history")
    w = np.asarray(flow_history[peak_index - length + 1: peak_index + 1], dtype=float)
    if w.size != length or not np.all(np.isfinite(w)):
        raise WindowUnavailable("window incomplete or non-finite")
    return w


def cycle_windows(flow, onset_rows, onset_preload, fs=FS):
    """All (window, label, cycle index) triples of a recorded run.

    ``onset_rows`` are the recorded-sample indices of consecutive beat onsets
    and ``onset_preload`` the end-diastolic pressure at each onset.  The
    window of the cycle starting at onset k is labelled with that onset's
    preload.
    """
    out = []
    for k in range(len(onset_rows) - 1):
        a, b = int(onset_rows[k]), int(onset_rows[k + 1])
        peak = detect_flow_peak(flow[:b], (b - a) / fs, start=a)
        if peak is None or peak < WINDOW - 1:
            continue
        out.append((extract_window(flow, peak), float(onset_preload[k]), k))
    return out
