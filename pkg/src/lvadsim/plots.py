"""Deterministic SVG figures: protocol time series and Bland-Altman scatter."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import bland_altman  # noqa: E402

_RC = {"svg.hashsalt": "lvadsim", "svg.fonttype": "none", "font.family": "DejaVu Sans", "font.size": 8}
_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_protocol(traces, path, labels=None):
    """Four stacked panels: preload (measured, estimated, target), speed,
    pump flow and LV pressure.  ``traces`` is one trace or a list; speed
    traces of all runs share one axis."""
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    if not traces or any(len(tr.time) == 0 for tr in traces):
        raise ValueError("empty trace")
    labels = labels or [tr.meta.get("mode", f"run {i}") for i, tr in enumerate(traces)]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(4, 1, figsize=(7, 8), sharex=True)
        for tr, lab in zip(traces, labels):
            t = tr.time
            ax[0].plot(t, tr["preload_measured"], lw=0.8, label=f"measured ({lab})")
            if np.any(np.isfinite(tr["preload_estimated"])):
                ax[0].plot(t, tr["preload_estimated"], lw=0.8, ls="--", label=f"estimated ({lab})")
            ax[1].plot(t, tr["speed"], lw=0.8, label=lab)
            ax[2].plot(t, tr["Q_p"], lw=0.5, label=lab)
            ax[3].plot(t, tr["P_lv"], lw=0.5, label=lab)
        ax[0].plot(traces[0].time, traces[0]["preload_target"], color="k", lw=0.8, ls=":", label="target")
        ax[0].set_ylabel("preload (mmHg)")
        ax[1].set_ylabel("speed (rpm)")
        ax[2].set_ylabel("pump flow (L/min)")
        ax[3].set_ylabel("LV pressure (mmHg)")
        ax[3].set_xlabel("time (s)")
        for a in ax:
            a.legend(loc="upper right", fontsize=6)
        fig.tight_layout()
        _save(fig, path)


def plot_bland_altman(actual, estimated, path, title=""):
    actual = np.asarray(actual, dtype=float)
    if actual.size == 0:
        raise ValueError("empty series")
    ba = bland_altman(actual, estimated)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.scatter(ba["mean"], ba["diff"], s=3, alpha=0.5)
        for y, ls in ((ba["bias"], "-"), (ba["upper"], "--"), (ba["lower"], "--")):
            ax.axhline(y, color="k", lw=0.8, ls=ls)
        ax.set_xlabel("mean of measured and estimated preload (mmHg)")
        ax.set_ylabel("estimated - measured (mmHg)")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
