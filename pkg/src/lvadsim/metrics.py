"""Agreement statistics between measured and estimated preload.

Standard deviations use the population convention (divide by n)
throughout, so that rmse^2 = bias^2 + sd^2 holds exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

RPC_FACTOR = 1.96
TABLE_COLUMNS = ("r", "rmse", "rpc", "cv", "bias")


@dataclass(frozen=True)
class MetricsReport:
    n: int
    r: float
    rmse: float
    rpc: float
    cv: float
    bias: float
    group: str = ""
    r_undefined: bool = False

    def row(self):
        return [self.group] + [getattr(self, c) for c in TABLE_COLUMNS] + [self.n]

    def to_dict(self):
        return asdict(self)


def differences(actual, estimated):
    a = np.asarray(actual, dtype=float)
    e = np.asarray(estimated, dtype=float)
    if a.shape != e.shape or a.ndim != 1:
        raise ValueError("actual and estimated must be 1-D series of equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    return a, e, e - a


def agreement(actual, estimated, group="") -> MetricsReport:
    """r, RMSE, RPC (1.96 sd), CV (sd over the mean of paired means, %) and bias."""
    a, e, d = differences(actual, estimated)
    bias = float(d.mean())
    sd = float(d.std())
    rmse = float(math.sqrt(np.mean(d * d)))
    paired_mean = float(np.mean((a + e) / 2.0))
    cv = 100.0 * sd / paired_mean if paired_mean != 0 else float("nan")
    undefined = bool(a.std() == 0 or e.std() == 0)
    r = float("nan") if undefined else float(np.corrcoef(a, e)[0, 1])
    return MetricsReport(int(a.size), r, rmse, RPC_FACTOR * sd, cv, bias, str(group), undefined)


def bland_altman(actual, estimated):
    """Per-pair means and differences plus bias and the bias +/- RPC limits."""
    a, e, d = differences(actual, estimated)
    rep = agreement(a, e)
    return {"mean": (a + e) / 2.0, "diff": d, "bias": rep.bias, "upper": rep.bias + rep.rpc,
            "lower": rep.bias - rep.rpc}


def average_row(reports, label="Average") -> MetricsReport:
    """Arithmetic mean of each column over the given rows."""
    if not reports:
        raise ValueError("nothing to aggregate")
    vals = {c: float(np.mean([getattr(r, c) for r in reports])) for c in TABLE_COLUMNS}
    return MetricsReport(int(sum(r.n for r in reports)), group=label, **vals)


def aggregate(groups, pooled=False, label=None):
    """Table rows for grouped (actual, estimated) pairs.

    ``groups`` maps a group name to its (actual, estimated) arrays, in the
    order the rows should appear.  The final row is the mean of the group rows
    ("Average"), or, with ``pooled=True``, the metrics of all pairs
    concatenated ("All scenarios").
    """
    if not groups:
        raise ValueError("nothing to aggregate")
    rows = [agreement(a, e, group=name) for name, (a, e) in groups.items()]
    if pooled:
        a = np.concatenate([np.asarray(v[0], dtype=float) for v in groups.values()])
        e = np.concatenate([np.asarray(v[1], dtype=float) for v in groups.values()])
        rows.append(agreement(a, e, group=label or "All scenarios"))
    else:
        rows.append(average_row(rows, label or "Average"))
    return rows


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_table(rows, path, key="group"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((key,) + TABLE_COLUMNS + ("n",))
        for r in rows:
            w.writerow([_fmt(v) for v in r.row()])


def write_events(rows, path):
    """``rows``: iterable of (scenario, suction_count, congestion_count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario", "suction", "congestion"))
        for r in rows:
            w.writerow([_fmt(v) for v in r])
