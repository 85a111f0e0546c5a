"""Batch command-line front end.

    lvadsim [global flags] cohort | dataset | train | crossval | control | report

Every command writes a ``manifest_<command>*.json`` next to its outputs.  The
manifest's ``config`` block holds every resolved option, so passing the
manifest back through ``--config`` reruns the command identically.

Exit status: 0 success, 1 partial (flagged patients or failed simulations),
2 failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_PARTIAL, EXIT_FAILURE = 0, 1, 2
COMMANDS = ("cohort", "dataset", "train", "crossval", "control", "report")
SUBSYSTEMS = {"train": 1, "kfold": 2}


class CommandError(RuntimeError):
    pass


def derive_seed(root, subsystem):
    """Deterministic per-subsystem seed split from the root seed."""
    ss = np.random.SeedSequence([int(root), SUBSYSTEMS[subsystem]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def load_scale(scale):
    name = {"desk": "desk.json", "paper": "paper.json"}[scale]
    return json.loads(resources.files("lvadsim").joinpath(f"data/{name}").read_text())


def resolve_config(args):
    """Merge bundled scale defaults, a --config file and explicit flags (in
    rising priority) into one flat dict."""
    cfg = {}
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        if "config" in file_cfg and "command" in file_cfg:  # a manifest
            file_cfg = file_cfg["config"]
    scale = args.scale or file_cfg.get("scale", "desk")
    cfg.update(load_scale(scale))
    cfg.update(file_cfg)
    cfg["scale"] = scale
    for k, v in vars(args).items():
        if k in ("config", "command", "func", "scale", "out", "force") or v is None:
            continue
        cfg[k] = v
    cfg.setdefault("seed", 0)
    return cfg


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(out, command, cfg):
    """One manifest per command, except that datasets built from different
    cohorts (train and test) each keep their own."""
    tag = ""
    if command == "dataset":
        tag = "_" + Path(cfg.get("cohort") or "cohort_train.json").stem.replace("cohort_", "")
    elif command == "control":
        tag = "_" + cfg.get("mode", "sensor")
    return Path(out, f"manifest_{command}{tag}.json")


def write_manifest(out, command, cfg, outputs, status, notes=()):
    import numba
    import scipy

    cfg_text = json.dumps(cfg, sort_keys=True)
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "seed": cfg.get("seed"),
        "status": status,
        "notes": list(notes),
        "versions": {"lvadsim": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "numba": numba.__version__},
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in sorted(outputs)},
    }
    manifest_path(out, command, cfg).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _guard(paths, force):
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise CommandError(f"{existing[0]} exists; pass --force to overwrite")


def _path(out, cfg, key, default):
    v = cfg.get(key)
    return Path(v) if v else Path(out) / default


def _input(out, cfg, key, default):
    """Resolve an input file and pin its absolute path into the config, so the
    manifest replays against the same inputs from any output directory."""
    p = _path(out, cfg, key, default).resolve()
    cfg[key] = str(p)
    return p


# ------------------------------------------------------------------ commands

def cmd_cohort(cfg, out, force):
    from .cohort import TEST, TRAIN, make_cohort, save_cohort

    # patient seeds are already namespaced by split and index
    seed = int(cfg["seed"])
    files = [Path(out) / "cohort_train.json", Path(out) / "cohort_test.json"]
    _guard(files, force)
    save_cohort(make_cohort(int(cfg["n_train"]), TRAIN, seed), files[0])
    save_cohort(make_cohort(int(cfg["n_test"]), TEST, seed), files[1])
    return files, EXIT_OK, []


def cmd_dataset(cfg, out, force):
    from .cohort import SCENARIO_NAMES, load_cohort
    from .dataset import build_dataset, label_envelope_warnings
    from .estimator.train import save_dataset

    cohort_path = _input(out, cfg, "cohort", "cohort_train.json")
    target = _path(out, cfg, "dataset_out", f"dataset_{cohort_path.stem.replace('cohort_', '')}.npz")
    _guard([target], force)
    patients = load_cohort(cohort_path)
    scen = cfg.get("scenarios") or list(SCENARIO_NAMES)
    ds, failures = build_dataset([(i, p.params) for i, p in enumerate(patients)], cfg["speeds"], scen)
    save_dataset(target, **ds)
    summary = Path(out) / f"{target.stem}_summary.csv"
    _write_dataset_summary(ds, scen, summary)
    notes = failures + label_envelope_warnings(ds["labels"])
    for n in notes:
        print("warning:", n, file=sys.stderr)
    return [target, summary], EXIT_PARTIAL if failures else EXIT_OK, notes


def _write_dataset_summary(ds, scen, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient", "speed", "scenario", "windows", "label_min", "label_mean", "label_max"))
        keys = sorted(set(zip(ds["patient"].tolist(), ds["speed"].tolist(), ds["scenario"].tolist())))
        for p, s, c in keys:
            m = (ds["patient"] == p) & (ds["speed"] == s) & (ds["scenario"] == c)
            y = ds["labels"][m]
            w.writerow([p, f"{s:g}", scen[c], int(m.sum()), f"{y.min():.6f}", f"{y.mean():.6f}", f"{y.max():.6f}"])


def _train_config(cfg, seed_key="train"):
    from .estimator.train import TrainConfig

    return TrainConfig(iterations=int(cfg["iterations"]), batch_size=int(cfg["batch_size"]),
                       learning_rate=float(cfg.get("learning_rate", 1e-3)),
                       seed=derive_seed(cfg["seed"], seed_key), dtype=cfg.get("dtype", "float32"))


def cmd_train(cfg, out, force):
    from .cohort import SCENARIO_NAMES
    from .estimator.train import dataset_digest, load_dataset, train
    from .metrics import aggregate, write_table

    ds_path = _input(out, cfg, "dataset", "dataset_train.npz")
    model_path = _path(out, cfg, "model_out", "model.json")
    curve_path = Path(out) / "train_loss.csv"
    _guard([model_path, curve_path], force)
    ds = load_dataset(ds_path)
    model, curve = train(ds["windows"], ds["labels"], _train_config(cfg), log_every=int(cfg.get("log_every", 0)))
    model.meta["dataset_sha256"] = dataset_digest(ds)
    model.save(model_path)
    curve_path.write_text("iteration,loss\n" + "".join(f"{i + 1},{v:.8f}\n" for i, v in enumerate(curve)))
    outputs = [model_path, curve_path]
    if cfg.get("eval_dataset"):
        ev = load_dataset(_input(out, cfg, "eval_dataset", ""))
        pred = model.predict(ev["windows"])
        scen = cfg.get("scenarios") or list(SCENARIO_NAMES)
        groups = {name: (ev["labels"][ev["scenario"] == i], pred[ev["scenario"] == i])
                  for i, name in enumerate(scen) if np.any(ev["scenario"] == i)}
        table = Path(out) / "evaluation.csv"
        write_table(aggregate(groups, pooled=True), table, key="scenario")
        outputs.append(table)
    return outputs, EXIT_OK, []


def cmd_crossval(cfg, out, force):
    from .estimator.train import kfold_split, load_dataset, train
    from .metrics import agreement, average_row, write_table

    ds = load_dataset(_input(out, cfg, "dataset", "dataset_train.npz"))
    table = Path(out) / "crossval.csv"
    audit = Path(out) / "crossval_folds.csv"
    _guard([table, audit], force)
    k = int(cfg.get("folds", 10))
    folds = kfold_split(ds["patient"], k, derive_seed(cfg["seed"], "kfold"))
    rows = []
    lines = ["fold,patients,windows\n"]
    for f, (tr, va) in enumerate(folds):
        shared = set(ds["patient"][tr].tolist()) & set(ds["patient"][va].tolist())
        if shared:
            raise CommandError(f"fold {f + 1} leaks patients {sorted(shared)}")
        model, _ = train(ds["windows"][tr], ds["labels"][tr], _train_config(cfg))
        rows.append(agreement(ds["labels"][va], model.predict(ds["windows"][va]), group=str(f + 1)))
        pats = " ".join(str(p) for p in sorted(set(ds["patient"][va].tolist())))
        lines.append(f"{f + 1},{pats},{len(va)}\n")
        print(f"fold {f + 1}/{k}: rmse {rows[-1].rmse:.3f} r {rows[-1].r:.3f}", file=sys.stderr, flush=True)
    rows.append(average_row(rows))
    write_table(rows, table, key="fold")
    audit.write_text("".join(lines))
    return [table, audit], EXIT_OK, []


def cmd_control(cfg, out, force):
    from .cohort import SCENARIO_NAMES, load_cohort
    from .engine import ProtocolConfig, SimulationBlowup, detect_events, run_protocol, tune_constant_speed
    from .estimator.model import CnnModel
    from .metrics import aggregate, write_events, write_table

    mode = cfg.get("mode", "sensor")
    if mode not in ("sensor", "estimator"):
        raise CommandError("--mode must be sensor or estimator")
    model = None
    if mode == "estimator":
        mpath = _input(out, cfg, "model", "model.json")
        if not mpath.exists():
            raise CommandError(f"estimator mode needs a model file ({mpath} not found)")
        model = CnnModel.load(mpath)
    run_dir = Path(out) / f"control_{mode}"
    if run_dir.exists() and not force:
        raise CommandError(f"{run_dir} exists; pass --force to overwrite")
    (run_dir / "traces").mkdir(parents=True, exist_ok=True)
    patients = load_cohort(_input(out, cfg, "cohort", "cohort_test.json"))
    scen = cfg.get("scenarios") or list(SCENARIO_NAMES)
    pconf = ProtocolConfig(t_end=float(cfg.get("t_end", 120.0)))
    outputs, notes = [], []
    events = {s: [0, 0] for s in scen}
    pairs = {s: ([], []) for s in scen}
    pair_lines = ["patient,scenario,cycle_time,measured,estimated\n"]
    tuning_lines = ["patient,speed,feasible,box_reachable,rule,co,maop,preload\n"]
    status = EXIT_OK
    for p in patients:
        try:
            tun = tune_constant_speed(p.params, config=pconf)
        except SimulationBlowup as exc:
            notes.append(f"{p.id}: tuning blow-up: {exc}")
            status = EXIT_PARTIAL
            continue
        pt = tun.point()
        tuning_lines.append(f"{p.id},{tun.speed:g},{int(tun.feasible)},{int(tun.box_reachable)},{tun.rule},"
                            f"{pt.co:.6f},{pt.maop:.6f},{pt.preload:.6f}\n")
        if tun.flagged:
            notes.append(f"{p.id}: tuned speed {tun.speed:g} rpm misses the CO/MAoP ranges ({tun.rule})")
            status = EXIT_PARTIAL
        for s in scen:
            try:
                tr = run_protocol(p.params, None, s, f"mfac-{mode}", pconf, model=model, tuned_speed=tun.speed)
            except SimulationBlowup as exc:
                notes.append(f"{p.id} {s}: blow-up: {exc}")
                status = EXIT_PARTIAL
                continue
            f = run_dir / "traces" / f"{p.id}_{s}.csv"
            tr.write_csv(f, debug_controller=bool(cfg.get("debug_controller")))
            outputs.append(f)
            ev = detect_events(tr)
            events[s][0] += ev["suction_count"]
            events[s][1] += ev["congestion_count"]
            if mode == "estimator":
                m = tr.controlled_cycles() & np.isfinite(tr.cycle_estimated)
                pairs[s][0].append(tr.cycle_measured[m])
                pairs[s][1].append(tr.cycle_estimated[m])
                pair_lines += [f"{p.id},{s},{t:.4f},{a:.6f},{e:.6f}\n" for t, a, e in
                               zip(tr.cycle_time[m], tr.cycle_measured[m], tr.cycle_estimated[m])]
    ev_path = run_dir / "events.csv"
    write_events([(s, *events[s]) for s in scen] + [("total", sum(v[0] for v in events.values()),
                                                      sum(v[1] for v in events.values()))], ev_path)
    tun_path = run_dir / "tuning.csv"
    tun_path.write_text("".join(tuning_lines))
    outputs += [ev_path, tun_path]
    if mode == "estimator":
        groups = {s: (np.concatenate(a), np.concatenate(e)) for s, (a, e) in pairs.items() if a}
        if groups:
            ag = run_dir / "agreement.csv"
            write_table(aggregate(groups, pooled=True), ag, key="scenario")
            outputs.append(ag)
        pp = run_dir / "pairs.csv"
        pp.write_text("".join(pair_lines))
        outputs.append(pp)
    for n in notes:
        print("warning:", n, file=sys.stderr)
    return outputs, status, notes


def cmd_report(cfg, out, force):
    import csv

    from .plots import plot_bland_altman, plot_protocol

    run = Path(cfg.get("run") or out)
    if not run.is_dir():
        raise CommandError(f"run directory {run} not found")
    rep = run / "report"
    if rep.exists() and not force:
        raise CommandError(f"{rep} exists; pass --force to overwrite")
    rep.mkdir(exist_ok=True)
    outputs = []
    summary = {}
    modes = [m for m in ("sensor", "estimator") if (run / f"control_{m}").is_dir()]
    if not modes:
        raise CommandError(f"{run} holds no control runs")
    for m in modes:
        with open(run / f"control_{m}" / "events.csv") as fh:
            summary[f"events_{m}"] = list(csv.DictReader(fh))
    if "estimator" in modes and (run / "control_estimator" / "agreement.csv").exists():
        with open(run / "control_estimator" / "agreement.csv") as fh:
            summary["agreement"] = list(csv.DictReader(fh))
    traces = sorted((run / f"control_{modes[0]}" / "traces").glob("*.csv"))
    for f in traces:
        tr = {m: read_trace(run / f"control_{m}" / "traces" / f.name) for m in modes
              if (run / f"control_{m}" / "traces" / f.name).exists()}
        svg = rep / f"{f.stem}.svg"
        plot_protocol(list(tr.values()), svg, labels=list(tr))
        outputs.append(svg)
        if len(tr) == 2:
            summary.setdefault("speed_rms_relative", {})[f.stem] = speed_rms_relative(tr["sensor"], tr["estimator"])
    pairs = run / "control_estimator" / "pairs.csv"
    if pairs.exists():
        d = np.genfromtxt(pairs, delimiter=",", names=True, dtype=None, encoding="utf-8")
        if d.size >= 2:
            ba = rep / "bland_altman.svg"
            plot_bland_altman(np.atleast_1d(d["measured"]), np.atleast_1d(d["estimated"]), ba,
                              "closed-loop estimates")
            outputs.append(ba)
    sj = rep / "summary.json"
    sj.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.append(sj)
    return outputs, EXIT_OK, []


def speed_rms_relative(sensor, estimator, t_from=50.0):
    """RMS speed difference of two runs over the controlled period, relative
    to the RMS of the sensor-mode speed."""
    sel = sensor.time >= t_from
    a, b = sensor["speed"][sel], estimator["speed"][sel]
    return float(np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(a ** 2)))


class _CsvTrace:
    def __init__(self, cols):
        self.cols = cols
        self.time = cols["time"]
        self.meta = {}

    def __getitem__(self, k):
        return self.cols[k]


def read_trace(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    return _CsvTrace({n: np.asarray(data[n], dtype=float) for n in data.dtype.names})


HANDLERS = {"cohort": cmd_cohort, "dataset": cmd_dataset, "train": cmd_train, "crossval": cmd_crossval,
            "control": cmd_control, "report": cmd_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="lvadsim", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", help="JSON config file or a previous run's manifest")
    ap.add_argument("--seed", type=int, help="root seed (default 0)")
    ap.add_argument("--out", default="runs", help="output directory (default ./runs)")
    ap.add_argument("--scale", choices=("desk", "paper"), help="bundled defaults (default desk)")
    ap.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cohort", help="generate train and test virtual patients")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)

    p = sub.add_parser("dataset", help="simulate constant-speed runs and extract labelled flow windows")
    p.add_argument("--cohort")
    p.add_argument("--speeds", type=float, nargs="+")
    p.add_argument("--scenarios", nargs="+")
    p.add_argument("--dataset-out", dest="dataset_out")

    p = sub.add_parser("train", help="train the preload estimator")
    p.add_argument("--dataset")
    p.add_argument("--eval-dataset", dest="eval_dataset")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--model-out", dest="model_out")
    p.add_argument("--log-every", dest="log_every", type=int)

    p = sub.add_parser("crossval", help="patient-level k-fold cross validation")
    p.add_argument("--dataset")
    p.add_argument("--folds", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("control", help="closed-loop runs on the test cohort")
    p.add_argument("--mode", choices=("sensor", "estimator"))
    p.add_argument("--model")
    p.add_argument("--cohort")
    p.add_argument("--scenarios", nargs="+")
    p.add_argument("--debug-controller", dest="debug_controller", action="store_true", default=None)

    p = sub.add_parser("report", help="plots and summary for a run directory")
    p.add_argument("--run")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        cfg["command"] = args.command
        out.mkdir(parents=True, exist_ok=True)
        outputs, status, notes = HANDLERS[args.command](cfg, out, args.force)
        cfg.pop("command")
        write_manifest(out, args.command, cfg, [p for p in outputs if Path(p).is_file()], status, notes)
    except (CommandError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FloatingPointError as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return status


if __name__ == "__main__":
    sys.exit(main())
