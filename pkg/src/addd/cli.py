"""Command-line entry point: generate, run, evaluate, repeat, report."""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

from addd import __version__
from addd import detector as det
from addd import evaluation as ev
from addd import localization as loc
from addd import pipeline, sim
from addd.errors import AdddError
from addd.vae import VaeConfig


class ValidationError(Exception):
    pass


def header(scenario, seed, **extra):
    parts = [f"addd {__version__}", f"scenario={scenario}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def parse_header(path):
    """``key=value`` fields of a file's leading comment line."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)


def _topology(spec):
    if os.path.exists(spec):
        return sim.load_topology(spec)
    try:
        return sim.shipped_topology(spec)
    except FileNotFoundError:
        raise ValidationError(f"topology {spec!r} is neither a file nor a shipped network") from None


def _scenario(args):
    try:
        sc = sim.table1_scenario(args.scenario, args.seed)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from None
    sc = sc.with_events(args.events)
    if args.noise_sigma is not None:
        sc = replace(sc, noise_sigma=args.noise_sigma)
    return sc


def detector_config(args):
    vae_cfg = VaeConfig(epochs=args.epochs)
    return det.DetectorConfig(vae=vae_cfg, drift_patience=args.patience,
                              drift_band=tuple(args.band), max_anomaly_share=args.max_anomaly_share)


def _thresholds(args):
    return det.DriftThresholds(*args.thresholds) if args.thresholds else None


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write(path, writer, *a, **kw):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(*a, fh, **kw)


def write_events_csv(rows, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "sensor_id", "event"])
    w.writerows(rows)


def write_localization_csv(metrics, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["step_fp", "step_fn", "evaluated_steps", "localized_nodes"])
    w.writerow([metrics.step_fp, metrics.step_fn, metrics.evaluated_steps,
                ";".join(sorted(metrics.localized_nodes, key=sim._node_key))])


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    sc = _scenario(args)
    stream = sim.generate(sc)
    out = _out_dir(args.out)
    h = header(sc.name, sc.seed, network=sc.topology.name, events=args.events)
    _write(os.path.join(out, "stream.csv"), sim.stream_to_csv, stream, header=h)
    _write(os.path.join(out, "truth.csv"), sim.regions_to_csv, stream, header=h)
    return 0


def _run_one(stream, topology, args, seed, mode):
    detectors = pipeline.build_detectors(stream, detector_config(args), seed, topology.sensors,
                                         _thresholds(args))
    return pipeline.run_stream(stream, topology, detectors, mode, args.host, args.port, args.timeout)


def cmd_run(args):
    meta = parse_header(args.stream)
    topo_spec = args.topology or meta.get("network")
    if not topo_spec:
        raise ValidationError("no --topology given and the stream header names no network")
    topology = _topology(topo_spec)
    with open(args.stream, encoding="utf-8") as fh:
        stream = sim.read_stream_csv(fh)
    if set(stream.sensors) != set(topology.sensors):
        raise ValidationError(
            f"stream sensors {sorted(stream.sensors)} do not match topology sensors {sorted(topology.sensors)}"
        )
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    scenario = meta.get("scenario", "")
    result = _run_one(stream, topology, args, seed, args.mode)
    out = _out_dir(args.out)
    h = header(scenario, seed)
    _write(os.path.join(out, "predictions.csv"), ev.write_predictions_csv, result.snapshots, header=h)
    _write(os.path.join(out, "regions.csv"), loc.write_regions_csv, result.reports, header=h)
    _write(os.path.join(out, "events.csv"), write_events_csv, result.events(), header=h)
    return 0


def cmd_evaluate(args):
    meta = parse_header(args.labels)
    with open(args.predictions, encoding="utf-8") as fh:
        preds = ev.read_predictions_csv(fh)
    with open(args.labels, encoding="utf-8") as fh:
        labels = ev.read_labels_csv(fh)
    scenario, seed = meta.get("scenario", ""), meta.get("seed", "")
    report = ev.evaluate_run(preds, labels, args.alpha, scenario, seed)
    out = _out_dir(args.out)
    h = header(scenario, seed, alpha=args.alpha)
    _write(os.path.join(out, "gmean.csv"), ev.write_gmean_csv, report, header=h)
    _write(os.path.join(out, "summary.csv"), ev.write_summary_csv, report, header=h)
    if args.regions and args.truth:
        with open(args.regions, encoding="utf-8") as fh:
            reports = loc.read_regions_csv(fh)
        with open(args.truth, encoding="utf-8") as fh:
            regions, sources = sim.read_regions_csv(fh)
        sensors = sorted(labels)
        metrics = loc.localization_metrics(reports, regions, sources, sensors)
        _write(os.path.join(out, "localization.csv"), write_localization_csv, metrics, header=h)
    return 0


def cmd_repeat(args):
    reports = []
    rows = []
    for i in range(args.n):
        seed = args.base_seed + i
        sc = _scenario(argparse.Namespace(**{**vars(args), "seed": seed}))
        stream = sim.generate(sc)
        result = _run_one(stream, sc.topology, args, seed, pipeline.INPROCESS)
        preds = {s: {snap.t: snap.y_hat[s] for snap in result.snapshots} for s in sc.topology.sensors}
        labels = {s: dict(enumerate(stream.online_labels(s).tolist())) for s in sc.topology.sensors}
        rep = ev.evaluate_run(preds, labels, args.alpha, sc.name, seed)
        reports.append(rep)
        for s in rep.sensors:
            c = rep.confusion[s]
            rows.append([seed, s, c.tp, c.fn, c.tn, c.fp, ev._fmt(rep.final_gmean(s))])
        print(f"seed {seed}: " + " ".join(f"{s}={rep.final_gmean(s):.4f}" for s in rep.sensors),
              file=sys.stderr)
    out = _out_dir(args.out)
    h = header(args.scenario, f"{args.base_seed}..{args.base_seed + args.n - 1}", n=args.n)
    _write(os.path.join(out, "repeat.csv"), ev.write_repeat_csv, ev.aggregate(reports), header=h)
    with open(os.path.join(out, "repeat_summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "sensor_id", "tp", "fn", "tn", "fp", "final_gmean"])
        w.writerows(rows)
    return 0


def cmd_report(args):
    names = args.names or [os.path.splitext(os.path.basename(p))[0] for p in args.inputs]
    if len(names) != len(args.inputs):
        raise ValidationError("--names must give one name per input")
    series = []
    for name, path in zip(names, args.inputs):
        with open(path, encoding="utf-8") as fh:
            agg = ev.read_repeat_csv(fh)
        for s, (m, e) in agg.items():
            series.append((f"{name}_{s}", m, e))
    if not series:
        raise ValidationError("inputs contain no series")
    n = {len(m) for _, m, _ in series}
    if len(n) != 1:
        raise ValidationError(f"inputs have different lengths: {sorted(n)}")
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header('+'.join(names), '-')}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"{c}_{k}" for c, _, _ in series for k in ("mean", "stderr")])
        for t in range(n.pop()):
            w.writerow([t] + [ev._fmt(v[t]) for _, m, e in series for v in (m, e)])
    return 0


# ---------------------------------------------------------------- parser


def _detector_flags(p):
    g = p.add_argument_group("detector")
    g.add_argument("--epochs", type=int, default=VaeConfig.epochs)
    g.add_argument("--patience", type=int, default=det.DetectorConfig.drift_patience,
                   help="consecutive in-band checks before a drift alarm")
    g.add_argument("--band", type=float, nargs=2, metavar=("LOW", "UPP"),
                   default=list(det.DetectorConfig.drift_band),
                   help="drift band in units of the encoding spread")
    g.add_argument("--thresholds", type=float, nargs=2, metavar=("LOW", "UPP"), default=None,
                   help="absolute drift thresholds (override --band, kept across retraining)")
    g.add_argument("--max-anomaly-share", type=float, default=det.DetectorConfig.max_anomaly_share)
    g.add_argument("--host", default="127.0.0.1")
    g.add_argument("--port", type=int, default=0)
    g.add_argument("--timeout", type=float, default=60.0, help="barrier timeout in seconds")


def _scenario_flags(p, seed=True):
    p.add_argument("--scenario", required=True, choices=sim.scenario_names())
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events", default="all", choices=sim.EVENT_SETS)
    p.add_argument("--noise-sigma", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="addd", description="Anomaly and drift detection for water networks")
    parser.add_argument("--version", action="version", version=f"addd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with default values for this command's flags")
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "simulate a scenario to CSV")
    _scenario_flags(p)
    p.add_argument("--out", required=True)

    p = add("run", cmd_run, "detect and localize on a stream CSV")
    p.add_argument("--stream", required=True)
    p.add_argument("--topology", help="shipped network name or topology file")
    p.add_argument("--seed", type=int, default=None, help="detector seed (default: stream seed)")
    p.add_argument("--mode", choices=(pipeline.INPROCESS, pipeline.SOCKET), default=pipeline.INPROCESS)
    p.add_argument("--out", required=True)
    _detector_flags(p)

    p = add("evaluate", cmd_evaluate, "prequential G-mean and localization metrics")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True, help="stream CSV with labels")
    p.add_argument("--regions", help="regions.csv from run")
    p.add_argument("--truth", help="truth.csv from generate")
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--out", required=True)

    p = add("repeat", cmd_repeat, "seeded repetitions with mean and standard error")
    _scenario_flags(p, seed=False)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--out", required=True)
    _detector_flags(p)

    p = add("report", cmd_report, "merge repeat outputs into one plot-ready CSV")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def _config_path(argv):
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse with precedence flags > config file > defaults."""
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if a in _subparsers(parser)), None)
    if path and command:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        sp = _subparsers(parser)[command]
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - {a.dest for a in sp._actions} - {"config"})
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**cfg)
        for a in sp._actions:
            if a.dest in cfg:
                a.required = False
    return parser.parse_args(argv)


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        return args.func(args)
    except (ValidationError, AdddError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"addd: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
