"""Command-line entry point: ``simulate``, ``ensemble``, ``verify`` and ``report``.

Exit codes: 0 success, 1 a required check failed, 2 configuration or usage
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import chaos_stats as cs
from . import ensemble as en
from .config import load_config, write_manifest
from .errors import ConfigError, MissingManifest, NonFiniteState, ReplicaFailure, WidthUnresolvable
from .grid import RngStream
from .rescaling import simulate_rescaled, write_observable_rows

STAT_FIELDS = ["lambda", "eps", "t", "observable", "statistic", "value", "se"]


def _time_of(name):
    tag = name.split("@", 1)[1].split(":", 1)[0]
    return tag


def ensemble_statistics_rows(acc, params):
    rows = []
    for name in acc.names:
        stats = {"mean": acc.mean(name), "variance": acc.variance(name)}
        if name.startswith(("u@", "X@")):
            for k in range(3, 9):
                stats[f"m{k}"] = acc.standardized_moment(name, k)
        for stat, est in stats.items():
            rows.append([repr(params.lam), repr(params.eps), _time_of(name), name, stat,
                         repr(est.value), repr(est.se)])
    return rows


def ensemble_statistics_csv(acc, params):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STAT_FIELDS)
    w.writerows(ensemble_statistics_rows(acc, params))
    return buf.getvalue()


def _load(args):
    config = load_config(args.config) if args.config else None
    if config is None:
        from .config import RunConfig
        config = RunConfig()
    return config.with_overrides(seed=args.seed, workers=args.workers, output=args.out,
                                 suites=[args.suite] if getattr(args, "suite", None) else None)


def cmd_simulate(config):
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    params = config.params()
    rng = RngStream(config.ensemble.seed, 0)
    t0 = time.perf_counter()
    traj = simulate_rescaled(params, rng)
    elapsed = time.perf_counter() - t0
    traj.meta.update({"seed": config.ensemble.seed})
    traj.write(out / "trajectory")
    phi = config.test_function()
    rows = [(0, f.time, phi.name, float(params.grid.cell * np.sum(f.values * phi.field.values)))
            for f in traj if f.time > 0]
    write_observable_rows(out / "observables.csv", rows)
    verdicts = {}
    if params.lam == 0:
        from .propagators import heat_propagate
        u0 = traj.at(0.0)
        err = max(float(np.max(np.abs(f.values - heat_propagate(u0, f.time).values))) for f in traj)
        verdicts["free-heat"] = {"passed": err <= 1e-10, "max_error": err}
    write_manifest(out, config, "simulate", verdicts, {"wall_seconds": elapsed})
    return 0


def cmd_ensemble(config):
    from .suites import standard_run

    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    stats_rows = []
    timing = {}
    for lam in config.sim.lams:
        for eps in config.sim.epss:
            params, phi, acc, elapsed = standard_run(config, lam, eps)
            key = f"lam={lam!r},eps={eps!r}"
            timing[key] = elapsed
            sub = out / f"lam{lam!r}_eps{eps!r}"
            sub.mkdir(exist_ok=True)
            acc.to_npz(sub / "accumulator.npz")
            ids, vals = acc.sample_matrix()
            rows = []
            for i, name in enumerate(acc.names):
                if name.startswith("u@"):
                    t = float(_time_of(name))
                    rows += [(r, t, name.split(":", 1)[1], v) for r, v in zip(ids, vals[i])]
            write_observable_rows(sub / "observables.csv", rows)
            stats_rows += ensemble_statistics_rows(acc, params)
            entry = {"gaussianity": {}, "sigma2": {}, "lambda_eps": params.lam_eps}
            for t in params.t_list:
                name = f"u@{en._fmt(t)}:{phi.name}"
                entry["gaussianity"][en._fmt(t)] = cs.gaussianity_report(acc, name).to_dict()
            for s in config.sim.s_list:
                if f"A@s={en._fmt(s)}" in acc:
                    entry["sigma2"][en._fmt(s)] = cs.sigma_lambda_estimate(acc, s).to_dict()
            report[key] = entry
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_nan))
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STAT_FIELDS)
        w.writerows(stats_rows)
    write_manifest(out, config, "ensemble", {}, {"wall_seconds": timing})
    return 0


def _nan(x):
    return None


def cmd_verify(config, suites):
    from .suites import SUITES, run_suite

    unknown = [s for s in suites if s not in SUITES]
    if unknown or not suites:
        print(f"unknown suite {unknown or suites!r}; known suites: {', '.join(sorted(SUITES))}",
              file=sys.stderr)
        return 2
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for s in suites:
        for r in run_suite(s, config):
            print(r.line(), flush=True)
            results.append(r)
    verdicts = {r.name: r.to_dict() for r in results}
    (out / "verdicts.json").write_text(json.dumps(verdicts, indent=2, sort_keys=True, default=str))
    write_manifest(out, config, "verify", {r.name: r.passed for r in results})
    return 1 if any(r.required and not r.passed for r in results) else 0


def cmd_report(results_dir):
    """Tidy CSVs and a plain-text summary from a completed results directory."""
    root = Path(results_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingManifest(f"{root} has no manifest.json; the run is incomplete")
    manifest = json.loads(manifest_path.read_text())
    tidy = []
    stats = root / "stats.csv"
    if stats.is_file():
        with open(stats, newline="") as fh:
            for row in csv.DictReader(fh):
                tidy.append([row["lambda"], row["eps"], row["t"], row["observable"] + ":" + row["statistic"],
                             row["value"], row["se"]])
    sigma_rows = []
    report = root / "report.json"
    if report.is_file():
        data = json.loads(report.read_text())
        for key in sorted(data):
            lam, eps = (part.split("=")[1] for part in key.split(","))
            sig = data[key].get("sigma2", {})
            if sig:
                s = max(sig, key=float)
                sigma_rows.append([lam, eps, s, repr(sig[s]["value"]), repr(sig[s]["se"])])
    with open(root / "tidy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "eps", "t", "statistic", "value", "se"])
        w.writerows(tidy)
    with open(root / "sigma_lambda.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "eps", "s", "sigma2", "se"])
        w.writerows(sigma_rows)
    lines = [f"command: {manifest['command']}", f"config hash: {manifest['config_hash']}",
             f"statistics rows: {len(tidy)}"]
    for name, v in sorted(manifest.get("verdicts", {}).items()):
        passed = v["passed"] if isinstance(v, dict) else v
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}")
    for row in sigma_rows:
        lines.append(f"sigma2(lambda={row[0]}, eps={row[1]}, s={row[2]}) = {row[3]} +- {row[4]}")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="allen-cahn-clt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "ensemble", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        if name == "verify":
            sp.add_argument("--suite", type=str, default=None)
    sp = sub.add_parser("report")
    sp.add_argument("--out", type=str, required=True, help="results directory")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "report":
            return cmd_report(args.out)
        config = _load(args)
        if args.command == "simulate":
            return cmd_simulate(config)
        if args.command == "ensemble":
            return cmd_ensemble(config)
        return cmd_verify(config, config.suites)
    except (ConfigError, MissingManifest, WidthUnresolvable, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReplicaFailure as exc:
        print(f"numerical failure: {exc} (replica {exc.replica}, seed {exc.seed})", file=sys.stderr)
        return 3
    except NonFiniteState as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
