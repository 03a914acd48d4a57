"""
Command line interface.

Exit codes: 0 success, 2 degraded run (some steps held their last controls),
1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bundle import write_bundle
from .scenario import ScenarioError, load_scenario
from .simulate import load_result, metrics, run_scenario, save_result, summary_text, sweep_alpha, write_sweep

log = logging.getLogger("voltreg")

EXIT_OK, EXIT_ERROR, EXIT_DEGRADED = 0, 1, 2


def _scenario(args):
    sc = load_scenario(args.scenario)
    kw = {}
    if getattr(args, "method", None):
        kw["method"] = args.method
    if getattr(args, "alpha", None) is not None:
        kw["forecast_alpha"] = args.alpha
    if getattr(args, "seed", None) is not None:
        kw["rng_seed"] = args.seed
    if getattr(args, "start_step", None) is not None:
        kw["start_step"] = args.start_step
    if getattr(args, "n_steps", None) is not None:
        kw["n_steps"] = args.n_steps
    return sc.with_(**kw) if kw else sc


def cmd_run(args) -> int:
    sc = _scenario(args)
    res = run_scenario(sc)
    out = Path(args.out or f"results_{sc.method}")
    m = save_result(res, out)
    print(summary_text(m, res), end="")
    print(f"results written to {out}")
    return EXIT_DEGRADED if res.is_degraded else EXIT_OK


def cmd_sweep(args) -> int:
    sc = _scenario(args).with_(method="ovr")
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    rows = sweep_alpha(sc, alphas, workers=args.workers)
    print(f"{'alpha':>6} {'max_dev':>9} {'mean_dev':>9} {'ov_min':>8} {'taps':>5}")
    for r in rows:
        print(f"{r['alpha']:6.3f} {r['max_deviation']:9.5f} {r['mean_deviation']:9.5f} "
              f"{r['overvoltage_node_minutes']:8.1f} {r['tap_operations']:5d}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_sweep(rows, args.out)
    return EXIT_DEGRADED if any(r["degraded_steps"] for r in rows) else EXIT_OK


def cmd_validate(args) -> int:
    """Closed-loop linearization check: optimizer-predicted minus re-solved magnitudes, perfect forecasts."""
    sc = _scenario(args).with_(method="ovr", forecast_alpha=0.0)
    res = run_scenario(sc)
    E = res.predicted - res.vmag
    ok = np.isfinite(E).all(axis=1)
    out = Path(args.out or "validate_lin")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "lin_error.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "node", "E"])
        for s in np.flatnonzero(ok):
            for i, lab in enumerate(res.node_labels):
                w.writerow([int(s), lab, f"{E[s, i]:.9g}"])
    summary = {
        "cases": int(ok.sum()),
        "max_abs_E": float(np.abs(E[ok]).max()) if ok.any() else float("nan"),
        "mean_abs_E": float(np.abs(E[ok]).mean()) if ok.any() else float("nan"),
        "max_abs_E_by_hour": {},
    }
    hours = (res.timestamps // 3600).astype(int)
    for h in sorted(set(hours[ok].tolist())):
        sel = ok & (hours == h)
        summary["max_abs_E_by_hour"][str(h)] = float(np.abs(E[sel]).max())
    (out / "lin_error.json").write_text(json.dumps(summary, indent=1) + "\n")
    save_result(res, out / "run")
    print(f"steps checked   {summary['cases']}")
    print(f"max |E| (p.u.)  {summary['max_abs_E']:.5f}")
    print(f"mean |E| (p.u.) {summary['mean_abs_E']:.5f}")
    return EXIT_DEGRADED if res.is_degraded else EXIT_OK


def cmd_compare(args) -> int:
    a, b = load_result(args.a), load_result(args.b)
    ma, mb = metrics(a), metrics(b)
    keys = ["method", "steps", "mean_abs_deviation", "max_abs_deviation", "mean_unbalance", "max_unbalance",
            "tap_operations", "overvoltage_node_minutes", "overvoltage_node_minutes_noon",
            "undervoltage_node_minutes", "degraded_steps"]
    print(f"{'metric':32} {'A':>14} {'B':>14}")
    for k in keys:
        va, vb = ma.get(k), mb.get(k)
        fa = f"{va:.5f}" if isinstance(va, float) else str(va)
        fb = f"{vb:.5f}" if isinstance(vb, float) else str(vb)
        print(f"{k:32} {fa:>14} {fb:>14}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    write_bundle(args.out, seed=args.seed)
    print(f"bundle written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltreg", description="OLTC and smart-inverter voltage regulation studies")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--seed", type=int, help="forecast-error seed")
        sp.add_argument("--start-step", type=int, help="first profile step to simulate")
        sp.add_argument("--n-steps", type=int, help="number of steps to simulate")

    r = sub.add_parser("run", help="simulate one scenario")
    common(r)
    r.add_argument("--method", choices=["avr", "ovr"])
    r.add_argument("--alpha", type=float, help="forecast error ratio")
    r.add_argument("--out", help="result directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-alpha", help="OVR runs over forecast-error levels")
    common(s)
    s.add_argument("--alphas", default="0,0.1,0.2,0.3")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="CSV table path")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate-lin", help="linearization error over an OVR run")
    common(v)
    v.add_argument("--out", help="report directory")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("compare", help="compare two result directories")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("make-data", help="regenerate the bundled IEEE 37 data set")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=2019)
    d.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
