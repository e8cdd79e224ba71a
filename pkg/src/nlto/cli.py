"""Command line entry point.

Subcommands: optimize (single run), gen-data (batch sample generation into a
shard), verify-sens (adjoint vs finite-difference report), dsc (compare two
density files). Every run writes a JSON metadata record next to its outputs
so any artifact can be regenerated from the command line alone.

Exit codes: 0 success, 1 a check failed or the engine errored, 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    SCENARIOS,
    ProblemSpec,
    binarize,
    decisions_fingerprint,
    default_spec,
    dsc,
    effective_workers,
    export_image,
    generate_dataset,
    read_image,
    write_shard,
)
from .errors import EngineError


def _vf(text):
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"volume fraction must be in (0, 1], got {value}")
    return value


def _positive(text):
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _build_parser():
    parser = argparse.ArgumentParser(prog="nlto", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="solve one topology optimization problem")
    p_opt.add_argument("--scenario", choices=SCENARIOS, required=True)
    p_opt.add_argument("--nx", type=int)
    p_opt.add_argument("--ny", type=int)
    p_opt.add_argument("--vf", type=_vf, required=True)
    p_opt.add_argument("--load-row", type=int, required=True)
    p_opt.add_argument("--angle", type=float, required=True, help="load angle in radians")
    p_opt.add_argument("--magnitude", type=_positive, help="load magnitude in newtons")
    p_opt.add_argument("--rmin", type=_positive, help="filter radius in meters")
    p_opt.add_argument("--out", required=True, help="design image path (.pgm)")
    p_opt.add_argument("--invert", action="store_true", help="render solid as black")

    p_gen = sub.add_parser("gen-data", help="generate (channels, design) samples into a shard")
    p_gen.add_argument("--scenario", choices=SCENARIOS, required=True)
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--workers", type=int, default=None)

    p_ver = sub.add_parser("verify-sens", help="compare adjoint gradients against central differences")
    p_ver.add_argument("--scenario", choices=SCENARIOS, default="stress")
    p_ver.add_argument("--nx", type=int, default=20)
    p_ver.add_argument("--ny", type=int, default=20)
    p_ver.add_argument("--vf", type=_vf, default=0.35)
    p_ver.add_argument("--load-row", type=int, default=None)
    p_ver.add_argument("--angle", type=float, default=3.0 * np.pi / 2.0)
    p_ver.add_argument("--magnitude", type=_positive, default=None)
    p_ver.add_argument("--rmin", type=_positive, default=0.1)
    p_ver.add_argument("--h", type=_positive, action="append", default=None,
                       help="finite difference step, repeatable; exit gate uses the best step")
    p_ver.add_argument("--threshold", type=_positive, default=1e-3)
    p_ver.add_argument("--out", default=None, help="CSV report path")
    p_ver.add_argument("--perturb-adjoint", type=float, default=None, help=argparse.SUPPRESS)

    p_dsc = sub.add_parser("dsc", help="dice similarity of two thresholded density files")
    p_dsc.add_argument("a")
    p_dsc.add_argument("b")
    p_dsc.add_argument("--threshold", type=float, default=0.5)

    return parser


def _spec_from_args(args) -> ProblemSpec:
    overrides = {}
    for key, attr in (("nx", "nx"), ("ny", "ny"), ("v_f", "vf"),
                      ("load_row", "load_row"), ("theta", "angle"),
                      ("magnitude", "magnitude"), ("r_min", "rmin")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return default_spec(args.scenario, **overrides)


def _write_metadata(path: Path, spec, extra=None):
    record = {
        "engine_version": __version__,
        "decisions_fingerprint": decisions_fingerprint(),
        "spec": dataclasses.asdict(spec) if spec is not None else None,
    }
    record.update(extra or {})
    path.write_text(json.dumps(record, indent=2, default=str) + "\n")


def cmd_optimize(args) -> int:
    from .topopt import optimize

    try:
        spec = _spec_from_args(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    out = Path(args.out)
    result = optimize(spec)

    field = result.densities.reshape(spec.ny, spec.nx)
    export_image(field, out, invert=args.invert)
    np.save(out.with_suffix(".npy"), field)

    with open(out.with_suffix(".history.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "G", "g1", "g2", "max_drho"])
        for i, (g, g1) in enumerate(zip(result.compliance_history, result.g1_history)):
            g2 = result.g2_history[i] if result.g2_history is not None else ""
            drho = result.max_drho_history[i] if i < len(result.max_drho_history) else ""
            writer.writerow([i, repr(g), repr(g1), g2 if g2 == "" else repr(g2), drho])

    _write_metadata(out.with_suffix(".meta.json"), spec, {
        "command": "optimize",
        "iterations": result.iterations,
        "converged": result.converged,
        "wall_time_s": result.wall_time,
        "final_compliance": result.compliance_history[-1],
        "final_g1": result.g1_history[-1],
        "final_g2": result.g2_history[-1] if result.g2_history else None,
    })
    print(f"wrote {out} ({result.iterations} iterations, "
          f"converged={result.converged}, compliance={result.compliance_history[-1]:.6g})")
    return 0


def cmd_gendata(args) -> int:
    if args.count < 0:
        print("error: count must be >= 0", file=sys.stderr)
        return 2
    out = Path(args.out)
    workers = effective_workers(args.workers)

    t0 = time.perf_counter()
    failures = []

    def log(idx, rec, secs):
        if not rec.ok:
            failures.append(idx)
            print(f"warning: sample {idx} failed ({rec.error}); tombstone written",
                  file=sys.stderr)
        else:
            print(f"sample {idx}: {secs:.2f}s")

    records, timings = generate_dataset(args.scenario, args.count, args.seed,
                                        workers=workers, log=log)
    spec0 = None
    write_shard(out, records, args.scenario,
                nx=_SCENARIO_NX[args.scenario][0], ny=_SCENARIO_NX[args.scenario][1],
                seed=args.seed)
    _write_metadata(out.with_suffix(out.suffix + ".meta.json"), spec0, {
        "command": "gen-data",
        "scenario": args.scenario,
        "count": args.count,
        "seed": args.seed,
        "workers": workers,
        "failures": failures,
        "wall_time_s": time.perf_counter() - t0,
        "mean_seconds_per_sample": float(np.mean(timings)) if timings else None,
    })
    if timings:
        print(f"wrote {out}: {len(records)} records, "
              f"{np.mean(timings):.2f}s/sample mean, {len(failures)} failures")
    else:
        print(f"wrote {out}: empty shard")
    if args.count > 0 and len(failures) == args.count:
        print("error: every sample failed", file=sys.stderr)
        return 1
    return 0


_SCENARIO_NX = {"linear": (32, 32), "neohookean": (50, 50), "stress": (50, 50)}


def cmd_verify_sens(args) -> int:
    from .stress import fd_verify

    overrides = dict(nx=args.nx, ny=args.ny, v_f=args.vf, theta=args.angle,
                     r_min=args.rmin)
    overrides["load_row"] = args.load_row if args.load_row is not None else args.ny // 2
    if args.magnitude is not None:
        overrides["magnitude"] = args.magnitude
    elif args.scenario == "stress":
        overrides["magnitude"] = 1e6
    try:
        spec = default_spec(args.scenario, **overrides)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    steps = args.h or [1e-4]
    best = np.inf
    for h in steps:
        report = fd_verify(spec, h=h, perturb_adjoint=args.perturb_adjoint)
        worst = report.max_rel_err()
        best = min(best, worst)
        parts = " ".join(f"{name}: max {data['rel_err'].max():.3e} mean {data['rel_err'].mean():.3e}"
                         for name, data in report.quantities.items())
        print(f"h={h:.1e} {parts}")
        if args.out:
            report.write_csv(args.out)
            _write_metadata(Path(args.out).with_suffix(".meta.json"), spec, {
                "command": "verify-sens", "h": steps, "threshold": args.threshold})
    if best < args.threshold:
        print(f"PASS: best max relative error {best:.3e} < {args.threshold:.1e}")
        return 0
    print(f"FAIL: best max relative error {best:.3e} >= {args.threshold:.1e}")
    return 1


def _load_density_file(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return read_image(path)


def cmd_dsc(args) -> int:
    a = _load_density_file(Path(args.a))
    b = _load_density_file(Path(args.b))
    try:
        value = dsc(binarize(a, args.threshold), binarize(b, args.threshold))
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(f"{value:.6f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "optimize": cmd_optimize,
        "gen-data": cmd_gendata,
        "verify-sens": cmd_verify_sens,
        "dsc": cmd_dsc,
    }
    try:
        return handlers[args.command](args)
    except EngineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
