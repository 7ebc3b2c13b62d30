"""Command-line front end.

Exit codes: 0 success, 1 invalid input or failed validation, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys

from . import config as cfgmod
from . import moments as mm
from .chaos import run_invariants
from .errors import MSPDError, NumericError
from .kernels import DKernel
from .montecarlo import ValidationConfig, validate
from .simulator import StressScenario, path_rng, simulate, write_paths_csv

log = logging.getLogger("mspd")


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _component(value: int, d: int, flag: str) -> int:
    if not 1 <= value <= d:
        raise cfgmod.ValidationError(f"{flag} {value} outside 1..{d}")
    return value - 1


def cmd_simulate(args, spec, opts) -> int:
    n = args.paths or opts.n_paths
    seed = opts.seed if args.seed is None else args.seed
    with _output(args.out) as fh:
        write_paths_csv((simulate(spec, path_rng(seed, j)) for j in range(n)), fh)
    return 0


def cmd_resolvent(args, spec, opts) -> int:
    h = mm.choose_step([spec.horizon], args.step or opts.step)
    eng = mm.engine(spec, spec.horizon, h)
    d = spec.d
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"psi_{i + 1}_{k + 1}" for i in range(d) for k in range(d)])
        for t, row in zip(eng.times, eng.psi.values):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row.ravel()])
    log.info("resolvent residual %.3g at step %.6g", eng.residual, h)
    return 0


def cmd_moments(args, spec, opts) -> int:
    rep = mm.moment_report(spec, spec.horizon, args.step or opts.step)
    with _output(args.out) as fh:
        rep.to_csv(fh)
    if args.plot_out:
        header, rows = mm.plot_data(spec, rep.step)
        with _output(args.plot_out) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[_fmt(v) for v in r] for r in rows])
    if rep.degraded:
        log.warning("resolvent residual %.3g above %.0e: report degraded", rep.residual, rep.threshold)
    return 0


def cmd_cov(args, spec, opts) -> int:
    d = spec.d
    i = _component(args.i, d, "--i")
    ell = _component(args.ell, d, "--ell")
    T = spec.horizon if args.T is None else args.T
    S = spec.horizon if args.S is None else args.S
    h = mm.choose_step([T, S], args.step or opts.step)
    cnt = DKernel.counting(d)
    rows = [("Cov[Z,Z]", mm.covariance(spec, spec.payoff, spec, spec.payoff, i, ell, T, S, h)),
            ("Cov[H,H]", mm.covariance(spec, cnt, spec, cnt, i, ell, T, S, h)),
            ("Cov[H,H] separable", mm.covariance_counting_separable(spec, i, ell, T, S, h))]
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "i", "ell", "T", "S", "value", "step"])
        for name, v in rows:
            w.writerow([name, i + 1, ell + 1, _fmt(T), _fmt(S), _fmt(v), _fmt(h)])
    return 0


def read_stress(path) -> StressScenario:
    pts = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"component", "time", "mark"}:
            raise cfgmod.ParseError(1, "stress file needs the header component,time,mark")
        for n, row in enumerate(reader, 2):
            try:
                pts.append((int(row["component"]) - 1, float(row["time"]), float(row["mark"])))
            except (TypeError, ValueError) as exc:
                raise cfgmod.ParseError(n, f"bad stress row: {exc}") from None
    return StressScenario(tuple(pts))


def cmd_stress(args, spec, opts) -> int:
    if not args.stress:
        raise cfgmod.ValidationError("--stress <csv> is required")
    stress = read_stress(args.stress)
    T = spec.horizon if args.T is None else args.T
    h = mm.choose_step([T], args.step or opts.step)
    base = mm.expect_mspd(spec, spec.payoff, T, h)
    shifted = mm.expect_shifted(spec, spec.payoff, T, stress, h)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "T", "expected", "shifted", "excess", "step"])
        for i in range(spec.d):
            w.writerow([i + 1, _fmt(T), _fmt(base[i]), _fmt(shifted[i]), _fmt(shifted[i] - base[i]), _fmt(h)])
    return 0


def cmd_validate(args, spec, opts) -> int:
    stress = read_stress(args.stress) if args.stress else None
    vc = ValidationConfig(n_paths=args.paths or opts.n_paths,
                          seed=opts.seed if args.seed is None else args.seed,
                          step=args.step or opts.step, stress=stress, n_workers=args.workers)
    rep = validate(spec, vc)
    if args.out:
        with _output(args.out) as fh:
            rep.to_csv(fh)
    sys.stdout.write(rep.summary())
    return 0 if rep.passed else 1


def cmd_chaos(args, spec, opts) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = run_invariants(args.trials, seed)
    lines = [f"{'invariant':<36} {'trials':>7} {'max deviation':>14}  result"]
    lines += [f"{r.name:<36} {r.trials:>7} {r.max_deviation:>14.3e}  {'pass' if r.passed else 'FAIL'}" for r in rows]
    sys.stdout.write("\n".join(lines) + "\n")
    if args.out:
        with _output(args.out) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["invariant", "trials", "max_deviation", "tolerance", "passed"])
            for r in rows:
                w.writerow([r.name, r.trials, _fmt(r.max_deviation), _fmt(r.tolerance), "pass" if r.passed else "FAIL"])
    return 0 if all(r.passed for r in rows) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "resolvent": cmd_resolvent,
    "moments": cmd_moments,
    "cov": cmd_cov,
    "stress": cmd_stress,
    "validate": cmd_validate,
    "chaos-check": cmd_chaos,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspd", description="Simulation and moments of marked self-exciting processes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="scenario TOML file")
        sp.add_argument("--out", help="output CSV (default: stdout)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--step", type=float, help="grid step (largest admissible step is used)")
        return sp

    common(sub.add_parser("simulate", help="simulate paths to CSV")).add_argument(
        "--paths", type=int, help="number of paths (default [run] n_paths)")
    common(sub.add_parser("resolvent", help="resolvent grid to CSV"))
    m = common(sub.add_parser("moments", help="moment report to CSV"))
    m.add_argument("--plot-out", help="plot data of E[lambda_t] and Cov curves")
    c = common(sub.add_parser("cov", help="covariance of two components"))
    c.add_argument("--i", type=int, default=1, help="first component (1-based)")
    c.add_argument("--ell", type=int, default=1, help="second component (1-based)")
    c.add_argument("--T", type=float, help="time of the first component (default horizon)")
    c.add_argument("--S", type=float, help="time of the second component (default horizon)")
    s = common(sub.add_parser("stress", help="shifted expectations for injected points"))
    s.add_argument("--stress", help="CSV with columns component,time,mark")
    s.add_argument("--T", type=float, help="evaluation time (default horizon)")
    v = common(sub.add_parser("validate", help="Monte Carlo cross-check battery"))
    v.add_argument("--paths", type=int, help="number of paths (default [run] n_paths)")
    v.add_argument("--stress", help="stress CSV for the shifted-expectation check")
    v.add_argument("--workers", type=int, default=1, help="worker processes")
    ch = common(sub.add_parser("chaos-check", help="randomized operator-invariant report"), config_required=False)
    ch.add_argument("--trials", type=int, default=1000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.config:
            spec, opts = cfgmod.load(args.config)
            log.info("spectral radius %.6g", opts.spectral_radius)
        else:
            spec, opts = None, cfgmod.RunOptions()
        return COMMANDS[args.command](args, spec, opts)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MSPDError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
