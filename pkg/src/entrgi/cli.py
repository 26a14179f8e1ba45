"""Command-line entry point: ``entrgi fit | run | check | sweep``.

Configuration comes from an optional ``key = value`` manifest file; every key
can be overridden with ``--key value``. Environment variables are ignored.

Exit codes: 0 success, 1 invalid configuration, 2 check failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .diffusion import fit_context_table, read_corpus
from .errors import InvalidInputError, InvalidParameterError, NumericFailureError
from .harness import RunManifest, compare_arms, generate_corpus, parse_kv, run_experiment, sweep

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("entrgi")


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_manifest_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="key = value manifest file")
    g = p.add_argument_group("manifest overrides")
    for key in RunManifest.keys():
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"kv_{key}", metavar="VALUE")


def load_manifest(args) -> RunManifest:
    """Manifest file (if any) with command-line overrides applied on top."""
    raw = parse_kv(args.manifest.read_text()) if args.manifest else {}
    for key in RunManifest.keys():
        val = getattr(args, f"kv_{key}", None)
        if val is not None:
            raw[key] = val
    return RunManifest.from_mapping(raw)


def _print_summary(res, stream) -> None:
    print(f"digest {res.digest}  runtime {res.runtime_s:.1f}s  out {res.out_dir}", file=stream)
    print(f"{'arm':<14}{'cells':>6}{'excl':>6}{'top1':>12}{'se':>10}{'avg':>12}{'se':>10}", file=stream)
    for s in res.summaries.values():
        print(f"{s.arm:<14}{s.cells:>6}{s.excluded:>6}{s.top1_mean:>12.5f}{s.top1_se:>10.5f}"
              f"{s.avg_mean:>12.5f}{s.avg_se:>10.5f}", file=stream)
    if "bon" in res.cells:
        for arm in res.cells:
            if arm == "bon":
                continue
            c = compare_arms(res, arm, "bon")
            print(f"{arm} vs bon: diff {c.mean_difference:+.5f}  W/L/T {c.wins}/{c.losses}/{c.ties}  "
                  f"p {c.p_value:.3g}", file=stream)


def cmd_fit(args) -> int:
    man = load_manifest(args)
    corpus = read_corpus(args.corpus) if args.corpus else generate_corpus(man.task)
    den = fit_context_table(corpus, man.task.alpha, K=man.task.K)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    den.save(out)
    print(f"fitted on {len(corpus)} sequences -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    man = load_manifest(args)
    res = run_experiment(man)
    _print_summary(res, sys.stdout)
    return EXIT_OK


def cmd_check(args) -> int:
    from . import checks

    results = checks.run_all(quick=not args.full)
    if args.run_dir:
        results += checks.check_directional_trend(args.run_dir)
        results.append(checks.check_timestep_errors(args.run_dir))
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_sweep(args) -> int:
    man = load_manifest(args)
    rows = sweep(man, m_values=[int(m) for m in _csv(args.m_values)], taus=[float(t) for t in _csv(args.taus)],
                 backends=_csv(args.backends), schedules=_csv(args.schedules) or None)
    for r in rows:
        print(f"{r['reward']:<10} tau={r['tau']:<5} M={r['m_steps']:<3} {r['arm']:<12} "
              f"top1 {r['top1_mean']:.5f}  avg {r['avg_mean']:.5f}")
    print(f"sweep table -> {Path(man.out_dir) / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entrgi", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("fit", help="fit a context-table denoiser snapshot")
    p.add_argument("--corpus", type=Path, help="one sequence per line; default: generate from the task")
    p.add_argument("--out", required=True, help="snapshot path")
    _add_manifest_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("run", help="run every arm of a manifest and write CSVs")
    _add_manifest_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="gradient, identity and property suites")
    p.add_argument("--full", action="store_true", help="full sample counts")
    p.add_argument("--run-dir", type=Path, help="also check trend and per-timestep errors of a finished run")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="grid over M, tau, reward backend and schedule")
    p.add_argument("--m-values", default="1,3")
    p.add_argument("--taus", default="0.1,0.7")
    p.add_argument("--backends", default="prototype")
    p.add_argument("--schedules", default="", help="arm list; default: the manifest's arms")
    _add_manifest_args(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidParameterError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailureError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
