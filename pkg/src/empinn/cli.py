"""Command-line entry point: ``empinn {train,evaluate,ablate,probe,gen-ref}``.

Exit codes: 0 success, 1 configuration error, 2 every seed diverged,
3 ``--check`` threshold missed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import apply_overrides, load_config, preset
from .diffcore import ConfigurationError
from .harness import evaluate_run, generate_reference, run_ablation, run_experiment, run_probe

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3


def _seed_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or comma list, got {text!r}") from None


def _experiment_args(p, with_config=True):
    if with_config:
        p.add_argument("config", nargs="?", help="JSON or YAML config file")
    p.add_argument("--preset", help="start from a named preset instead of a file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable (e.g. train.adam.steps=100)")
    p.add_argument("--seed", type=_seed_list, help="seed or comma-separated seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, wall-clock-free metrics")


def build_parser():
    parser = argparse.ArgumentParser(prog="empinn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a config over its seeds")
    _experiment_args(p)
    p.add_argument("--check", action="store_true", help="exit 3 if best rel_l2 exceeds check_rel_l2")

    p = sub.add_parser("evaluate", help="re-evaluate a finished run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("ablate", help="run a toggle ablation")
    _experiment_args(p)
    p.add_argument("--toggles", nargs="*", default=[],
                   help="subset of fourier_feature adf periodic_embedding time_embedding")

    p = sub.add_parser("probe", help="initialization-pathology probe")
    p.add_argument("--depths", type=int, nargs="+", default=[2, 4, 8])
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=_seed_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--zero-second-factor", action="store_true", help="diagnostic: zero each EM W2")
    p.add_argument("--out", help="write the report as JSON here")

    p = sub.add_parser("gen-ref", help="write a reference grid file")
    p.add_argument("problem", choices=["allen_cahn", "helmholtz", "advection"])
    p.add_argument("grid_spec", help="e.g. 201x513, or 201x513@2048 for the Allen-Cahn mode count")
    p.add_argument("--out", help="output path (default <problem>.grid)")
    return parser


def _resolve_config(args):
    if args.preset and args.config:
        raise ConfigurationError("give either a config file or --preset, not both")
    if args.preset:
        config = preset(args.preset)
    elif args.config:
        config = load_config(args.config)
    else:
        raise ConfigurationError("a config file or --preset is required")
    config = apply_overrides(config, args.override)
    if args.seed:
        config.seeds = args.seed
    return config


def _summarize(run):
    for s in run.seeds:
        print(f"seed {s.seed}: status={s.status} rel_l2={s.rel_l2}")
    print(f"mean rel_l2={run.mean_rel_l2} best rel_l2={run.best_rel_l2} status={run.status}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args):
    if args.command == "train":
        config = _resolve_config(args)
        run = run_experiment(config, args.out, args.deterministic)
        _summarize(run)
        if run.status == "diverged":
            return EXIT_DIVERGED
        if args.check and config.check_rel_l2 is not None and run.best_rel_l2 > config.check_rel_l2:
            print(f"check failed: best rel_l2 {run.best_rel_l2} > {config.check_rel_l2}")
            return EXIT_CHECK
        return EXIT_OK

    if args.command == "evaluate":
        for seed, value in evaluate_run(args.run_dir).items():
            print(f"seed {seed}: rel_l2={value}")
        return EXIT_OK

    if args.command == "ablate":
        rows = run_ablation(_resolve_config(args), args.toggles, args.out, args.deterministic)
        for settings, run in rows:
            pattern = " ".join(f"{k}={'✓' if v else '✗'}" for k, v in settings.items()) or "base"
            print(f"{pattern}: mean rel_l2={run.mean_rel_l2} status={run.status}")
        return EXIT_DIVERGED if all(run.status == "diverged" for _, run in rows) else EXIT_OK

    if args.command == "probe":
        report = run_probe(args.depths, args.width, args.seed, args.zero_second_factor)
        for r in report["rows"]:
            print(f"depth {r['depth']} seed {r['seed']}: mlp={r['mlp_d1_spread']:.3e} em={r['em_d1_spread']:.3e}")
        print(f"status: {report['status']}")
        if args.out:
            with open(args.out, "w") as fh:
                json.dump(report, fh, indent=2)
        return EXIT_OK

    if args.command == "gen-ref":
        path = args.out or f"{args.problem}.grid"
        generate_reference(args.problem, args.grid_spec, path)
        print(f"wrote {path}")
        return EXIT_OK
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
