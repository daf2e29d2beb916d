"""``nd`` command line: search, retrain, diagnose, sweep, plot, compare.

Exit status is 0 on success, 1 for configuration/validation errors and 2 for
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, load_config

log = logging.getLogger("noisydarts")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nd", description="Noise-regularized differentiable architecture search")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. noise.sigma=0.8 (repeatable)")
        sp.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name, help_ in (("search", "run the search for each seed"),
                        ("diagnose", "search with Hessian tracking, then landscape and noise verifiers"),
                        ("sweep", "Cartesian product over the config's sweep axes")):
        common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("retrain", help="train discrete networks for searched genotypes")
    common(rp)
    rp.add_argument("--genotype", help="genotype JSON (default: each seed's genotype.json under --out)")
    pp = sub.add_parser("plot", help="render SVG figures from logged CSVs")
    common(pp, config_required=False)
    cp = sub.add_parser("compare", help="paired comparison of two run manifests")
    cp.add_argument("baseline")
    cp.add_argument("treatment")
    cp.add_argument("--out", help="write the report JSON here instead of stdout")
    cp.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> tuple[dict, str, list[int]]:
    cfg = load_config(args.config, args.set)
    out = args.out or cfg["output_dir"]
    seeds = args.seed or cfg["seeds"]
    return cfg, out, seeds


def _cmd_search(args, kind="search") -> int:
    from .experiment import run_sweep, workers_from_env
    cfg, out, seeds = _resolve(args)
    if kind == "search":
        cfg = dict(cfg, sweep={})
    manifest = run_sweep(cfg, out, seeds, workers_from_env(), kind="diagnose" if kind == "diagnose" else "search")
    s = manifest["summary"]
    print(f"{len(manifest['runs'])} run(s) -> {out}; skip count {s['skip_count_text']}; "
          f"retrain accuracy {s['retrain_accuracy_text']}")
    return EXIT_OK


def _cmd_retrain(args) -> int:
    from .experiment import run_retrain, write_manifest
    from .searchspace import Genotype
    cfg, out, seeds = _resolve(args)
    entries = []
    for s in seeds:
        run_dir = os.path.join(out, f"seed_{s}")
        path = args.genotype or (cfg.get("retrain") or {}).get("genotype") or os.path.join(run_dir, "genotype.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"genotype file not found: {path}")
        with open(path) as fh:
            geno = Genotype.from_json(fh.read())
        entries.append(run_retrain(cfg, s, geno, run_dir))
    manifest = write_manifest(cfg, out, entries)
    print(f"retrain accuracy {manifest['summary']['retrain_accuracy_text']}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plotting import plot_run_dir
    if args.config:
        cfg = load_config(args.config, args.set)
        root = args.out or cfg["output_dir"]
    elif args.out:
        root = args.out
    else:
        raise ConfigError(["plot needs --config or --out"])
    for path in plot_run_dir(root):
        print(path)
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .experiment import compare_manifests, load_manifest
    report = compare_manifests(load_manifest(args.baseline), load_manifest(args.treatment))
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command in ("search", "sweep", "diagnose"):
            return _cmd_search(args, args.command)
        if args.command == "retrain":
            return _cmd_retrain(args)
        if args.command == "plot":
            return _cmd_plot(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"nd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure of any kind
        if args.verbose:
            log.exception("run failed")
        print(f"nd: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
