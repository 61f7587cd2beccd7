"""``fairgen`` command line: run pipeline stages, whole runs or a preset matrix."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from .errors import (CatalogError, ConfigError, DependencyError, DivisibilityError, FairgenError, NumericalError,
                     SchemaError)
from .pipeline import (PRESETS, STAGES, ExperimentConfig, RunDir, expand_preset, load_config, run_matrix,
                       run_stage, save_config)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairgen", description=__doc__)
    p.add_argument("command", choices=STAGES + ("all", "matrix", "init-config", "presets"))
    p.add_argument("--config", help="JSON experiment config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, action="append", help="seed to run; repeat for several")
    p.add_argument("--preset", action="append", help="named preset; repeat for several with `matrix`")
    p.add_argument("--runs", help="run-directory root (default: $FAIRGEN_RUNS or ./runs)")
    p.add_argument("--format", default="markdown", choices=("markdown", "csv"), help="matrix report format")
    p.add_argument("--plots", action="store_true", help="write PNG plots next to the matrix report")
    p.add_argument("--out", help="output path for init-config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _configs(args) -> List[ExperimentConfig]:
    base = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        base = replace(base, seeds=tuple(args.seed))
    presets = args.preset or [None]
    return [c for name in presets for c in expand_preset(name, base)]


def _run(args) -> int:
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name, "|", "; ".join(c.label for c in expand_preset(name)))
        return EXIT_OK
    if args.command == "init-config":
        cfg = _configs(args)[0]
        if args.out:
            print(save_config(cfg, args.out))
        else:
            import json
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    configs = _configs(args)
    if args.command == "matrix":
        seeds = args.seed if args.seed is not None else list(configs[0].seeds)
        res = run_matrix(configs, seeds, args.runs, args.format, args.plots)
        sys.stdout.write(res.report)
        print(f"matrix written to {res.path}")
        if res.failures:
            print(f"{len(res.failures)} cell(s) failed; see {res.path / 'failures.json'}", file=sys.stderr)
            return EXIT_FAILURE
        return EXIT_OK
    stages = STAGES if args.command == "all" else (args.command,)
    for cfg in configs:
        for seed in cfg.seeds:
            run = RunDir(cfg.for_seed(seed), args.runs)
            for stage in stages:
                path = run_stage(stage, run.cfg, run=run)
            print(f"{cfg.label} seed {seed}: {path}")
            if stages[-1] == "report":
                for fmt_file in sorted(path.glob("report.md")):
                    sys.stdout.write(fmt_file.read_text())
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, SchemaError, DivisibilityError, CatalogError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FairgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
