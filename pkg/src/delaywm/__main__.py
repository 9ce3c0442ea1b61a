"""Command-line driver for delay sweeps.

    python -m delaywm --env fig2 --delays 0,1,2 --strategies extended_dp,random
    python -m delaywm --config sweep.json --out results.csv
    python -m delaywm --acceptance
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .bench import ALL_STRATEGIES, ENVIRONMENTS, ExperimentConfig, run_experiment


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _param(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delaywm", description="Run delay sweeps over tabular benchmark processes.")
    p.add_argument("--config", help="JSON experiment config; other flags override its fields")
    p.add_argument("--env", choices=sorted(ENVIRONMENTS))
    p.add_argument("--env-param", action="append", type=_param, default=[], metavar="KEY=VALUE",
                   help="environment parameter (repeatable), e.g. --env-param rho=0.5")
    p.add_argument("--delays", type=_ints, help="comma-separated delays, e.g. 0,1,2")
    p.add_argument("--strategies", type=_names, help=f"comma-separated from {', '.join(ALL_STRATEGIES)}")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int, help="rewards counted per evaluation episode")
    p.add_argument("--updates", type=int, help="actor-critic updates for learned strategies")
    p.add_argument("--evaluation", choices=("auto", "exact", "monte_carlo"))
    p.add_argument("--timing", action="store_true", help="record per-row wall-clock runtime")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--acceptance", action="store_true", help="run the acceptance checks and exit")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_dict() if args.config else {}
    for name in ("env", "delays", "strategies", "seeds", "episodes", "horizon", "evaluation", "out", "format"):
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if args.env_param:
        base["env_params"] = {**base.get("env_params", {}), **dict(args.env_param)}
    if args.timing:
        base["timing"] = True
    cfg = ExperimentConfig.from_dict(base)
    if args.updates is not None:
        cfg = replace(cfg, train=replace(cfg.train, updates=args.updates))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.acceptance:
        from .acceptance import run_all

        return 0 if run_all() else 1
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError, OSError) as exc:
        parser.error(str(exc))
    table = run_experiment(cfg)
    text = table.to_csv() if cfg.format == "csv" else table.to_json()
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for row in table.rows:
        if row.error:
            print(f"error: {row.strategy} d={row.d} seed={row.seed}: {row.error}", file=sys.stderr)
    return 0 if table.ok else 1


if __name__ == "__main__":
    sys.exit(main())
