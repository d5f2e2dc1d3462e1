"""``mflchaos`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from . import experiments

log = logging.getLogger("mflchaos")

COMMANDS = ("validate", "gibbs", "simulate", "poc-sweep", "rate-fit", "entropy-chain")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflchaos",
                                description="Mean-field Langevin particle experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides seed)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--reports", nargs="*", default=[], help="rate-fit: CSV tables to fit")
    p.add_argument("--model", choices=("powerlaw", "exp_plus_floor"), default="powerlaw")
    p.add_argument("--x-col")
    p.add_argument("--y-col")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output_dir"] = args.out
        if changes:
            cfg = cfg.replace(**changes)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = cfg.output_dir
    cmd = args.command
    log.info("running %s into %s (config %s)", cmd, out, cfg.hash())
    if cmd == "validate":
        res = experiments.cmd_validate(cfg, out)
    elif cmd == "gibbs":
        res = experiments.cmd_gibbs(cfg, out)
    elif cmd == "simulate":
        res = experiments.cmd_simulate(cfg, out)
    elif cmd == "poc-sweep":
        res = experiments.cmd_poc_sweep(cfg, out, threads=args.threads)
    elif cmd == "rate-fit":
        res = experiments.cmd_rate_fit(cfg, out, args.reports, args.model, args.x_col, args.y_col)
    else:
        res = experiments.cmd_entropy_chain(cfg, out)
    print(json.dumps({"command": cmd, "passed": bool(res.passed), "out": out,
                      "outputs": res.outputs}, indent=2))
    if not res.passed and cmd == "validate":
        for r in res.summary.get("failed", []):
            print(f"FAILED {r['target']} {r['check']} {r['probe']} rel_error={r['rel_error']:.3g}",
                  file=sys.stderr)
    return 0 if res.passed else 1


if __name__ == "__main__":
    sys.exit(main())
