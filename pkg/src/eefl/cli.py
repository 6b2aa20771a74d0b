"""Command-line entry point: ``eefl run|validate|report|pretrain``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exceptions import EEFLError
from .harness import build_corpus, dump_config, load_config, pretrain_central, report, run_experiment


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = run_experiment(cfg, out_dir=out, parallel=args.parallel)
    print(report(out / "metrics.csv"))
    if result.skipped_updates:
        print(f"discarded client updates: {result.skipped_updates}")
    if result.aborted:
        print("server diverged; metrics are partial", file=sys.stderr)
        return 3
    print(f"wrote {out / 'metrics.csv'} and {out / 'final.eefl'}")
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    profile = cfg.resolved_profile()
    print(f"config ok: {cfg.model.num_exits} exits, {cfg.population().clients_per_round} of "
          f"{cfg.num_clients} clients per round, profile {profile.name} {list(profile.probs)}, "
          f"server {cfg.server.name} (lr {cfg.server.lr}), {cfg.rounds} rounds")
    return 0


def cmd_report(args) -> int:
    thresholds = [float(x) for x in args.thresholds.split(",")] if args.thresholds else None
    print(report(args.csv, compare=args.compare, plots_dir=args.plots, thresholds=thresholds))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    p = cfg.pretrain
    source = build_corpus(cfg, domain_shift=False)
    pretrain_central(cfg.model_config(), source, p.epochs, p.lr, p.batch_size, p.exit_mask,
                     seed=cfg.seed, out=args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eefl", description="Federated early-exit training simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--parallel", type=int, default=1, help="client worker threads per round")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="summarize a metrics CSV")
    rep.add_argument("csv")
    rep.add_argument("--compare")
    rep.add_argument("--plots")
    rep.add_argument("--thresholds", help="comma-separated per-exit loss thresholds")
    rep.set_defaults(func=cmd_report)

    pre = sub.add_parser("pretrain", help="central pre-training on the source-domain corpus")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--seed", type=int)
    pre.set_defaults(func=cmd_pretrain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EEFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
