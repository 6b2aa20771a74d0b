"""Regenerate the committed reference artifacts of the pinned scenario.

Writes ``configs/reference_thresholds.json`` (per-exit loss thresholds from a
central-training oracle) and ``tests/data/reference_metrics.csv`` (the
single-threaded metrics of the pinned run, wall-clock column zeroed). Run it
only when the scenario or the numerics change on purpose.
"""

import argparse
import json
from pathlib import Path

from eefl.harness import build_corpus, derive_thresholds, initial_params, load_config, run_experiment, write_metrics_csv

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=ROOT / "configs" / "reference.yaml")
    parser.add_argument("--thresholds", default=ROOT / "configs" / "reference_thresholds.json")
    parser.add_argument("--csv", default=ROOT / "tests" / "data" / "reference_metrics.csv")
    args = parser.parse_args()

    cfg = load_config(args.config).replace(record_wallclock=False)
    corpus = build_corpus(cfg)
    start = initial_params(cfg)
    derived = derive_thresholds(cfg, start=start, corpus=corpus)
    derived["config"] = str(Path(args.config).name)
    Path(args.thresholds).write_text(json.dumps(derived, indent=2) + "\n")
    print("thresholds:", [round(t, 4) for t in derived["thresholds"]])

    result = run_experiment(cfg, start_params=start, corpus=corpus)
    write_metrics_csv(result.metrics, args.csv)
    print("final loss:", [round(v, 4) for v in result.final().exit_loss])


if __name__ == "__main__":
    main()
