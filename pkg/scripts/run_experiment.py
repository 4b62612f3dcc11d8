"""Run a full sweep: Q tables, hybrid sweep, random baseline, plot table.

    python3 scripts/run_experiment.py scripts/discrete_sweep.ini --jobs 8
    python3 scripts/run_experiment.py scripts/continuous_sweep.ini --episodes 1000

Extra flags are passed to every subcommand.
"""

import argparse
import sys
from pathlib import Path

from olfactory_pursuit.cli import main
from olfactory_pursuit.config import load_config


def run(config: str, extra: list[str], baseline: bool = True) -> int:
    cfg = load_config(config)
    out = next((extra[i + 1] for i, a in enumerate(extra) if a == "--out"), cfg.out)
    steps = [["calibrate"]] if cfg.environment == "continuous" else []
    steps += [["mdp"], ["run", "--records"]]
    if baseline:
        steps.append(["random-baseline"])
    for step in steps:
        print(f"== {step[0]}", flush=True)
        code = main([*step, "--config", config, *extra])
        if code:
            return code
    return main(["plotdata", str(Path(out) / "sweep.csv")])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("config")
    ap.add_argument("--no-baseline", action="store_true")
    args, extra = ap.parse_known_args()
    sys.exit(run(args.config, extra, not args.no_baseline))
