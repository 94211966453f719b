"""Spray-count sweep of the allocator predictor (success rate vs pages sprayed).

    python3 scripts/alloc_sweep.py --config configs/calibrated.cfg --trials 200 > sweep.csv
"""
import argparse
import sys

from memfault import alloc as al
from memfault.cli import SWEEP_COUNTS
from memfault.scenario import ScenarioConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    tmpl = al.AllocatorState(cfg.frames, cfg.alloc_base, cfg.interference,
                             pagemap_readable=cfg.pagemap_readable)
    rows = al.run_prediction_experiment(tmpl, SWEEP_COUNTS, args.trials, cfg.victim, args.seed)
    al.write_prediction_csv(rows, sys.stdout)


if __name__ == "__main__":
    main()
