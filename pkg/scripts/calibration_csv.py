"""Dump {A}/{B} probe rounds as CSV for re-plotting latency histograms.

    python3 scripts/calibration_csv.py --noise 0.05 --jitter 1.5 > calib.csv
"""
import argparse
import dataclasses
import random
import sys

from memfault import cache as cm
from memfault.scenario import ScenarioConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--trials", type=int, default=400)
    ap.add_argument("--noise", type=float)
    ap.add_argument("--jitter", type=float)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    cache = cfg.cache
    if args.noise is not None:
        cache = dataclasses.replace(cache, noise=args.noise)
    if args.jitter is not None:
        cache = dataclasses.replace(cache, jitter=args.jitter)
    target = cfg.victim.code_address
    window = (cfg.attacker.window_base, cfg.attacker.window_base + cfg.attacker.window_size)
    ev = cm.find_eviction_set(target, cache, window)
    cal = cm.calibrate_threshold(cm.CacheState(cache, random.Random(args.seed)), ev, target,
                                 args.trials)
    a, b = cal.means()
    print(f"# mean_a={a:.4f} mean_b={b:.4f} std_a={cal.std_a():.4f} "
          f"band=({cal.low:.4f},{cal.high:.4f})", file=sys.stderr)
    cal.write_csv(sys.stdout)


if __name__ == "__main__":
    main()
