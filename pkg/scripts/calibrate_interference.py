"""Tune interference.probability so the allocator plateau lands on a target rate.

Each of the victim's first ``key_index`` allocations is preceded by an
interference burst with probability p, and any burst displaces the whole
sprayed pool, so the plateau hit rate is (1 - p) ** key_index.  The script
bisects p against the simulated rate (not the closed form) and prints both.

    python3 scripts/calibrate_interference.py --target 0.575
"""
import argparse
import dataclasses

from memfault import alloc as al
from memfault.scenario import ScenarioConfig, load_config


def plateau(cfg, p, trials, seed):
    inter = dataclasses.replace(cfg.interference, probability=p)
    tmpl = al.AllocatorState(cfg.frames, cfg.alloc_base, inter)
    rows = al.run_prediction_experiment(tmpl, range(384, 513, 32), trials, cfg.victim, seed)
    return sum(r.hits for r in rows) / sum(r.trials for r in rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/calibrated.cfg")
    ap.add_argument("--target", type=float, default=0.575)
    ap.add_argument("--trials", type=int, default=400)
    ap.add_argument("--steps", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    lo, hi = 0.0, 0.5
    for _ in range(args.steps):
        mid = (lo + hi) / 2
        rate = plateau(cfg, mid, args.trials, args.seed)
        print(f"p={mid:.5f} plateau={rate:.4f}")
        lo, hi = (mid, hi) if rate > args.target else (lo, mid)
    p = (lo + hi) / 2
    k = cfg.victim.key_index
    print(f"\ninterference.probability = {p:.4f}")
    print(f"closed form (1-p)^{k} = {(1 - p) ** k:.4f}; "
          f"simulated = {plateau(cfg, p, args.trials, args.seed + 1):.4f}")


if __name__ == "__main__":
    main()
