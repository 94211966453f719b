"""End-to-end attack trials under each shipped configuration, with and without the countermeasure."""
import argparse
import dataclasses
import json

from memfault.orchestrator import run_experiment
from memfault.scenario import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for path in ("configs/zero_noise.cfg", "configs/calibrated.cfg"):
        for cm in (False, True):
            cfg = dataclasses.replace(load_config(path), seed=args.seed, countermeasure=cm)
            rep = run_experiment(cfg, args.trials, args.workers)
            s = rep.summary()
            print(json.dumps({"config": path, "countermeasure": cm,
                              "success_rate": s["success_rate"],
                              "mean_detection_latency": s["mean_detection_latency"],
                              "histogram": s["histogram"]}))


if __name__ == "__main__":
    main()
