"""Random-task sampling vs all four losses every step, at an equal loss-evaluation budget.

    python3 scripts/strategy_comparison.py --seeds 0 1 2 3 4 --budget 2000
"""
import argparse
import json
from pathlib import Path

from ufo.experiments import compare_strategies, heldout_scenes
from ufo.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=Path(__file__).parent / "configs" / "toy.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--budget", type=int, default=2000, help="loss evaluations per run")
    args = ap.parse_args()

    cfg = TrainConfig.load(args.config)
    held = heldout_scenes(32, size=cfg.max_s)
    rows = compare_strategies(cfg, args.seeds, args.budget, held)
    for r in rows:
        print(json.dumps(r))
    wins = sum(r["random"] >= r["full"] for r in rows)
    print(f"random >= full in {wins}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
