"""Pre-train on the toy corpus, then report zero-shot retrieval and downstream fine-tuning results.

    python3 scripts/toy_pipeline.py --config scripts/configs/toy.json --out results/toy.json
"""
import argparse
import json
import logging
from pathlib import Path

from ufo.experiments import PipelineConfig, run_pipeline
from ufo.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=Path(__file__).parent / "configs" / "toy.json")
    ap.add_argument("--seed", type=int, help="override the pre-training seed")
    ap.add_argument("--out", help="write the result dict as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_pipeline(PipelineConfig(pretrain=cfg))
    print(json.dumps(res, indent=2))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
