#!/usr/bin/env python3
"""Prompt-matched vs head-tuning on the downstream task, mean over seeds.

Uses configs/transfer_desk.json by default; pass --backbone to reuse a saved
pretrained checkpoint instead of pretraining inline (much faster when
iterating).
"""

import argparse
import dataclasses
import json
import time

from pmss.config import load_config
from pmss.experiments import transfer_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/transfer_desk.json")
    ap.add_argument("--backbone", default=None, help="pretrained backbone checkpoint")
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.backbone:
        cfg = dataclasses.replace(
            cfg,
            backbone=dataclasses.replace(cfg.backbone, checkpoint=args.backbone, pretrain=None),
        )
    t0 = time.perf_counter()
    res = transfer_experiment(cfg, n_seeds=args.seeds)
    print(json.dumps({
        "prompt_mious": res.prompt_mious,
        "head_mious": res.head_mious,
        "prompt_mean": res.prompt_mean,
        "head_mean": res.head_mean,
        "gap_points": 100 * res.gap,
        "seconds": round(time.perf_counter() - t0, 1),
    }, indent=2))


if __name__ == "__main__":
    main()
