#!/usr/bin/env python3
"""Five one-shot repetitions on the thin-structure task; Dice mean +/- std."""

import argparse
import dataclasses
import json

from pmss.config import load_config
from pmss.experiments import one_shot_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/one_shot_thin.json")
    ap.add_argument("--backbone", default=None, help="pretrained backbone checkpoint")
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.backbone:
        cfg = dataclasses.replace(
            cfg,
            backbone=dataclasses.replace(cfg.backbone, checkpoint=args.backbone, pretrain=None),
        )
    res = one_shot_protocol(cfg, reps=args.reps)
    print(json.dumps({"dices": res.dices, "mean": res.mean, "std": res.std}, indent=2))
    print(f"Dice: {res.formatted}")


if __name__ == "__main__":
    main()
