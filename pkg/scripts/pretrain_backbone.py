#!/usr/bin/env python3
"""Pretrain a toy backbone on the source synthetic task and save it frozen.

The resulting checkpoint can be referenced from run configs via
backbone.checkpoint, so downstream experiments skip the pretraining cost.
"""

import argparse
import time

from pmss import data
from pmss.backbone import build_toy_cnn, pretrain_source


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="checkpoint path (e.g. runs/backbone.ckpt)")
    ap.add_argument("--channels", type=int, nargs="+", default=[16, 32, 64, 128])
    ap.add_argument("--depths", type=int, nargs="+", default=[2, 2, 2, 2])
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    t0 = time.perf_counter()
    source_train, _ = data.generate(data.source_spec())
    bb = build_toy_cnn(tuple(args.channels), tuple(args.depths), args.seed)
    pretrain_source(bb, source_train, steps=args.steps, lr=args.lr, batch=args.batch, seed=args.seed)
    bb.save(args.out)
    print(f"saved {args.out} ({bb.provenance}) in {time.perf_counter() - t0:.0f}s")
    print(f"backbone hash: {bb.state_hash()}")


if __name__ == "__main__":
    main()
