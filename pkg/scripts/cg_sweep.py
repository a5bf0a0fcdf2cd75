#!/usr/bin/env python3
"""Sweep the conjugate-gradient iteration budget and score the trade-off.

For each iteration count the script measures mIoU/pAcc over a batch of
corrupted synthetic scenes together with wall-clock latency, then folds the
four columns into the precision-efficiency score (min-max normalized,
cost metrics flipped). Memory is constant here so it normalizes to 1.
"""

import argparse
import dataclasses
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from pearl import run
from pearl.metrics import PesRow, accumulate, miou, new_confusion, pacc, pes
from pearl.synthetic import SceneSpec, build_scene


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, nargs="+", default=[1, 5, 15, 25, 35])
    parser.add_argument("--scenes", type=int, default=6)
    parser.add_argument("--noise", type=float, default=0.08)
    args = parser.parse_args()

    scenes = [build_scene(SceneSpec(seed=s, noise_fraction=args.noise))
              for s in range(args.scenes)]
    rows = []
    for iters in args.iters:
        cm = new_confusion(scenes[0].prototypes.get("prototypes").shape[0])
        elapsed = 0.0
        for scene in scenes:
            cfg = dataclasses.replace(scene.config, cg_iters=iters)
            started = time.perf_counter()
            result = run(scene.features, scene.prototypes, scene.image, cfg)
            elapsed += 1000.0 * (time.perf_counter() - started)
            cm = accumulate(cm, result.labels, scene.gt)
        rows.append(PesRow(miou(cm), pacc(cm), elapsed / len(scenes), 1.0))

    scores = pes(rows)
    print(f"{'iters':>5} {'mIoU':>7} {'pAcc':>7} {'ms/img':>8} {'PES':>6}")
    for iters, row, score in zip(args.iters, rows, scores):
        print(f"{iters:>5} {row.miou:>7.2f} {row.pacc:>7.2f} "
              f"{row.latency_ms:>8.1f} {score:>6.2f}")


if __name__ == "__main__":
    main()
