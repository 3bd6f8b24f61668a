#!/usr/bin/env python3
"""Baseline vs flow-importance-sampling comparison across seeds.

Runs both modes with identical architectures, data order, and seeds on
the ring dataset (and optionally an IDX image dataset), then reports
per-checkpoint medians and writes a combined CSV plus an SVG chart.
"""

import argparse
import os
import time

import numpy as np

from fisgan import data, plot, train


def build_dataset(args):
    if args.images:
        ds = data.load_idx(args.images, args.labels)
        if args.crop:
            ds = data.crop_border(ds, args.crop)
        if args.downsample:
            ds = data.downsample(ds, args.downsample)
        return ds
    spec = data.SyntheticSpec(kind="ring", count=8192, sigma=0.05)
    return data.make_synthetic(spec, np.random.default_rng(44))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--max-iters", type=int, default=1000)
    parser.add_argument("--eval-interval", type=int, default=100)
    parser.add_argument("--images", help="IDX image file (ring dataset if unset)")
    parser.add_argument("--labels")
    parser.add_argument("--crop", type=int, default=0)
    parser.add_argument("--downsample", type=int, default=0)
    parser.add_argument("--out-dir", default="runs/acceleration")
    args = parser.parse_args()

    dataset = build_dataset(args)
    os.makedirs(args.out_dir, exist_ok=True)
    all_rows = []
    series = []
    fids = {}
    for mode in ("baseline", "fis"):
        for seed in range(args.seeds):
            cfg = train.TrainConfig(mode=mode, seed=seed, max_iters=args.max_iters)
            started = time.time()
            summary = train.train(
                cfg, dataset,
                eval_options=train.EvalOptions(interval=args.eval_interval,
                                               samples=2048),
            )
            print(f"{mode} seed {seed}: {time.time() - started:.1f}s, "
                  f"final proxy_fid {summary.rows[-1].proxy_fid:.4f}")
            all_rows.extend(summary.rows)
            xs = [r.iteration for r in summary.rows]
            ys = [r.proxy_fid for r in summary.rows]
            series.append((f"{mode} seed={seed}", xs, ys))
            for r in summary.rows:
                fids.setdefault((mode, r.iteration), []).append(r.proxy_fid)

    csv_path = os.path.join(args.out_dir, "acceleration.csv")
    data.write_metrics_csv(all_rows, csv_path)
    chart_path = os.path.join(args.out_dir, "acceleration.svg")
    plot.render_chart(series, chart_path)
    print(f"rows -> {csv_path}; chart -> {chart_path}")

    print(f"{'iteration':>10} {'baseline':>12} {'fis':>12}")
    for it in sorted({i for (_, i) in fids}):
        base = np.median(fids[("baseline", it)])
        fis = np.median(fids[("fis", it)])
        marker = "fis ahead" if fis < base else ""
        print(f"{it:>10} {base:>12.4f} {fis:>12.4f}  {marker}")


if __name__ == "__main__":
    main()
