#!/usr/bin/env python3
"""Write the deterministic glyph image corpus as IDX files.

The corpus stands in for a real digit dataset at desk scale: point the
experiment config's dataset section at the emitted files, e.g.

    {"kind": "idx", "images": "data/glyphs_images.idx",
     "labels": "data/glyphs_labels.idx", "downsample": 3}
"""

import argparse
import os

import numpy as np

from fisgan import data


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--count", type=int, default=4096)
    parser.add_argument("--side", type=int, default=24)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out-dir", default="data")
    args = parser.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    images, labels = data.make_glyph_images(
        args.count, np.random.default_rng(args.seed), side=args.side
    )
    images_path = os.path.join(args.out_dir, "glyphs_images.idx")
    labels_path = os.path.join(args.out_dir, "glyphs_labels.idx")
    data.write_idx(images, images_path, labels=labels, labels_path=labels_path)
    print(f"{args.count} {args.side}x{args.side} glyphs -> "
          f"{images_path}, {labels_path}")


if __name__ == "__main__":
    main()
