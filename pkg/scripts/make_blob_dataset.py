#!/usr/bin/env python3
"""Generate the synthetic 7-class blob dataset used by the desk-scale experiments."""

import argparse

from lesionlab.synthetic import DESK_COUNTS, generate_blob_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", help="directory for metadata.csv and images/")
    parser.add_argument("--size", type=int, default=64, help="image side in pixels")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    csv_path, image_dir = generate_blob_dataset(args.out_dir, size=args.size, seed=args.seed)
    total = sum(DESK_COUNTS.values())
    print(f"wrote {total} images to {image_dir}")
    print(f"metadata: {csv_path}")


if __name__ == "__main__":
    main()
