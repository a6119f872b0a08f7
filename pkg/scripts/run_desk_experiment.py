#!/usr/bin/env python3
"""Full desk-scale experiment: synthesize blobs, prepare, train, eval, explain.

Finishes in well under five minutes on a laptop CPU and prints the test
accuracy plus the Grad-CAM quadrant-localization rate over correct test
predictions (the desk-scale stand-in for expert attention assessment).
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import yaml

from lesionlab.augment import AugmentConfig
from lesionlab.cli import main as cli_main
from lesionlab.dataset import NormalizedImage, load_split_csv
from lesionlab.loader import BatchLoader
from lesionlab.model import load_checkpoint, numpy_batch_to_tensor
from lesionlab.synthetic import class_quadrant, generate_blob_dataset, quadrant_of_position
from lesionlab.xai import grad_cam


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="desk_experiment")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    work = Path(args.workdir)
    csv_path, image_dir = generate_blob_dataset(work / "data", seed=args.seed)
    cfg_path = work / "override.yaml"
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(
            {"data": {"metadata_csv": str(csv_path), "image_dir": str(image_dir)}}, fh
        )
    out = work / "run"
    base = ["--preset", "desk", "--config", str(cfg_path),
            "--seed", str(args.seed), "--out", str(out)]

    assert cli_main(base + ["prepare"]) == 0
    t0 = time.perf_counter()
    assert cli_main(base + ["train"]) == 0
    train_s = time.perf_counter() - t0
    best = out / "checkpoints" / "best"
    assert cli_main(base + ["eval", "--checkpoint", str(best)]) == 0

    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    handle = load_checkpoint(best)
    manifest = load_split_csv(out / "split.csv", image_dir)
    loaders = BatchLoader(manifest, (64, 64), 32, AugmentConfig.disabled(), args.seed)
    images, labels = loaders.eval_split("test")
    preds = handle.predict_proba(numpy_batch_to_tensor(images)).numpy().argmax(axis=1)
    correct = np.where(preds == labels)[0]
    hits = 0
    for i in correct:
        hm = grad_cam(handle, NormalizedImage(images[i], "imagenet"), int(preds[i]))
        y, x = np.unravel_index(int(np.argmax(hm.grid)), hm.grid.shape)
        hits += quadrant_of_position(y, x, 64) == class_quadrant(int(labels[i]))

    # a few rendered explanations for eyeballing
    sample_ids = [loaders.split_records("test")[int(i)].image_id for i in correct[:3]]
    assert cli_main(base + ["explain", "--checkpoint", str(best),
                            "--image-id", *sample_ids, "--kind", "both"]) == 0

    print("\n=== desk experiment summary ===")
    print(f"training wall clock:      {train_s:.1f} s")
    print(f"test accuracy:            {metrics['overall_accuracy']:.4f}")
    print(f"macro F1:                 {metrics['macro']['f1']:.4f}")
    print(f"micro AUC:                {metrics['micro_auc']:.4f}")
    print(f"Grad-CAM quadrant rate:   {hits / len(correct):.4f} over {len(correct)} correct")
    print(f"artifacts under:          {out}")


if __name__ == "__main__":
    main()
