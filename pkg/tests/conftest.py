import pytest
import torch

from lesionlab.classes import CLASS_CODES, LesionClass

# full-dataset per-class counts used throughout the oracle tests
HAM_COUNTS = {
    "akiec": 327,
    "bcc": 514,
    "bkl": 1099,
    "df": 115,
    "mel": 1113,
    "nv": 6705,
    "vasc": 142,
}

# reference per-class split table for the full dataset (train, val, test)
HAM_SPLIT_TABLE = {
    "akiec": (229, 49, 49),
    "bcc": (360, 77, 77),
    "bkl": (769, 165, 165),
    "df": (80, 17, 18),
    "mel": (779, 167, 167),
    "nv": (4694, 1006, 1005),
    "vasc": (99, 22, 21),
}

# reference per-class metric table: (accuracy, precision, recall, f1, auc)
PERF_TABLE = {
    "akiec": (0.7755, 0.7755, 0.7755, 0.7755, 0.9861),
    "bcc": (0.8571, 0.8919, 0.8571, 0.8742, 0.9946),
    "bkl": (0.8182, 0.8232, 0.8182, 0.8207, 0.9830),
    "df": (0.8235, 1.0000, 0.8235, 0.9032, 0.9764),
    "mel": (0.8024, 0.7701, 0.8024, 0.7859, 0.9691),
    "nv": (0.9583, 0.9583, 0.9583, 0.9583, 0.9847),
    "vasc": (0.8636, 0.8636, 0.8636, 0.8636, 0.9991),
}


@pytest.fixture(scope="session", autouse=True)
def _quiet_torch():
    torch.set_num_threads(1)


def write_metadata_csv(path, counts: dict[str, int], extra_cols: bool = False):
    """Synthesize a metadata CSV with the requested per-class counts."""
    lines = ["image_id,dx,localization" if extra_cols else "image_id,dx"]
    i = 0
    for code, n in counts.items():
        for _ in range(n):
            row = f"img_{i:06d},{code}"
            if extra_cols:
                row += ",back"
            lines.append(row)
            i += 1
    path.write_text("\n".join(lines) + "\n")
    return path


def counts_by_class(counts: dict[str, int]) -> dict[LesionClass, int]:
    return {LesionClass(code): counts.get(code, 0) for code in CLASS_CODES}


@pytest.fixture(scope="session")
def tiny_blob_dataset(tmp_path_factory):
    """Small blob dataset (130 images, 32px) for fast loader/trainer/CLI tests."""
    from lesionlab.synthetic import generate_blob_dataset

    root = tmp_path_factory.mktemp("tinyblobs")
    counts = {"akiec": 12, "bcc": 12, "bkl": 12, "df": 12, "mel": 12, "nv": 45, "vasc": 25}
    csv_path, image_dir = generate_blob_dataset(root, counts=counts, size=32, seed=7)
    return {"root": root, "csv": csv_path, "images": image_dir, "counts": counts, "size": 32}


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full desk-preset pipeline run: dataset, prepare, train, eval, explain.

    Session-scoped because training takes ~25 s; the acceptance tests and the
    CLI determinism test both read from it.
    """
    import json
    import time

    import yaml

    from lesionlab.cli import main
    from lesionlab.synthetic import generate_blob_dataset

    root = tmp_path_factory.mktemp("deskrun")
    csv_path, image_dir = generate_blob_dataset(root / "data", seed=42)
    cfg_path = root / "override.yaml"
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(
            {"data": {"metadata_csv": str(csv_path), "image_dir": str(image_dir)}}, fh
        )
    out = root / "run"
    base = ["--preset", "desk", "--config", str(cfg_path), "--out", str(out)]
    assert main(base + ["prepare"]) == 0
    t0 = time.perf_counter()
    assert main(base + ["train"]) == 0
    train_seconds = time.perf_counter() - t0
    assert main(base + ["eval", "--checkpoint", str(out / "checkpoints" / "best")]) == 0
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    return {
        "root": root,
        "out": out,
        "config": cfg_path,
        "base_args": base,
        "csv": csv_path,
        "images": image_dir,
        "train_seconds": train_seconds,
        "metrics": metrics,
    }
