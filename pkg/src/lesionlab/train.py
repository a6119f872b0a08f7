"""Focal loss with label smoothing, per-stage cosine decay, and the three-stage driver.

Each stage restarts the cosine schedule from its own base learning rate and
restores the parameters that achieved that stage's best validation accuracy
before handing the model to the next stage.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import MixUpConfig, mixup_batch
from .classes import NUM_CLASSES
from .errors import TrainingDiverged
from .loader import BatchLoader
from .model import ModelHandle, numpy_batch_to_tensor, save_checkpoint, set_freeze_stage


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    smoothing: float = 0.1
    use_class_weights: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0,1], got {self.alpha}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0,1), got {self.smoothing}")


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    epochs: int
    base_lr: float
    weight_decay: float = 1e-4
    early_stop_patience: int | None = None
    lr_floor_fraction: float = 0.01
    # optimizer is fixed: Adam(beta1=0.9, beta2=0.999)

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ValueError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")


def default_stages() -> list[StageConfig]:
    """Full-scale schedule: 25/20/15 epochs at 1e-3/1e-4/1e-5."""
    return [
        StageConfig(stage_id=1, epochs=25, base_lr=1e-3, weight_decay=1e-4),
        StageConfig(stage_id=2, epochs=20, base_lr=1e-4, weight_decay=1e-4,
                    early_stop_patience=10),
        StageConfig(stage_id=3, epochs=15, base_lr=1e-5, weight_decay=1e-5),
    ]


@dataclass
class StageHistory:
    stage_id: int
    epochs: list[dict] = field(default_factory=list)  # lr, losses, accuracies per epoch

    @property
    def best_val_accuracy(self) -> float:
        return max(e["val_accuracy"] for e in self.epochs)


@dataclass
class TrainingReport:
    stages: list[StageHistory]
    best_stage: int
    best_epoch: int
    best_val_accuracy: float
    wall_clock_sec: float
    checkpoint_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"stage_id": s.stage_id, "epochs": s.epochs} for s in self.stages
            ],
            "best_stage": self.best_stage,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "wall_clock_sec": self.wall_clock_sec,
            "checkpoint_dir": self.checkpoint_dir,
        }

    def cumulative_best(self) -> list[float]:
        best = -math.inf
        out = []
        for s in self.stages:
            best = max(best, s.best_val_accuracy)
            out.append(best)
        return out


# ---------------------------------------------------------------------------
# loss pieces

def smooth_labels(onehot: torch.Tensor, smoothing: float) -> torch.Tensor:
    """y' = (1 - eps) * y + eps / K; rows keep summing to 1."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0,1), got {smoothing}")
    k = onehot.shape[-1]
    return (1.0 - smoothing) * onehot + smoothing / k


def focal_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    cfg: FocalLossConfig,
    class_weights: np.ndarray | None = None,
) -> torch.Tensor:
    """Batch-mean of -alpha * sum_c w_c t_c (1-p_c)^gamma log p_c.

    With gamma=0, alpha=1 and no weights this is exactly smoothed cross-entropy.
    """
    if probs.shape != targets.shape:
        raise ValueError(f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if torch.isnan(probs).any() or torch.isnan(targets).any():
        raise ValueError("focal loss received NaN inputs")
    p = probs.clamp(min=1e-7)
    focal = targets * (1.0 - p) ** cfg.gamma * torch.log(p)
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=probs.dtype, device=probs.device)
        focal = focal * w
    return -cfg.alpha * focal.sum(dim=1).mean()


def cosine_lr(
    epoch_step: int, total_steps: int, base_lr: float, floor_fraction: float = 0.01
) -> float:
    """floor + 0.5 (base - floor)(1 + cos(pi step/total)); step 0 gives base exactly."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= epoch_step <= total_steps:
        raise ValueError(f"step {epoch_step} outside [0, {total_steps}]")
    floor = floor_fraction * base_lr
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * epoch_step / total_steps))


def early_stop_check(val_history: list[float], patience: int) -> bool:
    """True once the (first occurrence of the) best value is more than `patience` epochs old."""
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if not val_history:
        return False
    best = max(val_history)
    best_idx = val_history.index(best)  # ties keep the earliest epoch
    return (len(val_history) - 1 - best_idx) > patience


# ---------------------------------------------------------------------------
# stage driver

def _evaluate(
    handle: ModelHandle,
    images: np.ndarray,
    labels: np.ndarray,
    loss_cfg: FocalLossConfig,
    class_weights: np.ndarray | None,
    batch_size: int = 256,
) -> tuple[float, float]:
    handle.module.eval()
    losses, correct = [], 0
    eye = np.eye(NUM_CLASSES, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            x = numpy_batch_to_tensor(images[start : start + batch_size])
            y = labels[start : start + batch_size]
            probs = torch.softmax(handle.module(x), dim=1)
            targets = smooth_labels(torch.from_numpy(eye[y]), loss_cfg.smoothing)
            losses.append(float(focal_loss(probs, targets, loss_cfg, class_weights)) * len(y))
            correct += int((probs.argmax(dim=1).numpy() == y).sum())
    return sum(losses) / len(labels), correct / len(labels)


def run_stage(
    handle: ModelHandle,
    loaders: BatchLoader,
    cfg: StageConfig,
    loss_cfg: FocalLossConfig,
    mixup_cfg: MixUpConfig | None = None,
    class_weights: np.ndarray | None = None,
    seed: int = 42,
    checkpoint_dir: Path | str | None = None,
    log_fn=None,
    save_epoch_checkpoints: bool = True,
) -> tuple[ModelHandle, StageHistory]:
    """Train one stage with Adam + per-stage cosine decay; restore the best epoch."""
    if handle.freeze_stage != cfg.stage_id:
        raise ValueError(
            f"freeze stage {handle.freeze_stage} does not match config stage {cfg.stage_id}"
        )
    mixup_cfg = mixup_cfg or MixUpConfig(enabled=False)
    optimizer = torch.optim.Adam(
        handle.trainable_parameters(),
        lr=cfg.base_lr,
        betas=(0.9, 0.999),
        weight_decay=cfg.weight_decay,
    )
    history = StageHistory(stage_id=cfg.stage_id)
    eye = np.eye(NUM_CLASSES, dtype=np.float32)
    val_images, val_labels = loaders.eval_split("val")
    best_acc, best_state = -1.0, None
    val_acc_trace: list[float] = []

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_floor_fraction)
        for group in optimizer.param_groups:
            group["lr"] = lr
        mix_rng = np.random.default_rng([seed, cfg.stage_id, epoch, 7])
        handle.set_train_mode()
        epoch_loss, epoch_correct, n_seen = 0.0, 0, 0
        for x_np, y_np in loaders.iter_epoch(cfg.stage_id, epoch):
            targets_np = smooth_labels(torch.from_numpy(eye[y_np]), loss_cfg.smoothing).numpy()
            if (
                mixup_cfg.enabled
                and len(y_np) >= 2
                and mix_rng.random() < mixup_cfg.prob
            ):
                mixed = mixup_batch(x_np, targets_np, mixup_cfg, mix_rng)
                x_np, targets_np = mixed.images, mixed.soft_labels
            x = numpy_batch_to_tensor(x_np)
            targets = torch.from_numpy(targets_np.astype(np.float32))
            optimizer.zero_grad()
            logits = handle.module(x)
            if not torch.isfinite(logits).all():
                if checkpoint_dir is not None:
                    save_checkpoint(handle, Path(checkpoint_dir) / "diverged", epoch=epoch)
                raise TrainingDiverged(
                    f"non-finite logits in stage {cfg.stage_id} epoch {epoch}"
                )
            probs = torch.softmax(logits, dim=1)
            loss = focal_loss(probs, targets, loss_cfg, class_weights)
            if not torch.isfinite(loss):
                if checkpoint_dir is not None:
                    save_checkpoint(handle, Path(checkpoint_dir) / "diverged", epoch=epoch)
                raise TrainingDiverged(
                    f"non-finite loss in stage {cfg.stage_id} epoch {epoch}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(y_np)
            epoch_correct += int((logits.argmax(dim=1).numpy() == y_np).sum())
            n_seen += len(y_np)

        val_loss, val_acc = _evaluate(handle, val_images, val_labels, loss_cfg, class_weights)
        record = {
            "stage": cfg.stage_id,
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / n_seen,
            "train_accuracy": epoch_correct / n_seen,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        }
        history.epochs.append(record)
        val_acc_trace.append(val_acc)
        if log_fn is not None:
            log_fn(record)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = {
                k: v.detach().clone() for k, v in handle.module.state_dict().items()
            }
        if checkpoint_dir is not None and save_epoch_checkpoints:
            save_checkpoint(
                handle,
                Path(checkpoint_dir) / f"stage{cfg.stage_id}_epoch{epoch}",
                epoch=epoch,
                history=history.epochs,
            )
        if cfg.early_stop_patience is not None and early_stop_check(
            val_acc_trace, cfg.early_stop_patience
        ):
            break

    if best_state is not None:
        handle.module.load_state_dict(best_state)
    if checkpoint_dir is not None:
        save_checkpoint(
            handle,
            Path(checkpoint_dir) / f"stage{cfg.stage_id}_best",
            epoch=int(np.argmax(val_acc_trace)),
            history=history.epochs,
        )
    return handle, history


def run_schedule(
    handle: ModelHandle,
    loaders: BatchLoader,
    stages: list[StageConfig],
    loss_cfg: FocalLossConfig,
    mixup_cfg: MixUpConfig | None = None,
    class_weights: np.ndarray | None = None,
    seed: int = 42,
    checkpoint_dir: Path | str | None = None,
    log_path: Path | str | None = None,
    save_epoch_checkpoints: bool = True,
) -> tuple[ModelHandle, TrainingReport]:
    """Chain freeze stages and per-stage training; keep the globally best checkpoint."""
    ids = [s.stage_id for s in stages]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ValueError(f"stage ids must be strictly increasing, got {ids}")
    torch.manual_seed(seed)
    t0 = time.perf_counter()
    log_fh = open(log_path, "a") if log_path is not None else None

    def log_fn(record: dict) -> None:
        if log_fh is not None:
            line = dict(record, timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"))
            log_fh.write(json.dumps(line, sort_keys=True) + "\n")
            log_fh.flush()

    histories: list[StageHistory] = []
    best = (-1.0, 0, 0)  # (val_acc, stage, epoch)
    best_state = None
    try:
        for cfg in stages:
            set_freeze_stage(handle, cfg.stage_id)
            handle, hist = run_stage(
                handle,
                loaders,
                cfg,
                loss_cfg,
                mixup_cfg,
                class_weights,
                seed=seed,
                checkpoint_dir=checkpoint_dir,
                log_fn=log_fn,
                save_epoch_checkpoints=save_epoch_checkpoints,
            )
            histories.append(hist)
            stage_best_epoch = int(
                np.argmax([e["val_accuracy"] for e in hist.epochs])
            )
            if hist.best_val_accuracy > best[0]:
                # run_stage just restored this stage's best, so the live
                # parameters are the new global best
                best = (hist.best_val_accuracy, cfg.stage_id, stage_best_epoch)
                best_state = {
                    k: v.detach().clone() for k, v in handle.module.state_dict().items()
                }
                if checkpoint_dir is not None:
                    save_checkpoint(
                        handle,
                        Path(checkpoint_dir) / "best",
                        epoch=stage_best_epoch,
                        history=hist.epochs,
                    )
    finally:
        if log_fh is not None:
            log_fh.close()
    if best_state is not None:
        handle.module.load_state_dict(best_state)

    report = TrainingReport(
        stages=histories,
        best_stage=best[1],
        best_epoch=best[2],
        best_val_accuracy=best[0],
        wall_clock_sec=time.perf_counter() - t0,
        checkpoint_dir=str(checkpoint_dir) if checkpoint_dir is not None else None,
    )
    return handle, report
