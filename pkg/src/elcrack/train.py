"""Training on the image-level surrogate task, plus crack-class metrics."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from elcrack.data import DatasetSplit, batches, make_training_stream
from elcrack.model import CRACK, CrackNet, predict_labels

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adamw", "sgd")
SELECTION = ("val_loss", "val_f1")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    optimizer_name: str = "adam"
    seed: int = 0
    early_stop_patience: int = 10
    balance: bool = True
    augment: bool = True
    selection: str = "val_loss"
    freeze_batchnorm: bool = False
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        # 0 is accepted as a diagnostic (optimizer identity); negative is not
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.optimizer_name not in OPTIMIZERS:
            raise ValueError(f"optimizer_name must be one of {OPTIMIZERS}")
        if self.selection not in SELECTION:
            raise ValueError(f"selection must be one of {SELECTION}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class MetricsReport:
    """Metrics on class 'crack' plus overall accuracy.

    ``confusion_matrix[true][pred]`` with index 0 = crack, 1 = non-crack.
    """

    precision_crack: float
    recall_crack: float
    f1_crack: float
    accuracy: float
    confusion_matrix: list[list[int]]

    @classmethod
    def from_confusion(cls, confusion) -> "MetricsReport":
        cm = np.asarray(confusion, dtype=np.int64)
        tp = int(cm[0, 0])
        fn = int(cm[0, 1])
        fp = int(cm[1, 0])
        total = int(cm.sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        accuracy = int(np.trace(cm)) / total if total else 0.0
        return cls(precision, recall, f1, accuracy, cm.tolist())

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_from_labels(true, pred) -> np.ndarray:
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@torch.no_grad()
def predict(model: CrackNet, samples, batch_size: int = 16):
    """``(true labels, predicted labels, mean CE loss, crack-map means)`` in eval mode."""
    was_training = model.training
    model.eval()
    true, pred, losses, means = [], [], [], []
    for x, y in batches(samples, batch_size):
        maps, scores = model(x)
        losses.append(F.cross_entropy(scores.double(), y, reduction="sum").item())
        true.append(y)
        pred.append(predict_labels(scores))
        means.append(maps[:, CRACK].double().mean(dim=(1, 2)))
    model.train(was_training)
    true = torch.cat(true).numpy()
    return true, torch.cat(pred).numpy(), sum(losses) / len(true), torch.cat(means).numpy()


def evaluate(model: CrackNet, samples, batch_size: int = 16) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    true, pred, _, _ = predict(model, samples, batch_size)
    return MetricsReport.from_confusion(confusion_from_labels(true, pred))


def _make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer_name == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.optimizer_name == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9, weight_decay=cfg.weight_decay)


def _set_train_mode(model, cfg: TrainConfig):
    model.train()
    if cfg.freeze_batchnorm:
        for m in model.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.eval()


@dataclass
class TrainResult:
    model: CrackNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: Path | None = None


def train(
    model: CrackNet,
    split: DatasetSplit,
    cfg: TrainConfig,
    history_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """Minimize cross entropy on the pooled scores; keep the best validation weights.

    One JSON line per epoch is appended to ``history_path`` when given.
    """
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    stream = make_training_stream(split, cfg.batch_size, balance=cfg.balance, augment=cfg.augment, seed=cfg.seed)
    opt = _make_optimizer(model, cfg)
    val = split.val or split.train
    best_key, best_state, best_epoch, stale = None, None, 0, 0
    history = []
    hist_fh = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        hist_fh = open(history_path, "w", encoding="utf-8")
    try:
        for epoch in range(1, cfg.epochs + 1):
            _set_train_mode(model, cfg)
            total, count = 0.0, 0
            for b, (x, y) in enumerate(stream.epoch(epoch - 1)):
                try:
                    _, scores = model(x)
                except FloatingPointError:
                    raise TrainingDiverged(epoch, b, math.nan) from None
                loss = F.cross_entropy(scores, y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch, b, loss.item())
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(y)
                count += len(y)
            true, pred, val_loss, crack_means = predict(model, val, cfg.eval_batch_size)
            metrics = MetricsReport.from_confusion(confusion_from_labels(true, pred))
            record = {
                "epoch": epoch,
                "train_loss": total / count,
                "val_loss": val_loss,
                "val_metrics": metrics.to_dict(),
                "crack_map_mean": float(np.mean(crack_means)),
            }
            history.append(record)
            if hist_fh:
                hist_fh.write(json.dumps(record, sort_keys=True) + "\n")
                hist_fh.flush()
            log.info(
                "epoch %d train_loss %.4f val_loss %.4f val_f1 %.3f val_acc %.3f",
                epoch, record["train_loss"], val_loss, metrics.f1_crack, metrics.accuracy,
            )
            key = val_loss if cfg.selection == "val_loss" else -metrics.f1_crack
            if best_key is None or key < best_key:
                best_key, best_epoch, stale = key, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    finally:
        if hist_fh:
            hist_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, history, best_epoch)
    if checkpoint_path is not None:
        from elcrack.model import save_checkpoint

        result.checkpoint = save_checkpoint(
            model,
            checkpoint_path,
            metadata={
                "train_config": asdict(cfg),
                "best_epoch": best_epoch,
                "split_checksum": split.checksum(),
                "batchnorm": "frozen" if cfg.freeze_batchnorm else "fine-tuned",
            },
        )
    return result


def read_history(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
