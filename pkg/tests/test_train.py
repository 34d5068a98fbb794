from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from elcrack.data import DatasetSplit, synthetic_dataset
from elcrack.model import ModelConfig, build_model, load_checkpoint, state_checksum
from elcrack.pooling import INF
from elcrack.train import (
    MetricsReport,
    TrainConfig,
    TrainingDiverged,
    confusion_from_labels,
    evaluate,
    read_history,
    train,
)

TINY = 32


@pytest.fixture(scope="module")
def tiny_split():
    samples, _ = synthetic_dataset(12, TINY, seed=0)
    held, _ = synthetic_dataset(6, TINY, seed=1, prefix="ho")
    return DatasetSplit(samples, held, held, seed=0)


def tiny_model(p=INF, seed=0):
    return build_model(ModelConfig(input_size=TINY, pooling=p, seed=seed))


class MeanBrightnessModel(nn.Module):
    """Scores 'crack' when the mean pixel of the first channel exceeds a threshold."""

    def __init__(self, threshold):
        super().__init__()
        self.threshold = threshold

    def forward(self, x):
        m = x[:, 0].mean(dim=(1, 2))
        scores = torch.stack([m - self.threshold, self.threshold - m], dim=1)
        return scores[:, :, None, None], scores


def test_metrics_examples():
    perfect = MetricsReport.from_confusion([[5, 0], [0, 7]])
    assert (perfect.precision_crack, perfect.recall_crack, perfect.f1_crack, perfect.accuracy) == (1, 1, 1, 1)
    all_non = MetricsReport.from_confusion([[0, 4], [0, 6]])
    assert all_non.recall_crack == 0 and all_non.f1_crack == 0 and all_non.precision_crack == 0
    assert all_non.accuracy == 0.6
    single_class = MetricsReport.from_confusion([[0, 0], [2, 8]])
    assert single_class.f1_crack == 0 and single_class.accuracy == 0.8


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_metric_identities(counts):
    cm = np.array(counts).reshape(2, 2)
    r = MetricsReport.from_confusion(cm)
    p, rc = r.precision_crack, r.recall_crack
    assert r.f1_crack == (2 * p * rc / (p + rc) if p + rc > 0 else 0.0)
    assert r.accuracy == np.trace(cm) / cm.sum()
    tp, fn, fp = int(cm[0, 0]), int(cm[0, 1]), int(cm[1, 0])
    exact_f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
    assert abs(r.f1_crack - float(exact_f1)) <= 1e-15


def test_confusion_from_labels():
    cm = confusion_from_labels([0, 0, 1, 1, 1], [0, 1, 1, 0, 1])
    assert cm.tolist() == [[1, 1], [1, 2]]


def test_evaluate_with_known_predictions():
    samples, _ = synthetic_dataset(10, TINY, seed=3)
    # line pixels raise the mean: a threshold between the two groups is a perfect classifier
    from elcrack.data import normalize

    means = [normalize(s.pixels)[0].mean().item() for s in samples]
    crack = [m for m, s in zip(means, samples) if s.crack_label == "crack"]
    non = [m for m, s in zip(means, samples) if s.crack_label != "crack"]
    assert min(crack) > max(non)
    perfect = evaluate(MeanBrightnessModel((min(crack) + max(non)) / 2), samples)
    assert perfect.accuracy == 1.0 and perfect.f1_crack == 1.0
    never = evaluate(MeanBrightnessModel(1e9), samples)
    assert never.recall_crack == 0.0 and never.f1_crack == 0.0 and never.accuracy == 0.5
    with pytest.raises(ValueError):
        evaluate(MeanBrightnessModel(0.0), [])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer_name="lbfgs")


def test_zero_learning_rate_is_identity(tiny_split):
    model = tiny_model()
    before = state_checksum(model.state_dict())
    cfg = TrainConfig(epochs=3, learning_rate=0.0, freeze_batchnorm=True, augment=False, seed=0)
    result = train(model, tiny_split, cfg)
    assert state_checksum(model.state_dict()) == before
    losses = [h["val_loss"] for h in result.history]
    assert max(losses) - min(losses) < 1e-7


def test_zero_learning_rate_leaves_parameters_with_live_batchnorm(tiny_split):
    model = tiny_model()
    params = {k: v.clone() for k, v in model.named_parameters()}
    train(model, tiny_split, TrainConfig(epochs=1, learning_rate=0.0, seed=0))
    assert all(torch.equal(params[k], v) for k, v in model.named_parameters())


def test_training_is_deterministic(tiny_split, tmp_path):
    runs = []
    for i in range(2):
        model = tiny_model(p=3, seed=5)
        result = train(model, tiny_split, TrainConfig(epochs=2, seed=5), history_path=tmp_path / f"h{i}.jsonl")
        runs.append(result.history[-1]["val_loss"])
    assert abs(runs[0] - runs[1]) < 1e-5
    assert read_history(tmp_path / "h0.jsonl") == read_history(tmp_path / "h1.jsonl")


def test_history_log_and_checkpoint_round_trip(tiny_split, tmp_path):
    model = tiny_model(p=2)
    result = train(
        model,
        tiny_split,
        TrainConfig(epochs=2, seed=0),
        history_path=tmp_path / "history.jsonl",
        checkpoint_path=tmp_path / "ckpt.pt",
    )
    records = read_history(tmp_path / "history.jsonl")
    assert [r["epoch"] for r in records] == [1, 2]
    assert {"epoch", "train_loss", "val_loss", "val_metrics", "crack_map_mean"} <= set(records[0])
    assert set(records[0]["val_metrics"]) == {"precision_crack", "recall_crack", "f1_crack", "accuracy", "confusion_matrix"}
    loaded = load_checkpoint(result.checkpoint, expected=model.config)
    assert evaluate(loaded, tiny_split.test) == evaluate(model, tiny_split.test)
    assert loaded.checkpoint_metadata["batchnorm"] == "fine-tuned"
    assert loaded.checkpoint_metadata["best_epoch"] == result.best_epoch


def test_best_validation_weights_are_restored(tiny_split):
    model = tiny_model(p=1)
    result = train(model, tiny_split, TrainConfig(epochs=3, seed=0, learning_rate=1e-3))
    best = min(h["val_loss"] for h in result.history)
    assert result.history[result.best_epoch - 1]["val_loss"] == best
    from elcrack.train import predict

    assert predict(model, tiny_split.val)[2] == pytest.approx(best, rel=1e-6)


def test_early_stopping(tiny_split):
    model = tiny_model()
    result = train(model, tiny_split, TrainConfig(epochs=10, learning_rate=0.0, early_stop_patience=2, freeze_batchnorm=True))
    assert len(result.history) == 3


def test_divergence_reports_epoch_and_batch(tiny_split):
    model = tiny_model()
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(model, tiny_split, TrainConfig(epochs=1))
    assert info.value.epoch == 1 and info.value.batch == 0


@pytest.mark.slow
def test_heldout_loss_decreases_on_overfit_task():
    from elcrack.experiments import overfit_train_config

    samples, _ = synthetic_dataset(40, 64, seed=0)
    held, _ = synthetic_dataset(10, 64, seed=99, prefix="ho")
    model = build_model(ModelConfig(input_size=64, pooling=INF, seed=0))
    cfg = overfit_train_config(epochs=5)
    result = train(model, DatasetSplit(samples, held, held, seed=0), cfg)
    losses = [h["val_loss"] for h in result.history]
    assert losses[4] < losses[0]
