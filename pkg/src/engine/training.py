"""
Mini-batch SGD over all trainable layers of a DCGMM.

Every cGMM layer ascends its own max-component loss on the activities of
the layer below; a classifier descends its cross-entropy. No gradient flows
between layers. Layers start updating after a fraction delta of all steps
(0.1 * L for the L-th cGMM from the bottom by default).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..config import settings
from ..extractors.idx_loader import Dataset
from ..models.schemas import LayerKind, TrainRecord, TrainSchedule
from . import gmm_core
from . import layers as L
from .errors import NumericalAbortError, ShapeMismatchError
from .model_graph import DcgmmModel, Layer, forward

logger = logging.getLogger(__name__)

DataLike = Union[Dataset, np.ndarray]


def _split(data: DataLike) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(data, Dataset):
        return data.images, data.labels
    return np.asarray(data, dtype=np.float32), None


@dataclass
class TrainLog:
    total_steps: int
    activation_steps: dict[int, int]
    records: list[TrainRecord] = field(default_factory=list)
    accuracies: list[dict] = field(default_factory=list)

    def add(self, step: int, layer: int, split: str, loss: float):
        self.records.append(TrainRecord(step=step, layer=layer, split=split, loss=float(loss)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.records], columns=["step", "layer", "split", "loss"])

    def accuracy_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.accuracies, columns=["epoch", "step", "split", "accuracy"])

    def losses(self, layer: int, split: str = "train") -> pd.Series:
        df = self.to_frame()
        df = df[(df["layer"] == layer) & (df["split"] == split)]
        return pd.Series(df["loss"].to_numpy(), index=df["step"].to_numpy(), name=f"layer{layer}_{split}")

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def activation_step(delay: float, total_steps: int) -> int:
    # rounding guards against 0.1 * 3 * 100 = 30.000000000000004
    return int(math.ceil(round(delay * total_steps, 6)))


def activation_steps(model: DcgmmModel, schedule: TrainSchedule, total_steps: int) -> dict[int, int]:
    return {
        layer.index: activation_step(schedule.delay_for(layer.ordinal), total_steps)
        for layer in model.layers
        if layer.trainable
    }


def _ascend_cgmm(layer: Layer, x: np.ndarray, schedule: TrainSchedule) -> None:
    params = layer.params
    grads = gmm_core.loss_gradients(params, x)
    params.centroids = (params.centroids + schedule.lr_centroids * grads.centroids).astype(params.centroids.dtype)
    if not schedule.freeze_weights:
        params.logits = (params.logits + schedule.lr_logits * grads.logits).astype(params.logits.dtype)
    if not schedule.freeze_precisions:
        params.precision_raw = (params.precision_raw + schedule.lr_precisions * grads.precision_raw).astype(
            params.precision_raw.dtype
        )


def _descend_classifier(layer: Layer, x: np.ndarray, labels: np.ndarray, schedule: TrainSchedule) -> float:
    params = layer.params
    probs = L.classifier_forward(params, x)
    loss = -np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)))
    g_w, g_b = L.classifier_gradients(params, x, labels)
    params.weights = (params.weights - schedule.lr_classifier * g_w).astype(params.weights.dtype)
    params.bias = (params.bias - schedule.lr_classifier * g_b).astype(params.bias.dtype)
    return float(loss)


def train(
    model: DcgmmModel,
    dataset: DataLike,
    schedule: Optional[TrainSchedule] = None,
    held_out: Optional[DataLike] = None,
) -> tuple[DcgmmModel, TrainLog]:
    """
    Trains a copy of `model` and returns it with the loss log.

    Held-out losses (split "test") are recorded at every layer's activation
    step, every `eval_every` steps and once after the final step.
    """
    schedule = schedule or TrainSchedule()
    images, labels = _split(dataset)
    if images.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatchError(f"dataset samples {images.shape[1:]} do not match model input {model.input_shape}")
    classifier = model.classifier
    if classifier is not None and labels is None:
        raise ShapeMismatchError("training a classifier needs labels")
    if classifier is not None and labels.max(initial=0) >= classifier.spec.classes:
        raise ShapeMismatchError(f"labels exceed the classifier's {classifier.spec.classes} classes")

    model = model.copy()
    n = len(images)
    batches_per_epoch = math.ceil(n / schedule.batch_size)
    total = schedule.epochs * batches_per_epoch
    starts = activation_steps(model, schedule, total)
    log = TrainLog(total_steps=total, activation_steps=starts)
    milestones = set(starts.values())
    rng = np.random.default_rng(schedule.seed)
    logger.info(
        "training %s on %d samples: %d epochs, %d steps, activation steps %s",
        model.architecture, n, schedule.epochs, total, starts,
    )

    step = 0
    progress = tqdm(total=total, desc="train", disable=not schedule.progress)
    for epoch in range(schedule.epochs):
        order = rng.permutation(n) if schedule.shuffle else np.arange(n)
        for b in range(batches_per_epoch):
            idx = order[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            batch = images[idx]

            if held_out is not None and (step in milestones or (schedule.eval_every and step % schedule.eval_every == 0)):
                _log_held_out(model, held_out, log, step)

            trace = forward(model, batch)
            losses = {index: float(np.mean(v)) for index, v in trace.losses.items()}
            bad = [index for index, value in losses.items() if not np.isfinite(value)]
            if bad:
                raise NumericalAbortError(
                    f"non-finite loss in layer {bad[0]} at step {step}",
                    snapshot={"step": step, "epoch": epoch, "layer": bad[0], "losses": losses,
                              "architecture": model.architecture},
                )

            ce_loss = None
            for layer in model.layers:
                if not layer.trainable or step < starts[layer.index]:
                    continue
                x = trace.layer_input(layer.index)
                if layer.kind == LayerKind.CGMM:
                    _ascend_cgmm(layer, x, schedule)
                else:
                    ce_loss = _descend_classifier(layer, x, labels[idx], schedule)
                layer.steps_seen += 1

            if step % schedule.log_every == 0 or step == total - 1:
                for index, value in losses.items():
                    log.add(step, index, "train", value)
                if ce_loss is not None:
                    log.add(step, classifier.index, "train", ce_loss)
            step += 1
            progress.update(1)

        if classifier is not None:
            _log_accuracy(model, images, labels, log, epoch, step, "train")
            if held_out is not None and isinstance(held_out, Dataset):
                _log_accuracy(model, held_out.images, held_out.labels, log, epoch, step, "test")
    progress.close()

    if held_out is not None:
        _log_held_out(model, held_out, log, total)
    return model, log


def _log_held_out(model: DcgmmModel, held_out: DataLike, log: TrainLog, step: int) -> None:
    for index, value in evaluate_losses(model, held_out).items():
        log.add(step, index, "test", value)


def _log_accuracy(model, images, labels, log: TrainLog, epoch: int, step: int, split: str) -> None:
    predicted = predict_classes(model, images)
    accuracy = float(np.mean(predicted == labels))
    log.accuracies.append({"epoch": epoch, "step": step, "split": split, "accuracy": accuracy})
    logger.info("epoch %d %s accuracy %.4f", epoch, split, accuracy)


def predict_classes(model: DcgmmModel, images: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
    batch_size = batch_size or settings.BATCH_SIZE
    out = [np.argmax(forward(model, images[i : i + batch_size]).class_probabilities, axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def score_samples(
    model: DcgmmModel,
    dataset: DataLike,
    batch_size: Optional[int] = None,
    full: bool = False,
    progress: bool = False,
) -> dict[int, np.ndarray]:
    """
    Per-sample layer loss for every cGMM layer, keyed by layer index. With
    `full=True` the position-averaged full mixture log-likelihood is
    returned instead of the max-component value.
    """
    images, _ = _split(dataset)
    batch_size = batch_size or settings.BATCH_SIZE
    scores: dict[int, list[np.ndarray]] = {index: [] for index in model.cgmm_indices}
    for i in tqdm(range(0, len(images), batch_size), desc="score", disable=not progress):
        trace = forward(model, images[i : i + batch_size])
        for index in model.cgmm_indices:
            if full:
                ll = gmm_core.full_log_likelihood(model.layer(index).params, trace.layer_input(index))
                scores[index].append(ll.reshape(ll.shape[0], -1).mean(axis=1))
            else:
                scores[index].append(trace.losses[index])
    return {index: np.concatenate(parts) if parts else np.zeros(0) for index, parts in scores.items()}


def evaluate_losses(model: DcgmmModel, dataset: DataLike, batch_size: Optional[int] = None) -> dict[int, float]:
    """Mean per-sample loss of every cGMM layer."""
    return {index: float(np.mean(v)) for index, v in score_samples(model, dataset, batch_size).items()}
