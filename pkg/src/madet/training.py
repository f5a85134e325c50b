"""SGD-with-momentum training loop over resampled patch epochs.

Reproducibility contract: every random stream is derived from
(config.seed, epoch, stream-id), never from consumption history, so a run
resumed from the epoch-k checkpoint is bit-identical to an uninterrupted
run.  Per-sample gradients are accumulated in sample order.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers, network
from .errors import (DataError, DivergenceError, PipelineOrderError,
                     ShapeError, ValidationError)
from .patches import SamplePlan, sample_balanced, sample_stage2

MA_CLASS = 1  # softmax output index carrying the lesion probability

_STREAM_SAMPLER = 0
_STREAM_SHUFFLE = 1
_STREAM_DROPOUT = 2


@dataclass
class TrainConfig:
    epochs: int
    plan: SamplePlan
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0,1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)       # per-epoch mean loss
    accuracies: list = field(default_factory=list)   # per-epoch train accuracy
    wall_time_s: float = 0.0


def sgd_step(weights, grads, velocity, lr, momentum):
    """v' = momentum * v - lr * g;  w' = w + v'.  Returns (w', v')."""
    weights = np.asarray(weights, dtype=float)
    grads = np.asarray(grads, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    if weights.shape != grads.shape or weights.shape != velocity.shape:
        raise ShapeError("sgd_step shape mismatch", weights.shape, grads.shape,
                         velocity.shape)
    new_velocity = momentum * velocity - lr * grads
    return weights + new_velocity, new_velocity


def _derive_seed(seed, epoch, stream):
    """Stable scalar seed for one (epoch, stream) pair."""
    ss = np.random.SeedSequence([int(seed), int(epoch), int(stream)])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_loss(spec, params, patch_data, label, training=False, dropout_rng=None):
    """Forward one patch and evaluate the cross-entropy on the MA output.

    Returns (loss, probs, caches); pair with sample_grads for the backward.
    The pass always keeps gradient bookkeeping, whether or not dropout is on.
    """
    probs, caches = network.forward(spec, params, patch_data,
                                    training=training, dropout_rng=dropout_rng,
                                    with_grad=True)
    loss, d_p = layers.bce_loss(float(probs[MA_CLASS]), label)
    return loss, d_p, probs, caches


def sample_grads(spec, params, caches, d_p, dtype=np.float64):
    d_probs = np.zeros(2, dtype=dtype)
    d_probs[MA_CLASS] = d_p
    grads, _ = network.backward(spec, params, caches, d_probs)
    return grads


def train(spec, images, annotations, config, stage, prob_maps=None,
          start=None, checkpoint_path=None, dtype=np.float64):
    """Train the given network spec on resampled patch epochs.

    stage selects the sampler: "basic" draws class-balanced epochs,
    "final" mines hard negatives from prob_maps.  `start` resumes from a
    checkpoint; a checkpoint is written to checkpoint_path every epoch.
    Returns (Checkpoint, TrainReport).
    """
    if stage not in ("basic", "final"):
        raise ValidationError(f"stage must be 'basic' or 'final', got {stage!r}")
    if stage == "final" and not prob_maps:
        raise PipelineOrderError("training the final network requires stage-1 "
                                 "probability maps")
    if start is None:
        ckpt = network.init_weights(spec, config.seed)
    else:
        if start.spec_digest != spec.digest():
            raise ValidationError("resume checkpoint was built for a different spec")
        ckpt = start
    params = [[np.asarray(a, dtype=dtype) for a in group] for group in ckpt.params]
    velocity = [[np.asarray(a, dtype=dtype) for a in group]
                for group in (ckpt.velocity or [[np.zeros_like(a) for a in g]
                                                for g in ckpt.params])]
    losses = list(ckpt.metadata.get("loss_history", []))
    accuracies = list(ckpt.metadata.get("accuracy_history", []))
    start_epoch = int(ckpt.metadata.get("epoch", 0))

    t_begin = time.perf_counter()
    for epoch in range(start_epoch, config.epochs):
        plan = replace(config.plan,
                       rng_seed=_derive_seed(config.seed, epoch, _STREAM_SAMPLER))
        if stage == "basic":
            epoch_patches = sample_balanced(images, annotations, plan)
        else:
            epoch_patches = sample_stage2(images, annotations, prob_maps, plan)
        if not epoch_patches:
            raise DataError("sampler returned an empty epoch")

        shuffle_rng = np.random.default_rng(
            _derive_seed(config.seed, epoch, _STREAM_SHUFFLE))
        order = shuffle_rng.permutation(len(epoch_patches))
        dropout_rng = np.random.default_rng(
            _derive_seed(config.seed, epoch, _STREAM_DROPOUT))

        loss_sum = 0.0
        correct = 0
        n = len(order)
        for batch_index, b0 in enumerate(range(0, n, config.batch_size)):
            batch = [epoch_patches[i] for i in order[b0:b0 + config.batch_size]]
            grad_sum = None
            for patch in batch:
                x = np.asarray(patch.data, dtype=dtype)
                loss, d_p, probs, caches = sample_loss(
                    spec, params, x, patch.label, training=True,
                    dropout_rng=dropout_rng)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, batch_index, loss)
                loss_sum += loss
                correct += int((probs[MA_CLASS] >= 0.5) == bool(patch.label))
                grads = sample_grads(spec, params, caches, d_p, dtype=dtype)
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for acc, g in zip(grad_sum, grads):
                        for j in range(len(g)):
                            acc[j] += g[j]
            scale = 1.0 / len(batch)
            for li in range(len(params)):
                for j in range(len(params[li])):
                    params[li][j], velocity[li][j] = sgd_step(
                        params[li][j], grad_sum[li][j] * scale,
                        velocity[li][j], config.learning_rate, config.momentum)

        losses.append(loss_sum / n)
        accuracies.append(correct / n)
        ckpt = network.Checkpoint(
            spec.digest(), params, velocity,
            {"epoch": epoch + 1, "seed": int(config.seed),
             "stage": stage, "loss_history": losses,
             "accuracy_history": accuracies})
        if checkpoint_path is not None:
            network.save_checkpoint(checkpoint_path, ckpt)

    report = TrainReport(losses, accuracies, time.perf_counter() - t_begin)
    return ckpt, report


def save_report(path, report):
    """TrainReport as CSV: epoch,loss,accuracy."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss", "accuracy"])
        for i, (loss, acc) in enumerate(zip(report.losses, report.accuracies)):
            writer.writerow([i, f"{loss:.9f}", f"{acc:.6f}"])
