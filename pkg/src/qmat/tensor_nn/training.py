"""Mini-batch training loop for the dense regressor."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from qmat.dataset import PatchArrays, load_patch_arrays
from qmat.tensor_nn.checkpoint import save_checkpoint
from qmat.tensor_nn.densenet import DenseNetModel, forward, to_input
from qmat.tensor_nn.functional import LOSSES
from qmat.tensor_nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 1
    loss: str = "logcosh"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # batches used to re-estimate BN statistics after the last epoch; 0 keeps the running averages
    bn_recalibration_batches: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.bn_recalibration_batches < 0:
            raise ValueError("bn_recalibration_batches must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def _as_arrays(data) -> PatchArrays:
    if isinstance(data, PatchArrays):
        return data
    if isinstance(data, (str, os.PathLike)):
        data = [data]
    data = list(data)
    if not data:
        raise ValueError("no training data given")
    return load_patch_arrays(data)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffling/dropout stream of one epoch; resuming at ``epoch`` replays it exactly."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x7A1, int(epoch)])))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train_step(model: DenseNetModel, opt: AdamState, x, y, config: TrainConfig, rng) -> float:
    """Forward in train mode, backward, one Adam update. Returns the batch loss."""
    leaves = model.leaves(requires_grad=True)
    pred = forward(model, x, "train", rng=rng, params=leaves)
    loss = LOSSES[config.loss](pred, y)
    loss.backward()
    grads = {n: t.grad for n, t in leaves.items()}
    adam_step(model.params, grads, opt, config.learning_rate, (config.beta1, config.beta2), config.eps)
    return loss.item()


def evaluate_loss(model: DenseNetModel, data, loss: str = "logcosh", batch_size: int = 32) -> float:
    """Mean eval-mode loss over every patch."""
    arrays = _as_arrays(data)
    total = 0.0
    for idx in iterate_batches(len(arrays), batch_size, None):
        pred = forward(model, to_input(arrays.pixels[idx]), "eval")
        total += LOSSES[loss](pred, arrays.labels[idx].astype(model.dtype)).item() * len(idx)
    return total / len(arrays)


def recalibrate_bn(model: DenseNetModel, data, batch_size: int = 32, max_batches: int = 64,
                   seed: int = 0) -> int:
    """Replace the BN running statistics by plain averages of batch statistics.

    The exponential running averages trail the weights, which matters when
    the weights move quickly. Here the weights are frozen and up to
    ``max_batches`` batches are pushed through in train mode with dropout
    off, so the stored statistics match what eval mode will see. Parameters
    are untouched. Returns the number of batches used.
    """
    arrays = _as_arrays(data)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xB4])))
    used = 0
    for idx in iterate_batches(len(arrays), batch_size, rng):
        if used == max_batches:
            break
        # momentum 1/(i+1) turns the running update into a cumulative mean
        cfg = replace(model.config, dropout_rate=0.0, bn_momentum=1.0 / (used + 1))
        forward(DenseNetModel(cfg, model.params, model.bn_states, model.dtype), to_input(arrays.pixels[idx]), "train")
        used += 1
    return used


def train(model: DenseNetModel, data, config: TrainConfig, val_data=None, checkpoint_path=None,
          optimizer: AdamState | None = None, start_epoch: int = 0, meta: dict | None = None,
          on_epoch=None):
    """Train ``model`` in place for ``config.epochs`` epochs.

    ``data``/``val_data`` are :class:`PatchArrays` or shard paths. After each
    epoch the model (with optimizer state) is written to ``checkpoint_path``
    when given. After the last epoch the BN statistics are re-estimated with
    :func:`recalibrate_bn` unless ``config.bn_recalibration_batches`` is 0.
    Running statistics never feed a train-mode step, so this does not
    disturb resuming. Pass the optimizer state from a checkpoint to resume; leave it
    ``None`` to fine-tune with fresh moments. Returns ``(model, history)``.
    """
    arrays = _as_arrays(data)
    if arrays.nc != model.config.nc_outputs:
        raise ValueError(f"label length {arrays.nc} != model outputs {model.config.nc_outputs}")
    val = _as_arrays(val_data) if val_data is not None else None
    if val is not None and val.nc != model.config.nc_outputs:
        raise ValueError(f"validation label length {val.nc} != model outputs {model.config.nc_outputs}")
    opt = optimizer if optimizer is not None else AdamState()
    labels = arrays.labels.astype(model.dtype)
    history = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        rng = epoch_rng(config.seed, epoch)
        total = 0.0
        for idx in iterate_batches(len(arrays), config.batch_size, rng):
            total += train_step(model, opt, to_input(arrays.pixels[idx]), labels[idx], config, rng) * len(idx)
            history.steps += 1
        history.train_loss.append(total / len(arrays))
        if epoch == start_epoch + config.epochs - 1 and config.bn_recalibration_batches:
            recalibrate_bn(model, arrays, config.batch_size, config.bn_recalibration_batches, config.seed)
        if val is not None:
            history.val_loss.append(evaluate_loss(model, val, config.loss, config.batch_size))
        log.info(
            "epoch %d: train %s %.5f%s (%.1fs)", epoch + 1, config.loss, history.train_loss[-1],
            f", val {history.val_loss[-1]:.5f}" if val is not None else "", time.perf_counter() - t0,
        )
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, epoch + 1, opt, meta)
        if on_epoch is not None:
            on_epoch(epoch + 1, history)
    history.seconds = time.perf_counter() - t0
    return model, history
