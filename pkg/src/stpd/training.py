"""Training loop for the unrolled network.

MSE against normalized label series, Adam with a per-epoch exponential
learning-rate decay, seeded shuffling, periodic and best-validation
checkpoints. Deterministic for a fixed seed in single-thread mode.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import network, optim
from .projector import ProjectorGeometry


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    base_lr: float = 8e-4
    lr_decay: float = 0.99
    seed: int = 0
    checkpoint_every: int = 10
    network: network.NetworkConfig = field(default_factory=network.NetworkConfig)

    def learning_rate(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay ** epoch


class HistoryRow(NamedTuple):
    step: int
    epoch: int
    lr: float
    loss: float


class TrainResult(NamedTuple):
    params: network.NetworkParams
    history: list


def _stack_batch(data, indices):
    sinos = np.stack([data[i][0] for i in indices])
    labels = np.stack([data[i][1] for i in indices])[:, None]  # (N,1,T,H,W)
    return sinos, labels


def validation_loss(params: network.NetworkParams, val_data,
                    geom: ProjectorGeometry) -> float:
    total = 0.0
    with ad.no_grad():
        for sino, label in val_data:
            out = network.forward(params, sino[None], geom, training=False)
            total += float(np.mean((out.value[0, 0] - label) ** 2))
    return total / len(val_data)


def train(cfg: TrainConfig, data, geom: ProjectorGeometry,
          out_dir=None, val_data=None, params=None, start_epoch: int = 0,
          log=None) -> TrainResult:
    """Train on (sinogram, label) pairs already normalized per series.

    ``params`` and ``start_epoch`` resume a previous run. Checkpoints land
    in out_dir/epoch_NNNN and out_dir/best (validation-best, when val_data
    is given); on divergence the last good parameters are saved to
    out_dir/last before raising.
    """
    if not data:
        raise ValueError("training needs at least one sample")
    if params is None:
        params = network.init_network(cfg.network, seed=cfg.seed)
    plist = params.parameters()
    opt = optim.Adam(plist)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))

    history: list[HistoryRow] = []
    best_val = np.inf
    step = 0
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(data))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            sinos, labels = _stack_batch(data, batch)
            ad.zero_grads(plist)
            out = network.forward(params, sinos, geom, training=True)
            loss = ad.mse_loss(out, labels.astype(out.value.dtype))
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                if out_dir is not None:
                    network.save_params(params, os.path.join(out_dir, "last"))
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch} step {step}")
            ad.backward(loss)
            opt.step(lr)
            history.append(HistoryRow(step, epoch, lr, loss_val))
            step += 1
        if log is not None:
            log(f"epoch {epoch}: lr {lr:.6g} loss {history[-1].loss:.6g}")
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            network.save_params(params, os.path.join(out_dir, f"epoch_{epoch + 1:04d}"))
        if val_data:
            v = validation_loss(params, val_data, geom)
            if v < best_val:
                best_val = v
                if out_dir is not None:
                    network.save_params(params, os.path.join(out_dir, "best"))
    return TrainResult(params, history)


def write_history_csv(history, path) -> None:
    with open(path, "w") as f:
        f.write("step,epoch,lr,loss\n")
        for row in history:
            f.write(f"{row.step},{row.epoch},{float(row.lr)!r},{float(row.loss)!r}\n")
