"""Training loop: AdamW with plateau learning-rate decay and early
stopping, leakage-free dataset splitting, and per-epoch history."""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import LabeledVolume
from .losses import LossConfig, total_loss
from .network import ModelConfig, RefNet, build_model
from .preprocess import augment_flip, prepare_input
from .volumes import UNRESOLVED


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    plateau_factor: float = 0.1  # lr multiplier on plateau (a 90% cut)
    plateau_patience: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 100
    batch_size: int = 8
    split_ratio: float = 40 / 51
    seed: int = 0
    beta: float | None = 0.2  # fusion factor; None trains on OCT alone
    weight_decay: float = 1e-4
    val_fraction: float = 0.1  # held-out slice of the training eyes for monitoring
    bscan_stride: int = 1  # train on every k-th B-scan (desk-scale knob)

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.bscan_stride < 1:
            raise ValueError("bscan_stride must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def learning_rates(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}",
                                 f"{r.lr:.8f}", f"{r.seconds:.3f}"])


class PlateauScheduler:
    """Tracks the monitored loss; decays the learning rate after a plateau
    and raises the stop flag after a longer one.

    step() is called once per epoch with the epoch's monitored loss and
    returns the learning rate to use next.
    """

    def __init__(self, initial_lr: float, factor: float, patience: int, stop_patience: int,
                 min_delta: float = 0.0):
        self.lr = float(initial_lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.stop_patience = int(stop_patience)
        self.min_delta = float(min_delta)
        self.best = float("inf")
        self._plateau_wait = 0
        self._stop_wait = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = float(loss)
            self._plateau_wait = 0
            self._stop_wait = 0
        else:
            self._plateau_wait += 1
            self._stop_wait += 1
            if self._plateau_wait >= self.patience:
                self.lr *= self.factor
                self._plateau_wait = 0
        return self.lr

    @property
    def should_stop(self) -> bool:
        return self._stop_wait >= self.stop_patience


def split_dataset(volume_ids: Sequence[str], ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic leakage-free split: ids are shuffled by seed and cut at
    round(ratio * n). Pass eye ids so repeat scans of an eye stay together."""
    ids = list(volume_ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be distinct")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(ratio * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    return shuffled[:n_train], shuffled[n_train:]


def split_volumes_by_eye(
    volumes: Sequence[LabeledVolume], ratio: float, seed: int
) -> tuple[list[LabeledVolume], list[LabeledVolume]]:
    """Split whole eyes (all repeats of an eye land on the same side)."""
    eyes = sorted({v.eye_id for v in volumes})
    train_eyes, test_eyes = split_dataset(eyes, ratio, seed)
    train_set = set(train_eyes)
    return (
        [v for v in volumes if v.eye_id in train_set],
        [v for v in volumes if v.eye_id not in train_set],
    )


def _one_hot(codes: np.ndarray) -> np.ndarray:
    out = np.zeros(codes.shape + (3,), dtype=np.float32)
    for cls in range(3):
        out[..., cls] = codes == cls
    return out


def _prepare_samples(
    volumes: Sequence[LabeledVolume], beta: float | None, stride: int, augment: bool
) -> list[tuple[np.ndarray, np.ndarray]]:
    samples = []
    for vol in volumes:
        prepared = prepare_input(vol.oct, vol.octa, beta)
        for i in range(0, prepared.shape[0], stride):
            image = prepared.voxels[i]
            labels = vol.labels.codes[i]
            samples.append((image, labels))
            if augment:
                samples.append(augment_flip(image, labels))
    return samples


def _epoch_loss(model: RefNet, samples, batch_size: int, loss_config: LossConfig,
                optimizer=None, order=None) -> float:
    training = optimizer is not None
    model.train(training)
    indices = order if order is not None else np.arange(len(samples))
    total = 0.0
    seen = 0
    with torch.set_grad_enabled(training):
        for start in range(0, len(indices), batch_size):
            batch_idx = indices[start: start + batch_size]
            images = np.stack([samples[i][0] for i in batch_idx])
            codes = np.stack([samples[i][1] for i in batch_idx])
            x = torch.from_numpy(images).unsqueeze(1)
            y = torch.from_numpy(_one_hot(codes))
            yhat = model(x).permute(0, 2, 3, 1)
            loss = total_loss(y, yhat, loss_config)
            if training:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            total += float(loss.detach()) * len(batch_idx)
            seen += len(batch_idx)
    model.eval()
    return total / max(seen, 1)


def train(
    train_volumes: Sequence[LabeledVolume],
    config: TrainConfig,
    model_config: ModelConfig,
    loss_config: LossConfig | None = None,
) -> tuple[RefNet, TrainHistory]:
    """Fit a RefNet on labeled volumes and return the best checkpoint.

    Inputs are smoothed, normalized, fused at config.beta (or left as OCT
    when beta is None), and flip-augmented. The monitored loss comes from a
    held-out validation slice of the training eyes; it drives the plateau
    decay, the early stop, and the best-checkpoint selection.
    """
    volumes = list(train_volumes)
    if not volumes:
        raise ValueError("cannot train on an empty dataset")
    for vol in volumes:
        if np.any(vol.labels.codes == UNRESOLVED):
            raise ValueError(
                f"volume {vol.volume_id} has unresolved labels; resolve before training"
            )
    loss_config = loss_config or LossConfig()

    n_val = int(round(config.val_fraction * len(volumes)))
    if len(volumes) >= 2 and config.val_fraction > 0:
        n_val = max(n_val, 1)
    n_val = min(n_val, len(volumes) - 1)
    order = np.random.default_rng([config.seed, 11]).permutation(len(volumes))
    val_volumes = [volumes[i] for i in order[:n_val]]
    fit_volumes = [volumes[i] for i in order[n_val:]]

    train_samples = _prepare_samples(fit_volumes, config.beta, config.bscan_stride, augment=True)
    val_samples = _prepare_samples(val_volumes, config.beta, config.bscan_stride, augment=False)

    torch.manual_seed(config.seed)
    model = build_model(model_config)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.initial_lr, weight_decay=config.weight_decay
    )
    scheduler = PlateauScheduler(
        config.initial_lr, config.plateau_factor, config.plateau_patience,
        config.early_stop_patience,
    )
    history = TrainHistory()
    best_loss = float("inf")
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr_in_effect = scheduler.lr
        shuffle = np.random.default_rng([config.seed, 13, epoch]).permutation(len(train_samples))
        train_loss = _epoch_loss(
            model, train_samples, config.batch_size, loss_config, optimizer, shuffle
        )
        if val_samples:
            val_loss = _epoch_loss(model, val_samples, config.batch_size, loss_config)
        else:
            val_loss = train_loss
        history.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            lr=lr_in_effect, seconds=time.perf_counter() - t0,
        ))
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
        new_lr = scheduler.step(val_loss)
        for group in optimizer.param_groups:
            group["lr"] = new_lr
        if scheduler.should_stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, history
