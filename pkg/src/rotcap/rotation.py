"""Rotation pretext task: lossless 90-degree rotations, pseudo-labels,
dataset expansion, and the pretext train/eval loops.

Label r means a counterclockwise rotation by 90*r degrees, applied with
pure transpose/flip moves so the pixel multiset is untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import derive_seed, new_rng
from .errors import DataError
from .training import Optimizer, TrainConfig, TrainHistory, _checked_loss, epoch_lr

ROTATION_LABELS = (0, 1, 2, 3)
ROTATION_ANGLES = (0, 90, 180, 270)


@dataclass
class RotatedSample:
    image: np.ndarray
    label: int


def rotate(img: np.ndarray, label: int) -> np.ndarray:
    """Rotate a C x H x W tensor counterclockwise by 90 * label degrees."""
    img = np.asarray(img)
    if label not in ROTATION_LABELS:
        raise DataError(f"rotation label must be one of {ROTATION_LABELS}, got {label}")
    if img.ndim != 3:
        raise DataError(f"rotate expects C x H x W, got shape {img.shape}")
    if img.shape[1] != img.shape[2]:
        raise DataError(f"rotate requires a square image, got {img.shape[1]}x{img.shape[2]}")
    return np.ascontiguousarray(np.rot90(img, k=label, axes=(1, 2)))


def rotate_batch(images: np.ndarray, label: int) -> np.ndarray:
    if images.shape[2] != images.shape[3]:
        raise DataError("rotate requires square images")
    return np.ascontiguousarray(np.rot90(images, k=label, axes=(2, 3)))


def expand_with_rotations(img: np.ndarray) -> list[RotatedSample]:
    """All four rotations of one image, labels 0..3 in order."""
    return [RotatedSample(image=rotate(img, r), label=r) for r in ROTATION_LABELS]


def _as_image_array(images) -> np.ndarray:
    arr = np.asarray(images, dtype=nn.DTYPE)
    if arr.ndim != 4:
        arr = np.stack([np.asarray(x, dtype=nn.DTYPE) for x in images])
    if arr.shape[0] == 0:
        raise DataError("empty image set")
    return arr


def pretext_train(encoder, head, images, cfg: TrainConfig,
                  rng: np.random.Generator | None = None) -> TrainHistory:
    """Train encoder+head to predict which rotation each image received.

    In the default "all" expansion mode every epoch sees all four rotations
    of every image, giving ceil(4N / batch) optimizer steps per epoch; the
    "single" mode draws one random rotation per image per epoch.
    """
    cfg.validate()
    base = _as_image_array(images)
    if rng is None:
        rng = new_rng(derive_seed(cfg.seed, "pretext"))
    if cfg.rotation_expansion == "all":
        fixed_x = np.concatenate([rotate_batch(base, r) for r in ROTATION_LABELS])
        fixed_y = np.repeat(np.arange(4, dtype=np.int64), base.shape[0])
    enc_opt = Optimizer(encoder.params(), cfg)
    head_opt = Optimizer(head.params(), cfg)
    history = TrainHistory(columns=("epoch", "loss", "rotation_accuracy"))
    for epoch in range(cfg.epochs):
        if cfg.rotation_expansion == "all":
            x, y = fixed_x, fixed_y
        else:
            labels = rng.integers(0, 4, size=base.shape[0])
            x = np.concatenate([rotate_batch(base[labels == r], r) for r in ROTATION_LABELS])
            y = np.concatenate([np.full(int((labels == r).sum()), r, dtype=np.int64)
                                for r in ROTATION_LABELS])
        perm = rng.permutation(x.shape[0])
        lr = epoch_lr(cfg, epoch)
        losses, correct = [], 0
        for step, start in enumerate(range(0, x.shape[0], cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            logits = head.forward(encoder.forward(x[idx]))
            loss, dlogits = _checked_loss(logits, y[idx], epoch, step)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            encoder.zero_grads()
            head.zero_grads()
            encoder.backward(head.backward(dlogits))
            enc_opt.step(encoder.grads(), lr)
            head_opt.step(head.grads(), lr)
            losses.append(loss)
            history.steps += 1
        history.rows.append((epoch, float(np.mean(losses)), correct / x.shape[0]))
    history.optimizer_arrays = {**enc_opt.state_arrays("encoder"),
                                **head_opt.state_arrays("head")}
    return history


def pretext_eval(encoder, head, images, batch_size: int = 64) -> float:
    """Rotation accuracy over all 4 rotations of every image, eval mode."""
    base = _as_image_array(images)
    x = np.concatenate([rotate_batch(base, r) for r in ROTATION_LABELS])
    y = np.repeat(np.arange(4, dtype=np.int64), base.shape[0])
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        logits = head.forward(encoder.forward(x[start : start + batch_size]))
        correct += int((logits.argmax(axis=1) == y[start : start + batch_size]).sum())
    return correct / x.shape[0]
