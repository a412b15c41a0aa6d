"""Loss, optimizers, and the pretext/downstream training loops.

Adam follows the standard bias-corrected update; "momentum 0.9" from the
hyperparameter protocol maps to beta1.  SGD (with optional momentum) is
kept as the alternative optimizer for the comparison harness.  Training is
bitwise deterministic given (seed, config, dataset) in single-threaded
mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .config import derive_seed, get_float, get_int, new_rng
from .data import TokenizedDataset, build_length_histogram, index_by_length, \
    make_batch, sample_train_indices
from .errors import ConfigError, DataError, TrainingDivergence


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    label_fraction: float = 1.0
    seed: int = 0
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.0    # sgd only
    grad_clip: float = 0.0   # 0 disables global-norm clipping
    lr_decay: float = 1.0    # per-epoch multiplier; 1 disables
    freeze_encoder_epochs: int = 0
    rotation_expansion: str = "all"  # all | single

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.rotation_expansion not in ("all", "single"):
            raise ConfigError(f"rotation_expansion must be 'all' or 'single'")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        return self

    @classmethod
    def from_mapping(cls, cfg: dict[str, str], **overrides) -> "TrainConfig":
        base = cls(
            batch_size=get_int(cfg, "batch_size", cls.batch_size),
            epochs=get_int(cfg, "epochs", cls.epochs),
            learning_rate=get_float(cfg, "learning_rate", cls.learning_rate),
            beta1=get_float(cfg, "beta1", cls.beta1),
            beta2=get_float(cfg, "beta2", cls.beta2),
            epsilon=get_float(cfg, "epsilon", cls.epsilon),
            label_fraction=get_float(cfg, "label_fraction", cls.label_fraction),
            seed=get_int(cfg, "seed", cls.seed),
            optimizer=cfg.get("optimizer", cls.optimizer),
            momentum=get_float(cfg, "momentum", cls.momentum),
            grad_clip=get_float(cfg, "grad_clip", cls.grad_clip),
            lr_decay=get_float(cfg, "lr_decay", cls.lr_decay),
            freeze_encoder_epochs=get_int(cfg, "freeze_encoder_epochs", cls.freeze_encoder_epochs),
            rotation_expansion=cfg.get("rotation_expansion", cls.rotation_expansion),
        )
        return replace(base, **overrides).validate()


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean token-level cross entropy over every B*T position."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim == 3:
        logits = logits.reshape(-1, logits.shape[-1])
        targets = targets.reshape(-1)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise DataError(f"cross_entropy: incompatible shapes {logits.shape} / {targets.shape}")
    loss, _ = nn.softmax_cross_entropy(logits, targets)
    return float(loss)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update, in place on ``params``."""
    if set(params) != set(grads):
        raise DataError("adam_step: parameter and gradient names differ")
    lr = cfg.learning_rate if lr is None else lr
    state.t += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.epsilon
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise DataError(f"adam_step: shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray]


def init_sgd_state(params: dict[str, np.ndarray]) -> SgdState:
    return SgdState(velocity={k: np.zeros_like(p) for k, p in params.items()})


def sgd_step(params, grads, state: SgdState, cfg: TrainConfig, lr: float | None = None):
    lr = cfg.learning_rate if lr is None else lr
    for name in sorted(params):
        vel = state.velocity[name]
        vel *= cfg.momentum
        vel += grads[name]
        params[name] -= lr * vel
    return params, state


class Optimizer:
    """Dispatches to adam/sgd over a fixed named-parameter table."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        if cfg.optimizer == "adam":
            self.state = init_adam_state(params)
        else:
            self.state = init_sgd_state(params)

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        if self.cfg.grad_clip > 0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / total
                grads = {k: g * scale for k, g in grads.items()}
        if self.cfg.optimizer == "adam":
            adam_step(self.params, grads, self.state, self.cfg, lr)
        else:
            sgd_step(self.params, grads, self.state, self.cfg, lr)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if isinstance(self.state, AdamState):
            for k, a in self.state.m.items():
                out[f"{prefix}.adam.m.{k}"] = a
            for k, a in self.state.v.items():
                out[f"{prefix}.adam.v.{k}"] = a
        else:
            for k, a in self.state.velocity.items():
                out[f"{prefix}.sgd.vel.{k}"] = a
        return out


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay != 1.0:
        return cfg.learning_rate * cfg.lr_decay ** epoch
    return cfg.learning_rate


@dataclass
class TrainHistory:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    steps: int = 0
    optimizer_arrays: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _checked_loss(logits2d, targets1d, epoch: int, step: int):
    """Cross entropy that reports in-loop numerical blowups as divergence."""
    if not np.isfinite(logits2d).all():
        raise TrainingDivergence(
            f"non-finite logits at epoch {epoch} step {step}", epoch, step)
    loss, dlogits = nn.softmax_cross_entropy(logits2d, targets1d)
    if not math.isfinite(loss):
        raise TrainingDivergence(
            f"non-finite loss at epoch {epoch} step {step}", epoch, step)
    return loss, dlogits


def train_captioner(encoder, decoder, dataset: TokenizedDataset, vocab, cfg: TrainConfig) -> TrainHistory:
    """End-to-end caption training with length-bucketed batches.

    Per-epoch records hold the mean batch loss and its perplexity.  The
    encoder trains jointly with the decoder after ``freeze_encoder_epochs``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    hist = build_length_histogram(dataset)
    pools = index_by_length(dataset)
    rng = new_rng(derive_seed(cfg.seed, "captioner"))
    enc_opt = Optimizer(encoder.params(), cfg)
    dec_opt = Optimizer(decoder.params(), cfg)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    history = TrainHistory(columns=("epoch", "loss", "perplexity"))
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        train_encoder = epoch >= cfg.freeze_encoder_epochs
        losses = []
        for step in range(steps_per_epoch):
            indices = sample_train_indices(hist, pools, cfg.batch_size, rng)
            batch = make_batch(indices, dataset, dataset.preprocess_cfg, rng)
            features = encoder.forward(batch.images)
            logits = decoder.decode_train(features, batch.captions)
            flat = logits.reshape(-1, logits.shape[-1])
            loss, dflat = _checked_loss(flat, batch.captions.reshape(-1), epoch, step)
            encoder.zero_grads()
            decoder.zero_grads()
            dfeatures = decoder.backward(dflat.reshape(logits.shape))
            if train_encoder:
                encoder.backward(dfeatures)
                enc_opt.step(encoder.grads(), lr)
            dec_opt.step(decoder.grads(), lr)
            losses.append(loss)
            history.steps += 1
        mean = float(np.mean(losses))
        history.rows.append((epoch, mean, float(np.exp(mean))))
    history.optimizer_arrays = {**enc_opt.state_arrays("encoder"),
                                **dec_opt.state_arrays("decoder")}
    return history


def finetune_classifier(encoder, head, images: np.ndarray, labels: np.ndarray,
                        cfg: TrainConfig) -> TrainHistory:
    """Supervised classification fine-tune on a labeled image subset."""
    cfg.validate()
    images = np.asarray(images, dtype=nn.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise DataError("cannot fine-tune on an empty set")
    rng = new_rng(derive_seed(cfg.seed, "finetune"))
    enc_opt = Optimizer(encoder.params(), cfg)
    head_opt = Optimizer(head.params(), cfg)
    history = TrainHistory(columns=("epoch", "loss", "accuracy"))
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        perm = rng.permutation(n)
        losses, correct = [], 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            feats = encoder.forward(images[idx])
            logits = head.forward(feats)
            loss, dlogits = _checked_loss(logits, labels[idx], epoch, step)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            encoder.zero_grads()
            head.zero_grads()
            encoder.backward(head.backward(dlogits))
            enc_opt.step(encoder.grads(), lr)
            head_opt.step(head.grads(), lr)
            losses.append(loss)
            history.steps += 1
        history.rows.append((epoch, float(np.mean(losses)), correct / n))
    return history


def subset_labels(n_or_records, fraction: float, seed: int, classes=None) -> list[int]:
    """Deterministic seeded subset of size round(fraction * N).

    Returns sorted record indices.  When per-record ``classes`` are given
    the subset is stratified: per-class quotas come from largest-remainder
    apportionment so the total is exact.
    """
    n = n_or_records if isinstance(n_or_records, int) else len(n_or_records)
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    target = int(round(fraction * n))
    if target == 0:
        raise DataError(f"label fraction {fraction} of {n} records selects nothing")
    rng = new_rng(derive_seed(seed, "subset"))
    if classes is None:
        picked = rng.permutation(n)[:target]
        return sorted(int(i) for i in picked)
    classes = np.asarray(classes)
    if classes.shape[0] != n:
        raise DataError("subset_labels: one class per record required")
    uniq = sorted(set(classes.tolist()))
    pools = {c: np.flatnonzero(classes == c) for c in uniq}
    raw = {c: fraction * len(pools[c]) for c in uniq}
    quota = {c: int(math.floor(raw[c])) for c in uniq}
    leftovers = sorted(uniq, key=lambda c: (-(raw[c] - quota[c]), uniq.index(c)))
    i = 0
    while sum(quota.values()) < target:
        quota[leftovers[i % len(leftovers)]] += 1
        i += 1
    while sum(quota.values()) > target:
        donors = [c for c in leftovers if quota[c] > 0]
        quota[donors[-1]] -= 1
    picked: list[int] = []
    for c in uniq:
        take = min(quota[c], len(pools[c]))
        picked.extend(int(j) for j in rng.permutation(pools[c])[:take])
    return sorted(picked)
