"""Losses, optimizer, learning-rate schedule, and the epoch loop.

Recognition uses frame-mean cross entropy; anticipation uses frame-mean
smooth L1. Optimization is AdamW with decoupled weight decay applied before
the moment update, global-norm gradient clipping, and a step schedule that
halves the learning rate at fixed epoch intervals. One optimizer step
processes one whole video sequence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as dt
from . import numkit as nk
from .errors import DomainError, ShapeError, TrainingError
from .numkit import Tensor


@dataclass
class LossWeights:
    """Relative weights of the recognition and anticipation losses."""

    lambda_r: float = 0.5
    lambda_a: float = 1.0

    def __post_init__(self):
        if self.lambda_r < 0 or self.lambda_a < 0:
            raise DomainError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int
    seed: int
    lr0: float = 2e-4
    halve_every: int = 50
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    n_max: int = 2048
    horizon: int = 300
    anticipation_enabled: bool = True
    lambda_r: float = 0.5
    lambda_a: float = 1.0
    resample_each_epoch: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise DomainError(f"lr0 must be positive, got {self.lr0}")
        if self.halve_every < 1:
            raise DomainError(f"halve_every must be >= 1, got {self.halve_every}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if self.horizon < 1 or self.n_max < 1:
            raise DomainError("horizon and n_max must be >= 1")
        LossWeights(self.lambda_r, self.lambda_a)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_r, self.lambda_a)


def loss_recognition(logits, labels) -> Tensor:
    """Frame-mean cross entropy of per-frame phase logits.

    Computed as mean(logsumexp(logits_t) - logits_t[label_t]) with the
    row maximum folded in as a constant shift, so no explicit log of a
    probability ever underflows.
    """
    logits = nk.as_tensor(logits)
    labels = np.asarray(labels)
    t_len, n_phases = logits.shape
    if labels.shape != (t_len,):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_phases):
        raise DomainError(f"labels must lie in [0, {n_phases})")
    m = logits.data.max(axis=1, keepdims=True)
    z = nk.exp(logits - Tensor(m))
    lse = nk.log(nk.tsum(z, axis=1, keepdims=True)) + Tensor(m)
    onehot = np.zeros((t_len, n_phases))
    onehot[np.arange(t_len), labels] = 1.0
    picked = nk.tsum(logits * Tensor(onehot), axis=1, keepdims=True)
    return nk.tmean(lse - picked)


def loss_anticipation(pred, target) -> Tensor:
    """Frame-mean smooth L1: 0.5 d^2 inside |d| < 1, |d| - 0.5 outside."""
    pred = nk.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    d = pred - Tensor(target)
    a = nk.absolute(d)
    quad = 0.5 * d * d
    lin = a - 0.5
    return nk.tmean(nk.select(a.data < 1.0, quad, lin))


def combined_loss(loss_r, loss_a, w: LossWeights,
                  anticipation_enabled: bool = True) -> Tensor:
    """lambda_r * recognition + lambda_a * anticipation (or recognition only)."""
    loss_r = nk.as_tensor(loss_r)
    if not anticipation_enabled:
        return loss_r * w.lambda_r
    return loss_r * w.lambda_r + nk.as_tensor(loss_a) * w.lambda_a


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr0 halved once per halve_every elapsed epochs."""
    if epoch < 0:
        raise DomainError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


def init_adamw_state(params: list[Tensor]) -> dict:
    return {
        "step": 0,
        "m": {p.uid: np.zeros(p.shape) for p in params},
        "v": {p.uid: np.zeros(p.shape) for p in params},
    }


def adamw_step(params: list[Tensor], grads: dict, state: dict, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One AdamW update in place: decoupled decay, then bias-corrected moments."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for p in params:
        g = grads[p]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {p.name or p.uid}")
        p.data = p.data * (1.0 - lr * weight_decay)
        m = state["m"][p.uid] = b1 * state["m"][p.uid] + (1.0 - b1) * g
        v = state["v"][p.uid] = b2 * state["v"][p.uid] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def _video_batch(feats: dt.FeatureSequence, phases: dt.PhaseSequence,
                 cfg: TrainConfig, rng: np.random.Generator | None):
    """Sampled inputs, labels, and on-original-timeline anticipation targets."""
    labels = phases.labels
    targets = dt.make_anticipation_targets(labels, cfg.horizon).values
    if labels.size > cfg.n_max:
        picked = dt.sample_sequence(labels, cfg.n_max, rng=rng).indices
        return feats.features[picked], labels[picked], targets[picked]
    return feats.features, labels, targets


def train_epoch(model, dataset, cfg: TrainConfig, epoch: int, state: dict,
                rng: np.random.Generator) -> dict:
    """One pass over the dataset, one optimizer step per video."""
    if not dataset:
        raise DomainError("dataset is empty")
    lr = lr_at(epoch, cfg)
    weights = cfg.weights()
    params = model.parameters()
    sums = {"loss_r": 0.0, "loss_a": 0.0, "loss": 0.0, "grad_norm": 0.0}
    for feats, phases in dataset:
        x, labels, targets = _video_batch(
            feats, phases, cfg, rng if cfg.resample_each_epoch else None)

        def step():
            out = model.run(x, training=True, rng=rng)
            if not (np.all(np.isfinite(out.recognition_logits.data))
                    and np.all(np.isfinite(out.anticipation.data))):
                raise TrainingError(f"non-finite loss on video {feats.video_id}")
            lr_term = loss_recognition(out.recognition_logits, labels)
            la_term = loss_anticipation(out.anticipation, targets)
            return lr_term, la_term, combined_loss(
                lr_term, la_term, weights, cfg.anticipation_enabled)

        with nk.recording() as trace:
            lr_term, la_term, total = step()
        trace.output = total
        if not np.isfinite(total.data):
            raise TrainingError(f"non-finite loss on video {feats.video_id}")
        grads = nk.backward(trace, Tensor(1.0), params=params)
        sums["grad_norm"] += clip_global_norm(grads, cfg.clip_norm)
        adamw_step(params, grads, state, lr, betas=(cfg.beta1, cfg.beta2),
                   eps=cfg.eps, weight_decay=cfg.weight_decay)
        sums["loss_r"] += float(lr_term.data)
        sums["loss_a"] += float(la_term.data)
        sums["loss"] += float(total.data)
    n = len(dataset)
    return {
        "epoch": epoch,
        "loss_r": sums["loss_r"] / n,
        "loss_a": sums["loss_a"] / n,
        "loss": sums["loss"] / n,
        "lr": lr,
        "grad_norm": sums["grad_norm"] / n,
    }


def run_training(model, dataset, cfg: TrainConfig, out_dir) -> list[dict]:
    """Train for cfg.epochs, writing config, per-epoch log, and a checkpoint.

    The run directory receives config.json (model and training settings),
    metrics.csv (epoch, loss_r, loss_a, loss, lr), and model.srmb. Output
    bytes depend only on inputs and seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"model": asdict(model.config), "train": asdict(cfg)}
    (out_dir / "config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = init_adamw_state(model.parameters())
    history = []
    lines = ["epoch,loss_r,loss_a,loss,lr"]
    for epoch in range(cfg.epochs):
        report = train_epoch(model, dataset, cfg, epoch, state, rng)
        history.append(report)
        lines.append(f"{epoch},{report['loss_r']!r},{report['loss_a']!r},"
                     f"{report['loss']!r},{report['lr']!r}")
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    model.save(out_dir / "model.srmb")
    return history
