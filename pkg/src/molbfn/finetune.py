"""Start-token fingerprints and supervised prediction heads."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng as rngmod
from .network import Denoiser, _linear
from .tokenizer import PaddedBatch, build_vocabulary, pad_batch, validate_sequence


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class PredictionHead(nn.Module):
    """MLP ``[hidden, 256, n_outputs]`` with SELU and dropout between the layers.

    Regression heads keep the training-label mean/std and predict in
    standardized units; :meth:`denormalize` maps back.
    """

    def __init__(self, hidden_dim: int, n_outputs: int, task: Task | str = Task.REGRESSION,
                 dropout: float = 0.0, inner_dim: int = 256):
        super().__init__()
        if n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.task = Task(task)
        self.hidden_dim, self.n_outputs, self.dropout, self.inner_dim = hidden_dim, n_outputs, dropout, inner_dim
        self.fc1 = _linear(hidden_dim, inner_dim)
        self.fc2 = _linear(inner_dim, n_outputs)
        self.register_buffer("y_mean", torch.zeros(n_outputs))
        self.register_buffer("y_std", torch.ones(n_outputs))

    def forward(self, fp: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if fp.shape[-1] != self.hidden_dim:
            raise ValueError(f"head expects {self.hidden_dim} features, got {fp.shape[-1]}")
        h = F.selu(self.fc1(fp))
        if self.training and self.dropout > 0:
            if generator is None:
                raise ValueError("dropout is active but no generator was supplied")
            keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.dropout
            h = h * keep / (1.0 - self.dropout)
        return self.fc2(h)

    def denormalize(self, out: torch.Tensor) -> torch.Tensor:
        if self.task is Task.REGRESSION:
            return out * self.y_std + self.y_mean
        return out

    def set_standardization(self, labels: torch.Tensor) -> None:
        if self.task is not Task.REGRESSION:
            return
        self.y_mean.copy_(labels.mean(0))
        std = labels.std(0, unbiased=False) if labels.shape[0] > 1 else torch.ones(self.n_outputs)
        self.y_std.copy_(torch.where(std > 0, std, torch.ones_like(std)))

    def settings(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "n_outputs": self.n_outputs, "task": self.task.value,
                "dropout": self.dropout, "inner_dim": self.inner_dim}


def batch_fingerprints(net: Denoiser, batch: PaddedBatch, generator: torch.Generator | None = None) -> torch.Tensor:
    """Hidden state at the ``<start>`` position for one-hot input at t=1.

    Conditioning is null and pad positions are masked out as attention keys.
    Runs in the network's current train/eval mode with gradients enabled.
    """
    theta = F.one_hot(batch.ids, net.config.k_categories).to(net.embed.weight.dtype)
    _, hidden = net(theta, 1.0, labels=None, attention_mask=batch.pad_mask, generator=generator)
    return hidden[:, 0]


def fingerprint(ids: Sequence[int], net: Denoiser) -> torch.Tensor:
    """Fingerprint of one sequence with dropout off.

    Trailing pads are stripped first; since pads are never attended to this
    equals the masked computation and makes the result independent of pad
    length bit-for-bit.
    """
    vocab = build_vocabulary()
    ids = [int(i) for i in ids]
    validate_sequence(ids, vocab)
    while ids and ids[-1] == vocab.pad_id:
        ids.pop()
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return batch_fingerprints(net, pad_batch([ids]))[0]
    finally:
        net.train(was_training)


@torch.no_grad()
def predict(seqs: Sequence[Sequence[int]], net: Denoiser, head: PredictionHead, batch_size: int = 64) -> torch.Tensor:
    """Predictions in label units, shape ``(N, n_outputs)`` (logits for classification)."""
    if head.hidden_dim != net.config.hidden_dim:
        raise ValueError(f"head width {head.hidden_dim} != network hidden {net.config.hidden_dim}")
    modes = net.training, head.training
    net.eval()
    head.eval()
    out = []
    try:
        for i in range(0, len(seqs), batch_size):
            batch = pad_batch(seqs[i : i + batch_size])
            out.append(head.denormalize(head(batch_fingerprints(net, batch))))
    finally:
        net.train(modes[0])
        head.train(modes[1])
    return torch.cat(out)


def predict_proba(seqs, net, head, batch_size: int = 64) -> torch.Tensor:
    if head.task is not Task.CLASSIFICATION:
        raise ValueError("probabilities are only defined for classification heads")
    return torch.softmax(predict(seqs, net, head, batch_size), dim=-1)


def finetune_loss(outputs: torch.Tensor, labels: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    if head.task is Task.REGRESSION:
        target = (labels - head.y_mean) / head.y_std
        return F.mse_loss(outputs, target.to(outputs.dtype))
    return F.cross_entropy(outputs, labels.reshape(-1).long())


def finetune_step(batch: PaddedBatch, labels: torch.Tensor, net: Denoiser, head: PredictionHead,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Differentiable batch loss: MSE on standardized targets or cross-entropy."""
    labels = torch.as_tensor(labels)
    if torch.isnan(labels.double()).any():
        raise ValueError("NaN labels are not allowed")
    outputs = head(batch_fingerprints(net, batch, generator), generator)
    return finetune_loss(outputs, labels, head)


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    lr_start: float = 1e-7
    warmup_steps: int = 1000
    plateau_patience: int = 20
    plateau_factor: float = 0.2
    min_lr: float = 1e-6
    weight_decay: float = 0.01
    freeze_backbone: bool = False
    seed: int = 0


def validation_metric(pred: torch.Tensor, labels: torch.Tensor, task: Task) -> float:
    """MAE for regression (lower is better), accuracy for classification."""
    if task is Task.REGRESSION:
        return float((pred - labels).abs().mean())
    return float((pred.argmax(-1) == labels.reshape(-1).long()).double().mean())


def run_finetune(net: Denoiser, head: PredictionHead, train_seqs, train_labels, cfg: FinetuneConfig,
                 val_seqs=None, val_labels=None, log=None) -> list[dict]:
    """Full fine-tuning with linear warm-up and decay-on-plateau.

    The vocabulary and schedule are untouched; only network and head weights change.
    """
    train_labels = torch.as_tensor(np.asarray(train_labels, dtype=np.float64), dtype=torch.float32)
    if train_labels.dim() == 1:
        train_labels = train_labels[:, None]
    if torch.isnan(train_labels).any():
        raise ValueError("NaN labels are not allowed")
    head.set_standardization(train_labels)
    if val_seqs is None:
        val_seqs, val_labels = train_seqs, train_labels
    val_labels = torch.as_tensor(np.asarray(val_labels, dtype=np.float64), dtype=torch.float32).reshape(len(val_seqs), -1)

    params = list(head.parameters())
    for p in net.parameters():
        p.requires_grad_(not cfg.freeze_backbone)
    if not cfg.freeze_backbone:
        params += list(net.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr_start if cfg.warmup_steps > 0 else cfg.lr, weight_decay=cfg.weight_decay)
    mode = "min" if head.task is Task.REGRESSION else "max"
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode=mode, factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr)

    n = len(train_seqs)
    step, history = 0, []
    for epoch in range(cfg.epochs):
        net.train(not cfg.freeze_backbone)
        head.train()
        order = np.random.default_rng(rngmod.derive_seed(cfg.seed, "ft-epoch", epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if step < cfg.warmup_steps:
                lr = cfg.lr_start + (cfg.lr - cfg.lr_start) * (step + 1) / cfg.warmup_steps
                for g in opt.param_groups:
                    g["lr"] = lr
            batch = pad_batch([train_seqs[i] for i in idx])
            gen = rngmod.generator(cfg.seed, "ft-dropout", step)
            loss = finetune_step(batch, train_labels[idx], net, head, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        pred = predict(val_seqs, net, head)
        metric = validation_metric(pred, val_labels, head.task)
        if step >= cfg.warmup_steps:
            plateau.step(metric)
        rec = {"epoch": epoch, "train_loss": total / n, "val_metric": metric, "lr": opt.param_groups[0]["lr"]}
        history.append(rec)
        if log is not None:
            log(rec)
    for p in net.parameters():
        p.requires_grad_(True)
    net.eval()
    head.eval()
    return history
