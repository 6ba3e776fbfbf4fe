"""Discrete Bayesian flow: flow/sender sampling, Bayesian update, guidance,
clamping, losses and the n-step generative sampler.

Tensors follow the layout ``(B, D, K)``: batch, sequence position, category.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngmod
from . import schedule
from .schedule import ScheduleParams
from .tokenizer import PaddedBatch, Vocabulary


class DegenerateRow(ArithmeticError):
    pass


@dataclass
class ClampMask:
    """Positions whose parameters are overwritten by one-hot reference tokens."""

    fixed: torch.Tensor  # (D,) or (B, D) bool
    reference: torch.Tensor  # same shape, int64 token ids

    def __post_init__(self):
        self.fixed = torch.as_tensor(self.fixed, dtype=torch.bool)
        self.reference = torch.as_tensor(self.reference, dtype=torch.long)
        if self.fixed.shape != self.reference.shape:
            raise ValueError("clamp mask and reference must have the same shape")

    @classmethod
    def prefix(cls, ids: Sequence[int], seq_len: int, pad_id: int = 0) -> "ClampMask":
        """Clamp the first ``len(ids)`` positions to ``ids``."""
        if len(ids) > seq_len:
            raise ValueError(f"scaffold of {len(ids)} tokens does not fit in length {seq_len}")
        ref = torch.full((seq_len,), pad_id, dtype=torch.long)
        ref[: len(ids)] = torch.as_tensor(list(ids), dtype=torch.long)
        fixed = torch.zeros(seq_len, dtype=torch.bool)
        fixed[: len(ids)] = True
        return cls(fixed, ref)


@dataclass
class GenerationConfig:
    seq_len: int
    n_samples: int = 1
    n_steps: int = 100
    guidance_w: float = 0.0
    seed: int = 0
    clamp: ClampMask | None = None
    labels: Sequence[float] | None = None
    batch_size: int = 128

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.n_samples < 1 or self.batch_size < 1:
            raise ValueError("n_samples and batch_size must be >= 1")


def _as_t(t, batch: int, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 0:
        t = t.expand(batch)
    return t.to(dtype)


def _beta_tensor(params: ScheduleParams, t: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(schedule.beta(params, t.double().numpy())), dtype=t.dtype)


def _alpha_tensor(params: ScheduleParams, t: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(schedule.alpha(params, t.double().numpy())), dtype=t.dtype)


def _noise(shape, generators, dtype):
    if generators is None or isinstance(generators, torch.Generator):
        return torch.randn(shape, generator=generators, dtype=dtype)
    if len(generators) != shape[0]:
        raise ValueError("need one generator per batch row")
    return rngmod.randn_rows(shape[1:], generators, dtype)


def flow_sample(x, t, params: ScheduleParams, generators=None, dtype=torch.float32) -> torch.Tensor:
    """Draw theta from the Bayesian flow distribution given clean tokens ``x``.

    ``x`` is ``(B, D)`` (or ``(D,)``) token ids and ``t`` a scalar or ``(B,)``.
    ``generators`` is one ``torch.Generator`` or a list with one per row.
    """
    squeeze = x.dim() == 1
    if squeeze:
        x = x[None]
    k = params.k_categories
    if torch.any(x < 0) or torch.any(x >= k):
        raise ValueError("token id out of range for K")
    b = x.shape[0]
    beta_t = _beta_tensor(params, _as_t(t, b, torch.float64)).to(dtype)[:, None, None]
    e_x = F.one_hot(x, k).to(dtype)
    eps = _noise((b, x.shape[1], k), generators, dtype)
    y = beta_t * (k * e_x - 1) + (beta_t * k).sqrt() * eps
    theta = torch.softmax(y, dim=-1)
    return theta[0] if squeeze else theta


def sender_sample(k_ids, alpha: float, K: int, generators=None, dtype=torch.float32) -> torch.Tensor:
    """Sender observation ``y ~ N(alpha (K e_k - 1), alpha K I)`` for each id."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    k_ids = torch.as_tensor(k_ids, dtype=torch.long)
    e_k = F.one_hot(k_ids, K).to(dtype)
    mean = alpha * (K * e_k - 1)
    if alpha == 0:
        return torch.zeros_like(mean)
    if k_ids.dim() >= 1 and generators is not None and not isinstance(generators, torch.Generator):
        eps = _noise(tuple(mean.shape), generators, dtype)
    else:
        eps = torch.randn(mean.shape, generator=generators, dtype=dtype)
    return mean + math.sqrt(alpha * K) * eps


def bayesian_update(theta: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Posterior ``theta'_k ∝ exp(y_k) theta_k``; zero entries stay zero."""
    log_theta = torch.log(theta)  # log 0 -> -inf
    z = y + log_theta
    if torch.any(torch.isneginf(z).all(dim=-1)) or torch.any(torch.isnan(z)):
        raise DegenerateRow("posterior row has no mass")
    out = torch.softmax(z, dim=-1)
    if torch.any(torch.isnan(out)):
        raise DegenerateRow("posterior row has no mass")
    return out


def guided_probs(psi_cond: torch.Tensor, psi_uncond: torch.Tensor | None, w: float) -> torch.Tensor:
    """``softmax((1 + w) psi_cond - w psi_uncond)``; plain softmax when unguided."""
    if psi_uncond is None:
        return torch.softmax(psi_cond, dim=-1)
    return torch.softmax((1 + w) * psi_cond - w * psi_uncond, dim=-1)


def guided_output(net, theta, t, labels=None, w: float = 0.0, training: bool = False, uncond=None, generator=None):
    """Output distribution, with classifier-free guidance at sampling time."""
    b = theta.shape[0]
    t = _as_t(t, b)
    psi, _ = net(theta, t, labels=labels, uncond=uncond, generator=generator)
    if training or labels is None:
        return torch.softmax(psi, dim=-1)
    psi_null, _ = net(theta, t, labels=None, generator=generator)
    return guided_probs(psi, psi_null, w)


def clamp(theta: torch.Tensor, mask: ClampMask) -> torch.Tensor:
    """Replace fixed positions of ``theta`` by one-hot rows of the reference."""
    d = theta.shape[-2]
    if mask.fixed.shape[-1] != d:
        raise ValueError(f"clamp mask length {mask.fixed.shape[-1]} != sequence length {d}")
    onehot = F.one_hot(mask.reference, theta.shape[-1]).to(theta.dtype)
    return torch.where(mask.fixed[..., None], onehot, theta)


def continuous_loss(e_x, e_hat, t, params: ScheduleParams, weights: torch.Tensor | None = None) -> torch.Tensor:
    """``(K/2) alpha(t) ||e_x - e_hat||^2`` averaged over positions.

    Inputs are ``(D, K)`` or ``(B, D, K)``; ``t`` scalar or ``(B,)``.  Returns a
    scalar for unbatched input and a ``(B,)`` vector otherwise.  ``weights``
    (``(B, D)``, 0/1) restricts the average to selected positions.
    """
    if e_x.shape != e_hat.shape:
        raise ValueError(f"shape mismatch {tuple(e_x.shape)} vs {tuple(e_hat.shape)}")
    squeeze = e_x.dim() == 2
    if squeeze:
        e_x, e_hat = e_x[None], e_hat[None]
        if weights is not None:
            weights = weights[None]
    k = params.k_categories
    a = _alpha_tensor(params, _as_t(t, e_x.shape[0], torch.float64)).to(e_hat.dtype)
    sq = ((e_x - e_hat) ** 2).sum(-1)  # (B, D)
    if weights is None:
        per_seq = sq.mean(-1)
    else:
        weights = weights.to(sq.dtype)
        per_seq = (sq * weights).sum(-1) / weights.sum(-1).clamp_min(1)
    loss = 0.5 * k * a * per_seq
    return loss[0] if squeeze else loss


def reconstruction_loss(x: torch.Tensor, p_o: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true tokens (``inf`` if any is 0)."""
    squeeze = x.dim() == 1
    if squeeze:
        x, p_o = x[None], p_o[None]
    p_true = p_o.gather(-1, x[..., None]).squeeze(-1)
    nll = -torch.log(p_true).mean(-1)
    return nll[0] if squeeze else nll


def generative_loss_step(
    net,
    batch: PaddedBatch,
    params: ScheduleParams,
    *,
    seed: int = 0,
    step: int = 0,
    p_uncond: float = 0.0,
    labels: torch.Tensor | None = None,
    context_mask: ClampMask | None = None,
    row_offset: int = 0,
) -> torch.Tensor:
    """Monte-Carlo continuous-time loss for one batch (differentiable scalar).

    Every sequence draws ``t``, its flow noise and its unconditional coin from
    the substream ``(seed, step, row_offset + row)``; dropout uses
    ``(seed, step, "dropout")``.  Pads are ordinary tokens unless a context
    mask is given, in which case only unclamped positions are scored.
    """
    x = batch.ids
    b = x.shape[0]
    gens = rngmod.row_generators(seed, "loss", step, rows=range(row_offset, row_offset + b))
    t = torch.stack([torch.rand((), generator=g) for g in gens])
    theta = flow_sample(x, t, params, gens)
    weights = None
    if context_mask is not None:
        theta = clamp(theta, context_mask)
        weights = ~context_mask.fixed
        if weights.dim() == 1:
            weights = weights.expand(b, -1)
    uncond = None
    if labels is not None:
        coins = torch.stack([torch.rand((), generator=g) for g in gens])
        uncond = coins < p_uncond
        if bool(uncond.all()):
            labels, uncond = None, None
    dropout_gen = rngmod.generator(seed, "dropout", step)
    p_o = guided_output(net, theta, t, labels=labels, training=True, uncond=uncond, generator=dropout_gen)
    e_x = F.one_hot(x, params.k_categories).to(p_o.dtype)
    return continuous_loss(e_x, p_o, t, params, weights).mean()


@torch.no_grad()
def diagnostic_losses(net, x: torch.Tensor, params: ScheduleParams, n_points: int = 1000, seed: int = 0):
    """Reconstruction loss and L-infinity on an even t-grid.

    One flow sample per (sequence, t).  Returns ``(t, recon, linf)`` numpy arrays,
    each value averaged over the batch.
    """
    ts = np.linspace(0.0, 1.0, n_points)
    recon, linf = [], []
    b = x.shape[0]
    e_x = F.one_hot(x, params.k_categories).float()
    for j, tj in enumerate(ts):
        gens = rngmod.row_generators(seed, "diag", j, rows=b)
        theta = flow_sample(x, float(tj), params, gens)
        p_o = guided_output(net, theta, float(tj))
        recon.append(reconstruction_loss(x, p_o).mean().item())
        linf.append(continuous_loss(e_x, p_o, float(tj), params).mean().item())
    return ts, np.array(recon), np.array(linf)


@torch.no_grad()
def sample(net, cfg: GenerationConfig, params: ScheduleParams, vocab: Vocabulary | None = None) -> torch.Tensor:
    """Run the n-step sampler; returns ``(n_samples, seq_len)`` token ids.

    Sample ``i`` draws from the substream ``(seed, "sample", i)`` so results do
    not depend on how samples are split into batches.
    """
    k = params.k_categories
    net_k = getattr(getattr(net, "config", None), "k_categories", k)
    if net_k != k or (vocab is not None and len(vocab) != k):
        raise ValueError(f"category mismatch: schedule K={k}, network K={net_k}, vocab={len(vocab) if vocab else k}")
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    labels = None if cfg.labels is None else torch.as_tensor(cfg.labels, dtype=torch.float32)
    outputs = []
    try:
        for start in range(0, cfg.n_samples, cfg.batch_size):
            rows = range(start, min(start + cfg.batch_size, cfg.n_samples))
            outputs.append(_sample_batch(net, cfg, params, labels, rows))
    finally:
        if was_training:
            net.train()
    return torch.cat(outputs)


def _sample_batch(net, cfg, params, labels, rows):
    k, d, n, b = params.k_categories, cfg.seq_len, cfg.n_steps, len(rows)
    gens = rngmod.row_generators(cfg.seed, "sample", rows=rows)
    batch_labels = None if labels is None else labels.expand(b, -1)
    theta = torch.full((b, d, k), 1.0 / k)
    for i in range(1, n + 1):
        t = (i - 1) / n
        if cfg.clamp is not None:
            theta = clamp(theta, cfg.clamp)
        p_o = guided_output(net, theta, t, batch_labels, cfg.guidance_w)
        u = rngmod.rand_rows((d, 1), gens, torch.float64)
        cdf = p_o.double().cumsum(-1)
        k_draw = (cdf < u * cdf[..., -1:]).sum(-1).clamp_max(k - 1)
        a = schedule.step_alpha(params, i, n)
        y = sender_sample(k_draw, a, k, gens)
        theta = bayesian_update(theta, y)
    if cfg.clamp is not None:
        theta = clamp(theta, cfg.clamp)
    p_o = guided_output(net, theta, 1.0, batch_labels, cfg.guidance_w)
    if cfg.clamp is not None:
        # clamped rows are one-hot, so their argmax is the reference token
        p_o = clamp(p_o, cfg.clamp)
    return p_o.argmax(-1)
