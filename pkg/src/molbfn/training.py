"""Generative training loop and model persistence."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from . import rng as rngmod
from .core import ClampMask, generative_loss_step
from .network import Denoiser, NetworkConfig
from .schedule import ScheduleParams
from .tokenizer import PaddingStrategy, Vocabulary, build_vocabulary, pad_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    lr_start: float = 1e-8
    warmup_steps: int = 100
    weight_decay: float = 0.01
    p_uncond: float = 0.2
    padding: str = "global"
    max_len: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None
    reaction_context: bool = False


def warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``lr_start`` to ``lr`` over ``warmup_steps``, then constant."""
    if step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.lr_start + (cfg.lr - cfg.lr_start) * (step + 1) / cfg.warmup_steps


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(net.parameters(), lr=warmup_lr(0, cfg), weight_decay=cfg.weight_decay)


def reaction_context_mask(ids: torch.Tensor, vocab: Vocabulary | None = None) -> ClampMask:
    """Clamp everything up to and including the ``>>`` token of each row."""
    vocab = vocab or build_vocabulary()
    arrow = vocab.id_of[">>"]
    is_arrow = ids == arrow
    if not bool(is_arrow.any(-1).all()):
        raise ValueError("every reaction sequence needs a '>>' token")
    first = is_arrow.float().argmax(-1)
    pos = torch.arange(ids.shape[-1])
    return ClampMask(pos[None, :] <= first[:, None], ids)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0


def train_generative(
    net: Denoiser,
    params: ScheduleParams,
    seqs: Sequence[Sequence[int]],
    cfg: TrainConfig,
    labels: np.ndarray | None = None,
    state: TrainState | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    on_step: Callable[[int, float], None] | None = None,
    on_epoch: Callable[[TrainState, torch.optim.Optimizer], None] | None = None,
) -> list[tuple[int, float]]:
    """Train until ``cfg.epochs``; resumes from ``state``/``optimizer`` when given.

    Shuffling is keyed by ``(seed, epoch)`` and all loss noise by
    ``(seed, step, row)``, so a resumed run reproduces the uninterrupted one.
    """
    state = state or TrainState()
    optimizer = optimizer or make_optimizer(net, cfg)
    strategy = PaddingStrategy(cfg.padding)
    if strategy is PaddingStrategy.GLOBAL and cfg.max_len is None:
        raise ValueError("global padding needs max_len")
    label_t = None if labels is None else torch.as_tensor(np.asarray(labels, dtype=np.float32))
    history = []
    n = len(seqs)
    net.train()
    while state.epoch < cfg.epochs:
        order = np.random.default_rng(rngmod.derive_seed(cfg.seed, "epoch", state.epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = pad_batch([seqs[i] for i in idx], strategy, cfg.max_len)
            ctx = reaction_context_mask(batch.ids) if cfg.reaction_context else None
            for g in optimizer.param_groups:
                g["lr"] = warmup_lr(state.step, cfg)
            loss = generative_loss_step(
                net, batch, params, seed=cfg.seed, step=state.step, p_uncond=cfg.p_uncond,
                labels=None if label_t is None else label_t[idx], context_mask=ctx,
            )
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            optimizer.step()
            history.append((state.step, loss.item()))
            if on_step is not None:
                on_step(state.step, loss.item())
            state.step += 1
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state, optimizer)
    net.eval()
    return history


def save_model(path: str | Path, net: Denoiser, params: ScheduleParams, *, meta: dict | None = None,
               optimizer: torch.optim.Optimizer | None = None, extra_tensors: dict | None = None,
               extra_header: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in net.state_dict().items()}
    header = {
        "kind": "generative",
        "config": net.config.to_dict(),
        "schedule": {"kind": params.kind.value, "beta_one": params.beta_one, "k_categories": params.k_categories,
                     "enforce_beta_cap": params.enforce_beta_cap},
        "vocab_sha256": build_vocabulary().sha256(),
        "meta": meta or {},
    }
    if optimizer is not None:
        opt_t, groups = checkpoint.optimizer_tensors(optimizer)
        tensors.update(opt_t)
        header["optimizer_param_groups"] = groups
    if extra_tensors:
        tensors.update(extra_tensors)
    if extra_header:
        header.update(extra_header)
    checkpoint.save(path, tensors, header)


def load_model(path: str | Path, check_vocab: bool = True):
    """Return ``(net, params, header, tensors)``; raises on vocabulary mismatch."""
    header, tensors = checkpoint.load(path)
    if check_vocab and header.get("vocab_sha256") != build_vocabulary().sha256():
        raise checkpoint.CheckpointError(f"{path}: vocabulary hash mismatch with this tokenizer")
    net = Denoiser(NetworkConfig(**header["config"]))
    net.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    net.eval()
    s = header["schedule"]
    params = ScheduleParams(s["kind"], s["beta_one"], s["k_categories"], s.get("enforce_beta_cap", True))
    return net, params, header, tensors


def config_dict(cfg) -> dict:
    return asdict(cfg)
