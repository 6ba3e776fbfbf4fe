"""DiT-style bidirectional transformer mapping (theta, t, labels) to logits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class NetworkConfig:
    k_categories: int = 246
    n_layers: int = 4
    n_heads: int = 4
    hidden_dim: int = 128
    dropout: float = 0.01
    time_mlp_hidden: int = 256
    label_dim: int = 0
    ffn_mult: int = 4
    # None -> sqrt(2 * head_dim)
    temperature: float | None = None
    xpos_scale_base: float = 512.0
    xpos_gamma: float = 0.4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.k_categories < 2 or self.n_layers < 1 or self.label_dim < 0:
            raise ValueError("invalid network configuration")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def attention_temperature(self) -> float:
        return self.temperature if self.temperature is not None else math.sqrt(2 * self.head_dim)

    @classmethod
    def paper_scale(cls, k_categories: int = 246, label_dim: int = 0) -> "NetworkConfig":
        return cls(k_categories=k_categories, n_layers=12, n_heads=8, hidden_dim=512, label_dim=label_dim)

    def to_dict(self) -> dict:
        return asdict(self)


def _linear(n_in: int, n_out: int, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, bias=bias)
    nn.init.normal_(lin.weight, std=n_in**-0.5)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


class XPos(nn.Module):
    """Rotary position encoding with the xPos exponential decay.

    Query at position ``n`` and key at ``m`` are rotated by their absolute
    angles and scaled by ``zeta**(n/base)`` and ``zeta**(-m/base)``, so their
    dot product depends on positions only through ``n - m``.  Positions start
    at 0 for every sequence; appending tokens never changes earlier encodings.
    """

    def __init__(self, head_dim: int, scale_base: float = 512.0, gamma: float = 0.4, rope_base: float = 10000.0):
        super().__init__()
        half = head_dim // 2
        idx = torch.arange(half, dtype=torch.float64)
        self.register_buffer("inv_freq", rope_base ** (-2.0 * idx / head_dim), persistent=False)
        self.register_buffer("zeta", (2.0 * idx / head_dim + gamma) / (1.0 + gamma), persistent=False)
        self.scale_base = scale_base

    def tables(self, length: int, dtype: torch.dtype):
        pos = torch.arange(length, dtype=torch.float64)
        angles = pos[:, None] * self.inv_freq[None, :]
        scale = self.zeta[None, :] ** (pos[:, None] / self.scale_base)
        cos = torch.cat([angles.cos()] * 2, dim=-1).to(dtype)
        sin = torch.cat([angles.sin()] * 2, dim=-1).to(dtype)
        scale = torch.cat([scale] * 2, dim=-1).to(dtype)
        return cos, sin, scale

    @staticmethod
    def _rotate_half(x):
        a, b = x.chunk(2, dim=-1)
        return torch.cat([-b, a], dim=-1)

    def forward(self, q: torch.Tensor, k: torch.Tensor):
        # q, k: (B, H, D, head_dim)
        cos, sin, scale = self.tables(q.shape[-2], q.dtype)
        q = (q * cos + self._rotate_half(q) * sin) * scale
        k = (k * cos + self._rotate_half(k) * sin) / scale
        return q, k


class SelfAttention(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.temperature = cfg.attention_temperature
        self.qkv = _linear(cfg.hidden_dim, 3 * cfg.hidden_dim)
        self.out = _linear(cfg.hidden_dim, cfg.hidden_dim)
        self.pos = XPos(cfg.head_dim, cfg.xpos_scale_base, cfg.xpos_gamma, cfg.rope_base)

    def scores(self, x: torch.Tensor, attention_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Pre-softmax attention logits, shape (B, heads, D, D)."""
        q, k, _ = self._qkv(x)
        return self._scores(q, k, attention_mask)

    def _qkv(self, x):
        b, d, h = x.shape
        qkv = self.qkv(x).view(b, d, 3, self.n_heads, h // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k = self.pos(qkv[0], qkv[1])
        return q, k, qkv[2]

    def _scores(self, q, k, attention_mask):
        s = q @ k.transpose(-1, -2) / self.temperature
        if attention_mask is not None:
            s = s.masked_fill(~attention_mask[:, None, None, :], float("-inf"))
        return s

    def forward(self, x: torch.Tensor, attention_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, d, h = x.shape
        q, k, v = self._qkv(x)
        attn = torch.softmax(self._scores(q, k, attention_mask), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, d, h)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.fc1 = _linear(cfg.hidden_dim, cfg.ffn_mult * cfg.hidden_dim)
        self.fc2 = _linear(cfg.ffn_mult * cfg.hidden_dim, cfg.hidden_dim)
        self.p = cfg.dropout

    def forward(self, x, generator: torch.Generator | None = None):
        h = F.selu(self.fc1(x))
        if self.training and self.p > 0:
            if generator is None:
                raise ValueError("dropout is active but no generator was supplied")
            keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.p
            h = h * keep / (1.0 - self.p)
        return self.fc2(h)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class Block(nn.Module):
    """Pre-norm transformer block with adaLN scale/shift/gate modulation."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(cfg)
        self.ffn = FeedForward(cfg)
        self.modulation = _linear(h, 6 * h)
        with torch.no_grad():
            # chunks: shift1, scale1, gate1, shift2, scale2, gate2
            self.modulation.weight[2 * h : 3 * h].zero_()
            self.modulation.weight[5 * h :].zero_()

    def forward(self, x, c, attention_mask=None, generator=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(c).chunk(6, dim=-1)
        x = x + gate1[:, None, :] * self.attn(_modulate(self.norm1(x), shift1, scale1), attention_mask)
        x = x + gate2[:, None, :] * self.ffn(_modulate(self.norm2(x), shift2, scale2), generator)
        return x


class Denoiser(nn.Module):
    """Maps per-position categorical parameters to per-position logits.

    ``forward(theta, t, labels=None, uncond=None, attention_mask=None,
    generator=None)`` returns ``(logits, hidden)`` where ``theta`` is
    ``(B, D, K)``, ``t`` a scalar or ``(B,)`` tensor, ``labels`` ``(B,
    label_dim)``, ``uncond`` an optional ``(B,)`` bool marking rows whose
    conditioning is replaced by the null vector, and ``attention_mask`` a
    ``(B, D)`` bool with False at positions excluded as attention keys.
    ``hidden`` is the residual stream after the last block.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.embed = _linear(config.k_categories, h)
        self.time_mlp = nn.Sequential(_linear(1, config.time_mlp_hidden), nn.SELU(), _linear(config.time_mlp_hidden, h))
        self.label_mlp = (
            nn.Sequential(_linear(config.label_dim, h), nn.SELU(), _linear(h, h)) if config.label_dim > 0 else None
        )
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.final_modulation = _linear(h, 2 * h)
        self.head = _linear(h, config.k_categories)

    def time_embed(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.embed.weight.dtype)
        if t.dim() == 0:
            t = t[None]
        if torch.any(t < 0) or torch.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
        return self.time_mlp(t[:, None])

    def condition_embed(self, labels: torch.Tensor | None, batch: int = 1, uncond: torch.Tensor | None = None) -> torch.Tensor:
        """Label embedding; the null conditioning is exactly the zero vector."""
        h = self.config.hidden_dim
        dtype = self.embed.weight.dtype
        if labels is None:
            return torch.zeros(batch, h, dtype=dtype)
        if self.label_mlp is None:
            raise ValueError("this network was built without a label input (label_dim=0)")
        labels = torch.as_tensor(labels, dtype=dtype)
        if labels.dim() == 1:
            labels = labels[None]
        if labels.shape[-1] != self.config.label_dim:
            raise ValueError(f"expected {self.config.label_dim} label features, got {labels.shape[-1]}")
        emb = self.label_mlp(labels)
        if uncond is not None:
            emb = torch.where(uncond[:, None], torch.zeros_like(emb), emb)
        return emb

    def conditioning(self, t, labels=None, uncond=None, batch: int = 1) -> torch.Tensor:
        temb = self.time_embed(t)
        if temb.shape[0] == 1 and batch > 1:
            temb = temb.expand(batch, -1)
        return temb + self.condition_embed(labels, temb.shape[0], uncond)

    def forward(self, theta, t, labels=None, uncond=None, attention_mask=None, generator=None):
        if theta.dim() != 3 or theta.shape[-1] != self.config.k_categories:
            raise ValueError(f"expected theta of shape (B, D, {self.config.k_categories}), got {tuple(theta.shape)}")
        b, d, _ = theta.shape
        if attention_mask is not None and attention_mask.shape != (b, d):
            raise ValueError(f"attention_mask shape {tuple(attention_mask.shape)} != {(b, d)}")
        c = self.conditioning(t, labels, uncond, batch=b)
        c = F.selu(c)
        x = self.embed(theta.to(self.embed.weight.dtype))
        for block in self.blocks:
            x = block(x, c, attention_mask, generator)
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        logits = self.head(_modulate(self.final_norm(x), shift, scale))
        return logits, x

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
