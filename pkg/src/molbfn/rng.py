"""Seed derivation for reproducible, batch-independent random streams."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 63-bit seed for the substream named by ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g


def row_generators(seed: int, *keys, rows) -> list[torch.Generator]:
    """One generator per row index in ``rows`` (an int count or an iterable of indices)."""
    idx = range(rows) if isinstance(rows, int) else rows
    return [generator(seed, *keys, i) for i in idx]


def rand_rows(shape, generators, dtype=torch.float32) -> torch.Tensor:
    """Uniform draws of shape ``(len(generators), *shape)``, one substream per row."""
    return torch.stack([torch.rand(shape, generator=g, dtype=dtype) for g in generators])


def randn_rows(shape, generators, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])
