"""Offline category embeddings with learnable task residuals."""

from __future__ import annotations

import zlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_BUCKETS = 4096


def _trigram_counts(name: str) -> np.ndarray:
    padded = f"##{name.lower()}#"
    v = np.zeros(N_BUCKETS)
    for i in range(len(padded) - 2):
        v[zlib.crc32(padded[i : i + 3].encode()) % N_BUCKETS] += 1.0
    return v


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


def embed_offline(vocab, dim: int = 32, seed: int = 0) -> torch.Tensor:
    """Toy text encoder: hashed character-trigram counts through a fixed random projection.

    Rows are returned as a fixed point of row normalization, so re-normalizing
    them (as ``effective_embeddings`` does) reproduces them bit for bit.
    """
    vocab = list(vocab)
    if not vocab:
        raise ValueError("vocab must be non-empty")
    if len(set(vocab)) != len(vocab):
        dupes = sorted({v for v in vocab if vocab.count(v) > 1})
        raise ValueError(f"duplicate category names: {dupes}")
    proj = np.random.default_rng(seed).standard_normal((N_BUCKETS, dim))
    counts = np.stack([_trigram_counts(v) for v in vocab])
    e = torch.as_tensor(counts @ proj, dtype=torch.float32)
    for _ in range(10):
        nxt = _normalize(e)
        if torch.equal(nxt, e):
            return e
        e = nxt
    raise RuntimeError("row normalization did not reach a fixed point")


class EmbeddingBank(nn.Module):
    """Frozen base embeddings ``base`` plus a zero-initialized learnable ``residual``."""

    def __init__(self, vocab, dim: int = 32, seed: int = 0, base: torch.Tensor | None = None):
        super().__init__()
        self.vocab = list(vocab)
        if base is None:
            base = embed_offline(self.vocab, dim, seed)
        self.base = nn.Parameter(base.clone(), requires_grad=False)
        self.residual = nn.Parameter(torch.zeros_like(base))

    def forward(self, use_residual: bool = True) -> torch.Tensor:
        if not use_residual:
            return _normalize(self.base)
        return effective_embeddings(self)


def effective_embeddings(bank: EmbeddingBank) -> torch.Tensor:
    return _normalize(bank.base + bank.residual)


def freeze_check(before: EmbeddingBank, after: EmbeddingBank) -> bool:
    a, b = before.base.detach(), after.base.detach()
    return a.shape == b.shape and a.dtype == b.dtype and torch.equal(a, b) and bool(
        (a.view(-1).numpy().view(np.uint8) == b.view(-1).numpy().view(np.uint8)).all()
    )
