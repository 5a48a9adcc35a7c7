"""Visual encoder with classifier head, joint-space projection heads and pivot text encoders."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gvrt.data import tokenize


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class VisualEncoder(nn.Module):
    """Three conv blocks + global average pool producing ``x`` and a linear classifier head."""

    def __init__(self, num_classes: int, feature_dim: int = 128, in_channels: int = 3,
                 width: int = 16, dropout: float = 0.0):
        super().__init__()
        c1, c2 = width, width * 2
        self.backbone = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c2, feature_dim, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(feature_dim, num_classes)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ValueError(f"expected images [B, {self.in_channels}, H, W], got {tuple(images.shape)}")
        x = self.backbone(images)
        logits = self.classifier(self.dropout(x))
        return x, logits


def visual_forward(encoder: VisualEncoder, images):
    """Return ``(x, y_hat)`` with ``y_hat`` the softmax class distribution."""
    x, logits = encoder(images)
    return x, F.softmax(logits, dim=-1)


class ProjectionHeads(nn.Module):
    """Affine ``g_proj`` (vision), ``f_proj`` (text) into the joint space and a projection classifier."""

    def __init__(self, visual_dim: int, text_dim: int, joint_dim: int, num_classes: int):
        super().__init__()
        self.g_proj = nn.Linear(visual_dim, joint_dim)
        self.f_proj = nn.Linear(text_dim, joint_dim)
        self.classifier = nn.Linear(joint_dim, num_classes)
        self.joint_dim = joint_dim


def project_and_classify(heads: ProjectionHeads, x):
    if x.shape[-1] != heads.g_proj.in_features:
        raise ValueError(f"feature dim {x.shape[-1]} != projection input {heads.g_proj.in_features}")
    g_x = heads.g_proj(x)
    return g_x, F.softmax(heads.classifier(g_x), dim=-1)


# ---------------------------------------------------------------------------
# Pivot text encoders
# ---------------------------------------------------------------------------


def _bucket(gram: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


class HashedBowEncoder(nn.Module):
    """Frozen sentence encoder: hashed unigram+bigram counts, fixed Gaussian projection, l2-normalised.

    Stands in for a pre-trained sentence encoder; it has no trainable parameters and
    its projection is a buffer seeded independently of the global RNG.
    """

    def __init__(self, dim: int = 256, n_buckets: int = 2048, seed: int = 1234):
        super().__init__()
        self.dim, self.n_buckets, self.seed = dim, n_buckets, seed
        g = np.random.default_rng(seed)
        proj = g.standard_normal((n_buckets, dim)) / np.sqrt(dim)
        self.register_buffer("projection", torch.tensor(proj, dtype=torch.float32))

    def counts(self, sentence: str) -> np.ndarray:
        toks = tokenize(sentence)
        if not toks:
            raise ValueError("cannot embed an empty sentence")
        grams = toks + [a + " " + b for a, b in zip(toks, toks[1:])]
        c = np.zeros(self.n_buckets)
        for gram in grams:
            c[_bucket(gram, self.n_buckets)] += 1
        return c

    @torch.no_grad()
    def forward(self, sentences: Sequence[str]):
        c = torch.tensor(np.stack([self.counts(s) for s in sentences]), dtype=self.projection.dtype)
        v = c @ self.projection
        return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


PTE_ADAPTERS: Dict[str, Callable[..., nn.Module]] = {"hashed-bow": HashedBowEncoder}


def register_pte(name: str, factory: Callable[..., nn.Module]):
    """Register a frozen sentence-encoder adapter (``sentences -> [B, D]`` tensor)."""
    PTE_ADAPTERS[name] = factory


def load_pte(name: str = "hashed-bow", **kwargs) -> nn.Module:
    if name not in PTE_ADAPTERS:
        raise KeyError(f"unknown PTE adapter {name!r}; available: {sorted(PTE_ADAPTERS)}")
    pte = PTE_ADAPTERS[name](**kwargs)
    for p in pte.parameters():
        p.requires_grad_(False)
    return pte.eval()


class PTECache:
    """Memoises per-sentence pivot vectors; valid because the encoder is frozen."""

    def __init__(self, pte):
        self.pte = pte
        self._cache: Dict[str, torch.Tensor] = {}

    def __call__(self, sentences: List[str]):
        missing = [s for s in dict.fromkeys(sentences) if s not in self._cache]
        if missing:
            for s, v in zip(missing, self.pte(missing)):
                self._cache[s] = v
        return torch.stack([self._cache[s] for s in sentences])


def pte_embed(pte, sentences: Sequence[str]):
    if any(not s.strip() for s in sentences):
        raise ValueError("cannot embed an empty sentence")
    with torch.no_grad():
        return pte(list(sentences))


def ste_embed(generator, tokens, g_x, category, detach: bool = True):
    """Pivot from the explanation generator: final layer-1 hidden state of a teacher-forced pass."""
    from gvrt.explainer import teacher_forced_logprobs

    out = teacher_forced_logprobs(generator, tokens, g_x, category)
    return out.hidden.detach() if detach else out.hidden
