"""Two-layer LSTM explanation generator and the frozen sentence-classifier reward model."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from gvrt.data import BOS, EOS, PAD, RESERVED, pad_sequences
from gvrt.encoders import seeded

log = logging.getLogger(__name__)


class ExplanationGenerator(nn.Module):
    """Layer 1 reads the previous token; layer 2 reads ``[z_t, g_x, c]`` and feeds the word softmax.

    ``blocked_ids`` get a -inf logit so they are never emitted (e.g. PAD and BOS).
    """

    def __init__(self, vocab_size: int, cond_dim: int, num_classes: int, embed_dim: int = 32,
                 hidden: int = 64, blocked_ids: Sequence[int] = (), bos_id: int = BOS, eos_id: int = EOS):
        super().__init__()
        self.vocab_size, self.hidden, self.num_classes = vocab_size, hidden, num_classes
        self.cond_dim = cond_dim
        self.bos_id, self.eos_id = bos_id, eos_id
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.lstm1 = nn.LSTM(embed_dim, hidden, batch_first=True)
        self.lstm2 = nn.LSTM(hidden + cond_dim + num_classes, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)
        mask = torch.zeros(vocab_size)
        mask[list(blocked_ids)] = float("-inf")
        self.register_buffer("logit_mask", mask)

    def word_logprobs(self, h2):
        return F.log_softmax(self.out(h2) + self.logit_mask, dim=-1)

    def conditioning(self, g_x, c):
        if g_x.shape[-1] != self.cond_dim or c.shape[-1] != self.num_classes:
            raise ValueError(f"conditioning dims ({g_x.shape[-1]}, {c.shape[-1]}) != ({self.cond_dim}, {self.num_classes})")
        return torch.cat([g_x, c], dim=-1)


class TeacherForced(NamedTuple):
    step_logprobs: torch.Tensor  # [B, T-1], zero at masked positions
    mask: torch.Tensor  # [B, T-1] bool
    hidden: torch.Tensor  # [B, H] layer-1 hidden after the last token


def _lengths_from_eos(gen, tokens, require_eos=True):
    is_eos = tokens == gen.eos_id
    has = is_eos.any(dim=1)
    if require_eos and not bool(has.all()):
        raise ValueError("token sequence lacks EOS")
    first = torch.where(has, is_eos.float().argmax(dim=1), torch.full_like(has, tokens.shape[1] - 1, dtype=torch.long))
    return first + 1


def teacher_forced_logprobs(gen: ExplanationGenerator, tokens, g_x, c, lengths=None) -> TeacherForced:
    """Score ground-truth next tokens under teacher forcing.

    ``tokens`` is ``[B, T]`` starting with BOS. Without ``lengths`` each row must contain
    EOS and scoring stops there; ``lengths`` counts tokens including BOS.
    """
    if tokens.dim() != 2 or tokens.shape[1] < 2:
        raise ValueError("tokens must be [B, T>=2]")
    if int(tokens.max()) >= gen.vocab_size or int(tokens.min()) < 0:
        raise ValueError(f"token id outside [0, {gen.vocab_size})")
    if not bool((tokens[:, 0] == gen.bos_id).all()):
        raise ValueError("token sequences must start with BOS")
    if lengths is None:
        lengths = _lengths_from_eos(gen, tokens)
    B, T = tokens.shape
    z, _ = gen.lstm1(gen.embed(tokens))
    cond = gen.conditioning(g_x, c)[:, None, :].expand(B, T - 1, -1)
    h2, _ = gen.lstm2(torch.cat([z[:, :-1], cond], dim=-1))
    logp = gen.word_logprobs(h2)
    step = logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)
    mask = torch.arange(T - 1)[None, :] < (lengths[:, None] - 1)
    step = torch.where(mask, step, torch.zeros_like(step))
    hidden = z[torch.arange(B), lengths - 1]
    return TeacherForced(step, mask, hidden)


class Sampled(NamedTuple):
    tokens: torch.Tensor  # [B, 1 + L], BOS-prefixed, PAD after the end
    lengths: torch.Tensor  # tokens per row including BOS
    logprob: torch.Tensor  # [B], sum of log p over emitted tokens


def _rollout(gen, g_x, c, max_len, rng=None, greedy=False) -> Sampled:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cond = gen.conditioning(g_x, c)[:, None, :]
    B = cond.shape[0]
    tok = torch.full((B,), gen.bos_id, dtype=torch.long)
    alive = torch.ones(B, dtype=torch.bool)
    lengths = torch.ones(B, dtype=torch.long)
    logprob = torch.zeros(B, dtype=cond.dtype)
    out = [tok]
    s1 = s2 = None
    for _ in range(max_len):
        z, s1 = gen.lstm1(gen.embed(tok)[:, None], s1)
        h2, s2 = gen.lstm2(torch.cat([z, cond], dim=-1), s2)
        lp = gen.word_logprobs(h2[:, 0])
        if greedy:
            nxt = lp.argmax(dim=-1)
        else:
            nxt = torch.multinomial(lp.detach().exp(), 1, generator=rng).squeeze(-1)
        nxt = torch.where(alive, nxt, torch.full_like(nxt, PAD))
        picked = lp.gather(-1, nxt[:, None]).squeeze(-1)
        logprob = logprob + torch.where(alive, picked, torch.zeros_like(picked))
        lengths = lengths + alive.long()
        out.append(nxt)
        alive = alive & (nxt != gen.eos_id)
        tok = nxt
        if not bool(alive.any()):
            break
    return Sampled(torch.stack(out, dim=1), lengths, logprob)


def sample_sentence(gen, g_x, c, max_len=20, rng: torch.Generator = None) -> Sampled:
    """Ancestral sampling until EOS or ``max_len`` emitted tokens (truncation appends no EOS)."""
    return _rollout(gen, g_x, c, max_len, rng=rng)


@torch.no_grad()
def greedy_decode(gen, g_x, c, max_len=20) -> Sampled:
    """Argmax decoding; ties go to the lowest token id."""
    return _rollout(gen, g_x, c, max_len, greedy=True)


# ---------------------------------------------------------------------------
# Reward model
# ---------------------------------------------------------------------------


class RewardModel(nn.Module):
    """Mean of token embeddings followed by an affine classifier: ``p(class | sentence)``.

    Reserved ids and everything after the first EOS are ignored; a sentence with no
    content tokens gets the uniform distribution.
    """

    def __init__(self, vocab_size: int, num_classes: int, embed_dim: int = 32,
                 ignore_ids: Sequence[int] = tuple(range(len(RESERVED))), eos_id: int = EOS):
        super().__init__()
        self.num_classes, self.eos_id = num_classes, eos_id
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.fc = nn.Linear(embed_dim, num_classes)
        self.register_buffer("ignore", torch.tensor(sorted(ignore_ids), dtype=torch.long))
        self.meta: dict = {}

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.meta["frozen"] = True
        return self.eval()

    def logits_and_count(self, tokens):
        before_eos = torch.cumsum((tokens == self.eos_id).long(), dim=1) == 0
        valid = before_eos & ~torch.isin(tokens, self.ignore)
        w = valid.to(self.embed.weight.dtype)
        count = w.sum(dim=1, keepdim=True)
        mean = (self.embed(tokens) * w[..., None]).sum(dim=1) / count.clamp_min(1.0)
        return self.fc(mean), count.squeeze(1)

    def forward(self, tokens):
        logits, count = self.logits_and_count(tokens)
        probs = F.softmax(logits, dim=-1)
        uniform = torch.full_like(probs, 1.0 / self.num_classes)
        return torch.where((count > 0)[:, None], probs, uniform)


@torch.no_grad()
def reward(rm: RewardModel, tokens, class_ids):
    """``r = p(class_id | sentence)`` with no gradient path."""
    return rm(tokens).gather(-1, class_ids.long()[:, None]).squeeze(-1)


@dataclass
class RewardConfig:
    embed_dim: int = 32
    lr: float = 0.05
    min_epochs: int = 100
    max_epochs: int = 500
    target_accuracy: float = 0.95
    seed: int = 0


def train_reward_model(token_seqs, labels, num_classes: int, vocab_size: int,
                       cfg: RewardConfig = None) -> RewardModel:
    """Full-batch Adam on (sentence, class) pairs until train accuracy reaches the target, then freeze."""
    cfg = cfg or RewardConfig()
    labels = torch.as_tensor(labels, dtype=torch.long)
    if set(range(num_classes)) - set(labels.tolist()):
        raise ValueError("reward model needs at least one text per class")
    tokens = token_seqs if torch.is_tensor(token_seqs) else pad_sequences(token_seqs)
    with seeded(cfg.seed):
        rm = RewardModel(vocab_size, num_classes, cfg.embed_dim)
    opt = torch.optim.Adam(rm.parameters(), lr=cfg.lr)
    acc, epoch = 0.0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        logits, _ = rm.logits_and_count(tokens)
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            acc = (rm(tokens).argmax(-1) == labels).float().mean().item()
        if epoch >= cfg.min_epochs and acc >= cfg.target_accuracy:
            break
    converged = acc >= cfg.target_accuracy
    if not converged:
        warnings.warn(f"reward model reached train accuracy {acc:.3f} < {cfg.target_accuracy}; freezing anyway")
    rm.meta.update(train_accuracy=acc, epochs=epoch, converged=converged)
    log.debug("reward model: acc=%.3f after %d epochs", acc, epoch)
    return rm.freeze()
