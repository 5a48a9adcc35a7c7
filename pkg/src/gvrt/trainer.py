"""Training loop for the text-grounded classifier and its ERM reduction."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gvrt.data import BOS, PAD, build_vocabulary, encode_text, make_batches, pad_sequences
from gvrt.encoders import (PTECache, ProjectionHeads, VisualEncoder, load_pte, project_and_classify,
                           seeded)
from gvrt.errors import ConfigError, NonFiniteLossError
from gvrt.evalkit.accuracy import evaluate_keys
from gvrt.explainer import (ExplanationGenerator, RewardConfig, reward, sample_sentence,
                            teacher_forced_logprobs, train_reward_model)
from gvrt.objectives import EmaBaseline, LossBreakdown, align_loss, expl_loss, floor_hits, task_loss, total_loss

log = logging.getLogger(__name__)

ENCODER_MODES = ("pte", "ste", "erm")
TEXT_MODES = ("per-image", "per-class")


@dataclass
class TrainConfig:
    lambda_align: float = 1.0
    lambda_expl: float = 1.0
    steps: int = 5000
    batch_size: int = 32  # per source domain
    lr_backbone: float = 5e-5
    lr_new: float = 5e-4
    weight_decay: float = 0.0
    dropout: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables max-norm clipping
    seed: int = 0
    encoder_mode: str = "pte"
    text_mode: str = "per-image"
    category_source: str = "pred"
    ste_source: str = "gold"
    ste_detach: bool = True
    align_use_ce: bool = True
    reinforce_baseline: str = "none"
    baseline_decay: float = 0.9
    eval_interval: int = 100
    max_len: int = 20
    feature_dim: int = 128
    conv_width: int = 16
    joint_dim: int = 64
    text_dim: int = 256
    pte: str = "hashed-bow"
    embed_dim: int = 32
    hidden: int = 64
    min_freq: int = 1
    reward_epochs: int = 500
    mode: str = "multi-source"
    targets: List[str] = field(default_factory=lambda: ["0"])
    val_fraction: float = 0.2
    test_fraction: float = 0.3

    def validate(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1 or self.max_len < 1:
            raise ConfigError("steps, batch_size, eval_interval and max_len must be >= 1")
        if self.lr_backbone <= 0 or self.lr_new <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lambda_align < 0 or self.lambda_expl < 0:
            raise ConfigError("lambda_align and lambda_expl must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        choices = {
            "encoder_mode": ENCODER_MODES, "text_mode": TEXT_MODES,
            "category_source": ("pred", "gold"), "ste_source": ("gold", "sampled"),
            "reinforce_baseline": ("none", "ema"), "mode": ("multi-source", "single-source"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


# Parameter groups: the conv backbone trains at lr_backbone; everything introduced on top
# (classifier head, projections, projection classifier, generator) at lr_new.
NEW_PARAM_PREFIXES = ("encoder.classifier.", "heads.", "generator.")


class GroundedModel(nn.Module):
    def __init__(self, encoder, heads=None, generator=None, pte=None, reward_model=None):
        super().__init__()
        self.encoder = encoder
        self.heads = heads
        self.generator = generator
        self.pte = pte
        self.reward_model = reward_model

    def param_groups(self, cfg: TrainConfig):
        backbone, new = [], []
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("encoder.backbone."):
                backbone.append(p)
            elif name.startswith(NEW_PARAM_PREFIXES):
                new.append(p)
        return [{"params": backbone, "lr": cfg.lr_backbone, "name": "backbone"},
                {"params": new, "lr": cfg.lr_new, "name": "new"}]


def build_model(cfg: TrainConfig, num_classes, image_shape, vocab_size=None, reward_model=None) -> GroundedModel:
    """Each submodule is initialised under its own seed so building extras never shifts the backbone init."""
    with seeded(cfg.seed):
        encoder = VisualEncoder(num_classes, cfg.feature_dim, image_shape[0], cfg.conv_width, cfg.dropout)
    if cfg.encoder_mode == "erm":
        return GroundedModel(encoder)
    pte = load_pte(cfg.pte, dim=cfg.text_dim) if cfg.encoder_mode == "pte" else None
    text_dim = cfg.text_dim if cfg.encoder_mode == "pte" else cfg.hidden
    with seeded(cfg.seed + 1):
        heads = ProjectionHeads(cfg.feature_dim, text_dim, cfg.joint_dim, num_classes)
    with seeded(cfg.seed + 2):
        generator = ExplanationGenerator(vocab_size, cfg.joint_dim, num_classes, cfg.embed_dim, cfg.hidden,
                                         blocked_ids=(PAD, BOS))
    return GroundedModel(encoder, heads, generator, pte, reward_model)


@dataclass
class TrainState:
    model: GroundedModel
    optimizer: torch.optim.Optimizer
    rng: torch.Generator
    baseline: Optional[EmaBaseline] = None
    pte_cache: Optional[PTECache] = None
    step: int = 0


def init_state(model: GroundedModel, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(model.param_groups(cfg), betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                           weight_decay=cfg.weight_decay)
    rng = torch.Generator().manual_seed(cfg.seed + 3)
    baseline = EmaBaseline(cfg.baseline_decay) if cfg.reinforce_baseline == "ema" else None
    cache = PTECache(model.pte) if model.pte is not None else None
    return TrainState(model, opt, rng, baseline, cache)


def compute_losses(state: TrainState, batch, cfg: TrainConfig):
    """Forward pass for one batch; returns ``(objective, LossBreakdown)``."""
    m = state.model
    x, logits = m.encoder(batch.images)
    y_hat = F.softmax(logits, dim=-1)
    task = task_loss(y_hat, batch.labels)
    hits = floor_hits(y_hat.detach(), batch.labels)
    use_align = cfg.encoder_mode != "erm" and cfg.lambda_align > 0
    use_expl = cfg.encoder_mode != "erm" and cfg.lambda_expl > 0
    if not (use_align or use_expl) or not torch.isfinite(task.detach()):
        # a non-finite task loss is reported as is; train_step aborts on it
        objective, bd = total_loss(task, lambda_align=0.0, lambda_expl=0.0)
        bd.log_floor_hits = hits
        return objective, bd

    g_x, y_tilde = project_and_classify(m.heads, x)
    if cfg.category_source == "pred":
        c = y_hat.detach()
    else:
        c = F.one_hot(batch.labels, y_hat.shape[-1]).to(y_hat.dtype)

    tf = None
    if use_expl or (use_align and cfg.encoder_mode == "ste" and cfg.ste_source == "gold"):
        tf = teacher_forced_logprobs(m.generator, batch.tokens, g_x, c)
    sampled = None
    if use_expl or (use_align and cfg.ste_source == "sampled" and cfg.encoder_mode == "ste"):
        sampled = sample_sentence(m.generator, g_x, c, cfg.max_len, state.rng)

    l2 = ce = None
    if use_align:
        if cfg.encoder_mode == "pte":
            v = state.pte_cache(batch.sentences)
        elif cfg.ste_source == "gold":
            v = tf.hidden
        else:
            v = teacher_forced_logprobs(m.generator, sampled.tokens, g_x, c, lengths=sampled.lengths).hidden
        if cfg.encoder_mode == "ste" and cfg.ste_detach:
            v = v.detach()
        l2, ce = align_loss(v, g_x, y_tilde, batch.labels, m.heads.f_proj)
        if not cfg.align_use_ce:
            ce = None

    nll = sur = r_mean = None
    if use_expl:
        r = reward(m.reward_model, sampled.tokens, batch.labels)
        b = state.baseline.value if state.baseline is not None else 0.0
        nll, sur = expl_loss(tf.step_logprobs, tf.mask, sampled.logprob, r, b)
        if state.baseline is not None:
            state.baseline.update(r)
        r_mean = float(r.mean())
    objective, bd = total_loss(task, l2, ce, nll, sur, r_mean,
                               lambda_align=cfg.lambda_align if use_align else 0.0,
                               lambda_expl=cfg.lambda_expl if use_expl else 0.0)
    bd.log_floor_hits = hits
    return objective, bd


def train_step(state: TrainState, batch, cfg: TrainConfig):
    """One Adam update on the composite objective. Returns ``(state, LossBreakdown)``."""
    state.model.train()
    if state.model.pte is not None:
        state.model.pte.eval()
    if state.model.reward_model is not None:
        state.model.reward_model.eval()
    objective, bd = compute_losses(state, batch, cfg)
    if not math.isfinite(float(objective.detach())) or not math.isfinite(bd.total):
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}",
                                 {"step": state.step + 1, "breakdown": bd.as_dict(),
                                  "batch_ids": batch.ids.tolist()})
    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for g in state.optimizer.param_groups for p in g["params"]],
                                       cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, bd


# ---------------------------------------------------------------------------
# Model selection and fitting
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    val_accuracy: Optional[float]  # fraction in [0, 1]
    params: Optional[dict] = None
    log_index: int = 0


def select_model(checkpoints: List[Checkpoint]) -> Checkpoint:
    """Highest source-validation accuracy; ties go to the later step."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best = None
    for ck in checkpoints:
        acc = -1.0 if ck.val_accuracy is None else ck.val_accuracy
        if best is None or acc >= (-1.0 if best.val_accuracy is None else best.val_accuracy):
            best = ck
    return best


@dataclass
class FitResult:
    model: GroundedModel
    best: Checkpoint
    last: Checkpoint
    checkpoints: List[Checkpoint]
    log: List[dict]
    vocab: object = None
    seconds: float = 0.0


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def prepare_text(cfg: TrainConfig, ds, plan):
    """Vocabulary and frozen reward model from the source training sentences only."""
    train_ids = plan.train_ids()
    sentences, labels = [], []
    for i in train_ids:
        for s in ds.texts_of(i):
            sentences.append(s)
            labels.append(ds.label_of(i))
    for k, s in enumerate(ds.class_sentences):
        sentences.append(s)
        labels.append(k)
    vocab = build_vocabulary(sentences, cfg.min_freq)
    rm = train_reward_model([encode_text(vocab, s) for s in sentences], labels, ds.num_classes, len(vocab),
                            RewardConfig(seed=cfg.seed, max_epochs=cfg.reward_epochs))
    return vocab, rm


def _train_loop(cfg, ds, state, stream, val_keys, records, checkpoints, fh) -> Optional[Checkpoint]:
    model = state.model
    best: Optional[Checkpoint] = None
    for step in range(1, cfg.steps + 1):
        _, bd = train_step(state, next(stream), cfg)
        rec = {"step": step, **bd.as_dict()}
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            acc = evaluate_keys(model, ds, val_keys) / 100.0 if val_keys else None
            rec["val_accuracy"] = acc
            ck = Checkpoint(step, acc, log_index=len(records))
            checkpoints.append(ck)
            if select_model([best, ck] if best else [ck]) is ck:
                ck.params = _snapshot(model)
                if best is not None:
                    best.params = None
                best = ck
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
    return best


def fit(cfg: TrainConfig, ds, plan, log_path=None, vocab=None, reward_model=None) -> FitResult:
    """Train for ``cfg.steps`` and keep the checkpoint with the best source-validation accuracy."""
    cfg.validate()
    t0 = time.time()
    if cfg.encoder_mode != "erm" and (vocab is None or reward_model is None):
        vocab, reward_model = prepare_text(cfg, ds, plan)
    model = build_model(cfg, ds.num_classes, ds.image_shape, len(vocab) if vocab else None, reward_model)
    state = init_state(model, cfg)
    stream = make_batches(ds, plan, cfg.batch_size, seed=cfg.seed, vocab=vocab, text_mode=cfg.text_mode)
    val_keys = [(i, d) for d in plan.source_domains for i in plan.val.get(d, [])]
    if not val_keys:
        warnings.warn("empty source-validation set; the final checkpoint will be selected")
    records: List[dict] = []
    checkpoints: List[Checkpoint] = []
    fh = open(log_path, "w") if log_path else None
    try:
        # dropout draws from the global torch RNG; pin it per fit
        with seeded(cfg.seed + 4):
            best = _train_loop(cfg, ds, state, stream, val_keys, records, checkpoints, fh)
    finally:
        if fh:
            fh.close()
    last = checkpoints[-1]
    if last is not best:
        last.params = _snapshot(model)
    if not val_keys:
        best = last
    model.load_state_dict(best.params)
    return FitResult(model, best, last, checkpoints, records, vocab, time.time() - t0)


# ---------------------------------------------------------------------------
# Random hyperparameter search space
# ---------------------------------------------------------------------------


@dataclass
class HPDraw:
    lr: float
    weight_decay: float
    dropout: float
    batch_size: int


DROPOUT_CHOICES = (0.0, 0.1, 0.5)


def sample_hyperparameters(seed: int, n: int) -> List[HPDraw]:
    """lr ~ 5*10^U(-5,-4), wd ~ 10^U(-4,-3), dropout ~ {0, 0.1, 0.5}, batch ~ round(2^U(5,5.5))."""
    if n < 1:
        raise ConfigError("need n >= 1 hyperparameter draws")
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n):
        draws.append(HPDraw(
            lr=float(5 * 10 ** rng.uniform(-5, -4)),
            weight_decay=float(10 ** rng.uniform(-4, -3)),
            dropout=float(DROPOUT_CHOICES[rng.integers(len(DROPOUT_CHOICES))]),
            batch_size=int(round(2 ** rng.uniform(5, 5.5))),
        ))
    return draws


def apply_draw(cfg: TrainConfig, draw: HPDraw) -> TrainConfig:
    """The drawn lr sets the backbone rate; the new-module rate keeps its ratio to it."""
    ratio = cfg.lr_new / cfg.lr_backbone
    return dataclasses.replace(cfg, lr_backbone=draw.lr, lr_new=draw.lr * ratio,
                               weight_decay=draw.weight_decay, dropout=draw.dropout,
                               batch_size=draw.batch_size)
