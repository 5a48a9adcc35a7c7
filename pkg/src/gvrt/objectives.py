"""Loss terms: task cross-entropy, joint-embedding alignment, explanation NLL + REINFORCE surrogate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from gvrt.errors import ConfigError

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    task: float = 0.0
    align_l2: float = 0.0
    align_ce: float = 0.0
    expl_nll: float = 0.0
    expl_reward: float = 0.0
    total: float = 0.0
    log_floor_hits: int = 0

    def as_dict(self):
        return asdict(self)


def _targets(y, num_classes):
    if y.dim() == 1:
        return F.one_hot(y.long(), num_classes).to(torch.get_default_dtype())
    return y


def floor_hits(probs, y) -> int:
    """Number of rows whose true-class probability falls under the log floor."""
    p_true = (probs * _targets(y, probs.shape[-1]).to(probs.dtype)).sum(-1)
    return int((p_true < LOG_FLOOR).sum())


def cross_entropy(probs, y):
    """Mean over the batch of ``-sum_i y_i log p_i`` (``y`` one-hot or class ids), log floored."""
    t = _targets(y, probs.shape[-1]).to(probs.dtype)
    return -(t * torch.log(probs.clamp_min(LOG_FLOOR))).sum(-1).mean()


def task_loss(y_hat, y):
    return cross_entropy(y_hat, y)


def l2_distance(a, b):
    """Row-wise Euclidean distance whose gradient at ``a == b`` is zero."""
    sq = ((a - b) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def align_loss(v, g_x, y_tilde, y, f_proj):
    """Returns ``(mean ||f_proj(v) - g_x||_2, CE(y_tilde, y))``. Callers pass ``v`` already detached."""
    fv = f_proj(v)
    if fv.shape != g_x.shape:
        raise ValueError(f"projected pivot {tuple(fv.shape)} and visual {tuple(g_x.shape)} differ")
    return l2_distance(fv, g_x).mean(), cross_entropy(y_tilde, y)


def expl_loss(step_logprobs, mask, sampled_logprob, r, baseline=0.0):
    """Returns ``(token-mean NLL, REINFORCE surrogate)``.

    The surrogate ``mean(-(r - b) * log p(o~))`` has gradient equal to the negative
    single-sample score-function estimate of grad E[R].
    """
    n = mask.sum().clamp_min(1)
    nll = -(step_logprobs * mask).sum() / n
    adv = (r.detach() - baseline)
    surrogate = -(adv * sampled_logprob).mean()
    return nll, surrogate


class EmaBaseline:
    """Exponential moving average of observed rewards, used as a constant-per-step baseline."""

    def __init__(self, decay: float = 0.9):
        self.decay, self.value = decay, 0.0

    def update(self, rewards):
        self.value = self.decay * self.value + (1 - self.decay) * float(rewards.mean())
        return self.value


def total_loss(task, align_l2=None, align_ce=None, expl_nll=None, expl_surrogate=None, expl_reward=None,
               lambda_align=1.0, lambda_expl=1.0):
    """Compose the objective. Returns ``(differentiable objective, LossBreakdown)``.

    A zero weight drops its terms entirely, so both weights at zero give the
    task loss unchanged. The reported ``total`` uses ``-mean reward`` where the
    backward pass uses the REINFORCE surrogate.
    """
    if lambda_align < 0 or lambda_expl < 0:
        raise ConfigError("loss weights must be non-negative")
    zero = torch.zeros((), dtype=task.dtype)
    l2 = align_l2 if align_l2 is not None else zero
    ce = align_ce if align_ce is not None else zero
    nll = expl_nll if expl_nll is not None else zero
    sur = expl_surrogate if expl_surrogate is not None else zero
    rew = float(expl_reward) if expl_reward is not None else 0.0
    objective = task
    if lambda_align > 0:
        objective = objective + lambda_align * (l2 + ce)
    if lambda_expl > 0:
        objective = objective + lambda_expl * (nll + sur)
    task_v, l2_v, ce_v, nll_v = (float(t.detach()) for t in (task, l2, ce, nll))
    total = task_v + lambda_align * (l2_v + ce_v) + lambda_expl * (nll_v - rew)
    bd = LossBreakdown(task_v, l2_v, ce_v, nll_v, rew, total)
    return objective, bd
