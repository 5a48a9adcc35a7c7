import math

import pytest
import torch

from gvrt.errors import ConfigError
from gvrt.objectives import (LOG_FLOOR, EmaBaseline, align_loss, cross_entropy, expl_loss, floor_hits,
                             l2_distance, task_loss, total_loss)


def test_task_loss_examples():
    y = torch.tensor([[0.0, 1.0, 0.0]])
    assert float(task_loss(y.clone(), y)) == 0.0
    p = torch.tensor([[0.2, 0.5, 0.3]])
    assert abs(float(task_loss(p, y)) - math.log(2)) < 1e-7
    assert abs(float(task_loss(p, torch.tensor([1]))) - math.log(2)) < 1e-7


def test_task_loss_floor():
    p = torch.tensor([[1.0, 0.0]])
    y = torch.tensor([1])
    assert abs(float(task_loss(p, y)) + math.log(LOG_FLOOR)) < 1e-3
    assert floor_hits(p, y) == 1


def test_task_loss_grad_fd():
    torch.manual_seed(0)
    logits = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 2, 1, 1, 0])
    f = lambda z: task_loss(torch.softmax(z, -1), y)
    (g,) = torch.autograd.grad(f(logits), logits)
    h = 1e-5
    num = torch.zeros_like(logits)
    with torch.no_grad():
        for idx in range(logits.numel()):
            e = torch.zeros_like(logits).view(-1)
            e[idx] = h
            e = e.view_as(logits)
            num.view(-1)[idx] = (f(logits + e) - f(logits - e)) / (2 * h)
    assert float((g - num).norm() / num.norm()) < 1e-6


def test_align_examples():
    f_proj = torch.nn.Identity()
    v = torch.tensor([[0.0, 0.0]])
    l2, _ = align_loss(v, torch.tensor([[3.0, 4.0]]), torch.tensor([[0.5, 0.5]]), torch.tensor([0]), f_proj)
    assert float(l2) == 5.0
    l2, ce = align_loss(v, v.clone(), torch.tensor([[0.5, 0.5]]), torch.tensor([0]), f_proj)
    assert float(l2) == 0.0 and abs(float(ce) - math.log(2)) < 1e-7
    with pytest.raises(ValueError):
        align_loss(torch.rand(1, 3), torch.rand(1, 2), torch.rand(1, 2), torch.tensor([0]), f_proj)


def test_l2_subgradient_zero_at_coincidence():
    a = torch.tensor([[1.0, 2.0]], requires_grad=True)
    d = l2_distance(a, torch.tensor([[1.0, 2.0]]))
    d.sum().backward()
    assert torch.equal(a.grad, torch.zeros_like(a))


def test_l2_grad_fd_away_from_coincidence():
    torch.manual_seed(1)
    a = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 3, dtype=torch.float64)
    (g,) = torch.autograd.grad(l2_distance(a, b).mean(), a)
    h = 1e-5
    num = torch.zeros_like(a)
    with torch.no_grad():
        for i in range(a.numel()):
            e = torch.zeros(a.numel(), dtype=torch.float64)
            e[i] = h
            e = e.view_as(a)
            num.view(-1)[i] = (l2_distance(a + e, b).mean() - l2_distance(a - e, b).mean()) / (2 * h)
    assert float((g - num).norm() / num.norm()) < 1e-5


def test_expl_examples():
    lp = torch.tensor([-2.0], requires_grad=True)
    nll, sur = expl_loss(torch.tensor([[-1.0, -3.0]]), torch.tensor([[True, True]]), lp, torch.tensor([0.0]))
    assert float(sur.detach()) == 0.0 and float(nll) == 2.0
    sur.backward()
    assert float(lp.grad) == 0.0
    _, sur = expl_loss(torch.zeros(1, 1), torch.ones(1, 1, dtype=torch.bool), torch.tensor([-2.0]), torch.tensor([1.0]))
    assert float(sur) == 2.0


def test_nll_is_mean_over_valid_steps():
    steps = torch.tensor([[-1.0, -1.0, 0.0], [-4.0, 0.0, 0.0]])
    mask = torch.tensor([[True, True, False], [True, False, False]])
    nll, _ = expl_loss(steps, mask, torch.zeros(2), torch.zeros(2))
    assert abs(float(nll) - 2.0) < 1e-7


def test_ema_baseline():
    b = EmaBaseline(0.5)
    assert b.update(torch.tensor([1.0, 1.0])) == 0.5
    assert b.update(torch.tensor([0.0])) == 0.25


def test_total_loss_reductions():
    task = torch.tensor(0.7)
    obj, bd = total_loss(task, torch.tensor(1.0), torch.tensor(0.5), torch.tensor(2.0), torch.tensor(3.0), 0.4,
                         lambda_align=0.0, lambda_expl=0.0)
    assert obj is task and bd.total == float(task)
    obj, bd = total_loss(task, torch.tensor(1.0), torch.tensor(0.5), torch.tensor(2.0), torch.tensor(3.0), 0.4,
                         lambda_align=1.0, lambda_expl=1.0)
    assert abs(float(obj) - (0.7 + 1.5 + 5.0)) < 1e-6
    assert abs(bd.total - (0.7 + 1.5 + 2.0 - 0.4)) < 1e-6
    # small alignment weight, full explanation weight
    total_loss(task, torch.tensor(1.0), None, None, None, None, lambda_align=0.1, lambda_expl=1.0)
    with pytest.raises(ConfigError):
        total_loss(task, lambda_align=-1.0)


def test_total_monotone_in_lambda_align():
    args = (torch.tensor(0.3), torch.tensor(0.2), torch.tensor(0.1), torch.tensor(1.0), torch.tensor(0.0), 0.5)
    totals = [total_loss(*args, lambda_align=la, lambda_expl=1.0)[1].total for la in (0.0, 0.1, 1.0, 2.0)]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_cross_entropy_one_hot_equals_ids():
    p = torch.softmax(torch.randn(6, 4), -1)
    y = torch.tensor([0, 3, 2, 1, 1, 0])
    assert torch.allclose(cross_entropy(p, y), cross_entropy(p, torch.nn.functional.one_hot(y, 4).float()))
