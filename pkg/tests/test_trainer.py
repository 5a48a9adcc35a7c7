import math

import pytest
import torch

from gvrt.data import SynthSpec, build_split_plan, generate_synthetic_dataset, make_batches
from gvrt.errors import ConfigError, NonFiniteLossError
from gvrt.trainer import (DROPOUT_CHOICES, Checkpoint, TrainConfig, apply_draw, build_model, fit, init_state,
                          prepare_text, sample_hyperparameters, select_model, train_step)

TINY = dict(feature_dim=16, conv_width=4, joint_dim=8, text_dim=32, embed_dim=8, hidden=8, max_len=12,
            batch_size=4, reward_epochs=200, lr_backbone=1e-3, lr_new=1e-3, eval_interval=5)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic_dataset(SynthSpec(num_classes=3, num_domains=3, samples_per_class=10, image_size=16))


@pytest.fixture(scope="module")
def plan(ds):
    return build_split_plan(ds, "multi-source", [0])


def _state(ds, plan, **kw):
    cfg = TrainConfig(**{**TINY, **kw})
    vocab, rm = prepare_text(cfg, ds, plan) if cfg.encoder_mode != "erm" else (None, None)
    model = build_model(cfg, ds.num_classes, ds.image_shape, len(vocab) if vocab else None, rm)
    return cfg, init_state(model, cfg), make_batches(ds, plan, cfg.batch_size, cfg.seed, vocab=vocab)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_new=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(encoder_mode="clip").validate()
    with pytest.raises(ConfigError):
        TrainConfig(lambda_expl=-0.1).validate()
    cfg = TrainConfig(lambda_align=0.1)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_param_groups_closed_form_adam(ds, plan):
    cfg, state, stream = _state(ds, plan, lr_backbone=1e-3, lr_new=7e-2)
    model = state.model
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    # frozen gradients: set by hand, then one optimizer step
    torch.manual_seed(0)
    grads = {}
    for n, p in model.named_parameters():
        if p.requires_grad:
            p.grad = torch.randn_like(p)
            grads[n] = p.grad.clone()
    state.optimizer.step()
    for n, p in model.named_parameters():
        if n not in grads:
            assert torch.equal(p, before[n])
            continue
        lr = cfg.lr_backbone if n.startswith("encoder.backbone.") else cfg.lr_new
        g = grads[n].double()
        # first Adam step: m_hat = g, v_hat = g^2
        expected = before[n].double() - lr * g / (g.abs() + cfg.eps)
        torch.testing.assert_close(p.double(), expected, atol=1e-6, rtol=1e-5)
    groups = {g["name"]: g for g in state.optimizer.param_groups}
    n_new = sum(p.numel() for p in groups["new"]["params"])
    assert n_new == sum(p.numel() for n, p in model.named_parameters()
                        if n.startswith(("encoder.classifier.", "heads.", "generator.")))


def test_erm_mode_touches_only_encoder(ds, plan):
    cfg, state, stream = _state(ds, plan, encoder_mode="erm")
    assert state.model.heads is None and state.model.generator is None
    _, bd = train_step(state, next(stream), cfg)
    assert bd.align_l2 == 0 and bd.expl_nll == 0 and bd.total == bd.task


def test_lambda_zero_leaves_generator_and_heads_untouched(ds, plan):
    cfg, state, stream = _state(ds, plan, lambda_align=0.0, lambda_expl=0.0)
    extra = {n: p.detach().clone() for n, p in state.model.named_parameters()
             if n.startswith(("heads.", "generator."))}
    for _ in range(3):
        train_step(state, next(stream), cfg)
    for n, p in state.model.named_parameters():
        if n in extra:
            assert torch.equal(p, extra[n]), n


def test_frozen_parts_never_change(ds, plan):
    cfg, state, stream = _state(ds, plan)
    rm = {k: v.clone() for k, v in state.model.reward_model.state_dict().items()}
    pte = {k: v.clone() for k, v in state.model.pte.state_dict().items()}
    for _ in range(3):
        train_step(state, next(stream), cfg)
    assert all(torch.equal(v, state.model.reward_model.state_dict()[k]) for k, v in rm.items())
    assert all(torch.equal(v, state.model.pte.state_dict()[k]) for k, v in pte.items())


def test_overfit_single_batch(ds, plan):
    cfg, state, stream = _state(ds, plan)
    batch = next(stream)
    first = train_step(state, batch, cfg)[1].total
    for _ in range(199):
        _, bd = train_step(state, batch, cfg)
    assert bd.total < first


def test_ste_mode_runs(ds, plan):
    for src in ("gold", "sampled"):
        cfg, state, stream = _state(ds, plan, encoder_mode="ste", ste_source=src)
        _, bd = train_step(state, next(stream), cfg)
        assert math.isfinite(bd.total) and bd.align_l2 > 0


def test_nonfinite_loss_aborts(ds, plan):
    cfg, state, stream = _state(ds, plan)
    with torch.no_grad():
        state.model.encoder.classifier.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        train_step(state, next(stream), cfg)
    assert exc.value.snapshot["step"] == 1 and "breakdown" in exc.value.snapshot


def test_fit_single_step_and_selection(ds, plan):
    r = fit(TrainConfig(**{**TINY, "steps": 1}), ds, plan)
    assert len(r.log) == 1 and len(r.checkpoints) == 1 and r.best.step == 1


def test_fit_deterministic_and_best_is_max(ds, plan):
    cfg = TrainConfig(**{**TINY, "steps": 12, "dropout": 0.5})
    a, b = fit(cfg, ds, plan), fit(cfg, ds, plan)
    for ra, rb in zip(a.log, b.log):
        for k in ("task", "align_l2", "align_ce", "expl_nll", "expl_reward", "total"):
            assert abs(ra[k] - rb[k]) <= 1e-6
    assert a.best.step == b.best.step
    vals = [r["val_accuracy"] for r in a.log if "val_accuracy" in r]
    assert a.best.val_accuracy == max(vals)


def test_fit_two_class_smoke():
    ds2 = generate_synthetic_dataset(SynthSpec(num_classes=2, num_domains=2, samples_per_class=60))
    plan2 = build_split_plan(ds2, "single-source", [1])
    cfg = TrainConfig(steps=500, batch_size=16, eval_interval=100, encoder_mode="erm", lr_backbone=1e-3,
                      lr_new=1e-3)
    r = fit(cfg, ds2, plan2)
    assert r.best.val_accuracy > 0.9


def test_select_model_rules():
    cks = lambda accs: [Checkpoint(i + 1, a) for i, a in enumerate(accs)]
    assert select_model(cks([0.5, 0.7, 0.6])).step == 2
    assert select_model(cks([0.7, 0.7])).step == 2
    assert select_model(cks([0.3])).step == 1
    with pytest.raises(ValueError):
        select_model([])


def test_hyperparameter_support_and_frequencies():
    draws = sample_hyperparameters(0, 10_000)
    assert all(5e-5 <= d.lr <= 5e-4 for d in draws)
    assert all(1e-4 <= d.weight_decay <= 1e-3 for d in draws)
    assert all(32 <= d.batch_size <= 45 for d in draws)
    n = len(draws)
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for c in DROPOUT_CHOICES:
        assert abs(sum(d.dropout == c for d in draws) - n / 3) <= 3 * sigma
    assert len(sample_hyperparameters(1, 20)) == 20
    assert sample_hyperparameters(5, 20) == sample_hyperparameters(5, 20)


def test_apply_draw_keeps_lr_ratio():
    d = sample_hyperparameters(0, 1)[0]
    cfg = apply_draw(TrainConfig(), d)
    assert cfg.lr_backbone == d.lr and abs(cfg.lr_new / cfg.lr_backbone - 10.0) < 1e-12
    assert cfg.batch_size == d.batch_size and cfg.dropout == d.dropout
