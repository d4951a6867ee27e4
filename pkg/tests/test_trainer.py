import dataclasses
import logging

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from ufo.backbone import ModelConfig, UnifiedTransformer
from ufo.tokenize import ConfigError
from ufo.trainer import (
    NonFiniteLoss,
    Pretrainer,
    TASKS,
    TrainConfig,
    augment_multiscale,
    build_optimizer,
    decay_mask,
    draw_scale,
    lr_at,
    make_batch,
    metrics_line,
    sample_task,
    train_step,
)

TINY = ModelConfig(layers=1, hidden=32, heads=2, image_size=16)


def tiny_cfg(**kw):
    base = dict(total_steps=10, warmup_steps=2, peak_lr=1e-3, batch_size=4, corpus_size=8,
                min_s=16, max_s=16, model=TINY)
    return TrainConfig(**{**base, **kw})


def test_sample_task_uniform():
    rng = np.random.default_rng(0)
    draws = [sample_task(rng, TASKS) for _ in range(40_000)]
    counts = np.array([draws.count(t) for t in TASKS])
    assert np.all(np.abs(counts / 40_000 - 0.25) < 0.01)
    assert chisquare(counts).pvalue > 0.01


def test_sample_task_singleton_and_determinism():
    rng = np.random.default_rng(1)
    assert {sample_task(rng, ("MLM",)) for _ in range(50)} == {"MLM"}
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [sample_task(r1, TASKS) for _ in range(30)] == [sample_task(r2, TASKS) for _ in range(30)]
    with pytest.raises(ConfigError):
        sample_task(rng, ())


def test_lr_schedule():
    cfg = TrainConfig(total_steps=100, warmup_steps=10, peak_lr=2e-4)
    assert lr_at(5, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(10, cfg) == 2e-4
    assert lr_at(100, cfg) == 0.0
    assert lr_at(55, cfg) == pytest.approx(1e-4)
    assert lr_at(0, cfg) == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=5, warmup_steps=10)
    with pytest.raises(ConfigError):
        TrainConfig(min_s=20)
    with pytest.raises(ConfigError):
        TrainConfig(min_s=32, max_s=16)
    with pytest.raises(ConfigError):
        TrainConfig(task_set=())
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = tiny_cfg(task_set=("ITC", "MLM"))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_decay_mask_policy(model):
    names = dict(model.named_parameters())
    assert decay_mask("blocks.0.attn.qkv.weight")
    assert not decay_mask("blocks.0.attn.qkv.bias")
    assert not decay_mask("blocks.0.attn_norm.gain")
    assert not decay_mask("log_temp")
    assert decay_mask("text_embed.weight")
    for n in names:
        decay_mask(n)  # every parameter carries a kind
    with pytest.raises(ConfigError):
        decay_mask("mystery")


def test_adamw_decay_only_on_included(model):
    opt = build_optimizer(model, weight_decay=0.1)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for _ in range(3):
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        for g in opt.param_groups:
            g["lr"] = 0.5
        opt.step()
    for n, p in model.named_parameters():
        if decay_mask(n):
            assert torch.allclose(p, before[n] * 0.95**3, atol=1e-15)
        else:
            assert torch.equal(p, before[n]), n


def test_temperature_lr_scale_applies_only_to_temperature(model):
    opt = build_optimizer(model, 0.0, temp_lr_scale=7.0)
    scales = {id(p): g["lr_scale"] for g in opt.param_groups for p in g["params"]}
    assert scales[id(model.log_temp)] == 7.0
    assert {v for k, v in scales.items() if k != id(model.log_temp)} == {1.0}


def test_scale_support():
    cfg = TrainConfig(min_s=16, max_s=32)
    rng = np.random.default_rng(0)
    draws = np.array([draw_scale(rng, cfg) for _ in range(10_000)])
    vals, counts = np.unique(draws, return_counts=True)
    assert vals.tolist() == [16, 24, 32]
    assert np.all(np.abs(counts / 10_000 - 1 / 3) < 0.02)


def test_single_scale_and_full_crop():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    cfg = TrainConfig(min_s=24, max_s=24, crop_min_area=1.0)
    out = augment_multiscale(img, np.random.default_rng(1), cfg)
    assert out.shape == (24, 24, 3)
    cfg = TrainConfig(min_s=32, max_s=32, crop_min_area=1.0)
    assert np.allclose(augment_multiscale(img, np.random.default_rng(1), cfg).numpy(), img)


def test_small_image_is_upscaled(caplog):
    img = np.zeros((8, 8, 3), np.float32)
    with caplog.at_level(logging.WARNING):
        out = augment_multiscale(img, np.random.default_rng(0), TrainConfig())
    assert out.shape[0] in (16, 24, 32) and "smaller than" in caplog.text


def test_crop_area_bound():
    """Crops of a ramp image keep at least 80% of the area: the resized corner values stay near the edges."""
    cfg = TrainConfig(min_s=32, max_s=32)
    rng = np.random.default_rng(0)
    ramp = np.tile(np.arange(32, dtype=np.float32)[None, :, None], (32, 1, 3))
    for _ in range(100):
        out = augment_multiscale(ramp, rng, cfg).numpy()
        span = out[0, -1, 0] - out[0, 0, 0]
        assert span >= np.sqrt(0.8) * 32 - 3


def test_batches(vocab):
    cfg = tiny_cfg()
    tr = Pretrainer(cfg)
    rng = np.random.default_rng(0)
    itm = make_batch("ITM", tr.scenes, vocab, rng, cfg)
    assert itm.images.shape[0] == 8 and itm.labels.tolist() == [1] * 4 + [0] * 4
    mlm = make_batch("MLM", tr.scenes, vocab, rng, cfg)
    assert len(mlm.targets) == sum(len(p) for p in mlm.positions) > 0
    itc = make_batch("ITC", tr.scenes, vocab, rng, cfg)
    assert len(itc.texts) == len(itc.text_image_ids) >= 4


def test_one_loss_per_iteration():
    tr = Pretrainer(tiny_cfg())
    tr.run(10)
    assert tr.loss_evaluations == 10
    full = Pretrainer(tiny_cfg(strategy="full"))
    full.run(2)
    assert full.loss_evaluations == 8 and full.history[0]["task"] == "ITC+ITM+MLM+SMLM"


def _trajectory(**kw):
    tr = Pretrainer(tiny_cfg(dtype="float64", **kw))
    return [m["loss"] for m in tr.run(6)], tr


def test_determinism_bit_level():
    a, _ = _trajectory()
    b, _ = _trajectory()
    assert a == b


def test_distill_weight_zero_equals_teacher_disabled():
    a, ta = _trajectory(distill_weight=0.0)
    b, tb = _trajectory(teacher=False)
    assert a == b
    for p, q in zip(ta.model.parameters(), tb.model.parameters()):
        assert torch.equal(p, q)


def test_temperature_stays_positive():
    _, tr = _trajectory(task_set=("ITC",), peak_lr=0.5)
    assert tr.model.temperature.item() > 0


def test_non_finite_loss_aborts():
    tr = Pretrainer(tiny_cfg(task_set=("MLM",)))
    with torch.no_grad():
        tr.model.mlm_head.out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss, match="MLM loss at step 0"):
        tr.train_step()


def test_training_smoke_every_loss_decreases():
    cfg = tiny_cfg(total_steps=300, warmup_steps=20, corpus_size=8, batch_size=8, dtype="float32")
    tr = Pretrainer(cfg)
    hist = tr.run(300)
    for task in TASKS:
        losses = [m["task_losses"][task] for m in hist if task in m["task_losses"]]
        first, last = losses[0], np.mean(losses[-10:])
        assert last < first, (task, first, last)


def test_metrics_line():
    _, tr = _trajectory()
    line = metrics_line(tr.history[0])
    assert line.startswith("0\t") and line.endswith("\n")
