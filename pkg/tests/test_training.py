import json
import math

import pytest
import torch

from querybridge.backbone import BackboneConfig
from querybridge.connector import ConnectorConfig
from querybridge.data import ShapesData
from querybridge.diffusion import DiffusionConfig
from querybridge.errors import ObjectiveBatchMismatchError, PolicyError
from querybridge.pipeline import GenerationPipeline
from querybridge.training import (
    FreezePolicy,
    ObjectiveSpec,
    ScheduleConfig,
    Trainer,
    group_checksums,
    lr_at,
    pretrain_backbone,
    train_steps,
)


def tiny_pipeline(source="learnable_queries", seed=0, cfg_dropout=0.1):
    backbone = BackboneConfig(num_layers=1, hidden_dim=32, num_heads=2, max_positions=64)
    conn = ConnectorConfig(variant="enc_proj", num_layers=1, input_dim=32,
                           model_dim=32, decoder_cond_dim=24, num_heads=2, max_rows=64)
    diff = DiffusionConfig(image_size=16, cond_dim=24, base_channels=8,
                           timesteps=10, beta_max=0.3, cfg_dropout_prob=cfg_dropout)
    return GenerationPipeline.build(backbone, conn, diff, source=source,
                                    num_query_tokens=4, seed=seed, prompt_pad=8)


def tiny_dataset(n=64, seed=0, image_size=16):
    data = ShapesData.generate(n, seed=seed)
    images = torch.nn.functional.interpolate(data.images, size=(image_size, image_size),
                                             mode="nearest")
    return ShapesData(images=images, captions=data.captions)


def make_trainer(pipe, policy=None, objective=None, seed=0, out_dir=None, total=100):
    return Trainer(
        pipe,
        policy or FreezePolicy(),
        objective or ObjectiveSpec("t2i"),
        ScheduleConfig(lr_max=1e-3, lr_min=1e-4, warmup_steps=10, total_steps=total),
        seed=seed, batch_size=8, deterministic=True, out_dir=out_dir,
    )


# ---- schedule ----

def test_lr_at_boundary_values():
    sched = ScheduleConfig(lr_max=1e-4, lr_min=1e-5, warmup_steps=4000, total_steps=20000)
    assert lr_at(0, sched) == 0.0
    assert lr_at(4000, sched) == pytest.approx(1e-4)
    assert lr_at(20000, sched) == pytest.approx(1e-5)


def test_lr_at_cosine_midpoint():
    sched = ScheduleConfig(lr_max=1e-4, lr_min=1e-5, warmup_steps=100, total_steps=1100)
    midway = 100 + (1100 - 100) // 2
    expect = 1e-5 + (1e-4 - 1e-5) * (1 + math.cos(math.pi / 2)) / 2
    assert lr_at(midway, sched) == pytest.approx(expect)
    assert expect == pytest.approx(1e-5 + (1e-4 - 1e-5) / 2)


def test_lr_continuous_at_warmup_and_monotone_after():
    sched = ScheduleConfig(lr_max=1e-4, lr_min=1e-5, warmup_steps=50, total_steps=500)
    just_before = lr_at(49, sched)
    at = lr_at(50, sched)
    assert abs(at - just_before) < 1e-4 / 50 * 1.01
    values = [lr_at(s, sched) for s in range(50, 501)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_at_range_error():
    sched = ScheduleConfig()
    with pytest.raises(ValueError):
        lr_at(-1, sched)
    with pytest.raises(ValueError):
        lr_at(sched.total_steps + 1, sched)


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(lr_min=1e-4, lr_max=1e-5)
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=100, total_steps=100)


# ---- freeze policies ----

def test_all_frozen_computes_loss_but_changes_nothing():
    pipe = tiny_pipeline()
    policy = FreezePolicy(backbone="frozen", query_bank="frozen",
                          connector="frozen", decoder="frozen")
    trainer = make_trainer(pipe, policy=policy)
    before = group_checksums(pipe)
    data = tiny_dataset()
    metrics = trainer.train_step(data.batch(list(range(8))))
    assert metrics["loss"] > 0
    assert group_checksums(pipe) == before
    assert all(v == 0.0 for v in metrics["grad_norms"].values())


def test_default_policy_keeps_backbone_bitwise_frozen():
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe)
    data = tiny_dataset()
    before = group_checksums(pipe)
    for step in range(20):
        trainer.train_step(data.batch([(step * 8 + i) % len(data) for i in range(8)]))
    after = group_checksums(pipe)
    assert after["backbone"] == before["backbone"]
    assert after["query_bank"] != before["query_bank"]
    assert after["connector"] != before["connector"]
    assert after["decoder"] != before["decoder"]


def test_grad_norms_reported_for_every_group():
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe)
    data = tiny_dataset()
    metrics = trainer.train_step(data.batch(list(range(8))))
    assert set(metrics["grad_norms"]) == {"backbone", "query_bank", "connector", "decoder"}
    assert metrics["grad_norms"]["backbone"] == 0.0
    assert metrics["grad_norms"]["decoder"] > 0.0


def test_frozen_groups_have_no_optimizer_state():
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe)
    data = tiny_dataset()
    trainer.train_step(data.batch(list(range(8))))
    tracked = {id(p) for p in trainer.optimizer.state}
    for p in pipe.backbone.parameters():
        assert id(p) not in tracked


def test_policy_error_for_frozen_random_bank():
    pipe = tiny_pipeline(source="random_queries")
    with pytest.raises(PolicyError):
        make_trainer(pipe, policy=FreezePolicy(query_bank="trainable"))
    make_trainer(pipe, policy=FreezePolicy(query_bank="frozen"))  # ok


def test_policy_error_without_bank():
    pipe = tiny_pipeline(source="last_layer_embedding")
    with pytest.raises(PolicyError):
        make_trainer(pipe, policy=FreezePolicy(query_bank="trainable"))


# ---- objectives ----

def test_objective_batch_mismatch():
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe, objective=ObjectiveSpec("t2i"))
    with pytest.raises(ObjectiveBatchMismatchError):
        trainer.train_step({"images": torch.rand(8, 3, 16, 16)})


def test_mixed_ratio_zero_matches_t2i_bitwise():
    data = tiny_dataset()
    results = {}
    for kind, ratio in (("t2i", 0.0), ("mixed", 0.0)):
        pipe = tiny_pipeline(seed=3)
        trainer = make_trainer(pipe, objective=ObjectiveSpec(kind, mix_ratio=ratio), seed=7)
        train_steps(trainer, data, 50)
        results[kind] = group_checksums(pipe)
    assert results["t2i"] == results["mixed"]


def test_mixed_ratio_one_matches_reconstruction_bitwise():
    data = tiny_dataset()
    checks = {}
    for kind, ratio in (("reconstruction", 1.0), ("mixed", 1.0)):
        pipe = tiny_pipeline(seed=3)
        trainer = make_trainer(pipe, objective=ObjectiveSpec(kind, mix_ratio=ratio), seed=7)
        train_steps(trainer, data, 20)
        checks[kind] = group_checksums(pipe)
    assert checks["reconstruction"] == checks["mixed"]


def test_loss_decreases_on_fixed_batch():
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe, total=200)
    data = tiny_dataset()
    batch = data.batch(list(range(8)))
    first = trainer.train_step(batch)["loss"]
    last = None
    for _ in range(199):
        last = trainer.train_step(batch)["loss"]
    assert last < first


# ---- stages, checkpoints, resume ----

def test_epochs_zero_checkpoint_equals_init(tmp_path):
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe, out_dir=tmp_path)
    before = group_checksums(pipe)
    path = trainer.run_stage(tiny_dataset(), epochs=0)
    assert path.exists()
    assert group_checksums(pipe) == before
    fresh = tiny_pipeline()
    tr2 = make_trainer(fresh, out_dir=tmp_path)
    tr2.load_checkpoint(path)
    assert group_checksums(fresh) == before


def test_resume_reproduces_unbroken_run_bitwise(tmp_path):
    data = tiny_dataset()
    # unbroken run: 30 steps
    pipe_a = tiny_pipeline(seed=5)
    tr_a = make_trainer(pipe_a, seed=11, out_dir=tmp_path / "a")
    tr_a.run_stage(data, epochs=0, max_steps=30)
    # broken run: 20 steps, checkpoint, fresh trainer resumes to 30
    pipe_b = tiny_pipeline(seed=5)
    tr_b = make_trainer(pipe_b, seed=11, out_dir=tmp_path / "b")
    ckpt = tr_b.run_stage(data, epochs=0, max_steps=20)
    pipe_c = tiny_pipeline(seed=5)
    tr_c = make_trainer(pipe_c, seed=11, out_dir=tmp_path / "c")
    tr_c.load_checkpoint(ckpt)
    assert tr_c.step == 20
    tr_c.run_stage(data, epochs=0, max_steps=30)
    assert group_checksums(pipe_c) == group_checksums(pipe_a)


def test_run_stage_writes_metrics_log(tmp_path):
    pipe = tiny_pipeline()
    trainer = make_trainer(pipe, out_dir=tmp_path)
    trainer.run_stage(tiny_dataset(), epochs=0, max_steps=5)
    lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 5
    record = json.loads(lines[0])
    assert {"step", "loss", "lr", "grad_norms"} <= set(record)
    assert set(record["grad_norms"]) == {"backbone", "query_bank", "connector", "decoder"}


def test_pretrain_backbone_reduces_next_token_loss():
    pipe = tiny_pipeline()
    captions = tiny_dataset(256).captions
    first = pretrain_backbone(pipe.backbone, pipe.tokenizer, captions, steps=1, seed=0)
    final = pretrain_backbone(pipe.backbone, pipe.tokenizer, captions, steps=120, seed=0)
    assert final < first
