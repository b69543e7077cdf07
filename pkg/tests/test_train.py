import json

import numpy as np
import pytest

from mgfn import synthgen, trainer
from mgfn.errors import ConfigError, DataError
from mgfn.featureio import load_checkpoint, load_manifest, load_records
from mgfn.tensor import Tensor
from mgfn.trainer import AdamState, TrainConfig, adam_step, rng_stream, sample_batch


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    train, test = synthgen.generate_preset("micro", seed=0, out_dir=out)
    return train, test


def micro_config(**kw):
    base = dict(batch_size=4, num_clips=4, topk=2, steps=2, eval_every=2, seed=0,
                loss_variant="mc", margin=10.0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Config validation


def test_config_rejects_odd_batch():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=7)


def test_config_rejects_bad_variant_and_order():
    with pytest.raises(ConfigError):
        TrainConfig(loss_variant="nope")
    with pytest.raises(ConfigError):
        TrainConfig(block_order="gg")


def test_config_accepts_cli_spelling():
    assert TrainConfig(block_order="gf-fusion").block_order == "gf-fusion"


# ---------------------------------------------------------------------------
# Batch sampling


class FakeRecord:
    def __init__(self, id, label):
        self.id, self.label = id, label


def test_sample_batch_exact_population_is_class_ordered():
    records = [FakeRecord(f"n{i}", 0) for i in range(8)] + \
              [FakeRecord(f"a{i}", 1) for i in range(8)]
    batch = sample_batch(records, 16, rng_stream(0, 1, 1))
    assert [r.label for r in batch] == [0] * 8 + [1] * 8
    assert len({r.id for r in batch}) == 16


def test_sample_batch_deterministic_same_seed():
    records = [FakeRecord(f"n{i}", 0) for i in range(20)] + \
              [FakeRecord(f"a{i}", 1) for i in range(20)]
    a = sample_batch(records, 8, rng_stream(3, 1, 7))
    b = sample_batch(records, 8, rng_stream(3, 1, 7))
    assert [r.id for r in a] == [r.id for r in b]


def test_sample_batch_insufficient_class():
    records = [FakeRecord("n0", 0), FakeRecord("a0", 1)]
    with pytest.raises(DataError):
        sample_batch(records, 4, rng_stream(0, 1, 1))


def test_sample_batch_frequency_uniform_3_sigma():
    records = [FakeRecord(f"n{i}", 0) for i in range(20)] + \
              [FakeRecord(f"a{i}", 1) for i in range(20)]
    counts = {r.id: 0 for r in records}
    n_batches = 1000
    for step in range(n_batches):
        for r in sample_batch(records, 16, rng_stream(11, 1, step)):
            counts[r.id] += 1
    expect = n_batches * 8 / 20
    sigma = np.sqrt(n_batches * 0.4 * 0.6)
    for vid, count in counts.items():
        assert abs(count - expect) <= 3 * sigma, f"{vid}: {count} vs {expect}"


# ---------------------------------------------------------------------------
# Adam


def named_single(value):
    t = Tensor(np.array([value]), requires_grad=True)
    return t, [("p", t)]


def test_adam_zero_grads_no_decay_is_identity():
    t, named = named_single(1.5)
    t.grad = np.zeros(1)
    adam_step(named, AdamState(), lr=0.01, weight_decay=0.0)
    assert t.data[0] == 1.5


def test_adam_single_step_hand_computed():
    t, named = named_single(2.0)
    t.grad = np.array([0.5])
    state = AdamState()
    adam_step(named, state, lr=0.1, weight_decay=0.0)
    # first step: m=0.05, v=0.00025, mhat=0.5, vhat=0.25
    expect = 2.0 - 0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert abs(t.data[0] - expect) < 1e-12


def test_adam_decay_only_shrinks_exponentially():
    t, named = named_single(1.0)
    state = AdamState()
    for _ in range(5):
        t.grad = np.zeros(1)
        adam_step(named, state, lr=0.01, weight_decay=0.5)
    assert abs(t.data[0] - (1 - 0.01 * 0.5) ** 5) < 1e-12


def test_adam_lr_zero_is_identity():
    t, named = named_single(3.0)
    t.grad = np.array([1.0])
    adam_step(named, AdamState(), lr=0.0, weight_decay=0.1)
    assert t.data[0] == 3.0


# ---------------------------------------------------------------------------
# Training runs (micro dataset)


def test_train_zero_steps_checkpoint_equals_init(tmp_path, micro_data):
    train_manifest, test_manifest = micro_data
    cfg = micro_config(steps=0)
    _, summary = trainer.train(cfg, train_manifest, tmp_path / "run")
    saved = load_checkpoint(tmp_path / "run" / "final.ckpt")
    manifest = load_manifest(train_manifest)
    arch = trainer.build_architecture(cfg, manifest)
    from mgfn.model import init_params
    fresh = init_params(arch, rng_stream(cfg.seed, 0))
    for name, tensor in fresh.named():
        np.testing.assert_array_equal(
            saved.params[name].astype(np.float32),
            tensor.data.reshape(-1).astype(np.float32))
    assert summary["steps"] == 0 and saved.step == 0


def test_train_two_runs_byte_identical(tmp_path, micro_data):
    train_manifest, test_manifest = micro_data
    for name in ("a", "b"):
        trainer.train(micro_config(steps=3, eval_every=2), train_manifest,
                      tmp_path / name, eval_manifest=test_manifest)
    for artifact in ("final.ckpt", "best.ckpt", "summary.json", "steps.jsonl",
                     "evals.jsonl"):
        assert (tmp_path / "a" / artifact).read_bytes() == \
               (tmp_path / "b" / artifact).read_bytes(), artifact


def test_train_resume_matches_straight_run_at_f32(tmp_path, micro_data):
    train_manifest, _ = micro_data
    trainer.train(micro_config(steps=2), train_manifest, tmp_path / "first")
    resumed, _ = trainer.train(micro_config(steps=4), train_manifest,
                               tmp_path / "second",
                               resume=load_checkpoint(tmp_path / "first" / "final.ckpt"))
    straight, _ = trainer.train(micro_config(steps=4), train_manifest,
                                tmp_path / "straight")
    for name, blob in straight.params.items():
        a = resumed.params[name]
        denom = np.maximum(np.abs(blob), 1e-3)
        assert np.max(np.abs(a - blob) / denom) < 1e-5, name


def test_train_logs_and_summary(tmp_path, micro_data):
    train_manifest, test_manifest = micro_data
    cfg = micro_config(steps=4, eval_every=2)
    _, summary = trainer.train(cfg, train_manifest, tmp_path / "run",
                               eval_manifest=test_manifest)
    run = tmp_path / "run"
    steps = [json.loads(line) for line in (run / "steps.jsonl").read_text().splitlines()]
    assert [s["step"] for s in steps] == [1, 2, 3, 4]
    assert all(np.isfinite(s["total"]) for s in steps)
    for s in steps:
        recombined = s["l_sce"] + cfg.lambda_ts * s["l_ts"] + \
            cfg.lambda_sp * s["l_sp"] + cfg.lambda_mc * s["l_mc"]
        assert abs(s["total"] - recombined) < 1e-12
    assert len(summary["evals"]) == 2
    assert (run / "config.json").exists()
    assert (run / "scores").is_dir() and len(list((run / "scores").glob("*.csv"))) > 0
    csv = next(iter(sorted((run / "scores").glob("*.csv")))).read_text().splitlines()
    assert csv[0] == "frame_index,score"
    assert csv[1].startswith("0,")


def test_train_resume_arch_mismatch_rejected(tmp_path, micro_data):
    train_manifest, _ = micro_data
    trainer.train(micro_config(steps=1), train_manifest, tmp_path / "run")
    ckpt = load_checkpoint(tmp_path / "run" / "final.ckpt")
    with pytest.raises(ConfigError):
        trainer.train(micro_config(steps=2, block_order="ff"), train_manifest,
                      tmp_path / "bad", resume=ckpt)


def test_num_crops_validated_against_manifest(tmp_path, micro_data):
    train_manifest, _ = micro_data
    with pytest.raises(DataError):
        trainer.train(micro_config(num_crops=10), train_manifest, tmp_path / "run")


def test_evaluate_model_requires_mask_for_abnormal(micro_data):
    train_manifest, _ = micro_data
    manifest = load_manifest(train_manifest)
    records = load_records(manifest)  # train split has no masks
    cfg = micro_config()
    arch = trainer.build_architecture(cfg, manifest)
    from mgfn.model import init_params
    params = init_params(arch, rng_stream(0, 0))
    with pytest.raises(DataError, match="mask"):
        trainer.evaluate_model(arch, params, records)
