import math
from dataclasses import replace

import pytest
import torch

from conftest import random_seq
from trimodal.corpus import PairPool
from trimodal.decode import DecodeConfig, Model
from trimodal.seq2seq import ModelConfig, init_params, load_checkpoint
from trimodal.tokencore import Modality, TokenSequence, all_directions, build_vocabulary
from trimodal.trainer import (AdamState, BtConfig, ConfigError, NonFiniteGradientError, TrainConfig,
                              adam_step, back_translate, clip_grads, continue_training, lr_at,
                              parse_kv, single_task_train, train, train_config_from_kv)

I, S, T = Modality.IMAGE, Modality.SPEECH, Modality.TEXT


def test_lr_schedule_points():
    cfg = TrainConfig(total_steps=5000, peak_lr=1e-4, warmup_steps=500)
    assert lr_at(500, cfg) == pytest.approx(1e-4, rel=1e-15)
    assert lr_at(1, cfg) == pytest.approx(2e-7, rel=1e-12)
    assert lr_at(2000, cfg) == pytest.approx(5e-5, rel=1e-12)


def test_lr_continuous_and_decreasing():
    cfg = TrainConfig(total_steps=5000, peak_lr=1e-3, warmup_steps=100)
    assert abs(lr_at(101, cfg) - lr_at(100, cfg)) < 1e-5
    after = [lr_at(s, cfg) for s in range(100, 3000)]
    assert all(b < a for a, b in zip(after, after[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=100, warmup_steps=100)


def _adam_cfg(**kw):
    return TrainConfig(total_steps=10, warmup_steps=1, **kw)


def test_adam_first_step_magnitude():
    p = {"w": torch.tensor([0.5], dtype=torch.float64)}
    adam_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, AdamState(), 1e-3, _adam_cfg())
    assert float(0.5 - p["w"]) == pytest.approx(1e-3, rel=1e-6)


def test_adam_zero_gradient_fixed_point():
    p = {"w": torch.randn(3, 2, dtype=torch.float64)}
    before = p["w"].clone()
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": torch.zeros(3, 2, dtype=torch.float64)}, state, 1e-2, _adam_cfg())
    assert torch.equal(p["w"], before)


def test_adam_clip_equivalence():
    g = torch.tensor([3.0, -4.0], dtype=torch.float64)
    a = {"w": torch.zeros(2, dtype=torch.float64)}
    b = {"w": torch.zeros(2, dtype=torch.float64)}
    adam_step(a, {"w": g.clone()}, AdamState(), 1e-2, _adam_cfg())
    adam_step(b, {"w": 10 * g}, AdamState(), 1e-2, _adam_cfg())
    assert torch.allclose(a["w"], b["w"], atol=1e-15)


def test_clip_never_increases_norm():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        grads = {"a": torch.randn(4, generator=gen, dtype=torch.float64) * 3,
                 "b": torch.randn(2, 2, generator=gen, dtype=torch.float64)}
        before = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        clip_grads(grads, 1.0)
        after = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert after <= min(before, 1.0) + 1e-12


def test_non_finite_gradient_names_tensor():
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step({"bad": torch.zeros(1)}, {"bad": torch.tensor([float("nan")])}, AdamState(), 1e-3, _adam_cfg())


@pytest.fixture
def toy():
    vocab = build_vocabulary(6, 5, 4)
    gen = torch.Generator().manual_seed(0)
    recs = []
    for i in range(12):
        for m in (I, S, T):
            recs.append((f"ex{i}", random_seq(gen, vocab, m, hi=5)))
    cfg = ModelConfig(vocab_total=vocab.total, d_model=8, n_heads=2, ffn_dim=16,
                      enc_layers=1, dec_layers=1, max_len=16)
    return vocab, recs, cfg


def _tcfg(**kw):
    base = dict(total_steps=6, warmup_steps=2, per_task_batch=3, peak_lr=1e-2, log_every=2, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_returns_initial_checkpoint(toy, tmp_path):
    vocab, recs, cfg = toy
    p = init_params(cfg, 0)
    res = train(p, cfg, PairPool.from_records(recs), TrainConfig(total_steps=0, warmup_steps=1), tmp_path)
    assert res.log == []
    assert len(res.checkpoints) == 1
    _, q, _ = load_checkpoint(res.checkpoints[0])
    assert all(torch.equal(p[k], q[k]) for k in p)


def test_training_is_deterministic(toy, tmp_path):
    vocab, recs, cfg = toy
    pool = PairPool.from_records(recs)
    a = train(init_params(cfg, 0), cfg, pool, _tcfg(), tmp_path / "a")
    b = train(init_params(cfg, 0), cfg, pool, _tcfg(), tmp_path / "b")
    assert a.log == b.log
    assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()
    assert (tmp_path / "a" / "metrics.log").read_text() == "\n".join(a.log) + "\n"
    assert a.log[0].startswith("step=1 dir=i2s loss=")
    assert len(a.log) == 6 * 4


def test_training_reduces_loss(toy):
    vocab, recs, cfg = toy
    res = train(init_params(cfg, 0), cfg, PairPool.from_records(recs), _tcfg(total_steps=60, warmup_steps=5))
    first, last = sum(res.losses[0].values()), sum(res.losses[-1].values())
    assert last < first


def test_empty_corpus_rejected(toy):
    _, _, cfg = toy
    with pytest.raises(ValueError):
        train(init_params(cfg, 0), cfg, PairPool(), _tcfg())


def test_resume_config_mismatch(toy, tmp_path):
    vocab, recs, cfg = toy
    pool = PairPool.from_records(recs)
    res = train(init_params(cfg, 0), cfg, pool, _tcfg(total_steps=2, warmup_steps=1), tmp_path)
    other = replace(cfg, ffn_dim=8)
    with pytest.raises(ConfigError):
        train(init_params(other, 0), other, pool, _tcfg(), resume=res.checkpoints[-1])


def test_single_task_rejects_self_direction(toy):
    vocab, recs, cfg = toy
    with pytest.raises(ValueError):
        single_task_train(init_params(cfg, 0), cfg, PairPool.from_records(recs), (T, T), _tcfg())


def test_unified_step_with_masked_directions_equals_single_task(toy):
    vocab, recs, cfg = toy
    pool = PairPool.from_records(recs)
    one = _tcfg(total_steps=3, warmup_steps=1)
    single = single_task_train(init_params(cfg, 0), cfg, pool, (S, T), replace(one, total_steps=2))
    masked = train(init_params(cfg, 0), cfg, pool, replace(one, total_steps=2), directions=[(S, T)])
    unified = train(init_params(cfg, 0), cfg, pool, replace(one, total_steps=2))
    for k in single.params:
        assert torch.allclose(single.params[k], masked.params[k], atol=1e-12, rtol=0)
    assert single.losses[0]["s2t"] == unified.losses[0]["s2t"]


def test_back_translation_accounting(toy):
    vocab, recs, cfg = toy
    model = Model(cfg, init_params(cfg, 0), vocab)
    targets = [(i, s) for i, s in recs if s.modality == T][:5]
    assert back_translate(model, [], BtConfig()).records == []
    res = back_translate(model, targets, BtConfig(), DecodeConfig(image_len=4, speech_max=6, text_max=6))
    assert res.attempted == 10
    assert res.emitted == res.attempted - res.skipped
    for j in range(0, len(res.records), 2):
        (pid, pseudo), (rid, real) = res.records[j], res.records[j + 1]
        assert pid == rid and pid.startswith("bt-")
        assert real.modality == T
        assert all(t in vocab.range(pseudo.modality) for t in pseudo.tokens)


def test_pseudo_pairs_only_feed_their_direction(toy):
    vocab, recs, cfg = toy
    pseudo = [("bt-x-i", TokenSequence(I, (4, 5))), ("bt-x-i", TokenSequence(T, (15,)))]
    pool = PairPool.from_records(recs + pseudo)
    base = PairPool.from_records(recs)
    grown = {d: pool.sizes()[d] - base.sizes()[d] for d in all_directions()}
    assert grown == {d: int(d == (I, T)) for d in all_directions()}


def test_continue_training_vocab_mismatch(toy):
    vocab, recs, cfg = toy
    bad = [("bt-x-i", TokenSequence(I, (400,))), ("bt-x-i", TokenSequence(T, (15,)))]
    with pytest.raises(ConfigError):
        continue_training(init_params(cfg, 0), cfg, vocab, recs, bad, _tcfg())


def test_continue_training_with_empty_pseudo_equals_train(toy):
    vocab, recs, cfg = toy
    bt = BtConfig(continue_peak_lr=5e-3)
    a = continue_training(init_params(cfg, 0), cfg, vocab, recs, [], _tcfg(), bt)
    b = train(init_params(cfg, 0), cfg, PairPool.from_records(recs), _tcfg(peak_lr=5e-3))
    assert a.log == b.log


def test_kv_parsing():
    kv = parse_kv("peak_lr = 0.001\n# comment\ntotal_steps=10\n", {"peak_lr", "total_steps"})
    cfg = train_config_from_kv(kv, TrainConfig(warmup_steps=2))
    assert cfg.peak_lr == 1e-3 and cfg.total_steps == 10
    with pytest.raises(ConfigError):
        parse_kv("bogus=1", {"peak_lr"})
