import math

import numpy as np
import pytest

from nmtlm.architectures import ALL_VARIANTS, ModelConfig, init_model, make_batch
from nmtlm.data import SamplerConfig, TranslationRule, generate_corpus, make_batches, make_languages
from nmtlm.evaluation import log_perplexity
from nmtlm.tensor import Tape
from nmtlm.trainer import (AdamState, NonFiniteLossError, TrainConfig, Trainer, checkpoint_average,
                           lr_schedule, train_step)
from nmtlm.architectures import compute_loss, forward


def tiny(variant="prefixlm", **kw):
    base = dict(d=16, d_ff=32, L=1, heads=2, vocab_size=40, dropout=0.0)
    base.update(kw)
    return ModelConfig(variant, **base)


def toy_batch(seed=0, B=3):
    rng = np.random.default_rng(seed)
    src = [list(rng.integers(5, 40, size=n)) + [2] for n in (4, 6, 3)[:B]]
    tgt = [list(rng.integers(5, 40, size=n)) + [2] for n in (3, 5, 4)[:B]]
    return make_batch(src, tgt)


@pytest.fixture(scope="module")
def copy_task():
    vocab = make_languages(["a", "b"], block_size=12, min_len=3, max_len=5)
    rule = TranslationRule("a", "b")
    return vocab, generate_corpus(vocab, rule, 200, 0), generate_corpus(vocab, rule, 30, 0, "dev")


def test_lr_schedule_examples():
    W, d = 400, 64
    peak = lr_schedule(W, W, d)
    assert peak == pytest.approx(d ** -0.5 * W ** -0.5)
    assert lr_schedule(4 * W, W, d) == pytest.approx(peak / 2)
    lrs = [lr_schedule(t, W, d) for t in range(1, 3 * W)]
    assert all(a <= b for a, b in zip(lrs[:W - 1], lrs[1:W]))
    assert all(a >= b for a, b in zip(lrs[W - 1:], lrs[W:]))
    assert lr_schedule(W, W, d, scale=2.0) == pytest.approx(2 * peak)
    with pytest.raises(ValueError):
        lr_schedule(0, W, d)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)


def test_tgt_only_reports_zero_src_part():
    state = init_model(tiny("causallm_tgtonly"), 0)
    cfg, opt = TrainConfig(warmup_steps=10, dropout=0.1), AdamState()
    for t in range(1, 4):
        r = train_step(state, toy_batch(t), cfg, opt)
        assert r.src == 0.0 and r.tgt > 0
    r = train_step(init_model(tiny("causallm"), 0), toy_batch(), cfg, AdamState())
    assert r.src > 0 and r.loss == pytest.approx(r.src + r.tgt, rel=1e-5)


@pytest.mark.parametrize("variant", ["encdec", "prefixlm", "causallm"])
def test_overfit_single_batch(variant):
    state = init_model(tiny(variant), 1)
    cfg, opt = TrainConfig(warmup_steps=5, scale=0.1, dropout=0.0, label_smoothing=0.0), AdamState()
    batch = toy_batch(2)
    losses = [train_step(state, batch, cfg, opt).loss for _ in range(50)]
    violations = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert violations <= 5
    assert losses[-1] < 0.5 * losses[0]


def test_identical_seeds_identical_traces(copy_task):
    vocab, train, _ = copy_task

    def run():
        stream = make_batches([train], SamplerConfig(batch_tokens=80, seed=3))
        t = Trainer(init_model(tiny("encdec", vocab_size=vocab.size, dropout=0.1), 5), stream,
                    TrainConfig(steps=8, warmup_steps=4, dropout=0.1, seed=9))
        return [r.loss for r in t.run()]
    assert run() == run()


def test_bit_exact_resume(tmp_path, copy_task):
    vocab, train, _ = copy_task
    stream = make_batches([train], SamplerConfig(batch_tokens=80, seed=1))
    cfg = TrainConfig(steps=100, warmup_steps=20, dropout=0.1, seed=4, log_interval=0)
    full = Trainer(init_model(tiny("prefixlm", vocab_size=vocab.size, dropout=0.1), 2), stream, cfg)
    full.run()
    half = Trainer(init_model(tiny("prefixlm", vocab_size=vocab.size, dropout=0.1), 2), stream, cfg)
    half.run(until=50)
    half.save(tmp_path / "ck")
    resumed = Trainer.resume(tmp_path / "ck", stream)
    assert resumed.step == 50 and resumed.config == cfg
    resumed.run()
    for name, p in full.state.params.items():
        assert np.array_equal(p.value, resumed.state.params[name].value), name
    assert [r.loss for r in full.history[50:]] == [r.loss for r in resumed.history]


@pytest.mark.parametrize("variant,tied", [(v.name, t) for v in ALL_VARIANTS for t in (True, False)
                                          if t or v.is_lm])
def test_gradient_flow_audit(variant, tied):
    state = init_model(tiny(variant, norm_placement="pre", tie_lm_parameters=tied), 3)
    state.zero_grad()
    with Tape() as tape:
        tape.backward(compute_loss(state, forward(state, toy_batch(4)), 0.1).total)
    dead = [k for k, p in state.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_non_finite_loss_aborts_with_step_and_fingerprint():
    state = init_model(tiny("encdec"), 0)
    state.params["out_b"].value[:] = np.nan
    with pytest.raises(NonFiniteLossError, match=r"step 7 \(batch [0-9a-f]{8}\)"):
        train_step(state, toy_batch(), TrainConfig(), AdamState(), step=7)


def test_average_examples():
    a = init_model(tiny("encdec"), 0)
    avg = checkpoint_average([a, a.clone(), a.clone()])
    for k in a.params:
        np.testing.assert_array_equal(avg.params[k].value, a.params[k].value)
    b, c = a.clone(), a.clone()
    b.params["out_b"].value[:] = 0
    c.params["out_b"].value[:] = 2
    assert np.all(checkpoint_average([b, c]).params["out_b"].value == 1)


def test_average_manifest_mismatch_lists_names():
    a = init_model(tiny("encdec"), 0)
    b = init_model(tiny("encdec", d_ff=64), 0)
    with pytest.raises(ValueError, match="enc.0.ffn_in_w"):
        checkpoint_average([a, b])
    with pytest.raises(ValueError):
        checkpoint_average([])


def test_average_of_late_snapshots_not_worse_than_worst(tmp_path, copy_task):
    vocab, train, dev = copy_task
    stream = make_batches([train], SamplerConfig(batch_tokens=120, seed=0))
    cfg = TrainConfig(steps=150, warmup_steps=30, checkpoint_interval=5, keep_checkpoints=10,
                      dropout=0.1, log_interval=0)
    t = Trainer(init_model(tiny("encdec", vocab_size=vocab.size, dropout=0.1), 0), stream, cfg)
    t.run(checkpoint_dir=tmp_path)
    snaps = sorted(tmp_path.glob("step*"))
    assert len(snaps) == 10
    ppl = [log_perplexity(checkpoint_average([s]), dev) for s in snaps]
    avg = log_perplexity(checkpoint_average(snaps), dev)
    assert avg <= max(ppl) + 0.05
    assert math.isfinite(avg)
