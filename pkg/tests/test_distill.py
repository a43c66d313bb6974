import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmd import distill as kd
from xmd import modality, tinylm
from xmd import tensor as tn
from xmd.distill import (DistillConfig, PairingError, ce_loss, generate_teacher_targets, kl_loss,
                         s2t_loss, soften, t2t_loss)
from xmd.tensor import Tensor

from .conftest import make_samples


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_soften_examples():
    np.testing.assert_allclose(soften([0.0, 0.0, 0.0], 2.0), [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(soften([np.log(4.0), 0.0], 1.0), [0.8, 0.2], rtol=0, atol=1e-15)
    np.testing.assert_allclose(soften([2.0, 0.0], 2.0), [0.731059, 0.268941], rtol=0, atol=5e-7)
    with pytest.raises(ValueError):
        soften([1.0], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 50))
def test_soften_sums_to_one(seed, tau):
    z = np.random.default_rng(seed).normal(scale=5, size=(3, 7))
    assert np.all(np.abs(soften(z, tau).sum(-1) - 1.0) < 1e-12)


def test_ce_examples():
    z = np.full((3, 4), -20.0)
    z[np.arange(3), [0, 2, 1]] = 20.0  # margin 40
    assert ce_loss(leaf(z), [0, 2, 1]).item() <= 1e-6
    assert abs(ce_loss(leaf(np.zeros((1, 4))), [3]).item() - np.log(4)) < 1e-12


def test_ce_matches_direct_sum():
    z = np.random.default_rng(0).normal(size=(3, 6))
    tgt = [1, 4, 0]
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    want = -sum(logp[i, t] for i, t in enumerate(tgt)) / 3
    assert abs(ce_loss(leaf(z), tgt).item() - want) < 1e-12


def test_ce_mask_and_errors():
    z = np.random.default_rng(1).normal(size=(2, 3, 5))
    tgt = np.array([[1, 2, 0], [3, 3, 3]])
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    full = ce_loss(leaf(z[:, :2]), tgt[:, :2], np.array([[1, 1], [1, 0]])).item()
    assert abs(ce_loss(leaf(z), tgt, mask).item() - full) < 1e-12
    with pytest.raises(ValueError):
        ce_loss(leaf(z), tgt[:, :2])
    with pytest.raises(ValueError):
        ce_loss(leaf(z), tgt, np.zeros((2, 3)))


def test_kl_examples():
    z = np.random.default_rng(2).normal(size=(4, 9))
    assert abs(kl_loss(z, leaf(z), 2.0).item()) <= 1e-12
    got = kl_loss(np.array([[np.log(3.0), 0.0]]), leaf([[0.0, 0.0]]), 1.0).item()
    assert abs(got - (0.75 * np.log(1.5) + 0.25 * np.log(0.5))) < 1e-12
    assert abs(got - 0.130812) < 5e-7
    assert kl_loss(z, leaf(z[::-1]), 1e6).item() <= 1e-9
    with pytest.raises(ValueError):
        kl_loss(z, leaf(z[:2]), 1.0)
    with pytest.raises(ValueError):
        kl_loss(z, leaf(z), -1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20))
def test_kl_nonnegative(seed, tau):
    rng = np.random.default_rng(seed)
    zt, zs = rng.normal(scale=4, size=(2, 3, 8)), rng.normal(scale=4, size=(2, 3, 8))
    assert kl_loss(zt, leaf(zs), tau).item() >= -1e-12


def test_kl_gradient_at_unit_temperature():
    rng = np.random.default_rng(3)
    zt, zs = rng.normal(size=(1, 7)), leaf(rng.normal(size=(1, 7)))
    tn.backward(kl_loss(zt, zs, 1.0))
    np.testing.assert_allclose(zs.grad, soften(zs.data, 1.0) - soften(zt, 1.0), rtol=0, atol=1e-8)


def test_config_variants_and_validation():
    assert DistillConfig.from_variant("ce", "s2t").target_source == kd.GOLD
    assert DistillConfig.from_variant("teacher_ce_kl", "t2t").use_kl
    assert DistillConfig(lam=0.5, tau=2.0).kl_weight == 2.0
    assert DistillConfig(use_kl=False).kl_weight == 0.0
    for bad in ({"lam": -1}, {"tau": 0}, {"target_source": "x"}, {"channel": "x"}):
        with pytest.raises(ValueError):
            DistillConfig(**bad)
    with pytest.raises(ValueError, match="variant"):
        DistillConfig.from_variant("kl_only", "s2t")


@pytest.fixture
def speech_batch(vocab, codebook):
    return make_samples(vocab, 3, seed=4, codebook=codebook)


def _perturbed(student, seed=0, scale=0.05):
    s = student.copy()
    rng = np.random.default_rng(seed)
    for n, t in s.tensors.items():
        t.data += scale * rng.normal(size=t.shape)
    return s.set_trainable(True)


def test_t2t_degenerate_configs(teacher, student, speech_batch):
    s = _perturbed(student)
    for cfg in (DistillConfig(lam=0.0, channel="t2t"), DistillConfig(use_kl=False, channel="t2t")):
        res = t2t_loss(teacher, s, speech_batch, cfg)
        assert res.total == res.ce


def test_t2t_fresh_student_has_zero_kl(teacher, student, speech_batch):
    res = t2t_loss(teacher, student, speech_batch, DistillConfig(channel="t2t"))
    assert res.kl == 0.0 and res.total == res.ce


def test_t2t_decomposition(teacher, student, speech_batch):
    s = _perturbed(student)
    cfg = DistillConfig(channel="t2t")
    res = t2t_loss(teacher, s, speech_batch, cfg)
    targets = kd.targets_for(speech_batch, cfg)
    zt = kd.teacher_logits(teacher, speech_batch, targets)
    zs, mask = tinylm.forward_batch(s, tinylm.embed_text(s, kd._question_matrix(speech_batch)),
                                    targets)
    tgt = np.array([list(t) for t in targets])
    assert abs(res.ce - ce_loss(zs, tgt, mask).item()) < 1e-12
    assert abs(res.kl - kl_loss(zt, zs, 2.0, mask).item()) < 1e-12
    assert abs(res.total - (res.ce + 2.0 * res.kl)) < 1e-12
    assert res.token_count == int(mask.sum())


def test_s2t_gold_ce_is_plain_speech_ce(teacher, student, speech_batch):
    s = _perturbed(student)
    cfg = DistillConfig.from_variant("ce", "s2t")
    res = s2t_loss(teacher, s, speech_batch, cfg)
    zs, mask = tinylm.forward_batch(
        s, tinylm.encode_speech(s, kd._frames_matrix(speech_batch)), [x.y for x in speech_batch])
    tgt = np.array([list(x.y) for x in speech_batch])
    assert res.total == ce_loss(zs, tgt, mask).item() and res.kl == 0.0


def test_s2t_with_exact_adapter_matches_t2t(teacher, student, codebook, vocab):
    """Zero jitter plus an adapter that reproduces text embeddings gives the text loss."""
    samples = make_samples(vocab, 3, seed=6)
    # unrounded frames, handed over directly
    speech = [modality.synthesize(codebook, x.q, 0, sigma=0.0) for x in samples]
    s = _perturbed(student, scale=0.02)
    toks = sorted({t for x in samples for t in x.q})
    X = np.hstack([codebook.rows[toks], np.ones((len(toks), 1))])
    sol, *_ = np.linalg.lstsq(X, s["tok_emb"].data[toks], rcond=None)
    assert np.allclose(X @ sol, s["tok_emb"].data[toks], atol=1e-10)
    s["adapter_w"].data[:] = sol[:-1]
    s["adapter_b"].data[:] = sol[-1]
    a = s2t_loss(teacher, s, samples, DistillConfig(channel="s2t"), speech=speech)
    b = t2t_loss(teacher, s, samples, DistillConfig(channel="t2t"))
    assert abs(a.kl - b.kl) < 1e-9 and abs(a.ce - b.ce) < 1e-9


def test_s2t_pairing(teacher, student, speech_batch, codebook):
    cfg = DistillConfig(channel="s2t")
    good = [modality.synthesize(codebook, x.q, 0) for x in speech_batch]
    s2t_loss(teacher, student, speech_batch, cfg, speech=good)
    bad = good[1:] + good[:1]
    with pytest.raises(PairingError):
        s2t_loss(teacher, student, speech_batch, cfg, speech=bad)
    with pytest.raises(PairingError):
        s2t_loss(teacher, student, [dataclasses.replace(x, frames=None) for x in speech_batch],
                 cfg)


def test_channel_mismatch(teacher, student, speech_batch):
    with pytest.raises(ValueError):
        t2t_loss(teacher, student, speech_batch, DistillConfig(channel="s2t"))
    with pytest.raises(ValueError):
        s2t_loss(teacher, teacher, speech_batch, DistillConfig(channel="s2t"))


def test_teacher_receives_no_gradient(teacher, student, speech_batch):
    t = teacher.copy().set_trainable(True)
    s = _perturbed(student)
    for fn, ch in ((t2t_loss, "t2t"), (s2t_loss, "s2t")):
        res = fn(t, s, speech_batch, DistillConfig(channel=ch))
        grads = tn.backward(res.loss)
        for p in t.parameters():
            assert p not in grads and (p.grad is None or not p.grad.any())


def test_missing_teacher_labels(teacher, student, speech_batch):
    plain = [dataclasses.replace(x, yhat=None) for x in speech_batch]
    with pytest.raises(ValueError, match="teacher label"):
        t2t_loss(teacher, student, plain, DistillConfig(channel="t2t"))


def test_teacher_targets_deterministic_and_capped(teacher, vocab):
    samples = [dataclasses.replace(x, yhat=None) for x in make_samples(vocab, 5, seed=8)]
    a = generate_teacher_targets(teacher, samples)
    assert a == generate_teacher_targets(teacher, samples)
    assert all(x.yhat[-1] == tinylm.EOS and len(x.yhat) <= 16 for x in a)
    rigged = teacher.copy()
    rigged["w_out"].data[:] = 0.0
    rigged["w_out"].data[:, 9] = 1.0
    rigged["lnf_g"].data[:] = 0.0
    rigged["lnf_b"].data[:] = 1.0
    capped = generate_teacher_targets(rigged, samples[:1])[0]
    assert len(capped.yhat) == 16 and capped.yhat[-1] == tinylm.EOS
    with pytest.raises(ValueError):
        generate_teacher_targets(tinylm.init_student_from_teacher(teacher, 0), samples)


def test_grad_check_losses_small(teacher, student, speech_batch):
    reps = kd.grad_check_losses(teacher, _perturbed(student), speech_batch, n_coords=16)
    assert set(reps) == {"t2t", "s2t"}
    assert all(r.passed for r in reps.values())
