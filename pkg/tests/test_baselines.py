import numpy as np
import pytest

from bottlenecked import backbone as bbmod
from bottlenecked.backbone import greedy_generate, prefill
from bottlenecked.baselines import (BaselineConfig, insert_pause_tokens, latent_rollout_decode,
                                    latent_rollout_loss, loss_mask, remove_pause_tokens)
from bottlenecked.data import TraceError
from bottlenecked.numerics import backward
from bottlenecked.training import sft_loss

from conftest import toy_backbone


def test_pause_identity_and_shift(traces):
    t = traces[0]
    same = insert_pause_tokens(t, 0)
    assert same.tokens == t.tokens and same.step_spans == t.step_spans
    p = insert_pause_tokens(t, 16)
    assert p.prompt_len == t.prompt_len + 16
    assert p.tokens[t.prompt_len:t.prompt_len + 16] == [4] * 16
    assert p.step_spans == [(a + 16, b + 16) for a, b in t.step_spans]
    p.validate()


def test_pause_mask_excludes_inserted_positions(traces):
    t = traces[1]
    p = insert_pause_tokens(t, 5)
    m = loss_mask(p)
    inserted = set(range(t.prompt_len, t.prompt_len + 5))
    assert not any(m[i] for i in inserted)
    kept = [i for i in range(len(p.tokens)) if i not in inserted]
    assert np.array_equal(m[kept], loss_mask(t))


def test_pause_sft_loss_has_no_pause_targets(small_task, traces):
    p = toy_backbone(vocab_size=len(small_task.vocab()))
    t = traces[0]
    a = sft_loss(p, [insert_pause_tokens(t, 3)])
    assert np.isfinite(a.item())


def test_pause_reversible(traces):
    for t in traces:
        assert remove_pause_tokens(insert_pause_tokens(t, 7)) == t


def test_pause_length_limit(traces):
    with pytest.raises(TraceError):
        insert_pause_tokens(traces[0], 600)


def test_baseline_config():
    assert BaselineConfig().n_special == 16
    with pytest.raises(ValueError):
        BaselineConfig(n_special=-1)
    with pytest.raises(ValueError):
        BaselineConfig(kind="coprocessor")


def test_latent_zero_equals_greedy():
    p = toy_backbone(seed=3)
    assert latent_rollout_decode(p, [1, 5, 6], 0, 8, eos=None) == greedy_generate(p, [1, 5, 6], 8, eos=None)


def test_latent_rollout_skips_lm_head(monkeypatch):
    p = toy_backbone(seed=3)
    calls = []
    real = bbmod.forward

    def spy(*a, **kw):
        calls.append(kw.get("head", True))
        return real(*a, **kw)

    monkeypatch.setattr(bbmod, "forward", spy)
    out = latent_rollout_decode(p, [1, 5, 6], 4, 1)
    assert len(out) == 4
    # prefill, four latent steps without the LM head, then one token step
    assert calls == [True, False, False, False, False, True]


def test_latent_rollout_emits_no_latent_tokens():
    p = toy_backbone(seed=3)
    out = latent_rollout_decode(p, [1, 5, 6], 6, 5, eos=None)
    assert len(out) == 3 + 5


def test_latent_rollout_cache_length():
    from bottlenecked.baselines import _rollout

    p = toy_backbone()
    cache, _ = prefill(p, [1, 2, 3])
    _rollout(p, cache, 5)
    assert cache.length == 3 + 5


def test_latent_rollout_loss_backprops(traces, small_task):
    p = toy_backbone(vocab_size=len(small_task.vocab()))
    loss = latent_rollout_loss(p, traces[0], 3)
    backward(loss)
    assert np.any(p["l0.wq"].grad)
