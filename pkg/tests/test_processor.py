import numpy as np
import pytest

from bottlenecked.backbone import CacheState, extend, greedy_generate, prefill
from bottlenecked.numerics import NumericsError, Tensor, ops
from bottlenecked.processor import (ProcessorHook, ProcessorParams, apply_rewrite, block_forward,
                                    form_kv_tokens, generate, invoke, load_records, save_records)
from bottlenecked.selection import SelectionSet, build_selection

from conftest import sharpen, toy_backbone, toy_processor


def primed(p, prompt=(1, 5, 6, 7, 2), step=(8, 9, 2)):
    cache, _ = prefill(p, list(prompt))
    cache.begin_step()
    extend(p, cache, list(step))
    return cache, (len(prompt), len(prompt) + len(step))


def test_init_shapes_and_gate():
    p = toy_backbone()
    pr = toy_processor(p)
    assert pr["p0.w_in"].shape == (2 * 2 * 8, 8)
    assert pr["p1.gate"].shape == ()
    assert np.all(pr["p0.w_out"].data == 0)
    assert pr.gate_strengths()[0] == pytest.approx(0.0179862, abs=1e-6)


def test_kv_tokens_layout():
    p = toy_backbone()
    cache, span = primed(p)
    sel = build_selection(span, cache, 2)
    x = form_kv_tokens(cache, sel, 1).data
    idx = sel.merged(1)
    assert x.shape == (idx.size, 2 * 16)
    assert np.array_equal(x[:, :16], cache.keys[1].data[idx].reshape(idx.size, -1))
    assert np.array_equal(x[:, 16:], cache.values[1].data[idx].reshape(idx.size, -1))


def test_zero_out_rewrite_is_identity():
    p = toy_backbone()
    cache, span = primed(p)
    before = [k.data.copy() for k in cache.keys]
    invoke(cache, span, toy_processor(p), 3)
    assert all(np.array_equal(a, b.data) for a, b in zip(before, cache.keys))
    assert cache.step_start == cache.length


def test_rewrite_touches_only_selected_rows():
    p = sharpen(toy_backbone(seed=1))
    cache, span = primed(p, prompt=(1, 5, 6, 7, 8, 9, 10, 2))
    pre_k = [k.data.copy() for k in cache.keys]
    rec = invoke(cache, span, toy_processor(p, zero_out=False), 2)
    for l in range(2):
        sel = rec.selection.merged(l)
        out = np.setdiff1d(np.arange(cache.length), sel)
        assert np.array_equal(pre_k[l][out], cache.keys[l].data[out])
        assert not np.array_equal(pre_k[l][sel], cache.keys[l].data[sel])


def test_apply_rewrite_scales_by_gate():
    p = toy_backbone()
    cache, span = primed(p)
    sel = SelectionSet(np.array([6]), [np.array([1]), np.array([1])], [None, None])
    d = np.ones((2, 32), np.float32)
    k0 = cache.keys[0].data.copy()
    apply_rewrite(cache, sel, 0, Tensor(d), Tensor(np.asarray(0.0, np.float32)))
    assert np.allclose(cache.keys[0].data[[1, 6]] - k0[[1, 6]], 0.5)


def test_apply_rewrite_rejects_misaligned():
    p = toy_backbone()
    cache, span = primed(p)
    sel = SelectionSet(np.array([6]), [np.array([1]), np.array([1])], [None, None])
    with pytest.raises(NumericsError, match="not aligned"):
        apply_rewrite(cache, sel, 0, Tensor(np.ones((3, 32), np.float32)), Tensor(np.float32(0)))


def test_block_permutation_equivariance():
    p = toy_backbone()
    pr = toy_processor(p, zero_out=False)
    u = np.random.default_rng(0).normal(size=(7, 8)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(7)
    a = block_forward(pr, 0, Tensor(u)).data
    b = block_forward(pr, 0, Tensor(u[perm])).data
    assert np.abs(a[perm] - b).max() <= 1e-6


def test_hook_newline_count():
    p = toy_backbone()
    pr = toy_processor(p)
    hook = ProcessorHook(pr, "newline", newline=2)
    out = greedy_generate(p, [1, 5, 2], 12, [hook], eos=None)
    assert hook.count == 1 + out[3:].count(2)


def test_hook_every_r_count():
    p = toy_backbone()
    hook = ProcessorHook(toy_processor(p), "every_R", R=4)
    greedy_generate(p, [1, 5, 2], 13, [hook], eos=None)
    assert hook.count == 1 + 13 // 4
    spans = [r.step_span for r in hook.records]
    assert spans[0] == (0, 3) and spans[1] == (3, 7)


def test_gate_zero_generation_identical():
    p = toy_backbone(seed=5)
    hook = ProcessorHook(toy_processor(p), "every_R", R=2)
    assert generate(p, [1, 5, 6], 10, hook, eos=None) == greedy_generate(p, [1, 5, 6], 10, eos=None)


def test_prompt_newline_triggers():
    p = toy_backbone()
    hook = ProcessorHook(toy_processor(p), "newline", newline=2)
    generate(p, [1, 5, 2, 6, 2, 7], 0, hook, prompt_newline_triggers=True)
    assert [r.step_span for r in hook.records] == [(0, 3), (3, 5), (5, 6)]


def test_closed_copy():
    p = toy_backbone()
    pr = toy_processor(p, zero_out=False)
    c = pr.closed()
    assert np.all(c["p0.w_out"].data == 0)
    assert not np.all(pr["p0.w_out"].data == 0)


def test_record_roundtrip(tmp_path):
    p = sharpen(toy_backbone(seed=2))
    hook = ProcessorHook(toy_processor(p, zero_out=False), "every_R", R=3, k=2, snapshot=True)
    greedy_generate(p, [1, 5, 6, 7], 6, [hook], eos=None)
    save_records(tmp_path / "rec", hook.records)
    back = load_records(tmp_path / "rec")
    assert len(back) == hook.count * 2
    for r in back:
        snap = hook.records[r["invocation"]].snapshots[r["layer"]]
        for part in ("k_pre", "k_post", "v_pre", "v_post"):
            assert snap[part].tobytes() == r[part].tobytes()
        assert np.array_equal(snap["recalled"], r["recalled"])
