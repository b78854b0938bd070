import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bottlenecked.backbone import decode_step, prefill
from bottlenecked.selection import (SelectionError, SelectionSet, build_selection,
                                    compute_recall_mass, select_topk)

from conftest import sharpen, toy_backbone


def brute_alpha(rows, recent, prior):
    out = []
    for i in prior:
        acc = 0.0
        n = 0
        for j in recent:
            for h in range(rows[j].shape[0]):
                acc += float(rows[j][h, i])
                n += 1
        out.append(acc / n)
    return np.array(out)


def test_topk_ties_prefer_smaller_position():
    assert list(select_topk(np.array([0.2, 0.5, 0.5, 0.5, 0.1]), 2)) == [1, 2]
    assert list(select_topk(np.array([0.3, 0.3]), 5)) == [0, 1]
    assert select_topk(np.array([0.3, 0.3]), 0).size == 0


def test_topk_rejects_negative_k():
    with pytest.raises(SelectionError):
        select_topk(np.ones(3), -1)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(0, 20), elements=st.sampled_from([0.0, 0.1, 0.25, 0.5])),
       st.integers(0, 25))
def test_topk_against_sorted_oracle(mass, k):
    got = select_topk(mass, k)
    ranked = sorted(range(mass.size), key=lambda i: (-mass[i], i))
    assert list(got) == sorted(ranked[:k])


def test_recall_mass_matches_brute_force():
    rng = np.random.default_rng(0)
    rows = {}
    for j in range(6, 10):
        r = rng.random((3, j + 1))
        rows[j] = r / r.sum(axis=1, keepdims=True)
    alpha = compute_recall_mass(rows, range(6, 10), range(6))
    assert np.allclose(alpha, brute_alpha(rows, range(6, 10), range(6)), atol=1e-15)


def test_missing_rows_raise():
    with pytest.raises(SelectionError, match="no buffered"):
        compute_recall_mass({}, [3], [0, 1])


def test_build_selection_on_live_cache():
    p = sharpen(toy_backbone(seed=4))
    cache, _ = prefill(p, [1, 5, 6, 7, 8, 9, 2])
    cache.begin_step()
    for t in [10, 11, 2]:
        decode_step(p, cache, t)
    sel = build_selection((7, 10), cache, 3)
    assert list(sel.recent) == [7, 8, 9]
    for l in range(2):
        assert sel.recalled[l].size == 3
        assert sel.recalled[l].max() < 7
        m = sel.merged(l)
        assert np.all(np.diff(m) > 0)
        assert list(sel.is_recalled(l)) == [True] * 3 + [False] * 3


def test_k_larger_than_prior_takes_all():
    p = toy_backbone()
    cache, _ = prefill(p, [1, 2, 3])
    cache.begin_step()
    decode_step(p, cache, 4)
    sel = build_selection((3, 4), cache, 10)
    assert list(sel.recalled[0]) == [0, 1, 2]


def test_empty_span_raises():
    p = toy_backbone()
    cache, _ = prefill(p, [1, 2, 3])
    with pytest.raises(SelectionError):
        build_selection((3, 3), cache, 2)
    with pytest.raises(SelectionError):
        build_selection((1, 9), cache, 2)
