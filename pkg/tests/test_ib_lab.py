import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottlenecked.ib_lab import (DiscreteChain, IBError, ToySeqModel, entropy, exact_mi,
                                 expected_log_likelihood, run_suite, verify_dpi,
                                 verify_theorem_bounds, write_report)


def loop_mi(j):
    """Second, loop-based summation oracle."""
    rows, cols = len(j), len(j[0])
    pa = [sum(j[a][b] for b in range(cols)) for a in range(rows)]
    pb = [sum(j[a][b] for a in range(rows)) for b in range(cols)]
    total = 0.0
    for a in range(rows):
        for b in range(cols):
            if j[a][b] > 0:
                total += j[a][b] * math.log(j[a][b] / (pa[a] * pb[b]), 2)
    return total


def test_mi_identity_and_independent():
    assert exact_mi(np.eye(2) / 2) == pytest.approx(1.0, abs=1e-15)
    assert exact_mi(np.outer([0.3, 0.7], [0.2, 0.5, 0.3])) == pytest.approx(0.0, abs=1e-15)


def test_mi_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        j = rng.random((3, 3))
        j /= j.sum()
        assert abs(exact_mi(j) - loop_mi(j.tolist())) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_mi_nonnegative_and_symmetric(a, b, seed):
    rng = np.random.default_rng(seed)
    j = rng.random((a, b)) * (rng.random((a, b)) > 0.3)
    if j.sum() == 0:
        j[0, 0] = 1
    j /= j.sum()
    assert exact_mi(j) >= -1e-12
    assert exact_mi(j) == pytest.approx(exact_mi(j.T), abs=1e-12)


def test_mi_rejects_bad_tables():
    with pytest.raises(IBError):
        exact_mi(np.array([[0.6, -0.1], [0.25, 0.25]]))
    with pytest.raises(IBError):
        exact_mi(np.array([[0.5, 0.1], [0.1, 0.1]]))


def test_dpi_constant_and_identity_hops():
    prior = np.array([0.2, 0.3, 0.5])
    t1 = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    const = DiscreteChain(prior, [t1, np.array([[1.0], [1.0]])])
    rep = verify_dpi(const)
    assert rep.ok and rep.information[1] == 0.0
    ident = verify_dpi(DiscreteChain(prior, [t1, np.eye(2)]))
    assert ident.ok
    assert ident.information[0] == pytest.approx(ident.information[1], abs=1e-15)


def test_dpi_flags_a_non_chain():
    """A report built from an increasing sequence must fail."""
    prior = np.array([0.5, 0.5])
    chain = DiscreteChain(prior, [np.array([[0.5, 0.5], [0.5, 0.5]]), np.eye(2)])
    chain.joint_with_x = lambda i: [np.outer(prior, [0.5, 0.5]), np.eye(2) / 2][i]
    rep = verify_dpi(chain)
    assert not rep.ok and rep.violations[0][:2] == (0, 1)


def test_chain_validates_rows():
    with pytest.raises(IBError):
        DiscreteChain([0.5, 0.5], [np.array([[0.5, 0.6], [0.5, 0.5]])])


def test_random_chains_no_violations():
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert verify_dpi(DiscreteChain.random(rng, depth=3)).ok


def uniform_binary(N):
    return np.full((2,) * (N + 1), 0.5 ** (N + 1))


def test_uniform_binary_one_bit():
    p = uniform_binary(1)
    m = ToySeqModel(p, [np.array([0, 1]), np.arange(4)], [np.full((2, 2), 0.5)])
    rep = verify_theorem_bounds(m)
    assert rep.log_likelihood == pytest.approx(-1.0, abs=1e-15)
    assert rep.terms["I_code_next"] == [0.0]
    assert rep.ok


def test_true_predictor_injective_encoder_is_tight():
    rng = np.random.default_rng(3)
    A, N = 3, 3
    p = rng.dirichlet(np.ones(A ** (N + 1))).reshape((A,) * (N + 1))
    enc = [np.arange(A ** (n + 1)) for n in range(N + 1)]
    m = ToySeqModel.with_true_predictor(p, enc)
    rep = verify_theorem_bounds(m)
    target = -sum(rep.terms["H_next_given_prefix"])
    assert rep.log_likelihood == pytest.approx(target, abs=1e-12)
    assert rep.code_bound == pytest.approx(rep.log_likelihood, abs=1e-12)
    assert rep.ok


def test_constant_encoder_prefix_bound_with_slack():
    rng = np.random.default_rng(4)
    A, N = 2, 3
    p = rng.dirichlet(np.ones(A ** (N + 1))).reshape((A,) * (N + 1))
    enc = [np.zeros(A ** (n + 1), dtype=int) for n in range(N + 1)]
    m = ToySeqModel.with_true_predictor(p, enc)
    rep = verify_theorem_bounds(m)
    assert rep.terms["I_prefix_code"] == pytest.approx([0.0] * N, abs=1e-12)
    assert rep.prefix_bound == pytest.approx(-sum(rep.terms["H_next_given_prefix"]), abs=1e-12)
    assert rep.log_likelihood < rep.prefix_bound
    assert rep.ok


def test_zero_predictor_is_degenerate_but_valid():
    p = uniform_binary(1)
    m = ToySeqModel(p, [np.array([0, 1]), np.arange(4)], [np.array([[1.0, 0.0], [1.0, 0.0]])])
    rep = verify_theorem_bounds(m)
    assert rep.degenerate and rep.ok
    assert expected_log_likelihood(m) == -np.inf
    assert json.dumps(rep.to_dict())


def test_log_likelihood_against_direct_sum():
    rng = np.random.default_rng(5)
    for _ in range(10):
        m = ToySeqModel.random(rng, max_alphabet=3, max_horizon=3)
        A, N = m.alphabet, m.horizon
        total = 0.0
        for s in np.ndindex(*(A,) * (N + 1)):
            ps = m.p[s]
            if ps == 0:
                continue
            for n in range(N):
                prefix = np.ravel_multi_index(s[: n + 1], (A,) * (n + 1))
                c = m.encoders[n][prefix]
                total += ps * math.log2(m.predictor[n][c][s[n + 1]]) if m.predictor[n][c][s[n + 1]] > 0 else -np.inf
        assert expected_log_likelihood(m) == pytest.approx(total, abs=1e-12) or total == -np.inf


def test_deterministic_encoder_mi_equals_code_entropy():
    rng = np.random.default_rng(6)
    for _ in range(30):
        m = ToySeqModel.random(rng)
        for n in range(1, m.horizon + 1):
            j = m.prefix_code_joint(n)
            assert exact_mi(j) == pytest.approx(entropy(j.sum(axis=0)), abs=1e-12)


def test_model_validation():
    with pytest.raises(IBError):
        ToySeqModel(uniform_binary(1), [np.array([0, 1])], [np.full((2, 2), 0.5)])
    with pytest.raises(IBError):
        ToySeqModel(uniform_binary(1), [np.array([0, 3]), np.arange(4)], [np.full((2, 2), 0.5)])


def test_suite_report(tmp_path):
    rep = run_suite(50, 20, seed=2)
    assert rep["violations"] == 0
    write_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["violations"] == 0
