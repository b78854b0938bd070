"""Acceptance suite A1-A10.

Each criterion prints one ``A<n> PASS|FAIL`` line with its measured value
and pinned tolerance, and the lines are repeated in the terminal summary.
Run standalone with ``python3 tests/test_acceptance.py`` to see them alone.
"""

import sys
import time

import numpy as np
import pytest

from bottlenecked.backbone import (BackboneConfig, BackboneParams, CacheState, decode_step, extend,
                                   forward, greedy_generate, prefill)
from bottlenecked.data import SynthTaskSpec, generate_synthetic
from bottlenecked.harness.checkpoint import params_digest
from bottlenecked.harness.instrument import measure_rewrite_magnitudes, snapshots_from_records
from bottlenecked.ib_lab import run_suite
from bottlenecked.numerics import Tape, Tensor, backward, finite_diff_check, precision
from bottlenecked.processor import (ProcessorConfig, ProcessorHook, ProcessorParams, block_forward,
                                    generate, invoke)
from bottlenecked.selection import build_selection
from bottlenecked.training import (Adam, TrainConfig, boundary_states, heldout_processor_ce, lr_at,
                                   processor_loss, processor_step, replay_loss, sft_step, train_loop)

RESULTS: dict[str, str] = {}

TOL = {
    "A4": 1e-4,   # max relative error, float64
    "A6": 1e-6,   # max abs deviation, float32
    "A7": 1e-9,   # bound / DPI tolerance
    "A8": 1e-5,   # max abs logit difference, float32
    "A9": 0.01,   # required relative CE reduction
    "A10": 1e-6,  # max abs difference to the oracle
}


def report(name, ok, detail, started):
    line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.1f}s)"
    RESULTS[name] = line
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def random_backbone(rng, L=None, H=None, dh=None, V=24, sharp=20.0):
    L = L or int(rng.integers(1, 5))
    H = H or int(rng.integers(1, 5))
    dh = dh or int(rng.choice([2, 4, 6]))
    cfg = BackboneConfig(n_layers=L, n_heads=H, d_model=H * dh, d_ff=2 * H * dh, vocab_size=V)
    p = BackboneParams.init(cfg, rng)
    for name, t in p.tensors.items():
        if name.endswith((".wq", ".wk")):
            t.data *= sharp
    return p


def random_processor(rng, cfg, d_p=8, gate=None, k=4):
    pr = ProcessorParams.init(ProcessorConfig(d_p=d_p, d_ff=2 * d_p, n_heads=2, k=k), cfg, rng,
                              zero_out=False)
    for i in range(cfg.n_layers):
        pr[f"p{i}.gate"].data[...] = rng.normal() if gate is None else gate
    return pr


# -- A1 ---------------------------------------------------------------------

def test_a1_gate_zero_equivalence():
    t0 = time.perf_counter()
    spec = SynthTaskSpec(modulus=5, chain_length=2, distractors=4, seed=11)
    v = spec.vocab()
    train = generate_synthetic(spec, 64, "train")
    cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=len(v))
    bb = BackboneParams.init(cfg, np.random.default_rng(0))
    opt = Adam(bb.parameters(), 1e-2)
    rng = np.random.default_rng(1)
    for _ in range(60):
        sft_step(bb, opt, [train[i] for i in rng.integers(0, 64, 16)])
    bb.freeze()
    proc = ProcessorParams.init(ProcessorConfig(d_p=16, d_ff=32, k=8), cfg, np.random.default_rng(2))
    prompts = [t.prompt for t in generate_synthetic(spec, 100, "test")]
    same, invocations = 0, 0
    for pr in prompts:
        hook = ProcessorHook(proc, "newline", newline=v.newline)
        a = generate(bb, pr, 24, hook, eos=v.eos)
        b = greedy_generate(bb, pr, 24, eos=v.eos)
        same += a == b
        invocations += hook.count
    report("A1", same == 100 and invocations > 100,
           f"identical {same}/100 generations, {invocations} Processor invocations, tolerance exact", t0)


# -- A2 ---------------------------------------------------------------------

def test_a2_out_of_selection_immutability():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad, touched = 0, 0
    for _ in range(200):
        bb = random_backbone(rng)
        bb.freeze()
        pr = random_processor(rng, bb.config, gate=float(rng.normal(0, 2)), k=int(rng.integers(0, 8)))
        n_prompt = int(rng.integers(1, 20))
        n_step = int(rng.integers(1, 8))
        toks = rng.integers(0, 24, n_prompt + n_step)
        cache, _ = prefill(bb, toks[:n_prompt])
        cache.begin_step()
        extend(bb, cache, toks[n_prompt:])
        pre_k = [k.data.copy() for k in cache.keys]
        pre_v = [v.data.copy() for v in cache.values]
        rec = invoke(cache, (n_prompt, n_prompt + n_step), pr, pr.config.k)
        for l in range(bb.config.n_layers):
            out = np.setdiff1d(np.arange(cache.length), rec.selection.merged(l))
            bad += not np.array_equal(pre_k[l][out], cache.keys[l].data[out])
            bad += not np.array_equal(pre_v[l][out], cache.values[l].data[out])
            touched += out.size < cache.length
    report("A2", bad == 0, f"{bad} layers with a changed unselected row over 200 invocations, tolerance exact",
           t0)


# -- A3 ---------------------------------------------------------------------

def test_a3_selection_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    with precision(np.float64):
        for _ in range(100):
            bb = random_backbone(rng)
            t = int(rng.integers(2, 33))
            start = int(rng.integers(1, t))
            k = int(rng.integers(0, 10))
            toks = rng.integers(0, 24, t)
            full = forward(bb, [toks]).attention          # per layer [1, H, t, t]
            cache, _ = prefill(bb, toks[:start])
            cache.begin_step()
            for tok in toks[start:]:
                decode_step(bb, cache, int(tok))
            sel = build_selection((start, t), cache, k)
            for l, att in enumerate(full):
                a = att[0]
                alpha = [np.mean([a[h, j, i] for h in range(a.shape[0]) for j in range(start, t)])
                         for i in range(start)]
                ranked = sorted(range(start), key=lambda i: (-alpha[i], i))
                mismatches += set(ranked[:k]) != set(sel.recalled[l].tolist())
    report("A3", mismatches == 0, f"{mismatches} per-layer top-k mismatches over 100 trials, tolerance exact", t0)


# -- A4 ---------------------------------------------------------------------

def test_a4_gradient_fidelity():
    t0 = time.perf_counter()
    spec = SynthTaskSpec(modulus=5, chain_length=2, distractors=1, distractor_vars=1, seed=4)
    v = spec.vocab()
    trace = generate_synthetic(spec, 1)[0]
    with precision(np.float64):
        rng = np.random.default_rng(4)
        cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=len(v))
        bb = BackboneParams.init(cfg, rng)
        for t in bb.tensors.values():
            if t.ndim == 2:
                t.data *= 10
        bb.freeze()
        pr = random_processor(rng, cfg, d_p=8, gate=0.0, k=3)
        assert len(trace.step_spans) == 3
        # gradient the training path actually back-propagates
        backward(processor_loss(bb, pr, trace, 3))
        trained = [t.grad.copy() for t in pr.parameters()]
        # the same objective as a plain function of the parameters
        states = boundary_states(bb, pr, trace, 3)
        for t in pr.parameters():
            t.grad = None
        backward(replay_loss(bb, pr, trace, states, 3))
        same = max(float(np.abs(a - t.grad).max()) for a, t in zip(trained, pr.parameters()))
        err = finite_diff_check(lambda: replay_loss(bb, pr, trace, states, 3), pr.parameters(), eps=1e-5)
    report("A4", err <= TOL["A4"] and same <= 1e-12,
           f"max relative error {err:.2e} over {pr.n_params()} Processor parameters (training-path gradient "
           f"differs by {same:.1e}), tolerance {TOL['A4']:g}", t0)


# -- A5 ---------------------------------------------------------------------

def test_a5_truncation():
    t0 = time.perf_counter()
    spec = SynthTaskSpec(modulus=5, chain_length=3, distractors=2, seed=5)
    v = spec.vocab()
    traces = generate_synthetic(spec, 3)
    rng = np.random.default_rng(5)
    cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=len(v))
    bb = BackboneParams.init(cfg, rng).freeze()
    pr = random_processor(rng, cfg, gate=0.0, k=3)

    captured = []

    def on_step(n, cache, step_loss):
        captured.append((step_loss, list(cache.keys) + list(cache.values)))

    processor_loss(bb, pr, traces[0], 3, on_step=on_step)
    leaks = 0
    reached = 0
    for n in range(1, len(captured)):
        loss_n = captured[n][0]
        tape = Tape.from_output(loss_n)
        grads = tape.run(np.ones_like(loss_n.data))
        before = captured[n - 1][1]                  # cache state detached at boundary n
        earlier = {id(t) for _, ts in captured[:n] for t in ts}
        leaks += sum(t._id in grads and np.any(grads[t._id]) for t in before)
        leaks += sum(id(node) in earlier for node in tape.nodes)
        reached += any(node is pr["p0.gate"] for node in tape.nodes)
    digest = params_digest(bb)
    opt = Adam(pr.parameters(), 1e-2)
    for _ in range(2):
        processor_step(bb, pr, opt, traces, TrainConfig(stage="processor", k=3))
    bb_grad = sum(t.grad is not None and bool(np.any(t.grad)) for t in bb.parameters())
    ok = leaks == 0 and bb_grad == 0 and params_digest(bb) == digest and reached == len(captured) - 1
    report("A5", ok, f"{leaks} gradient paths across a boundary, {bb_grad} backbone tensors with non-zero "
           f"grad, backbone digest {'unchanged' if params_digest(bb) == digest else 'CHANGED'}, tolerance exact",
           t0)


# -- A6 ---------------------------------------------------------------------

def test_a6_permutation_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        cfg = BackboneConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=8)
        d_p = int(rng.choice([8, 16, 32]))
        pr = ProcessorParams.init(ProcessorConfig(d_p=d_p, d_ff=2 * d_p, n_heads=4), cfg, rng,
                                  zero_out=False)
        rows = int(rng.integers(1, 40))
        u = rng.normal(size=(rows, d_p)).astype(np.float32)
        perm = rng.permutation(rows)
        a = block_forward(pr, 0, Tensor(u)).data
        b = block_forward(pr, 0, Tensor(u[perm])).data
        worst = max(worst, float(np.abs(a[perm] - b).max()))
    report("A6", worst <= TOL["A6"], f"max abs deviation {worst:.2e} over 100 trials, tolerance {TOL['A6']:g}", t0)


# -- A7 ---------------------------------------------------------------------

def test_a7_ib_theorem_suite():
    t0 = time.perf_counter()
    rep = run_suite(1000, 200, seed=7, tol=TOL["A7"])
    degenerate = sum(m["degenerate"] for m in rep["bound_trials"])
    report("A7", rep["violations"] == 0,
           f"{rep['violations']} violations over 1000 chains and 200 sequence models "
           f"({degenerate} degenerate), tolerance {TOL['A7']:g}", t0)


# -- A8 ---------------------------------------------------------------------

def test_a8_prefill_decode_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    cfg = BackboneConfig(n_layers=4, n_heads=4, d_model=64, d_ff=256, vocab_size=40)
    bb = BackboneParams.init(cfg, rng)
    for t in bb.tensors.values():
        if t.ndim == 2:
            t.data *= 10
    worst = 0.0
    for _ in range(50):
        toks = rng.integers(0, 40, int(rng.integers(1, 40)))
        full = forward(bb, [toks]).logits.data[0]
        cache, last = prefill(bb, toks[:1])
        rows = [last]
        for tok in toks[1:]:
            cache, last = decode_step(bb, cache, int(tok))
            rows.append(last)
        worst = max(worst, float(np.abs(np.stack(rows) - full).max()))
    report("A8", worst <= TOL["A8"], f"max abs logit difference {worst:.2e} on 50 prompts, tolerance "
           f"{TOL['A8']:g}", t0)


# -- A9 ---------------------------------------------------------------------

@pytest.mark.slow
def test_a9_synthetic_trend():
    t0 = time.perf_counter()
    spec = SynthTaskSpec(modulus=10, chain_length=3, distractors=4, vocab_size=64, seed=0)
    vocab = spec.vocab()
    steps = 1000
    sft_data = generate_synthetic(spec, steps * 16 + 1, "train")
    test = generate_synthetic(spec, 200, "test")

    cfg = BackboneConfig(n_layers=4, n_heads=4, d_model=128, d_ff=512, vocab_size=len(vocab))
    bb = BackboneParams.init(cfg, np.random.default_rng(0))
    opt = Adam(bb.parameters(), 2e-3)
    sched = TrainConfig(lr=2e-3, schedule="warmup_cosine")
    order = np.random.default_rng(1)
    for s in range(steps):
        batch = [sft_data[i] for i in order.integers(0, len(sft_data), 32)]
        sft_step(bb, opt, batch, lr_at(sched, s, steps))
    bb.freeze()

    tcfg = TrainConfig(stage="processor", k=16, lr=1e-3, batch_size=8, epochs=1)
    pcfg = ProcessorConfig(d_p=64, d_ff=128, k=16)
    train = sft_data[:400]
    closed = heldout_processor_ce(bb, ProcessorParams.init(pcfg, cfg, np.random.default_rng(0)), test, tcfg)
    trained = []
    for seed in range(3):
        proc = ProcessorParams.init(pcfg, cfg, np.random.default_rng(seed))
        train_loop(TrainConfig(**{**tcfg.__dict__, "seed": seed}), train, bb, proc)
        trained.append(heldout_processor_ce(bb, proc, test, tcfg))
    med = float(np.median(trained))
    rel = (closed - med) / closed
    report("A9", rel >= TOL["A9"], f"held-out CE gate-zero {closed:.5f}, trained median {med:.5f} "
           f"(seeds {', '.join(f'{c:.5f}' for c in trained)}), relative reduction {rel:.2%}, "
           f"required {TOL['A9']:.0%}", t0)


# -- A10 --------------------------------------------------------------------

def test_a10_instrumentation_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    bb = random_backbone(rng, L=3, H=2, dh=4).freeze()
    pr = random_processor(rng, bb.config, gate=1.0, k=4)
    hook = ProcessorHook(pr, "every_R", R=5, k=4, snapshot=True)
    greedy_generate(bb, list(rng.integers(0, 24, 12)), 20, [hook], eos=None)
    snaps = snapshots_from_records(hook.records)
    stats = measure_rewrite_magnitudes(snaps)

    def dist(a, b):
        na, nb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
        return 0.0 if na == 0 or nb == 0 else 1.0 - np.dot(a, b) / (na * nb)

    worst = 0.0
    partition_ok = True
    for row, rec in zip(stats.rows, hook.records):
        for part in "kv":
            groups = {"topk": [], "rsw": [], "all": []}
            for s in rec.snapshots:
                sel = rec.selection
                l = s["layer"]
                top = set(sel.recalled[l].tolist())
                rsw = set(sel.recent.tolist())
                idx = s["indices"].tolist()
                partition_ok &= not (top & rsw) and set(idx) == top | rsw
                for r, pos in enumerate(idx):
                    for h in range(s[f"{part}_pre"].shape[1]):
                        d = dist(s[f"{part}_pre"][r, h].astype(np.float64),
                                 s[f"{part}_post"][r, h].astype(np.float64))
                        groups["topk" if pos in top else "rsw"].append(d)
                        groups["all"].append(d)
            for g, vals in groups.items():
                if vals:
                    worst = max(worst, abs(row[f"{part}_{g}"] - float(np.mean(vals))))
                else:
                    partition_ok &= np.isnan(row[f"{part}_{g}"])
        partition_ok &= row["n_topk"] + row["n_rsw"] == sum(len(s["indices"]) for s in rec.snapshots)
    ok = worst <= TOL["A10"] and partition_ok and len(stats.rows) == hook.count
    report("A10", ok, f"max abs difference to oracle {worst:.2e} over {hook.count} invocations, partitions "
           f"{'disjoint and exhaustive' if partition_ok else 'BROKEN'}, tolerance {TOL['A10']:g}", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
