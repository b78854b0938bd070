"""
Training a Processor on a frozen backbone
=========================================

Teacher forcing, one step at a time: at each boundary the Processor rewrites
the cache and the next step's tokens are scored on top of it. Gradients stop
at every boundary, so each step loss trains only the rewrite just before it.
"""

import numpy as np

from bottlenecked.backbone import BackboneConfig, BackboneParams
from bottlenecked.data import SynthTaskSpec, generate_synthetic
from bottlenecked.harness.checkpoint import params_digest
from bottlenecked.processor import ProcessorConfig, ProcessorParams
from bottlenecked.training import (Adam, TrainConfig, heldout_processor_ce, sft_step, train_loop)

spec = SynthTaskSpec(modulus=5, chain_length=3, distractors=4, seed=2)
vocab = spec.vocab()
train = generate_synthetic(spec, 256, "train")
test = generate_synthetic(spec, 48, "test")

cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=len(vocab))
bb = BackboneParams.init(cfg, np.random.default_rng(0))
opt = Adam(bb.parameters(), 1e-2)
rng = np.random.default_rng(0)
for _ in range(120):
    sft_step(bb, opt, [train[i] for i in rng.integers(0, len(train), 16)])

tcfg = TrainConfig(stage="processor", batch_size=8, lr=3e-3, k=8)
proc = ProcessorParams.init(ProcessorConfig(d_p=16, d_ff=32, k=8), cfg, np.random.default_rng(0))
digest = params_digest(bb)
print("gate-zero CE", round(heldout_processor_ce(bb, proc, test, tcfg), 4))

res = train_loop(tcfg, train[:128], bb, proc)
print("trained CE  ", round(heldout_processor_ce(bb, proc, test, tcfg), 4))
print("gate strengths", np.round(proc.gate_strengths(), 4))
print("backbone untouched:", params_digest(bb) == digest)
