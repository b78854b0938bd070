"""
A small decoder and its KV cache
================================

Keys are rotated before they are cached, so a cached row never needs to be
touched again during normal decoding. Attention rows of the current step are
buffered on the cache for later selection.
"""

import numpy as np

from bottlenecked.backbone import BackboneConfig, BackboneParams, decode_step, forward, prefill
from bottlenecked.data import SynthTaskSpec, generate_synthetic
from bottlenecked.training import Adam, heldout_sft_ce, sft_step

spec = SynthTaskSpec(modulus=5, chain_length=2, distractors=2, seed=1)
vocab = spec.vocab()
train = generate_synthetic(spec, 256, "train")
test = generate_synthetic(spec, 32, "test")

cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=len(vocab))
params = BackboneParams.init(cfg, np.random.default_rng(0))
print(params.n_params(), "parameters")

opt = Adam(params.parameters(), 1e-2)
rng = np.random.default_rng(0)
for step in range(150):
    loss = sft_step(params, opt, [train[i] for i in rng.integers(0, len(train), 16)])
    if step % 50 == 0:
        print(step, round(loss, 3), round(heldout_sft_ce(params, test), 3))

# prefill once, or feed one token at a time: same logits
toks = test[0].tokens[:12]
full = forward(params, [toks]).logits.data[0]
cache, last = prefill(params, toks[:1])
rows = [last]
for tok in toks[1:]:
    cache, last = decode_step(params, cache, tok)
    rows.append(last)
print("max difference", np.abs(np.stack(rows) - full).max())

print("cache rows", cache.length, "key shape", cache.keys[0].shape)
print("buffered attention rows", sorted(cache.attn_rows[0])[:5], "...")
