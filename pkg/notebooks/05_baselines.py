"""
Token-mediated baselines
========================

Pause tokens buy extra forward passes by padding the prompt. Latent rollout
feeds the final hidden state straight back in as the next input vector.
Neither touches existing cache rows.
"""

import numpy as np

from bottlenecked.backbone import BackboneConfig, BackboneParams, prefill
from bottlenecked.baselines import (_rollout, insert_pause_tokens, latent_rollout_decode,
                                    loss_mask, remove_pause_tokens)
from bottlenecked.data import SynthTaskSpec, generate_synthetic

spec = SynthTaskSpec()
vocab = spec.vocab()
t = generate_synthetic(spec, 1)[0]

p = insert_pause_tokens(t, 16, vocab.pause)
print(vocab.text(p.prompt))
print("prompt", t.prompt_len, "->", p.prompt_len, "; loss positions", int(loss_mask(p).sum()),
      "of", len(p.tokens))
print("reversible:", remove_pause_tokens(p) == t)

cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=len(vocab))
bb = BackboneParams.init(cfg, np.random.default_rng(0))
out = latent_rollout_decode(bb, t.prompt, 16, 8, eos=None)
print("emitted", len(out) - t.prompt_len, "tokens after 16 silent steps")

cache, _ = prefill(bb, t.prompt)
_rollout(bb, cache, 16)
print("cache rows", cache.length, "=", t.prompt_len, "+ 16")
