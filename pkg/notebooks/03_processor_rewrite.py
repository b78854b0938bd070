"""
Selecting and rewriting cache rows
==================================

At a step boundary the Processor rewrites two groups of rows per layer: the
step that just finished, and the k earlier positions that step attended to
most. Every other row stays bit-identical.
"""

import numpy as np

from bottlenecked.backbone import BackboneConfig, BackboneParams, extend, greedy_generate, prefill
from bottlenecked.processor import ProcessorConfig, ProcessorHook, ProcessorParams, generate, invoke
from bottlenecked.selection import build_selection

cfg = BackboneConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=20)
bb = BackboneParams.init(cfg, np.random.default_rng(0))
for name, t in bb.tensors.items():
    if name.endswith((".wq", ".wk")):
        t.data *= 30

prompt = [1, 5, 6, 7, 8, 9, 10, 11, 2]
cache, _ = prefill(bb, prompt)
cache.begin_step()
extend(bb, cache, [12, 13, 2])

sel = build_selection((9, 12), cache, k=3)
for layer in range(2):
    print("layer", layer, "recalled", sel.recalled[layer], "recent", sel.recent)
    print("   recall mass", np.round(sel.mass[layer], 3))

proc = ProcessorParams.init(ProcessorConfig(d_p=8, d_ff=16, n_heads=2, k=3), cfg,
                            np.random.default_rng(1), zero_out=False)
proc["p0.gate"].data[...] = 0.0
before = cache.keys[0].data.copy()
rec = invoke(cache, (9, 12), proc)
changed = np.where(np.any(before != cache.keys[0].data, axis=(1, 2)))[0]
print("rows changed in layer 0:", changed, "selected:", rec.selection.merged(0))

# with W_out at zero (the initial state) generation is exactly the backbone's
fresh = ProcessorParams.init(ProcessorConfig(d_p=8, d_ff=16, n_heads=2, k=3), cfg, np.random.default_rng(2))
hook = ProcessorHook(fresh, "every_R", R=4)
print(generate(bb, prompt, 12, hook, eos=None) == greedy_generate(bb, prompt, 12, eos=None),
      hook.count, "invocations")
