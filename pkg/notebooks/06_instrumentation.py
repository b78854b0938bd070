"""
How far do rewrites move the cache?
===================================

With snapshots on, each invocation keeps the selected rows before and after
the rewrite. The cosine distance between them is averaged over recalled
rows, the recent window, and both together, and per (layer, head).
"""

import numpy as np

from bottlenecked.backbone import BackboneConfig, BackboneParams, greedy_generate
from bottlenecked.harness.instrument import measure_rewrite_magnitudes, snapshots_from_records
from bottlenecked.processor import ProcessorConfig, ProcessorHook, ProcessorParams

cfg = BackboneConfig(n_layers=3, n_heads=2, d_model=16, d_ff=32, vocab_size=20)
bb = BackboneParams.init(cfg, np.random.default_rng(0))
proc = ProcessorParams.init(ProcessorConfig(d_p=8, d_ff=16, n_heads=2, k=4), cfg,
                            np.random.default_rng(1), zero_out=False)
for i in range(3):
    proc[f"p{i}.gate"].data[...] = -1.0 + i

hook = ProcessorHook(proc, "every_R", R=6, snapshot=True)
greedy_generate(bb, list(range(1, 13)), 24, [hook], eos=None)
stats = measure_rewrite_magnitudes(snapshots_from_records(hook.records))

print("inv   k_topk   k_rsw    v_topk   v_rsw")
for r in stats.rows:
    print(f"{r['invocation']:3d}  {r['k_topk']:.4f}  {r['k_rsw']:.4f}  {r['v_topk']:.4f}  {r['v_rsw']:.4f}")
print("value heatmap (layer x head)")
print(np.round(stats.heatmap_v, 4))
