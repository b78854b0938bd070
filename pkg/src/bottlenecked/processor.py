"""The Cache Processor: one small non-causal transformer block per backbone
layer that rewrites selected cache rows through a gated residual update.

For layer ``l`` the selected rows are turned into KV-tokens (all-head key
concatenated with all-head value), projected to width ``d_p``, mixed by a
bidirectional pre-norm block, projected back and added to the cache scaled
by ``sigmoid(gate_l)``. Nothing is appended and nothing is compressed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .backbone import BackboneConfig, BackboneParams, CacheState, argmax, decode_step, extend
from .numerics import NumericsError, Tensor, default_dtype, no_grad
from .numerics import ops
from .selection import SelectionSet, build_selection

BLOCK_KEYS = ("w_in", "norm1", "wq", "wk", "wv", "wo", "norm2", "w1", "w2", "w_out", "gate")


@dataclass(frozen=True)
class ProcessorConfig:
    d_p: int = 64
    d_ff: int = 128
    n_heads: int = 4
    k: int = 32
    gate_init: float = -4.0

    def __post_init__(self):
        if self.d_ff < self.d_p:
            raise ValueError("d_ff must be >= d_p")
        if self.d_p % self.n_heads:
            raise ValueError("d_p must be divisible by n_heads")
        if self.k < 0:
            raise ValueError("k must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class ProcessorParams:
    """Tensors named ``p{l}.<key>`` for each backbone layer ``l``."""

    def __init__(self, config: ProcessorConfig, backbone: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.backbone = backbone
        self.tensors = tensors

    @classmethod
    def init(cls, config: ProcessorConfig, backbone: BackboneConfig, rng: np.random.Generator,
             zero_out: bool = True) -> "ProcessorParams":
        dt = default_dtype()
        w = 2 * backbone.n_heads * backbone.d_head
        dp, f = config.d_p, config.d_ff

        def normal(shape, fan_in):
            return Tensor(rng.normal(0, 1 / math.sqrt(fan_in), size=shape).astype(dt), requires_grad=True)

        t = {}
        for i in range(backbone.n_layers):
            t[f"p{i}.w_in"] = normal((w, dp), w)
            t[f"p{i}.norm1"] = Tensor(np.ones(dp, dt), requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                t[f"p{i}.{name}"] = normal((dp, dp), dp)
            t[f"p{i}.norm2"] = Tensor(np.ones(dp, dt), requires_grad=True)
            t[f"p{i}.w1"] = normal((dp, f), dp)
            t[f"p{i}.w2"] = normal((f, dp), f)
            t[f"p{i}.w_out"] = (
                Tensor(np.zeros((dp, w), dt), requires_grad=True) if zero_out else normal((dp, w), dp)
            )
            t[f"p{i}.gate"] = Tensor(np.asarray(config.gate_init, dt), requires_grad=True)
        return cls(config, backbone, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def gate_strengths(self) -> list[float]:
        return [float(ops._logistic(self[f"p{i}.gate"].data)) for i in range(self.backbone.n_layers)]

    def closed(self) -> "ProcessorParams":
        """Copy with every ``w_out`` zeroed, so each rewrite is exactly zero."""
        t = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        for i in range(self.backbone.n_layers):
            t[f"p{i}.w_out"].data[...] = 0
        return ProcessorParams(self.config, self.backbone, t)


def form_kv_tokens(cache: CacheState, selection: SelectionSet, layer: int) -> Tensor:
    """Selected rows of ``layer`` as ``[rows, 2 * H * d_head]``, ascending position."""
    idx = selection.merged(layer)
    t = cache.length
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise NumericsError(f"selection index outside cache of length {t}")
    n = idx.size
    k = ops.reshape(ops.take(cache.keys[layer], idx, axis=0), (n, -1))
    v = ops.reshape(ops.take(cache.values[layer], idx, axis=0), (n, -1))
    return ops.concat([k, v], axis=1)


def block_forward(params: ProcessorParams, layer: int, u: Tensor) -> Tensor:
    """Bidirectional pre-norm transformer block over ``u`` ([rows, d_p]).

    No positional signal enters here, so permuting rows permutes the output.
    """
    p = lambda k: params[f"p{layer}.{k}"]  # noqa: E731
    n, dp = u.shape
    H = params.config.n_heads
    dh = dp // H
    x = ops.mul(ops.rms_norm(u), p("norm1"))
    q = ops.transpose(ops.reshape(x @ p("wq"), (n, H, dh)), (1, 0, 2))
    k = ops.transpose(ops.reshape(x @ p("wk"), (n, H, dh)), (1, 2, 0))
    v = ops.transpose(ops.reshape(x @ p("wv"), (n, H, dh)), (1, 0, 2))
    a = ops.softmax(ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh)))
    mixed = ops.reshape(ops.transpose(ops.matmul(a, v), (1, 0, 2)), (n, dp))
    h = u + mixed @ p("wo")
    x = ops.mul(ops.rms_norm(h), p("norm2"))
    return h + ops.silu(x @ p("w1")) @ p("w2")


def apply_rewrite(cache: CacheState, selection: SelectionSet, layer: int, deltas: Tensor,
                  gate: Tensor) -> None:
    """``k += sigmoid(gate) * delta_k``, ``v += sigmoid(gate) * delta_v`` on the
    selected rows of ``layer`` only; ``deltas`` rows follow :meth:`SelectionSet.merged`."""
    idx = selection.merged(layer)
    H, dh = cache.config.n_heads, cache.config.d_head
    if deltas.shape != (idx.size, 2 * H * dh):
        raise NumericsError(
            f"deltas {deltas.shape} not aligned with {idx.size} selected rows of width {2 * H * dh}"
        )
    scaled = ops.mul(deltas, ops.sigmoid(gate))
    dk = ops.reshape(scaled[:, : H * dh], (idx.size, H, dh))
    dv = ops.reshape(scaled[:, H * dh:], (idx.size, H, dh))
    cache.keys[layer] = ops.scatter_add(cache.keys[layer], idx, dk)
    cache.values[layer] = ops.scatter_add(cache.values[layer], idx, dv)


@dataclass
class InvocationRecord:
    index: int
    step_span: tuple[int, int]
    selection: SelectionSet
    snapshots: list[dict] = field(default_factory=list)  # per layer when captured


def invoke(
    cache: CacheState,
    step_span: tuple[int, int],
    params: ProcessorParams,
    k: int | None = None,
    snapshot: bool = False,
    index: int = 0,
) -> InvocationRecord:
    """Select, rewrite every layer in place, then open the next step."""
    k = params.config.k if k is None else k
    selection = build_selection(step_span, cache, k)
    record = InvocationRecord(index, tuple(step_span), selection)
    for layer in range(cache.config.n_layers):
        idx = selection.merged(layer)
        if snapshot:
            pre_k = cache.keys[layer].data[idx].copy()
            pre_v = cache.values[layer].data[idx].copy()
        x = form_kv_tokens(cache, selection, layer)
        u = x @ params[f"p{layer}.w_in"]
        deltas = block_forward(params, layer, u) @ params[f"p{layer}.w_out"]
        apply_rewrite(cache, selection, layer, deltas, params[f"p{layer}.gate"])
        if snapshot:
            record.snapshots.append({
                "layer": layer,
                "indices": idx,
                "recalled": selection.is_recalled(layer),
                "k_pre": pre_k, "k_post": cache.keys[layer].data[idx].copy(),
                "v_pre": pre_v, "v_post": cache.values[layer].data[idx].copy(),
            })
    cache.begin_step()
    return record


class ProcessorHook:
    """Post-token hook firing the Processor at step boundaries.

    ``trigger="newline"`` fires after every emitted NEWLINE; ``"every_R"``
    fires once ``R`` tokens have accumulated since the last boundary. Both
    also fire once at the end of the prompt.
    """

    def __init__(self, params: ProcessorParams, trigger: str = "newline", R: int = 32,
                 k: int | None = None, newline: int = 2, snapshot: bool = False):
        if trigger not in ("newline", "every_R"):
            raise ValueError(f"unknown trigger {trigger!r}")
        if trigger == "every_R" and R < 1:
            raise ValueError("R must be >= 1")
        self.params = params
        self.trigger = trigger
        self.R = R
        self.k = k
        self.newline = newline
        self.snapshot = snapshot
        self.records: list[InvocationRecord] = []

    @property
    def count(self) -> int:
        return len(self.records)

    def fire(self, cache: CacheState) -> None:
        span = (cache.step_start, cache.length)
        with no_grad():
            self.records.append(
                invoke(cache, span, self.params, self.k, self.snapshot, index=len(self.records))
            )

    def __call__(self, cache: CacheState, token) -> None:
        if token is None:
            self.fire(cache)
        elif self.trigger == "newline":
            if token == self.newline:
                self.fire(cache)
        elif cache.length - cache.step_start >= self.R:
            self.fire(cache)


def generate(
    backbone: BackboneParams,
    prompt: Sequence[int],
    max_new: int,
    hook: ProcessorHook | None = None,
    eos: int = 3,
    prompt_newline_triggers: bool = False,
) -> list[int]:
    """Greedy decoding with optional Processor rewrites.

    With ``prompt_newline_triggers`` the prompt is prefilled segment by
    segment and the hook also fires after each internal prompt NEWLINE.
    """
    from .backbone import greedy_generate

    if hook is None or not prompt_newline_triggers:
        return greedy_generate(backbone, prompt, max_new, [hook] if hook else [], eos)
    nl = hook.newline
    cuts = [i + 1 for i, t in enumerate(prompt[:-1]) if t == nl]
    cache = CacheState(backbone.config, backbone["embed"].dtype)
    start = 0
    with no_grad():
        for end in cuts + [len(prompt)]:
            logits = extend(backbone, cache, prompt[start:end]).data[-1]
            hook.fire(cache)
            start = end
    out = list(prompt)
    for _ in range(max_new):
        tok = argmax(logits)
        out.append(tok)
        if tok == eos or cache.length >= backbone.config.max_positions:
            break
        cache, logits = decode_step(backbone, cache, tok)
        hook(cache, tok)
    return out


# -- record serialisation ---------------------------------------------------

def save_records(prefix, records: Sequence[InvocationRecord]) -> None:
    """Write ``<prefix>.bin`` (pre/post rows) and ``<prefix>.json`` (sidecar)."""
    prefix = Path(prefix)
    tensors, meta = {}, []
    for r in records:
        for snap in r.snapshots:
            key = f"i{r.index}.l{snap['layer']}"
            for part in ("k_pre", "k_post", "v_pre", "v_post"):
                tensors[f"{key}.{part}"] = snap[part]
            meta.append({
                "invocation": r.index,
                "step_span": list(r.step_span),
                "layer": snap["layer"],
                "indices": [int(i) for i in snap["indices"]],
                "group": ["recalled" if g else "recent" for g in snap["recalled"]],
                "key": key,
            })
    index = tensorio.write_blob(prefix.with_suffix(".bin"), tensors)
    doc = {"records": meta, "tensors": index, "blob": prefix.with_suffix(".bin").name}
    prefix.with_suffix(".json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_records(prefix) -> list[dict]:
    """Inverse of :func:`save_records`, flattened to one dict per (invocation, layer)."""
    prefix = Path(prefix)
    doc = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    tensors = tensorio.read_blob(prefix.with_name(doc["blob"]), doc["tensors"])
    out = []
    for m in doc["records"]:
        rec = dict(m)
        rec["indices"] = np.asarray(m["indices"], dtype=np.int64)
        rec["recalled"] = np.array([g == "recalled" for g in m["group"]], dtype=bool)
        for part in ("k_pre", "k_post", "v_pre", "v_post"):
            rec[part] = tensors[f"{m['key']}.{part}"]
        out.append(rec)
    return out
