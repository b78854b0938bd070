"""Token-mediated comparison baselines: pause tokens and latent rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import BackboneParams, CacheState, argmax, decode_step, extend, extend_embeds, prefill
from .data import MAX_TRACE_LEN, Trace, TraceError
from .numerics import Tensor, no_grad
from .numerics import ops


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "pause"      # pause | latent_rollout
    n_special: int = 16

    def __post_init__(self):
        if self.kind not in ("pause", "latent_rollout"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.n_special < 0:
            raise ValueError("n_special must be >= 0")


def insert_pause_tokens(trace: Trace, n: int, pause_id: int = 4, max_len: int = MAX_TRACE_LEN) -> Trace:
    """Append ``n`` PAUSE ids to the prompt. They count as prompt, so they
    never carry loss."""
    if n < 0:
        raise TraceError("n must be >= 0")
    if len(trace.tokens) + n > max_len:
        raise TraceError(f"trace of {len(trace.tokens)} tokens plus {n} pauses exceeds {max_len}")
    p = trace.prompt_len
    tokens = trace.tokens[:p] + [pause_id] * n + trace.tokens[p:]
    spans = [(a + n, b + n) for a, b in trace.step_spans]
    meta = dict(trace.meta)
    meta["pauses"] = meta.get("pauses", 0) + n
    return Trace(tokens, p + n, spans, meta)


def remove_pause_tokens(trace: Trace, pause_id: int = 4) -> Trace:
    """Undo :func:`insert_pause_tokens`."""
    n = trace.meta.get("pauses", 0)
    p = trace.prompt_len
    if n and trace.tokens[p - n:p] != [pause_id] * n:
        raise TraceError("trace does not end its prompt with the recorded pauses")
    meta = {k: v for k, v in trace.meta.items() if k != "pauses"}
    spans = [(a - n, b - n) for a, b in trace.step_spans]
    return Trace(trace.tokens[:p - n] + trace.tokens[p:], p - n, spans, meta)


def loss_mask(trace: Trace) -> np.ndarray:
    """Per-position loss weight (1 on completion tokens, 0 on prompt and pauses)."""
    w = np.zeros(len(trace.tokens))
    w[trace.prompt_len:] = 1.0
    return w


def _rollout(params: BackboneParams, cache: CacheState, n_latent: int) -> None:
    for _ in range(n_latent):
        o = ops.reshape(cache.last_hidden, (1, -1))
        extend_embeds(params, cache, o, head=False)


def latent_rollout_decode(
    params: BackboneParams,
    prompt: Sequence[int],
    n_latent: int,
    max_new: int,
    eos: int | None = 3,
) -> list[int]:
    """Greedy decoding after ``n_latent`` steps that feed the final hidden
    state straight back in as the next input vector. Latent steps add cache
    rows but emit nothing."""
    if n_latent < 0:
        raise ValueError("n_latent must be >= 0")
    cache, logits = prefill(params, prompt)
    if n_latent:
        with no_grad():
            _rollout(params, cache, n_latent)
            logits = (ops.reshape(cache.last_hidden, (1, -1)) @ params["head"]).data[0]
    out = list(prompt)
    for _ in range(max_new):
        tok = argmax(logits)
        out.append(tok)
        if tok == eos or cache.length >= params.config.max_positions:
            break
        cache, logits = decode_step(params, cache, tok)
    return out


def latent_rollout_loss(params: BackboneParams, trace: Trace, n_latent: int) -> Tensor:
    """Completion CE for training with a latent rollout after the prompt.

    Gradients flow through the rollout, so the backbone learns to use it.
    """
    cache = CacheState(params.config, params["embed"].dtype)
    p = trace.prompt_len
    logits_prompt = extend(params, cache, trace.tokens[:p])
    last = logits_prompt[p - 1:p]
    if n_latent:
        _rollout(params, cache, n_latent)
        last = ops.reshape(cache.last_hidden, (1, -1)) @ params["head"]
    comp = trace.tokens[p:]
    if len(comp) > 1:
        logits = extend(params, cache, comp[:-1])
        last = ops.concat([last, logits], axis=0)
    return ops.cross_entropy(last, np.asarray(comp))
