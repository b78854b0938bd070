"""Decoder-only transformer with an explicit key/value cache.

Decoding is written as a state update: the cache (per-layer keys and values,
post-rotary) is the sequence state and the final normalised hidden state of
the newest token feeds the LM head. Every code path (batched training,
prefill, single-token decode, teacher-forced chunks during Processor
training) goes through :func:`forward`, so they agree by construction up to
float rounding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .numerics import NumericsError, Tensor, default_dtype, no_grad
from .numerics import ops


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 32
    max_positions: int = 512
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ValueError("head dimension must be even for rotary encoding")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")


class BackboneParams:
    """Named parameter tensors: ``embed``, ``l{i}.<key>``, ``final_norm``, ``head``."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.frozen = False

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator) -> "BackboneParams":
        dt = default_dtype()
        d, f, V = config.d_model, config.d_ff, config.vocab_size
        std = 0.02
        out_std = std / math.sqrt(2 * config.n_layers)

        def normal(shape, s):
            return Tensor(rng.normal(0.0, s, size=shape).astype(dt), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dt), requires_grad=True)

        t = {"embed": normal((V, d), std)}
        for i in range(config.n_layers):
            t[f"l{i}.attn_norm"] = ones(d)
            t[f"l{i}.wq"] = normal((d, d), std)
            t[f"l{i}.wk"] = normal((d, d), std)
            t[f"l{i}.wv"] = normal((d, d), std)
            t[f"l{i}.wo"] = normal((d, d), out_std)
            t[f"l{i}.mlp_norm"] = ones(d)
            t[f"l{i}.w1"] = normal((d, f), std)
            t[f"l{i}.w2"] = normal((f, d), out_std)
        t["final_norm"] = ones(d)
        t["head"] = normal((d, V), std)
        return cls(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def freeze(self) -> "BackboneParams":
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "BackboneParams":
        self.frozen = False
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def astype(self, dtype) -> "BackboneParams":
        out = BackboneParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )
        out.frozen = self.frozen
        return out


@dataclass
class ForwardOutput:
    logits: Tensor                      # [B, T, V]
    hidden: Tensor                      # [B, T, d] final normalised hidden states
    new_kv: list[tuple[Tensor, Tensor]]  # per layer, [B, T, H, d_head] each
    attention: list[np.ndarray]         # per layer, [B, H, T, S + T]


def forward(
    params: BackboneParams,
    tokens=None,
    past: Sequence[tuple[Tensor, Tensor]] | None = None,
    embeds: Tensor | None = None,
    head: bool = True,
    key_mask: np.ndarray | None = None,
) -> ForwardOutput:
    """Run the stack over ``tokens`` ([B, T] ids) or ``embeds`` ([B, T, d]).

    ``past`` holds per-layer cached ``(K, V)`` of shape [B, S, H, d_head];
    new positions start at S. Attention is causal over past + new keys;
    ``key_mask`` ([B, S + T], True = visible) hides padding keys.
    """
    cfg = params.config
    if (tokens is None) == (embeds is None):
        raise ValueError("pass exactly one of tokens / embeds")
    if embeds is None:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise NumericsError(f"tokens must be [B, T], got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise NumericsError(f"token id outside vocabulary of size {cfg.vocab_size}")
        h = ops.embedding(params["embed"], tokens)
    else:
        h = embeds
    B, T, _ = h.shape
    S = 0 if not past else past[0][0].shape[1]
    if S + T > cfg.max_positions:
        raise NumericsError(f"sequence length {S + T} exceeds max_positions={cfg.max_positions}")
    H, dh = cfg.n_heads, cfg.d_head
    pos = np.arange(S, S + T)
    mask = np.arange(S + T)[None, :] <= pos[:, None]
    if key_mask is not None:
        mask = mask[None, None, :, :] & np.asarray(key_mask, bool)[:, None, None, :]
        mask = np.broadcast_to(mask, (B, cfg.n_heads, T, S + T))
    inv_sqrt = 1.0 / math.sqrt(dh)

    new_kv, attention = [], []
    for i in range(cfg.n_layers):
        p = lambda k: params[f"l{i}.{k}"]  # noqa: E731
        x = ops.mul(ops.rms_norm(h), p("attn_norm"))
        q = ops.rotary(ops.reshape(x @ p("wq"), (B, T, H, dh)), pos, cfg.rope_base)
        k = ops.rotary(ops.reshape(x @ p("wk"), (B, T, H, dh)), pos, cfg.rope_base)
        v = ops.reshape(x @ p("wv"), (B, T, H, dh))
        new_kv.append((k, v))
        if S:
            k = ops.concat([past[i][0], k], axis=1)
            v = ops.concat([past[i][1], v], axis=1)
        scores = ops.scale(
            ops.matmul(ops.transpose(q, (0, 2, 1, 3)), ops.transpose(k, (0, 2, 3, 1))), inv_sqrt
        )
        probs = ops.softmax(scores, mask)
        attention.append(probs.data)
        mixed = ops.matmul(probs, ops.transpose(v, (0, 2, 1, 3)))
        mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (B, T, H * dh))
        h = h + mixed @ p("wo")
        x = ops.mul(ops.rms_norm(h), p("mlp_norm"))
        h = h + ops.silu(x @ p("w1")) @ p("w2")
    o = ops.mul(ops.rms_norm(h), params["final_norm"])
    logits = o @ params["head"] if head else None
    return ForwardOutput(logits, o, new_kv, attention)


class CacheState:
    """Per-layer keys/values ``[t, H, d_head]`` of one sequence plus the
    bookkeeping needed at step boundaries.

    ``attn_rows[l]`` maps each position of the in-flight step (tokens since
    :meth:`begin_step`) to its attention row ``[H, pos + 1]`` at layer ``l``.
    """

    def __init__(self, config: BackboneConfig, dtype=None):
        dt = dtype or default_dtype()
        self.config = config
        H, dh = config.n_heads, config.d_head
        self.keys = [Tensor(np.zeros((0, H, dh), dt)) for _ in range(config.n_layers)]
        self.values = [Tensor(np.zeros((0, H, dh), dt)) for _ in range(config.n_layers)]
        self.last_hidden: Tensor | None = None
        self.step_start = 0
        self.attn_rows: list[dict[int, np.ndarray]] = [{} for _ in range(config.n_layers)]

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]

    def past(self) -> list[tuple[Tensor, Tensor]] | None:
        if self.length == 0:
            return None
        H, dh = self.config.n_heads, self.config.d_head
        t = self.length
        return [
            (ops.reshape(k, (1, t, H, dh)), ops.reshape(v, (1, t, H, dh)))
            for k, v in zip(self.keys, self.values)
        ]

    def append(self, out: ForwardOutput) -> None:
        start = self.length
        T = out.new_kv[0][0].shape[1]
        for i, (k, v) in enumerate(out.new_kv):
            k, v = k[0], v[0]
            self.keys[i] = ops.concat([self.keys[i], k], axis=0) if start else k
            self.values[i] = ops.concat([self.values[i], v], axis=0) if start else v
            rows = out.attention[i][0]
            for j in range(T):
                self.attn_rows[i][start + j] = rows[:, j, : start + j + 1]
        self.last_hidden = out.hidden[0, T - 1]

    def begin_step(self) -> None:
        """Mark a step boundary: later tokens form the next in-flight step."""
        self.step_start = self.length
        self.attn_rows = [{} for _ in range(self.config.n_layers)]

    def detach(self) -> "CacheState":
        """Cut every gradient path into the cache (in place)."""
        self.keys = [ops.stop_gradient(k) for k in self.keys]
        self.values = [ops.stop_gradient(v) for v in self.values]
        if self.last_hidden is not None:
            self.last_hidden = ops.stop_gradient(self.last_hidden)
        return self

    def copy(self) -> "CacheState":
        c = CacheState(self.config, self.keys[0].dtype)
        c.keys = [Tensor(k.data.copy()) for k in self.keys]
        c.values = [Tensor(v.data.copy()) for v in self.values]
        c.last_hidden = None if self.last_hidden is None else Tensor(self.last_hidden.data.copy())
        c.step_start = self.step_start
        c.attn_rows = [dict(r) for r in self.attn_rows]
        return c


def extend(params: BackboneParams, cache: CacheState, tokens: Sequence[int]) -> Tensor:
    """Teacher-force ``tokens`` through the model on top of ``cache``.

    Appends their keys/values and attention rows to ``cache`` and returns the
    logits ``[T, V]``. Gradients flow if recording is on.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    if tokens.shape[1] == 0:
        raise NumericsError("extend needs at least one token")
    out = forward(params, tokens, cache.past())
    cache.append(out)
    return out.logits[0]


def extend_embeds(params: BackboneParams, cache: CacheState, embeds: Tensor, head: bool = True):
    """Like :func:`extend` but feeds input vectors ``[T, d]`` directly."""
    out = forward(params, embeds=ops.reshape(embeds, (1,) + embeds.shape), past=cache.past(), head=head)
    cache.append(out)
    return None if out.logits is None else out.logits[0]


def prefill(params: BackboneParams, tokens: Sequence[int]) -> tuple[CacheState, np.ndarray]:
    """Process a prompt; returns the cache and the last position's logits."""
    if len(tokens) < 1:
        raise NumericsError("prefill needs at least one token")
    if len(tokens) > params.config.max_positions:
        raise NumericsError(f"prompt of {len(tokens)} tokens exceeds max_positions")
    cache = CacheState(params.config, params["embed"].dtype)
    with no_grad():
        logits = extend(params, cache, tokens)
    return cache, logits.data[-1]


def decode_step(params: BackboneParams, cache: CacheState, token: int) -> tuple[CacheState, np.ndarray]:
    """Append one token; ``cache`` is extended in place and returned."""
    if not 0 <= int(token) < params.config.vocab_size:
        raise NumericsError(f"token id {token} outside vocabulary")
    with no_grad():
        logits = extend(params, cache, [int(token)])
    return cache, logits.data[-1]


def argmax(logits: np.ndarray) -> int:
    """Greedy choice; ties go to the lowest token id."""
    return int(np.argmax(logits))


Hook = Callable[[CacheState, "int | None"], None]


def greedy_generate(
    params: BackboneParams,
    prompt: Sequence[int],
    max_new: int,
    hooks: Iterable[Hook] = (),
    eos: int | None = 3,
) -> list[int]:
    """Argmax decoding with post-token hooks.

    Each hook is called as ``hook(cache, None)`` once after the prompt and as
    ``hook(cache, token)`` after each emitted token has been appended. A hook
    may rewrite the cache; decoding continues from whatever it leaves.
    """
    if len(prompt) == 0:
        raise NumericsError("prompt must be non-empty")
    hooks = list(hooks)
    cache, logits = prefill(params, prompt)
    for h in hooks:
        h(cache, None)
    out = list(prompt)
    for _ in range(max_new):
        tok = argmax(logits)
        out.append(tok)
        if tok == eos or cache.length >= params.config.max_positions:
            break
        cache, logits = decode_step(params, cache, tok)
        for h in hooks:
            h(cache, tok)
    return out
