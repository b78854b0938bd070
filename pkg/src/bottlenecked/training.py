"""Backbone SFT and frozen-backbone Processor training.

Processor training walks each trace step by step with teacher forcing. At
boundary ``n`` the cache is detached, the Processor rewrites it, and the
tokens of step ``n + 1`` are fed on top of the rewritten cache; their
cross-entropy is the step loss. Because the cache is detached again before
the next boundary, each step loss only reaches the invocation right before
it.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import BackboneParams, CacheState, extend, forward
from .data import Trace, fixed_spans
from .numerics import Tensor, backward, no_grad
from .numerics import ops
from .processor import ProcessorParams, invoke

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "sft"                 # sft | processor
    batch_size: int = 16
    lr: float = 1e-3
    schedule: str = "constant"         # constant | warmup_cosine
    warmup_ratio: float = 0.05
    epochs: int = 1
    seed: int = 0
    max_length: int = 512
    k: int = 32
    trigger: str = "newline"           # newline | every_R
    R: int = 32
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in ("sft", "processor"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.schedule not in ("constant", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.trigger not in ("newline", "every_R"):
            raise ValueError(f"unknown trigger {self.trigger!r}")
        if self.k < 0 or self.R < 1:
            raise ValueError("need k >= 0 and R >= 1")


class Adam:
    """Adam with bias correction; decoupled weight decay skips 0-d/1-d tensors
    (gates and norm weights)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        lr = self.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        scale = 1.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / norm
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                upd = upd + self.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype)
        return norm


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    warm = max(1, int(round(cfg.warmup_ratio * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


# -- stage 1: SFT -----------------------------------------------------------

def sft_loss(params: BackboneParams, batch: Sequence[Trace], pad: int = 0) -> Tensor | None:
    """Mean next-token CE over completion tokens of ``batch`` (prompt masked)."""
    batch = [t for t in batch if len(t.tokens) > t.prompt_len]
    if len(batch) < 1:
        return None
    T = max(len(t.tokens) for t in batch) - 1
    inputs = np.full((len(batch), T), pad, dtype=np.int64)
    targets = np.full((len(batch), T), pad, dtype=np.int64)
    weights = np.zeros((len(batch), T))
    for b, t in enumerate(batch):
        n = len(t.tokens) - 1
        inputs[b, :n] = t.tokens[:-1]
        targets[b, :n] = t.tokens[1:]
        weights[b, max(t.prompt_len - 1, 0):n] = 1.0
    logits = forward(params, inputs).logits
    return ops.cross_entropy(logits, targets, weights)


def sft_step(params: BackboneParams, opt: Adam, batch: Sequence[Trace], lr: float | None = None):
    """One optimizer step on the backbone; returns the loss or None if skipped."""
    if params.frozen:
        raise RuntimeError("sft_step on a frozen backbone")
    loss = sft_loss(params, batch)
    if loss is None:
        log.warning("batch has no completion tokens; skipped")
        return None
    opt.zero_grad()
    backward(loss)
    opt.step(lr)
    return loss.item()


# -- stage 2: Processor -----------------------------------------------------

def trace_steps(trace: Trace, trigger: str = "newline", R: int = 32) -> list[tuple[int, int]]:
    """Segments ``s_0..s_N``: the prompt, then the completion's steps."""
    if trigger == "newline":
        rest = [tuple(s) for s in trace.step_spans]
    else:
        rest = fixed_spans(len(trace.tokens), trace.prompt_len, R)
    return [(0, trace.prompt_len)] + rest


def processor_loss(
    backbone: BackboneParams,
    processor: ProcessorParams,
    trace: Trace,
    k: int | None = None,
    trigger: str = "newline",
    R: int = 32,
    on_step: Callable[[int, CacheState, Tensor], None] | None = None,
) -> Tensor | None:
    """Mean over steps of the mean CE of step ``n + 1`` given the cache
    rewritten at boundary ``n``. Returns None for traces with fewer than two
    segments.

    ``on_step(n, cache, step_loss)`` is called after each step loss is built,
    before the cache is detached (used by tests to inspect the graph).
    """
    spans = trace_steps(trace, trigger, R)
    if len(spans) < 2 or spans[0][1] == 0:
        return None
    tokens = trace.tokens
    cache = CacheState(backbone.config, backbone["embed"].dtype)
    with no_grad():
        prev_last = extend(backbone, cache, tokens[: spans[0][1]]).data[-1:]
    losses = []
    for n in range(len(spans) - 1):
        cache.detach()
        invoke(cache, spans[n], processor, k)
        a, b = spans[n + 1]
        logits = extend(backbone, cache, tokens[a:b])
        step_logits = ops.concat([Tensor(prev_last), logits[:-1]], axis=0) if b - a > 1 else Tensor(prev_last)
        step_loss = ops.cross_entropy(step_logits, np.asarray(tokens[a:b]))
        losses.append(step_loss)
        if on_step is not None:
            on_step(n, cache, step_loss)
        prev_last = logits.data[-1:]
        cache.detach()
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return ops.scale(total, 1.0 / len(losses))


def boundary_states(
    backbone: BackboneParams,
    processor: ProcessorParams,
    trace: Trace,
    k: int | None = None,
    trigger: str = "newline",
    R: int = 32,
) -> list[tuple[CacheState, np.ndarray]]:
    """Pre-invocation cache copies and previous-token logits at each boundary,
    recorded from one gradient-free pass."""
    spans = trace_steps(trace, trigger, R)
    states = []
    cache = CacheState(backbone.config, backbone["embed"].dtype)
    with no_grad():
        prev_last = extend(backbone, cache, trace.tokens[: spans[0][1]]).data[-1:]
        for n in range(len(spans) - 1):
            states.append((cache.copy(), prev_last))
            invoke(cache, spans[n], processor, k)
            a, b = spans[n + 1]
            prev_last = extend(backbone, cache, trace.tokens[a:b]).data[-1:]
    return states


def replay_loss(
    backbone: BackboneParams,
    processor: ProcessorParams,
    trace: Trace,
    states: Sequence[tuple[CacheState, np.ndarray]],
    k: int | None = None,
    trigger: str = "newline",
    R: int = 32,
) -> Tensor:
    """The truncated objective as an ordinary function of the Processor
    parameters: every step restarts from its recorded boundary state.

    Its exact gradient is what :func:`processor_loss` back-propagates, so
    finite differences of this function check the truncated gradient.
    """
    spans = trace_steps(trace, trigger, R)
    losses = []
    for n, (saved, prev_last) in enumerate(states):
        cache = saved.copy()
        invoke(cache, spans[n], processor, k)
        a, b = spans[n + 1]
        logits = extend(backbone, cache, trace.tokens[a:b])
        step_logits = ops.concat([Tensor(prev_last), logits[:-1]], axis=0) if b - a > 1 else Tensor(prev_last)
        losses.append(ops.cross_entropy(step_logits, np.asarray(trace.tokens[a:b])))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return ops.scale(total, 1.0 / len(losses))


def processor_step(backbone: BackboneParams, processor: ProcessorParams, opt: Adam,
                   traces: Sequence[Trace], cfg: TrainConfig, lr: float | None = None):
    """Average Processor loss over ``traces``, backprop, one optimizer update."""
    if not backbone.frozen:
        raise RuntimeError("freeze the backbone before Processor training")
    opt.zero_grad()
    vals = []
    for t in traces:
        loss = processor_loss(backbone, processor, t, cfg.k, cfg.trigger, cfg.R)
        if loss is None:
            log.debug("trace with fewer than two steps skipped")
            continue
        backward(loss)
        vals.append(loss.item())
    if not vals:
        return None
    for p in opt.params:
        if p.grad is not None:
            p.grad /= len(vals)
    opt.step(lr)
    return float(np.mean(vals))


def heldout_processor_ce(backbone: BackboneParams, processor: ProcessorParams,
                         traces: Sequence[Trace], cfg: TrainConfig) -> float:
    """Mean next-step CE (nats) over traces, no gradients."""
    vals = []
    with no_grad():
        for t in traces:
            loss = processor_loss(backbone, processor, t, cfg.k, cfg.trigger, cfg.R)
            if loss is not None:
                vals.append(loss.item())
    return float(np.mean(vals)) if vals else float("nan")


def heldout_sft_ce(params: BackboneParams, traces: Sequence[Trace], batch_size: int = 64) -> float:
    with no_grad():
        tot, n = 0.0, 0
        for i in range(0, len(traces), batch_size):
            b = traces[i:i + batch_size]
            loss = sft_loss(params, b)
            if loss is not None:
                w = sum(len(t.tokens) - max(t.prompt_len, 1) for t in b if len(t.tokens) > t.prompt_len)
                tot += loss.item() * w
                n += w
    return tot / n if n else float("nan")


# -- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    gates: list[list[float]] = field(default_factory=list)


def train_loop(
    cfg: TrainConfig,
    data: Sequence[Trace],
    backbone: BackboneParams,
    processor: ProcessorParams | None = None,
    out_dir=None,
    log_every: int = 0,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs; checkpoint after every epoch (and at start).

    Metrics go to ``<out_dir>/metrics.csv``: step, epoch, loss, one
    ``sigma_g_<l>`` column per layer (processor stage), wall_time.
    """
    from .harness.checkpoint import CheckpointError, save_checkpoint

    if cfg.stage == "processor":
        if processor is None:
            raise ValueError("processor stage needs processor parameters")
        backbone.freeze()
        params = processor.parameters()
    else:
        backbone.unfreeze()
        params = backbone.parameters()
    data = [t for t in data if len(t.tokens) <= cfg.max_length]
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size) if data else 0
    total = steps_per_epoch * cfg.epochs
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    n_layers = backbone.config.n_layers
    writer = None
    fh = None

    def checkpoint(tag: str) -> None:
        if out is None:
            return
        path = out / f"checkpoint_{tag}"
        try:
            save_checkpoint(path, backbone=backbone,
                            processor=processor if cfg.stage == "processor" else None)
        except OSError as e:
            raise CheckpointError(
                f"checkpoint write failed at {tag} after {len(result.losses)} steps: {e}"
            ) from e
        result.checkpoints.append(path)

    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            gate_cols = [f"sigma_g_{i}" for i in range(n_layers)] if processor is not None else []
            writer.writerow(["step", "epoch", "loss"] + gate_cols + ["wall_time"])
        if processor is not None:
            result.gates.append(processor.gate_strengths())
        checkpoint("init")
        t0 = time.perf_counter()
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(data))
            for s in range(steps_per_epoch):
                batch = [data[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                lr = lr_at(cfg, step, total)
                if cfg.stage == "sft":
                    loss = sft_step(backbone, opt, batch, lr)
                else:
                    loss = processor_step(backbone, processor, opt, batch, cfg, lr)
                step += 1
                if loss is None:
                    continue
                result.losses.append(loss)
                gates = processor.gate_strengths() if processor is not None else []
                if processor is not None:
                    result.gates.append(gates)
                if writer is not None:
                    writer.writerow([step, epoch, repr(loss)] + [repr(g) for g in gates]
                                    + [f"{time.perf_counter() - t0:.3f}"])
                if log_every and step % log_every == 0:
                    log.info("step %d epoch %d loss %.4f", step, epoch, loss)
            checkpoint(f"epoch{epoch + 1}")
    finally:
        if fh is not None:
            fh.close()
    return result
