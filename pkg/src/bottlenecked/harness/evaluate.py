"""Greedy pass@1 evaluation with the Processor hook or a baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..backbone import BackboneParams, greedy_generate
from ..baselines import insert_pause_tokens, latent_rollout_decode
from ..data import Trace, Vocab
from ..processor import ProcessorHook, ProcessorParams
from .checkpoint import check_compatible


@dataclass
class EvalResult:
    n: int
    correct: int
    records: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.n if self.n else None


def final_line(words: Sequence[str]) -> str:
    """Last non-empty line of a word sequence, whitespace-normalised."""
    lines, cur = [], []
    for w in words:
        if w == "<nl>":
            lines.append(cur)
            cur = []
        elif w not in ("<eos>", "<pad>"):
            cur.append(w)
    lines.append(cur)
    for line in reversed(lines):
        if line:
            return " ".join(" ".join(line).split())
    return ""


def run_eval(
    backbone: BackboneParams,
    traces: Sequence[Trace],
    vocab: Vocab,
    processor: ProcessorParams | None = None,
    trigger: str = "newline",
    k: int | None = None,
    R: int = 32,
    max_new: int = 64,
    baseline: str | None = None,
    n_special: int = 16,
    out_jsonl=None,
) -> EvalResult:
    """Decode each prompt greedily and score the final line against the
    trace's own final line."""
    if processor is not None:
        check_compatible(backbone, processor)
        if baseline is not None:
            raise ValueError("a baseline run does not take a Processor")
    result = EvalResult(0, 0)
    for i, trace in enumerate(traces):
        prompt = trace.prompt
        hook = None
        if baseline == "pause":
            prompt = insert_pause_tokens(trace, n_special, vocab.pause).prompt
        if baseline == "latent_rollout":
            out = latent_rollout_decode(backbone, prompt, n_special, max_new, vocab.eos)
        else:
            if processor is not None:
                hook = ProcessorHook(processor, trigger, R, k, vocab.newline)
            out = greedy_generate(backbone, prompt, max_new, [hook] if hook else [], vocab.eos)
        gen = out[len(prompt):]
        pred = final_line(vocab.decode(gen))
        gold = final_line(vocab.decode(trace.completion))
        ok = pred == gold
        result.n += 1
        result.correct += ok
        result.records.append({
            "index": i,
            "tokens": [int(t) for t in gen],
            "invocations": hook.count if hook else 0,
            "prediction": pred,
            "gold": gold,
            "correct": ok,
        })
    if out_jsonl is not None:
        write_records(out_jsonl, result.records)
    return result


def write_records(path, records: Sequence[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
