"""Vocabulary, reasoning traces, step segmentation and the synthetic task.

The synthetic task is a modular accumulator over a closed word vocabulary.
A prompt lists tagged update facts for several variables (one target, the
rest distractors), interleaved, then asks for the target::

    <bos> x = 3 ; y 1 + 6 ; x 1 + 4 ; y 2 + 1 ; x 2 + 5 ; ? x <nl>

and the completion works through the target's updates one per line::

    x 1 : 3 + 4 = 7 <nl>
    x 2 : 7 + 5 = 2 <nl>
    answer 2 <eos>
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

PAD, BOS, NEWLINE, EOS, PAUSE = "<pad>", "<bos>", "<nl>", "<eos>", "<pause>"
RESERVED = (PAD, BOS, NEWLINE, EOS, PAUSE)
KEYWORDS = ("=", "+", ":", ";", "?", "answer")
VARIABLES = tuple("xyzabcdefghjkmnpqrstuvw")

MAX_TRACE_LEN = 512


class TraceError(ValueError):
    pass


class Vocab:
    """Dense symbol <-> id map with the reserved ids first."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if tuple(symbols[: len(RESERVED)]) != RESERVED:
            raise TraceError("vocabulary must start with the reserved symbols")
        if len(set(symbols)) != len(symbols):
            raise TraceError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def for_task(cls, n_numbers: int, n_variables: int) -> "Vocab":
        if n_variables > len(VARIABLES):
            raise TraceError(f"at most {len(VARIABLES)} variables are supported")
        return cls(
            list(RESERVED) + list(KEYWORDS) + list(VARIABLES[:n_variables])
            + [str(i) for i in range(n_numbers)]
        )

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    newline = property(lambda self: 2)
    eos = property(lambda self: 3)
    pause = property(lambda self: 4)

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise TraceError(f"unknown symbol {e.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def text(self, ids: Iterable[int]) -> str:
        """Render ids as text, one line per reasoning step."""
        out = []
        for w in self.decode(ids):
            out.append("\n" if w == NEWLINE else w + " ")
        return "".join(out)

    def tokenize(self, text: str) -> list[int]:
        """Inverse of :meth:`text`: whitespace-split words, ``\\n`` is NEWLINE."""
        ids = []
        for i, line in enumerate(text.split("\n")):
            if i:
                ids.append(self.newline)
            ids.extend(self.encode(line.split()))
        return ids


@dataclass
class Trace:
    tokens: list[int]
    prompt_len: int
    step_spans: list[tuple[int, int]]
    meta: dict = field(default_factory=dict)

    @property
    def prompt(self) -> list[int]:
        return self.tokens[: self.prompt_len]

    @property
    def completion(self) -> list[int]:
        return self.tokens[self.prompt_len:]

    def validate(self, vocab_size: int | None = None, newline: int = 2) -> None:
        n = len(self.tokens)
        if not 0 <= self.prompt_len <= n:
            raise TraceError(f"prompt_len {self.prompt_len} outside [0, {n}]")
        if vocab_size is not None:
            bad = [t for t in self.tokens if not 0 <= t < vocab_size]
            if bad:
                raise TraceError(f"token id {bad[0]} outside vocabulary of size {vocab_size}")
        expect = segment_steps(self.tokens, self.prompt_len, newline)
        if [tuple(s) for s in self.step_spans] != expect:
            raise TraceError("step_spans disagree with NEWLINE positions")


def segment_steps(tokens: Sequence[int], prompt_len: int, newline: int = 2) -> list[tuple[int, int]]:
    """Split the completion after every NEWLINE; a trailing unterminated
    span (the final answer) is kept."""
    if not 0 <= prompt_len <= len(tokens):
        raise TraceError(f"prompt_len {prompt_len} outside [0, {len(tokens)}]")
    spans = []
    start = prompt_len
    for i in range(prompt_len, len(tokens)):
        if tokens[i] == newline:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def fixed_spans(total: int, start: int, width: int) -> list[tuple[int, int]]:
    """Chunk ``[start, total)`` into consecutive windows of ``width`` tokens."""
    if width < 1:
        raise TraceError("window width must be >= 1")
    return [(s, min(s + width, total)) for s in range(start, total, width)]


# -- synthetic task --------------------------------------------------------

@dataclass(frozen=True)
class SynthTaskSpec:
    modulus: int = 10
    chain_length: int = 3
    distractors: int = 4
    vocab_size: int = 64
    seed: int = 0
    distractor_vars: int = 2
    test_fraction: float = 0.2

    def vocab(self) -> Vocab:
        n_numbers = max(self.modulus, self.chain_length + 1, self.distractors + 1)
        v = Vocab.for_task(n_numbers, 1 + self.distractor_vars)
        if len(v) > self.vocab_size:
            raise TraceError(
                f"vocabulary of size {self.vocab_size} cannot encode {n_numbers} values "
                f"(needs {len(v)})"
            )
        return v


def make_trace(
    vocab: Vocab,
    modulus: int,
    start: int,
    updates: Sequence[int],
    distractor_facts: Sequence[tuple[str, int, int]] = (),
    order: Sequence[int] | None = None,
    target: str = "x",
) -> Trace:
    """Build one trace from explicit problem contents.

    ``distractor_facts`` are ``(variable, tag, amount)`` triples. ``order``
    gives the interleaving of all facts (indices into target facts followed
    by distractor facts); default is target facts first.
    """
    facts = [(target, i + 1, u) for i, u in enumerate(updates)] + list(distractor_facts)
    order = list(range(len(facts))) if order is None else list(order)
    words = [BOS, target, "=", str(start), ";"]
    for j in order:
        var, tag, amt = facts[j]
        words += [var, str(tag), "+", str(amt), ";"]
    words += ["?", target, NEWLINE]
    prompt = vocab.encode(words)

    lines = []
    value = start
    for i, u in enumerate(updates):
        new = (value + u) % modulus
        lines += [target, str(i + 1), ":", str(value), "+", str(u), "=", str(new), NEWLINE]
        value = new
    lines += ["answer", str(value), EOS]
    tokens = prompt + vocab.encode(lines)
    if len(tokens) > MAX_TRACE_LEN:
        raise TraceError(f"trace length {len(tokens)} exceeds {MAX_TRACE_LEN}")
    trace = Trace(tokens, len(prompt), segment_steps(tokens, len(prompt), vocab.newline))
    trace.meta = {"answer": value, "target": target, "modulus": modulus}
    return trace


def _problem_key(trace: Trace) -> bytes:
    return hashlib.sha256(bytes(trace.prompt)).digest()


def split_of(trace: Trace, test_fraction: float) -> str:
    h = int.from_bytes(_problem_key(trace)[:8], "little") / 2.0 ** 64
    return "test" if h < test_fraction else "train"


def generate_synthetic(spec: SynthTaskSpec, n: int, split: str = "train") -> list[Trace]:
    """Draw ``n`` distinct problems belonging to ``split`` ("train" or "test").

    The split is decided by a hash of the prompt, so the two splits never
    share a problem regardless of seed.
    """
    if spec.modulus < 2:
        raise TraceError("modulus must be >= 2")
    if spec.chain_length < 1:
        raise TraceError("chain length must be >= 1")
    if split not in ("train", "test", "any"):
        raise TraceError(f"unknown split {split!r}")
    vocab = spec.vocab()
    rng = random.Random(f"{spec.seed}:{split}")
    names = list(VARIABLES[1: 1 + spec.distractor_vars])
    out: list[Trace] = []
    seen: set[bytes] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise TraceError("could not draw enough distinct problems; enlarge the task")
        start = rng.randrange(spec.modulus)
        updates = [rng.randrange(1, spec.modulus) for _ in range(spec.chain_length)]
        dfacts = []
        counts = {v: 0 for v in names}
        for _ in range(spec.distractors if names else 0):
            var = rng.choice(names)
            counts[var] += 1
            dfacts.append((var, counts[var], rng.randrange(1, spec.modulus)))
        order = _interleave(rng, spec.chain_length, dfacts)
        trace = make_trace(vocab, spec.modulus, start, updates, dfacts, order)
        key = _problem_key(trace)
        if key in seen or (split != "any" and split_of(trace, spec.test_fraction) != split):
            continue
        seen.add(key)
        trace.meta.update({"start": start, "updates": updates, "split": split})
        out.append(trace)
    return out


def _interleave(rng: random.Random, n_target: int, dfacts) -> list[int]:
    """Random merge of all facts keeping each variable's tags in order."""
    streams: dict[str, list[int]] = {"x": list(range(n_target))}
    for j, (var, _, _) in enumerate(dfacts):
        streams.setdefault(var, []).append(n_target + j)
    labels = [v for v, s in streams.items() for _ in s]
    rng.shuffle(labels)
    pos = {v: 0 for v in streams}
    order = []
    for v in labels:
        order.append(streams[v][pos[v]])
        pos[v] += 1
    return order


def evaluate_prompt(vocab: Vocab, prompt: Sequence[int], modulus: int) -> int:
    """Recompute a prompt's answer straight from its facts."""
    words = vocab.decode(prompt)
    if words[0] == BOS:
        words = words[1:]
    words = [w for w in words if w not in (PAUSE, NEWLINE)]
    query = words[words.index("?") + 1]
    value = None
    pending = []
    for fact in " ".join(words[: words.index("?")]).split(";"):
        parts = fact.split()
        if not parts or parts[0] != query:
            continue
        if parts[1] == "=":
            value = int(parts[2])
        else:
            pending.append((int(parts[1]), int(parts[3])))
    for _, amount in sorted(pending):
        value = (value + amount) % modulus
    return value


# -- trace files -----------------------------------------------------------

def save_traces(path, traces: Iterable[Trace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in traces:
            rec = {
                "tokens": list(map(int, t.tokens)),
                "prompt_len": int(t.prompt_len),
                "step_spans": [[int(a), int(b)] for a, b in t.step_spans],
                "meta": t.meta,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_traces(path, vocab_size: int | None = None, newline: int = 2) -> list[Trace]:
    traces = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            trace = Trace(
                tokens=[int(t) for t in rec["tokens"]],
                prompt_len=int(rec["prompt_len"]),
                step_spans=[(int(a), int(b)) for a, b in rec["step_spans"]],
                meta=rec.get("meta", {}),
            )
            trace.validate(vocab_size, newline)
        except (KeyError, TypeError, ValueError) as e:
            what = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise TraceError(f"{path}:{lineno}: {what}") from None
        traces.append(trace)
    return traces
