"""
The modular accumulator task
============================

Each problem starts a variable at some value, lists tagged updates for it
mixed in with updates to distractor variables, and asks for the final value.
The completion works through the target's updates one line at a time.
"""

from bottlenecked.data import SynthTaskSpec, evaluate_prompt, generate_synthetic

spec = SynthTaskSpec(modulus=10, chain_length=3, distractors=4, seed=0)
vocab = spec.vocab()
print(len(vocab), "symbols:", " ".join(vocab.symbols))

train = generate_synthetic(spec, 5, "train")
t = train[0]
print(vocab.text(t.prompt))
print(vocab.text(t.completion))

# one step per line; the last span is the answer line
for a, b in t.step_spans:
    print((a, b), vocab.text(t.tokens[a:b]).strip())

# answers can be recomputed from the prompt alone
print(evaluate_prompt(vocab, t.prompt, spec.modulus), t.meta["answer"])

# train and test never share a prompt
test = generate_synthetic(spec, 5, "test")
print({tuple(x.prompt) for x in train} & {tuple(x.prompt) for x in test})
