"""
Bottleneck inequalities by enumeration
======================================

Small discrete models are enumerated exactly. Information about the source
can only shrink along a Markov chain, and the expected log-likelihood of a
predictor that sees only a code of the history is capped by how much that
code keeps.
"""

import numpy as np

from bottlenecked.ib_lab import DiscreteChain, ToySeqModel, exact_mi, run_suite, verify_dpi, verify_theorem_bounds

print(exact_mi(np.eye(2) / 2), "bit for a copied fair coin")

rng = np.random.default_rng(0)
chain = DiscreteChain.random(rng, depth=4)
rep = verify_dpi(chain)
print("I(X; V_i):", np.round(rep.information, 4), "ok" if rep.ok else rep.violations)

A, N = 3, 3
p = rng.dirichlet(np.ones(A ** (N + 1))).reshape((A,) * (N + 1))
for name, enc in [("injective", [np.arange(A ** (n + 1)) for n in range(N + 1)]),
                  ("last symbol", [np.arange(A ** (n + 1)) % A for n in range(N + 1)]),
                  ("constant", [np.zeros(A ** (n + 1), int) for n in range(N + 1)])]:
    r = verify_theorem_bounds(ToySeqModel.with_true_predictor(p, enc))
    print(f"{name:12s} L={r.log_likelihood:8.4f}  code bound={r.code_bound:8.4f}  "
          f"prefix bound={r.prefix_bound:8.4f}  average={r.averaged_bound:8.4f}")

report = run_suite(200, 50, seed=1)
print(report["violations"], "violations in", len(report["dpi_trials"]) + len(report["bound_trials"]), "trials")
