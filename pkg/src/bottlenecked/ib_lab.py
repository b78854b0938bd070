"""Exact information-theoretic checks on small enumerable models.

Everything is in bits. Two families of claims are checked by full
enumeration:

* along a Markov chain X -> Z_1 -> ... -> Z_m -> Y the information a
  variable keeps about X never increases with depth;
* for a sequence model that predicts s_{n+1} from a deterministic code
  c_n = f(s_{0:n}), the expected log-likelihood L is bounded above by
  sum_n [I(C_n; S_{n+1}) - H(S_{n+1})] and by
  sum_{n=1..N} I(S_{0:n}; C_n) - sum_n H(S_{n+1} | S_{0:n}), and hence by
  their average.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

TOL = 1e-9


class IBError(ValueError):
    pass


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def exact_mi(joint) -> float:
    """I(A;B) in bits from a 2-d joint table (0 log 0 = 0)."""
    j = np.asarray(joint, dtype=np.float64)
    if j.ndim != 2:
        raise IBError(f"joint table must be 2-d, got shape {j.shape}")
    if (j < 0).any():
        raise IBError("joint table has negative entries")
    if abs(j.sum() - 1.0) > 1e-9:
        raise IBError(f"joint table sums to {j.sum()}, not 1")
    pa = j.sum(axis=1, keepdims=True)
    pb = j.sum(axis=0, keepdims=True)
    nz = j > 0
    return float((j[nz] * np.log2(j[nz] / (pa @ pb)[nz])).sum())


def _check_stochastic(name: str, m: np.ndarray) -> None:
    if (m < 0).any() or not np.allclose(m.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
        raise IBError(f"{name}: rows must be non-negative and sum to 1")


def _random_simplex(rng, shape, sparsity: float = 0.0) -> np.ndarray:
    x = rng.dirichlet(np.full(shape[-1], 0.7), size=shape[:-1])
    if sparsity:
        x = x * (rng.random(x.shape) >= sparsity)
        dead = x.sum(axis=-1) == 0
        x[dead, 0] = 1.0
        x = x / x.sum(axis=-1, keepdims=True)
    return x


# -- Markov chains ------------------------------------------------------------

@dataclass
class DiscreteChain:
    """X -> Z_1 -> ... -> Z_m -> Y, given as a prior and row-stochastic
    transition tables; the last table produces Y."""

    prior: np.ndarray
    transitions: list[np.ndarray]

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.transitions = [np.asarray(t, dtype=np.float64) for t in self.transitions]
        _check_stochastic("prior", self.prior[None, :])
        size = self.prior.size
        for i, t in enumerate(self.transitions):
            if t.ndim != 2 or t.shape[0] != size:
                raise IBError(f"transition {i} has shape {t.shape}, expected ({size}, *)")
            _check_stochastic(f"transition {i}", t)
            size = t.shape[1]

    @property
    def depth(self) -> int:
        return len(self.transitions)

    def joint_with_x(self, i: int) -> np.ndarray:
        """p(x, v_i) for the i-th variable after X (0-based; the last is Y)."""
        j = np.diag(self.prior)
        for t in self.transitions[: i + 1]:
            j = j @ t
        return j

    @classmethod
    def random(cls, rng: np.random.Generator, depth: int = 3, max_alphabet: int = 6) -> "DiscreteChain":
        sizes = rng.integers(1, max_alphabet + 1, size=depth + 1)
        sizes[0] = max(sizes[0], 2)
        prior = _random_simplex(rng, (sizes[0],))
        ts = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            kind = rng.random()
            if kind < 0.1:
                t = np.zeros((a, b))
                t[:, rng.integers(b)] = 1.0
            elif kind < 0.25:
                t = np.eye(b)[rng.integers(b, size=a)]
            else:
                t = _random_simplex(rng, (a, b), sparsity=0.3 if kind < 0.5 else 0.0)
            ts.append(t)
        return cls(prior, ts)


@dataclass
class DPIReport:
    information: list[float]
    margins: dict[str, float]
    violations: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_dpi(chain: DiscreteChain, tol: float = TOL) -> DPIReport:
    """Check I(X; V_i) >= I(X; V_j) for every pair i < j along the chain."""
    info = [exact_mi(chain.joint_with_x(i)) for i in range(chain.depth)]
    margins, bad = {}, []
    for i in range(len(info)):
        for j in range(i + 1, len(info)):
            m = info[i] - info[j]
            margins[f"{i}>{j}"] = m
            if m < -tol:
                bad.append((i, j, m))
    return DPIReport(info, margins, bad)


# -- sequence models ------------------------------------------------------------

@dataclass
class ToySeqModel:
    """Exact sequence distribution, deterministic prefix encoders and a
    predictor over codes.

    ``p`` has shape ``[A] * (N + 1)`` over ``(s_0, ..., s_N)``.
    ``encoders[n]`` maps each prefix ``s_{0:n}`` (flattened, C order) to an
    integer code, for ``n = 0..N``. ``predictor[n][c]`` is q(s_{n+1} | c)
    for ``n = 0..N-1``.
    """

    p: np.ndarray
    encoders: list[np.ndarray]
    predictor: list[np.ndarray]

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        A, N = self.alphabet, self.horizon
        if self.p.shape != (A,) * (N + 1):
            raise IBError(f"p must have shape {(A,) * (N + 1)}")
        if A ** (N + 1) > 10 ** 6:
            raise IBError("model too large to enumerate")
        _check_stochastic("p", self.p.reshape(1, -1))
        if len(self.encoders) != N + 1 or len(self.predictor) != N:
            raise IBError("need N + 1 encoders and N predictor tables")
        for n, f in enumerate(self.encoders):
            if np.asarray(f).shape != (A ** (n + 1),):
                raise IBError(f"encoder {n} must map all {A ** (n + 1)} prefixes")
        for n, q in enumerate(self.predictor):
            q = np.asarray(q)
            if q.ndim != 2 or q.shape[1] != A or q.shape[0] <= int(np.max(self.encoders[n])):
                raise IBError(f"predictor {n} has shape {q.shape}")
            _check_stochastic(f"predictor {n}", q)

    @property
    def alphabet(self) -> int:
        return self.p.shape[0]

    @property
    def horizon(self) -> int:
        return self.p.ndim - 1

    def prefix_joint(self, n: int) -> np.ndarray:
        """p(s_{0:n}, s_{n+1}) as ``[A ** (n + 1), A]``."""
        A = self.alphabet
        axes = tuple(range(n + 2, self.horizon + 1))
        return self.p.sum(axis=axes).reshape(A ** (n + 1), A)

    def prefix_marginal(self, n: int) -> np.ndarray:
        axes = tuple(range(n + 1, self.horizon + 1))
        return self.p.sum(axis=axes).reshape(-1)

    def code_joint(self, n: int) -> np.ndarray:
        """p(c_n, s_{n+1}) as ``[n_codes, A]``."""
        j = self.prefix_joint(n)
        f = np.asarray(self.encoders[n])
        out = np.zeros((int(f.max()) + 1, self.alphabet))
        np.add.at(out, f, j)
        return out

    def prefix_code_joint(self, n: int) -> np.ndarray:
        """p(s_{0:n}, c_n); the code is a function of the prefix."""
        pm = self.prefix_marginal(n)
        f = np.asarray(self.encoders[n])
        out = np.zeros((pm.size, int(f.max()) + 1))
        out[np.arange(pm.size), f] = pm
        return out

    @classmethod
    def random(cls, rng: np.random.Generator, max_alphabet: int = 4, max_horizon: int = 4) -> "ToySeqModel":
        A = int(rng.integers(2, max_alphabet + 1))
        N = int(rng.integers(1, max_horizon + 1))
        p = _random_simplex(rng, (A ** (N + 1),), sparsity=0.5 * rng.random()).reshape((A,) * (N + 1))
        encoders, predictor = [], []
        for n in range(N + 1):
            m = A ** (n + 1)
            kind = rng.random()
            if kind < 0.15:
                f = np.zeros(m, dtype=np.int64)
            elif kind < 0.35:
                f = np.arange(m)
            else:
                f = rng.integers(0, int(rng.integers(1, m + 1)), size=m)
            encoders.append(f)
            if n < N:
                codes = int(f.max()) + 1
                predictor.append(_random_simplex(rng, (codes, A), sparsity=0.3 if rng.random() < 0.05 else 0.0))
        return cls(p, encoders, predictor)

    @classmethod
    def with_true_predictor(cls, p: np.ndarray, encoders: list[np.ndarray]) -> "ToySeqModel":
        """Predictor q(s_{n+1} | c) = p(s_{n+1} | c) computed from ``p``."""
        shell = cls.__new__(cls)
        shell.p = np.asarray(p, dtype=np.float64)
        shell.encoders = encoders
        preds = []
        for n in range(shell.horizon):
            j = shell.code_joint(n)
            tot = j.sum(axis=1, keepdims=True)
            q = np.where(tot > 0, j / np.where(tot > 0, tot, 1), 1.0 / shell.alphabet)
            preds.append(q)
        return cls(p, encoders, preds)


@dataclass
class BoundReport:
    log_likelihood: float
    code_bound: float
    prefix_bound: float
    averaged_bound: float
    terms: dict
    degenerate: bool = False
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def expected_log_likelihood(model: ToySeqModel) -> float:
    """sum_n E[log2 q(s_{n+1} | f(s_{0:n}))]; -inf if q misses support."""
    total = 0.0
    for n in range(model.horizon):
        j = model.prefix_joint(n)
        q = np.asarray(model.predictor[n])[np.asarray(model.encoders[n])]
        live = j > 0
        if (q[live] <= 0).any():
            return float("-inf")
        total += float((j[live] * np.log2(q[live])).sum())
    return total


def verify_theorem_bounds(model: ToySeqModel, tol: float = TOL) -> BoundReport:
    N = model.horizon
    L = expected_log_likelihood(model)
    i_code_next, h_next, h_next_given_prefix, i_prefix_code = [], [], [], []
    for n in range(N):
        jc = model.code_joint(n)
        i_code_next.append(exact_mi(jc))
        h_next.append(entropy(jc.sum(axis=0)))
        jp = model.prefix_joint(n)
        h_next_given_prefix.append(entropy(jp) - entropy(jp.sum(axis=1)))
    for n in range(1, N + 1):
        i_prefix_code.append(exact_mi(model.prefix_code_joint(n)))
    code_bound = sum(i_code_next) - sum(h_next)
    prefix_bound = sum(i_prefix_code) - sum(h_next_given_prefix)
    averaged = 0.5 * (sum(i_prefix_code) + sum(
        a - b - c for a, b, c in zip(i_code_next, h_next, h_next_given_prefix)
    ))
    bad = []
    for name, bound in (("code", code_bound), ("prefix", prefix_bound), ("averaged", averaged)):
        if L > bound + tol:
            bad.append(f"L={L:.12g} exceeds {name} bound {bound:.12g}")
    for n, (a, b) in enumerate(zip(h_next, h_next_given_prefix)):
        if b > a + tol:
            bad.append(f"H(S_{n + 1}|prefix)={b:.12g} exceeds H(S_{n + 1})={a:.12g}")
    for n in range(1, N + 1):
        hc = entropy(model.prefix_code_joint(n).sum(axis=0))
        if abs(hc - i_prefix_code[n - 1]) > tol:
            bad.append(f"I(prefix;code_{n}) != H(code_{n}) for a deterministic encoder")
    terms = {
        "I_code_next": i_code_next, "H_next": h_next,
        "H_next_given_prefix": h_next_given_prefix, "I_prefix_code": i_prefix_code,
    }
    return BoundReport(L, code_bound, prefix_bound, averaged, terms, not np.isfinite(L), bad)


def run_suite(n_chains: int = 1000, n_models: int = 200, seed: int = 0, tol: float = TOL) -> dict:
    """Randomised DPI and bound checks; returns a JSON-ready report."""
    rng = np.random.default_rng(seed)
    chains, models = [], []
    for i in range(n_chains):
        rep = verify_dpi(DiscreteChain.random(rng, depth=int(rng.integers(2, 5))), tol)
        chains.append({"trial": i, "ok": rep.ok, "min_margin": min(rep.margins.values(), default=0.0),
                       "violations": rep.violations})
    for i in range(n_models):
        rep = verify_theorem_bounds(ToySeqModel.random(rng), tol)
        L = rep.log_likelihood
        models.append({
            "trial": i, "ok": rep.ok, "degenerate": rep.degenerate,
            "code_margin": None if rep.degenerate else rep.code_bound - L,
            "prefix_margin": None if rep.degenerate else rep.prefix_bound - L,
            "averaged_margin": None if rep.degenerate else rep.averaged_bound - L,
            "violations": rep.violations,
        })
    n_bad = sum(not c["ok"] for c in chains) + sum(not m["ok"] for m in models)
    return {"seed": seed, "tolerance": tol, "violations": n_bad,
            "dpi_trials": chains, "bound_trials": models}


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
