"""Token sequences, enumerable sequence policies and bounded reward models.

Everything here works on exact tables. A completion of horizon ``H`` over a
vocabulary of size ``V`` is identified with its lexicographic index in
``range(V**H)`` (base-``V`` digits, most significant first), so a policy is a
``(n_prompts, V**H)`` table of log-probabilities and a reward model is a
``(n_prompts, V**H)`` table of scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

ENUMERATION_CAP = 10**6
DEFAULT_CR = 5.0
DEFAULT_FLOOR = 1e-6

TokenSeq = tuple  # tuple[int, ...]


def as_tokens(seq) -> TokenSeq:
    return tuple(int(t) for t in seq)


def check_enumerable(V: int, H: int, cap: int = ENUMERATION_CAP) -> int:
    n = V**H
    if n > cap:
        raise ValueError(f"enumeration too large: {V}**{H} = {n} > cap {cap}")
    return n


def completion_array(V: int, H: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All ``V**H`` completions as an ``(N, H)`` int array in lexicographic order."""
    n = check_enumerable(V, H, cap)
    idx = np.arange(n)
    digits = np.empty((n, H), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        digits[:, h] = idx % V
        idx = idx // V
    return digits


def enumerate_completions(V: int, H: int, cap: int = ENUMERATION_CAP) -> list[TokenSeq]:
    return [tuple(int(t) for t in row) for row in completion_array(V, H, cap)]


def completion_index(y: Sequence[int], V: int, H: int) -> int:
    if len(y) != H:
        raise ValueError(f"horizon mismatch: expected length {H}, got {len(y)}")
    i = 0
    for t in y:
        t = int(t)
        if not 0 <= t < V:
            raise ValueError(f"token out of range: {t} not in [0, {V})")
        i = i * V + t
    return i


def log_normalize(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax (max-subtracted log-sum-exp)."""
    return logits - logsumexp(logits, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PromptSet:
    prompts: tuple
    weights: np.ndarray = None

    def __post_init__(self):
        prompts = tuple(as_tokens(p) for p in self.prompts)
        if not prompts:
            raise ValueError("prompt set must be nonempty")
        if len(set(prompts)) != len(prompts):
            raise ValueError("duplicate prompts")
        w = self.weights
        if w is None:
            w = np.full(len(prompts), 1.0 / len(prompts))
        w = np.asarray(w, dtype=float)
        if w.shape != (len(prompts),) or np.any(w < 0):
            raise ValueError("prompt weights must be a nonnegative vector, one per prompt")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"prompt weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_lookup", {p: i for i, p in enumerate(prompts)})

    def __len__(self):
        return len(self.prompts)

    def __eq__(self, other):
        return (
            isinstance(other, PromptSet)
            and self.prompts == other.prompts
            and np.array_equal(self.weights, other.weights)
        )

    def index(self, x) -> int:
        try:
            return self._lookup[as_tokens(x)]
        except KeyError:
            raise KeyError(f"prompt not in support: {tuple(x)}") from None


@dataclass(frozen=True, eq=False)
class SequencePolicy:
    """Exact sequence-level policy: ``log_probs[p, j] = log pi(y_j | x_p)``."""

    prompts: PromptSet
    V: int
    H: int
    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.array(self.log_probs, dtype=float)
        n = check_enumerable(self.V, self.H)
        if lp.shape != (len(self.prompts), n):
            raise ValueError(f"table shape {lp.shape} != {(len(self.prompts), n)}")
        resid = np.abs(np.exp(logsumexp(lp, axis=1)) - 1.0).max()
        if resid > 1e-10:
            raise ValueError(f"policy not normalized (residual {resid:.3g})")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @classmethod
    def from_logits(cls, prompts, V, H, logits):
        return cls(prompts, V, H, log_normalize(np.asarray(logits, dtype=float)))

    @classmethod
    def from_probs(cls, prompts, V, H, probs):
        with np.errstate(divide="ignore"):
            lp = np.log(np.asarray(probs, dtype=float))
        return cls(prompts, V, H, lp)

    @classmethod
    def uniform(cls, prompts, V, H):
        n = check_enumerable(V, H)
        return cls(prompts, V, H, np.full((len(prompts), n), -H * np.log(V)))

    @classmethod
    def from_autoregressive(cls, prompts, V, H, cond_logits):
        """Build the sequence table from per-position conditional logits.

        ``cond_logits[h]`` has shape ``(n_prompts, V**h, V)``: row ``s`` holds the
        next-token logits after the prefix whose lexicographic index is ``s``.
        """
        n_prompts = len(prompts)
        lp = np.zeros((n_prompts, 1))
        for h in range(H):
            cond = np.asarray(cond_logits[h], dtype=float)
            if cond.shape != (n_prompts, V**h, V):
                raise ValueError(f"position {h}: expected shape {(n_prompts, V**h, V)}")
            step = log_normalize(cond)
            lp = (lp[:, :, None] + step).reshape(n_prompts, V ** (h + 1))
        return cls(prompts, V, H, lp)

    def autoregressive_logits(self) -> list[np.ndarray]:
        """Conditional next-token log-probabilities, the inverse view of
        :meth:`from_autoregressive`."""
        V, H = self.V, self.H
        out = []
        n_prompts = len(self.prompts)
        # prefix marginals, indexed by prefix length
        marg = [None] * (H + 1)
        marg[H] = self.log_probs
        for h in range(H - 1, -1, -1):
            marg[h] = logsumexp(marg[h + 1].reshape(n_prompts, V**h, V), axis=2)
        for h in range(H):
            nxt = marg[h + 1].reshape(n_prompts, V**h, V)
            out.append(nxt - marg[h][:, :, None])
        return out

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def with_log_probs(self, log_probs) -> "SequencePolicy":
        return SequencePolicy(self.prompts, self.V, self.H, log_probs)

    def logprob(self, x, y) -> float:
        return float(self.log_probs[self.prompts.index(x), completion_index(y, self.V, self.H)])

    def sample_indices(self, p: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return inverse_cdf(self.probs[p], rng.random(n))

    def floored(self, eps: float = DEFAULT_FLOOR) -> "SequencePolicy":
        return self.with_log_probs(floor_log_probs(self.log_probs, eps))


def inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, len(p) - 1)


def floor_log_probs(log_probs: np.ndarray, eps: float) -> np.ndarray:
    """Lift every probability to at least ``eps`` and rescale the rest so each
    row still sums to one. Rows already at or above the floor are returned
    unchanged, so the operation is idempotent."""
    lp = np.array(log_probs, dtype=float)
    log_eps = np.log(eps)
    for row in lp:
        if row.min() >= log_eps:
            continue
        low = row < log_eps
        while True:
            shift = np.log1p(-low.sum() * eps) - logsumexp(row[~low])
            new_low = low | (row + shift < log_eps)
            if (new_low == low).all():
                break
            low = new_low
        row[:] = np.where(low, log_eps, row + shift)
    return lp


def logprob(policy: SequencePolicy, x, y) -> float:
    return policy.logprob(x, y)


def sample(policy: SequencePolicy, x, n: int, seed: int) -> list[TokenSeq]:
    if n < 1:
        raise ValueError("empty sample request")
    p = policy.prompts.index(x)
    rng = np.random.default_rng(seed)
    comps = completion_array(policy.V, policy.H)
    return [tuple(int(t) for t in comps[j]) for j in policy.sample_indices(p, n, rng)]


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Bounded reward ``r = C_r * sigmoid(raw)``.

    ``kind == "tabular"``: ``params`` has one raw value per (prompt, completion),
    flattened row-major from ``(n_prompts, V**H)``.
    ``kind == "linear"``: ``raw = features @ params`` with fixed ``features`` of
    shape ``(n_prompts, V**H, d)``.
    """

    kind: str
    prompts: PromptSet
    V: int
    H: int
    params: np.ndarray
    C_r: float = DEFAULT_CR
    features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = check_enumerable(self.V, self.H)
        shape = (len(self.prompts), n)
        params = np.array(self.params, dtype=float).ravel()
        if self.C_r <= 0:
            raise ValueError("C_r must be positive")
        if self.kind == "tabular":
            if params.size != shape[0] * shape[1]:
                raise ValueError(f"tabular reward needs {shape[0] * shape[1]} params")
        elif self.kind == "linear":
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 3 or feats.shape[:2] != shape:
                raise ValueError(f"features must have shape {shape} + (d,)")
            if params.size != feats.shape[2]:
                raise ValueError(f"linear reward needs {feats.shape[2]} params")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)
        else:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def zeros_like(cls, other: "RewardModel") -> "RewardModel":
        return other.with_params(np.zeros_like(other.params))

    @classmethod
    def tabular(cls, prompts, V, H, raw=None, C_r=DEFAULT_CR):
        n = check_enumerable(V, H)
        if raw is None:
            raw = np.zeros((len(prompts), n))
        return cls("tabular", prompts, V, H, np.asarray(raw, dtype=float).ravel(), C_r)

    @classmethod
    def linear(cls, prompts, V, H, features, params=None, C_r=DEFAULT_CR):
        features = np.asarray(features, dtype=float)
        if params is None:
            params = np.zeros(features.shape[-1])
        return cls("linear", prompts, V, H, params, C_r, features)

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params) -> "RewardModel":
        return RewardModel(self.kind, self.prompts, self.V, self.H, params, self.C_r, self.features)

    def raw(self) -> np.ndarray:
        if self.kind == "tabular":
            return self.params.reshape(len(self.prompts), -1)
        return np.einsum("pnd,d->pn", self.features, self.params)

    def scores(self) -> np.ndarray:
        return self.C_r * expit(self.raw())

    def pullback(self, weights: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. params of ``sum(weights * scores())``."""
        s = expit(self.raw())
        coef = np.asarray(weights, dtype=float) * self.C_r * s * (1.0 - s)
        if self.kind == "tabular":
            return coef.ravel()
        return np.einsum("pn,pnd->d", coef, self.features)

    def grad_score(self, x, y) -> np.ndarray:
        w = np.zeros((len(self.prompts), self.V**self.H))
        w[self._locate(x, y)] = 1.0
        return self.pullback(w)

    def _locate(self, x, y):
        try:
            p = self.prompts.index(x)
        except KeyError:
            raise KeyError(f"pair not in table: prompt {tuple(x)}") from None
        return p, completion_index(y, self.V, self.H)

    def score(self, x, y) -> float:
        p, j = self._locate(x, y)
        if self.kind == "tabular":
            raw = self.params[p * self.V**self.H + j]
        else:
            raw = self.features[p, j] @ self.params
        return float(self.C_r * expit(raw))


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Read-only scorer backed by an explicit ``(n_prompts, V**H)`` table."""

    prompts: PromptSet
    V: int
    H: int
    table: np.ndarray

    def scores(self) -> np.ndarray:
        return self.table

    def score(self, x, y) -> float:
        return float(self.table[self.prompts.index(x), completion_index(y, self.V, self.H)])


def reward_score(model: RewardModel, x, y) -> float:
    return model.score(x, y)


def random_policy_table(rng: np.random.Generator, n_prompts: int, n: int, concentration=1.0):
    """Dirichlet-distributed rows, returned as log-probabilities."""
    g = rng.gamma(concentration, size=(n_prompts, n))
    g = np.maximum(g, np.finfo(float).tiny)
    return np.log(g) - np.log(g.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class Instance:
    """A synthetic alignment world whose expert is the exact Gibbs tilt of
    ``pi_ref`` by ``r_star`` at temperature ``beta``."""

    V: int
    H: int
    prompt_set: PromptSet
    r_star: RewardModel
    pi_ref: SequencePolicy
    pi_expert: SequencePolicy
    beta: float
    C_r: float
    C_p: float
    seed: int = 0

    @property
    def n_completions(self) -> int:
        return self.V**self.H
