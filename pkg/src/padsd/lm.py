"""Autoregressive table models, sampling filters and rollouts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

EOS = 0
DIST_ATOL = 1e-9


class InvalidTokenError(ValueError):
    pass


class InvalidDistributionError(ValueError):
    pass


def check_distribution(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise InvalidDistributionError(f"need a 1-d vector of size >= 2, got shape {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InvalidDistributionError("negative or non-finite entries")
    if abs(probs.sum() - 1.0) > DIST_ATOL:
        raise InvalidDistributionError(f"entries sum to {probs.sum()!r}")
    return probs


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int | None = None  # None means off
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be a positive integer or None")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @property
    def is_identity(self) -> bool:
        return self.temperature == 1.0 and self.top_p == 1.0 and self.top_k is None

    def filter_key(self) -> tuple:
        return (self.temperature, self.top_p, self.top_k)


# sampling settings common for long reasoning traces
REASONING_PARAMS = GenerationParams(temperature=0.6, top_p=0.95, top_k=20, max_len=32000)


def adjust_distribution(dist: np.ndarray, params: GenerationParams) -> np.ndarray:
    """Apply temperature, then top-k, then top-p, then renormalize."""
    p = check_distribution(dist)
    if params.is_identity:
        return p.copy()
    if params.temperature != 1.0:
        with np.errstate(divide="ignore"):
            logp = np.log(p) / params.temperature
        logp -= logp.max()
        p = np.exp(logp)
        p /= p.sum()
    order = np.argsort(-p, kind="stable")
    keep = np.zeros(p.size, dtype=bool)
    n_keep = p.size if params.top_k is None else min(params.top_k, p.size)
    keep[order[:n_keep]] = True
    if params.top_p < 1.0:
        kept = order[:n_keep]
        mass = p[kept] / p[kept].sum()
        # smallest descending prefix whose mass reaches top_p
        before = np.cumsum(mass) - mass
        nucleus = kept[before < params.top_p]
        keep[:] = False
        keep[nucleus] = True
    out = np.where(keep, p, 0.0)
    total = out.sum()
    if total <= 0.0:
        out = np.zeros_like(p)
        out[order[0]] = 1.0
        return out
    return out / total


def sample_token(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    cdf = np.cumsum(dist)
    u = rng.random() * cdf[-1]
    i = min(int(np.searchsorted(cdf, u, side="right")), len(dist) - 1)
    while dist[i] <= 0.0:
        i -= 1
    return i


class SequenceModel(Protocol):
    vocab_size: int
    order: int
    hidden_dim: int

    def next_distribution(self, context: Sequence[int]) -> np.ndarray: ...

    def hidden_features(self, context: Sequence[int]) -> np.ndarray: ...


class TableModel:
    """k-gram model: one next-token row per last-k context, left-padded with EOS."""

    def __init__(self, table: np.ndarray, order: int, projection: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        vocab = table.shape[1]
        if table.shape[0] != vocab**order:
            raise ValueError(f"table needs {vocab ** order} rows, got {table.shape[0]}")
        self.vocab_size = vocab
        self.order = order
        self.table = table
        self.table.setflags(write=False)
        self.projection = projection
        self.hidden_dim = projection.shape[1]
        self._hidden = _hidden_table(vocab, order, projection)
        self._adjusted: dict[tuple, TableModel] = {}

    def row_index(self, context: Sequence[int]) -> int:
        k, v = self.order, self.vocab_size
        idx = 0
        tail = list(context[-k:]) if k else []
        tail = [EOS] * (k - len(tail)) + tail
        for tok in tail:
            if not 0 <= tok < v:
                raise InvalidTokenError(f"token {tok} outside vocabulary of size {v}")
            idx = idx * v + int(tok)
        return idx

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        return self.table[self.row_index(context)]

    def hidden_features(self, context: Sequence[int]) -> np.ndarray:
        return self._hidden[self.row_index(context)]

    def adjusted(self, params: GenerationParams) -> TableModel:
        """The same model with every row passed through ``adjust_distribution``."""
        if params.is_identity:
            return self
        key = params.filter_key()
        if key not in self._adjusted:
            rows = np.stack([adjust_distribution(r, params) for r in self.table])
            self._adjusted[key] = TableModel(rows, self.order, self.projection)
        return self._adjusted[key]


def _hidden_table(vocab: int, order: int, projection: np.ndarray) -> np.ndarray:
    n_rows = vocab**order
    onehot = np.zeros((n_rows, vocab * order))
    for row in range(n_rows):
        r = row
        for pos in range(order - 1, -1, -1):
            onehot[row, pos * vocab + r % vocab] = 1.0
            r //= vocab
    return np.tanh(onehot @ projection[: vocab * order]) if order else np.zeros((1, projection.shape[1]))


class AdjustedModel:
    """Per-call parameter adjustment for models without a precomputed table."""

    def __init__(self, model: SequenceModel, params: GenerationParams):
        self.model = model
        self.params = params
        self.vocab_size = model.vocab_size
        self.order = model.order
        self.hidden_dim = model.hidden_dim

    def next_distribution(self, context):
        return adjust_distribution(self.model.next_distribution(context), self.params)

    def hidden_features(self, context):
        return self.model.hidden_features(context)


def with_params(model: SequenceModel, params: GenerationParams) -> SequenceModel:
    if params.is_identity:
        return model
    if hasattr(model, "adjusted"):
        return model.adjusted(params)
    return AdjustedModel(model, params)


def next_distribution(model: SequenceModel, context: Sequence[int]) -> np.ndarray:
    """Checked entry point; model methods only validate the tokens they read."""
    for tok in context:
        if not 0 <= tok < model.vocab_size:
            raise InvalidTokenError(f"token {tok} outside vocabulary of size {model.vocab_size}")
    return model.next_distribution(context)


def rollout(
    model: SequenceModel,
    context: Sequence[int],
    params: GenerationParams,
    rng: np.random.Generator,
    max_new: int | None = None,
) -> list[int]:
    """Sample until EOS or the length cap; returns only the new tokens (EOS included)."""
    model = with_params(model, params)
    budget = params.max_len if max_new is None else max_new
    seq = list(context)
    out: list[int] = []
    while len(out) < budget:
        tok = sample_token(model.next_distribution(seq), rng)
        out.append(tok)
        seq.append(tok)
        if tok == EOS:
            break
    return out


def derived_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent stream for (seed, path...), stable under any scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *path]))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 4
    order: int = 1
    perturbation: float = 0.3
    seed: int = 0
    d_h: int = 32
    task: dict = field(default_factory=lambda: {"kind": "checksum"})
    # fixes the EOS entry of every target row when set; None keeps the Dirichlet draw
    eos_mass: float | None = None
    n_contexts: int = 64
    context_len: int = 2
    dirichlet_alpha: float = 0.5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not 0.0 <= self.perturbation <= 1.0:
            raise ValueError("perturbation must be in [0, 1]")
        if self.eos_mass is not None and not 0.0 <= self.eos_mass < 1.0:
            raise ValueError("eos_mass must be in [0, 1)")
        if self.vocab_size**self.order > 2_000_000:
            raise ValueError("table too large for a desk-scale model")
        if self.d_h < 1 or self.n_contexts < 1 or self.context_len < 0:
            raise ValueError("d_h and n_contexts must be >= 1, context_len >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticTaskSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown task spec fields: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> SyntheticTaskSpec:
        return cls.from_dict(json.loads(text))


def build_target_table(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = derived_rng(spec.seed, 0)
    v = spec.vocab_size
    table = rng.dirichlet(np.full(v, spec.dirichlet_alpha), size=v**spec.order)
    if spec.eos_mass is not None:
        rest = table[:, 1:]
        sums = rest.sum(axis=1, keepdims=True)
        rest = np.where(sums > 0, rest / np.where(sums > 0, sums, 1.0), 1.0 / (v - 1))
        table = np.hstack([np.full((table.shape[0], 1), spec.eos_mass), (1 - spec.eos_mass) * rest])
    return table / table.sum(axis=1, keepdims=True)


def make_synthetic_pair(spec: SyntheticTaskSpec) -> tuple[TableModel, TableModel]:
    target_table = build_target_table(spec)
    v = spec.vocab_size
    draft_table = (1.0 - spec.perturbation) * target_table + spec.perturbation / v
    draft_table /= draft_table.sum(axis=1, keepdims=True)
    if spec.perturbation == 0.0:
        draft_table = target_table.copy()
    proj = derived_rng(spec.seed, 1).normal(size=(max(v * spec.order, 1), spec.d_h))
    proj /= math.sqrt(max(spec.order, 1))
    return TableModel(target_table, spec.order, proj), TableModel(draft_table, spec.order, proj)


def make_contexts(spec: SyntheticTaskSpec, stream: int = 0, n: int | None = None) -> list[tuple[int, ...]]:
    """Prompt token sequences for a task (never containing EOS).

    Different ``stream`` values give disjoint draws, e.g. labeling vs. evaluation prompts.
    """
    rng = derived_rng(spec.seed, 2, stream)
    return [
        tuple(int(t) for t in rng.integers(1, spec.vocab_size, size=spec.context_len))
        for _ in range(spec.n_contexts if n is None else n)
    ]


def uniform_model(vocab_size: int, order: int = 0, d_h: int = 4) -> TableModel:
    table = np.full((vocab_size**order, vocab_size), 1.0 / vocab_size)
    return TableModel(table, order, np.zeros((max(vocab_size * order, 1), d_h)))


def constant_model(probs: Sequence[float], d_h: int = 4) -> TableModel:
    """Order-0 model returning ``probs`` for every context."""
    probs = check_distribution(np.asarray(probs, dtype=np.float64))
    return TableModel(probs[None, :], 0, np.zeros((1, d_h)))


__all__ = [
    "EOS",
    "AdjustedModel",
    "GenerationParams",
    "InvalidDistributionError",
    "InvalidTokenError",
    "REASONING_PARAMS",
    "SequenceModel",
    "SyntheticTaskSpec",
    "TableModel",
    "adjust_distribution",
    "check_distribution",
    "constant_model",
    "derived_rng",
    "make_contexts",
    "make_synthetic_pair",
    "next_distribution",
    "rollout",
    "sample_token",
    "uniform_model",
]
