"""Binary task utilities, Monte Carlo and exact expected utility, the pivot oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .lm import EOS, GenerationParams, SequenceModel, derived_rng, rollout, with_params

ENUMERATION_LIMIT = 10_000
# float slack when comparing exactly computed utilities
TIE_ATOL = 1e-12


class UtilityEvalError(RuntimeError):
    pass


def completed(output: Sequence[int]) -> list[int]:
    """Output up to (not including) the first EOS."""
    out = list(output)
    return out[: out.index(EOS)] if EOS in out else out


class UtilityFn:
    """Binary utility: 1 iff ``evaluate(output, context) >= theta_eval``."""

    kind = "base"
    theta_eval = 1.0

    def evaluate(self, output: Sequence[int], context: Sequence[int]) -> float:
        raise NotImplementedError

    def __call__(self, output, context) -> int:
        return utility(output, context, self)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class SubstringTask(UtilityFn):
    """Success iff the output contains ``bigram`` before EOS."""

    kind = "substring"

    def __init__(self, bigram: Sequence[int] = (1, 2)):
        if len(bigram) != 2 or EOS in bigram:
            raise ValueError("bigram must be two non-EOS tokens")
        self.bigram = (int(bigram[0]), int(bigram[1]))

    def evaluate(self, output, context):
        out = completed(output)
        a, b = self.bigram
        return float(any(x == a and y == b for x, y in zip(out, out[1:])))

    def to_dict(self):
        return {"kind": self.kind, "bigram": list(self.bigram)}


class ChecksumTask(UtilityFn):
    """Success iff the output token sum mod V equals the prompt's residue."""

    kind = "checksum"

    def __init__(self, vocab_size: int, offset: int = 0):
        self.vocab_size = vocab_size
        self.offset = offset

    def residue(self, context: Sequence[int]) -> int:
        return (sum(context) + self.offset) % self.vocab_size

    def evaluate(self, output, context):
        return float(sum(completed(output)) % self.vocab_size == self.residue(context))

    def to_dict(self):
        return {"kind": self.kind, "offset": self.offset}


def make_utility(task: dict, vocab_size: int) -> UtilityFn:
    kind = task.get("kind")
    if kind == "substring":
        return SubstringTask(task.get("bigram", (1, 2)))
    if kind == "checksum":
        return ChecksumTask(vocab_size, task.get("offset", 0))
    raise ValueError(f"unknown utility task {kind!r}")


def utility(output: Sequence[int], context: Sequence[int], u: UtilityFn) -> int:
    try:
        score = u.evaluate(output, context)
    except Exception as exc:  # never report an eval failure as a 0
        raise UtilityEvalError(f"utility evaluation failed: {exc}") from exc
    return int(score >= u.theta_eval)


@dataclass(frozen=True)
class RolloutEstimate:
    mean: float
    n: int
    successes: int

    @classmethod
    def from_counts(cls, successes: int, n: int) -> RolloutEstimate:
        if n < 1:
            raise ValueError("need at least one rollout")
        return cls(successes / n, n, successes)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.mean * (1.0 - self.mean) / self.n)


@dataclass(frozen=True)
class Rollout:
    output: tuple[int, ...]  # suffix after the conditioning prefix
    utility: int

    @property
    def length(self) -> int:
        return len(self.output)


def is_finished(prefix: Sequence[int], params: GenerationParams) -> bool:
    return len(prefix) >= params.max_len or (len(prefix) > 0 and prefix[-1] == EOS)


def sample_rollouts(
    model: SequenceModel,
    context: Sequence[int],
    prefix: Sequence[int],
    u: UtilityFn,
    n: int,
    params: GenerationParams,
    rng: np.random.Generator,
) -> list[Rollout]:
    """``n`` target completions of ``context + prefix`` scored on the full output."""
    prefix = tuple(prefix)
    result = []
    for _ in range(n):
        if is_finished(prefix, params):
            suffix: tuple[int, ...] = ()
        else:
            suffix = tuple(rollout(model, tuple(context) + prefix, params, rng, params.max_len - len(prefix)))
        result.append(Rollout(suffix, utility(prefix + suffix, context, u)))
    return result


def expected_utility(
    model: SequenceModel,
    context: Sequence[int],
    u: UtilityFn,
    n: int,
    params: GenerationParams,
    rng: np.random.Generator,
    prefix: Sequence[int] = (),
) -> RolloutEstimate:
    if n < 1:
        raise ValueError("n must be >= 1")
    runs = sample_rollouts(model, context, prefix, u, n, params, rng)
    return RolloutEstimate.from_counts(sum(r.utility for r in runs), n)


def enumerable(vocab_size: int, remaining: int) -> bool:
    return vocab_size**max(remaining, 0) <= ENUMERATION_LIMIT


def exact_expected_utility(
    model: SequenceModel,
    context: Sequence[int],
    u: UtilityFn,
    params: GenerationParams,
    prefix: Sequence[int] = (),
    cache: dict | None = None,
) -> float:
    """Sum over every completion of its target probability times its utility."""
    model = with_params(model, params)
    context = tuple(context)
    memo = {} if cache is None else cache

    def value(pre: tuple[int, ...]) -> float:
        if pre in memo:
            return memo[pre]
        if is_finished(pre, params):
            v = float(utility(pre, context, u))
        else:
            dist = model.next_distribution(context + pre)
            v = 0.0
            for tok in np.flatnonzero(dist):
                v += dist[tok] * value(pre + (int(tok),))
        memo[pre] = v
        return v

    return value(tuple(prefix))


@dataclass(frozen=True)
class PivotOracleConfig:
    epsilon: float = 0.0
    n_rollouts: int = 8
    params: GenerationParams = GenerationParams()
    exact: bool = True  # use enumeration whenever the remaining horizon allows it

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")


def pivot_utilities(
    target: SequenceModel,
    context: Sequence[int],
    prefix: Sequence[int],
    candidate: int,
    cfg: PivotOracleConfig,
    u: UtilityFn,
    rng: np.random.Generator,
    cache: dict | None = None,
) -> tuple[float, float, bool]:
    """(base utility, candidate utility, whether both were computed exactly)."""
    prefix = tuple(prefix)
    remaining = cfg.params.max_len - len(prefix)
    if cfg.exact and enumerable(target.vocab_size, remaining):
        base = exact_expected_utility(target, context, u, cfg.params, prefix, cache)
        cand = exact_expected_utility(target, context, u, cfg.params, prefix + (candidate,), cache)
        return base, cand, True
    base_est = expected_utility(target, context, u, cfg.n_rollouts, cfg.params, rng, prefix)
    cand_est = expected_utility(target, context, u, cfg.n_rollouts, cfg.params, rng, prefix + (candidate,))
    return base_est.mean, cand_est.mean, False


def is_pivot_oracle(
    target: SequenceModel,
    context: Sequence[int],
    prefix: Sequence[int],
    candidate: int,
    cfg: PivotOracleConfig,
    u: UtilityFn,
    rng: np.random.Generator,
    cache: dict | None = None,
) -> bool:
    """Pivot iff U(prefix + candidate) <= U(prefix) - epsilon; ties count as pivot."""
    base, cand, exact = pivot_utilities(target, context, prefix, candidate, cfg, u, rng, cache)
    slack = TIE_ATOL if exact else 0.0
    return cand <= base - cfg.epsilon + slack


class OracleScorer:
    """Pivot score from the ground-truth oracle: 1.0 for pivots, 0.0 otherwise.

    Has perfect recall on pivots by construction, so it is the classifier the
    utility-preservation guarantee is stated for.
    """

    def __init__(self, target: SequenceModel, u: UtilityFn, cfg: PivotOracleConfig, seed: int = 0):
        self.target = target
        self.u = u
        self.cfg = cfg
        self.seed = seed
        self._caches: dict[tuple, dict] = {}

    def __call__(self, pos) -> float:
        cache = self._caches.setdefault(pos.prompt, {})
        if len(self._caches) > 256:
            self._caches.clear()
            cache = self._caches.setdefault(pos.prompt, {})
        rng = derived_rng(self.seed, *pos.prompt, len(pos.prefix), *pos.prefix, pos.candidate)
        pivot = is_pivot_oracle(self.target, pos.prompt, pos.prefix, pos.candidate, self.cfg, self.u, rng, cache)
        return 1.0 if pivot else 0.0


@dataclass(frozen=True)
class PreservationReport:
    mean_a: float
    mean_b: float
    gap: float
    stderr: float
    ci_low: float
    ci_high: float
    epsilon: float
    preserved: bool
    n_contexts: int
    n_per_context: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


Decoder = Callable[[Sequence[int], np.random.Generator], Sequence[int]]


def check_utility_preservation(
    decoder_a: Decoder,
    decoder_b: Decoder,
    contexts: Sequence[Sequence[int]],
    u: UtilityFn,
    n: int,
    epsilon: float,
    seed: int = 0,
    z: float = 2.0,
) -> PreservationReport:
    """Paired estimate of E[U(A)] - E[U(B)]; preserved iff the upper CI bound reaches -epsilon.

    Both decoders see the same per-context seeds, so identical decoders give
    an exactly zero gap.
    """
    diffs = np.empty(len(contexts))
    ua = np.empty(len(contexts))
    ub = np.empty(len(contexts))
    for i, ctx in enumerate(contexts):
        sa = sb = 0
        for j in range(n):
            sa += utility(decoder_a(ctx, derived_rng(seed, i, j)), ctx, u)
            sb += utility(decoder_b(ctx, derived_rng(seed, i, j)), ctx, u)
        ua[i], ub[i] = sa / n, sb / n
        diffs[i] = ua[i] - ub[i]
    gap = float(diffs.mean())
    se = float(diffs.std(ddof=1) / math.sqrt(len(diffs))) if len(diffs) > 1 else 0.0
    return PreservationReport(
        mean_a=float(ua.mean()),
        mean_b=float(ub.mean()),
        gap=gap,
        stderr=se,
        ci_low=gap - z * se,
        ci_high=gap + z * se,
        epsilon=epsilon,
        preserved=gap + z * se >= -epsilon,
        n_contexts=len(contexts),
        n_per_context=n,
    )
