"""Pivot-label data collection: harvest SD-rejected draft tokens and label them by rollouts."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .classifier import FeatureVector, entropy
from .lm import EOS, GenerationParams, SequenceModel, derived_rng, sample_token, with_params
from .utility import (
    Rollout,
    RolloutEstimate,
    UtilityFn,
    completed,
    enumerable,
    exact_expected_utility,
    sample_rollouts,
)
from .verify import accept_probability, residual_distribution

log = logging.getLogger(__name__)

PIVOT = "pivot"
NON_PIVOT = "non-pivot"
LABELS_SCHEMA = "padsd.labels/1"
RECORD_FIELDS = (
    "context_id", "prefix_len", "prefix_tokens", "candidate", "u_base_hat",
    "u_cand_hat", "label", "judge_flipped", "feature_vector",
)


@dataclass(frozen=True)
class LabelConfig:
    alpha: float = 0.8
    n_rollouts: int = 8
    max_steps: int = 16
    params: GenerationParams = GenerationParams()
    seed: int = 0
    exact: bool = False  # exact utilities where the remaining horizon is enumerable
    max_samples_per_context: int | None = None
    rollout_budget: int | None = None  # per context

    def __post_init__(self):
        # alpha = 0 is accepted as the degenerate "never pivot" rule
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.n_rollouts < 1 or self.max_steps < 1:
            raise ValueError("n_rollouts and max_steps must be >= 1")


@dataclass
class LabeledSample:
    context_id: int
    prefix: tuple[int, ...]
    candidate: int
    label: str
    u_base_hat: float
    u_cand_hat: float
    features: FeatureVector
    judge_flipped: bool = False

    def to_record(self) -> dict:
        return {
            "context_id": self.context_id,
            "prefix_len": len(self.prefix),
            "prefix_tokens": list(self.prefix),
            "candidate": self.candidate,
            "u_base_hat": self.u_base_hat,
            "u_cand_hat": self.u_cand_hat,
            "label": self.label,
            "judge_flipped": self.judge_flipped,
            "feature_vector": {
                "h": self.features.h.tolist(),
                "entropy": self.features.entropy,
                "p_cand": self.features.p_cand,
            },
        }

    @classmethod
    def from_record(cls, row: dict) -> LabeledSample:
        fv = row["feature_vector"]
        return cls(
            row["context_id"], tuple(row["prefix_tokens"]), row["candidate"], row["label"],
            row["u_base_hat"], row["u_cand_hat"],
            FeatureVector(np.asarray(fv["h"], dtype=np.float64), fv["entropy"], fv["p_cand"]),
            row["judge_flipped"],
        )


class Judge(Protocol):
    def is_sound(self, context: Sequence[int], output: Sequence[int], start: int) -> bool: ...


class AlwaysSound:
    def is_sound(self, context, output, start) -> bool:
        return True


class CancelPairJudge:
    """Flags a success reached by immediately undoing the candidate token.

    The rollout is unsound when the token right after the candidate is its
    additive inverse mod V: the candidate broke the running checksum and the
    next step repaired it.
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def is_sound(self, context, output, start) -> bool:
        out = completed(output)
        if start + 1 >= len(out):
            return True
        a, b = out[start], out[start + 1]
        return not (a != EOS and b != EOS and (a + b) % self.vocab_size == 0)


def label_rule(u_base: RolloutEstimate | float, u_cand: RolloutEstimate | float, alpha: float) -> str:
    base = u_base.mean if isinstance(u_base, RolloutEstimate) else float(u_base)
    cand = u_cand.mean if isinstance(u_cand, RolloutEstimate) else float(u_cand)
    return PIVOT if cand < alpha * base else NON_PIVOT


def select_representative(successes: Sequence[Rollout]) -> Rollout | None:
    """Median-length success (lower median for even counts); None when there are none."""
    if not successes:
        return None
    ranked = sorted(successes, key=lambda r: r.length)
    return ranked[(len(ranked) - 1) // 2]


def judge_check(
    label: str,
    rollouts: Sequence[Rollout],
    context: Sequence[int],
    stem: Sequence[int],
    judge: Judge,
) -> tuple[str, bool]:
    """Only ever flips non-pivot to pivot; a failing judge leaves the label alone.

    ``stem`` is the prefix plus candidate the rollouts continue from.
    """
    if label == PIVOT:
        return label, False
    rep = select_representative([r for r in rollouts if r.utility == 1])
    if rep is None:
        return label, False
    try:
        sound = judge.is_sound(context, tuple(stem) + rep.output, len(stem) - 1)
    except Exception:
        log.warning("judge failed; keeping label %s", label, exc_info=True)
        return label, False
    if not sound:
        return PIVOT, True
    return label, False


@dataclass
class HarvestResult:
    samples: list[LabeledSample] = field(default_factory=list)
    n_rejections: int = 0
    n_steps: int = 0
    truncated: bool = False


def harvest_context(
    context_id: int,
    context: Sequence[int],
    target: SequenceModel,
    draft: SequenceModel,
    u: UtilityFn,
    cfg: LabelConfig,
    judge: Judge,
    rng: np.random.Generator,
) -> HarvestResult:
    """One walk of the collection loop over a single prompt."""
    params = cfg.params
    tgt = with_params(target, params)
    drf = with_params(draft, params)
    context = tuple(context)
    prefix: tuple[int, ...] = ()
    res = HarvestResult()
    used = 0
    cache: dict = {}
    for _ in range(cfg.max_steps):
        if len(prefix) >= params.max_len or (prefix and prefix[-1] == EOS):
            break
        res.n_steps += 1
        seq = context + prefix
        p_d = drf.next_distribution(seq)
        p_t = tgt.next_distribution(seq)
        cand = sample_token(p_d, rng)
        if rng.random() < accept_probability(float(p_t[cand]), float(p_d[cand])):
            prefix += (cand,)
            continue
        if cfg.max_samples_per_context is not None and len(res.samples) >= cfg.max_samples_per_context:
            break
        if cfg.rollout_budget is not None and used + 2 * cfg.n_rollouts > cfg.rollout_budget:
            res.truncated = True
            break
        res.n_rejections += 1
        stem = prefix + (cand,)
        base_runs = sample_rollouts(target, context, prefix, u, cfg.n_rollouts, params, rng)
        cand_runs = sample_rollouts(target, context, stem, u, cfg.n_rollouts, params, rng)
        used += 2 * cfg.n_rollouts
        if cfg.exact and enumerable(target.vocab_size, params.max_len - len(prefix)):
            u_base = float(exact_expected_utility(target, context, u, params, prefix, cache))
            u_cand = float(exact_expected_utility(target, context, u, params, stem, cache))
        else:
            u_base = sum(r.utility for r in base_runs) / len(base_runs)
            u_cand = sum(r.utility for r in cand_runs) / len(cand_runs)
        label = label_rule(u_base, u_cand, cfg.alpha)
        label, flipped = judge_check(label, cand_runs, context, stem, judge)
        feats = FeatureVector(
            np.asarray(target.hidden_features(seq), dtype=np.float64), entropy(p_t), float(p_t[cand])
        )
        res.samples.append(LabeledSample(context_id, prefix, cand, label, u_base, u_cand, feats, flipped))
        if label == NON_PIVOT:
            prefix = stem
        else:
            prefix += (sample_token(residual_distribution(p_t, p_d), rng),)
    return res


def _harvest_job(args):
    i, ctx, target, draft, u, cfg, judge = args
    return harvest_context(i, ctx, target, draft, u, cfg, judge, derived_rng(cfg.seed, i))


def harvest_and_label(
    contexts: Sequence[Sequence[int]],
    target: SequenceModel,
    draft: SequenceModel,
    u: UtilityFn,
    cfg: LabelConfig,
    judge: Judge,
    jobs: int = 1,
) -> list[HarvestResult]:
    """Per-context results in context order; each context owns the stream (seed, index)."""
    work = [(i, tuple(c), target, draft, u, cfg, judge) for i, c in enumerate(contexts)]
    if jobs <= 1:
        return [_harvest_job(w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_harvest_job, work, chunksize=max(1, len(work) // (4 * jobs))))


def dataset_arrays(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(hidden features, [entropy, p_cand], labels with pivot = 1)."""
    H = np.stack([s.features.h for s in samples])
    S = np.array([[s.features.entropy, s.features.p_cand] for s in samples])
    y = np.array([1 if s.label == PIVOT else 0 for s in samples], dtype=np.int64)
    return H, S, y


def config_dict(cfg: LabelConfig) -> dict:
    return asdict(cfg)
