"""Speculative decoding: block proposal, verification and the lossless-marginal oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Protocol, Sequence

import numpy as np

from .lm import EOS, GenerationParams, SequenceModel, sample_token, with_params

ACCEPT = "accept"
REJECT = "reject"
SD_ACCEPT = "sd-accept"
SD_REJECT = "sd-reject"
PAD_OVERRIDE = "pad-override"


class DegenerateResidualError(ValueError):
    """Residual requested where target and draft coincide."""


class EmptyStatsError(ValueError):
    pass


@dataclass
class DraftBlock:
    tokens: list[int]
    draft_probs: list[float]
    prompt: tuple[int, ...]
    prefix: tuple[int, ...]
    draft_dists: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def base_context(self) -> tuple[int, ...]:
        return self.prompt + self.prefix

    def __len__(self):
        return len(self.tokens)


@dataclass
class Position:
    """Everything a policy may look at for one examined draft token."""

    index: int
    prompt: tuple[int, ...]
    prefix: tuple[int, ...]  # output tokens preceding the candidate
    candidate: int
    p_target: float
    p_draft: float
    coin: float
    target_dist: np.ndarray = field(repr=False)

    @property
    def context(self) -> tuple[int, ...]:
        return self.prompt + self.prefix


@dataclass
class PositionRecord:
    position: int
    draft_token: int
    p_target: float
    p_draft: float
    coin: float
    decision: str
    source: str

    def to_dict(self) -> dict:
        return {
            "position": self.position,
            "draft_token": self.draft_token,
            "p_target": self.p_target,
            "p_draft": self.p_draft,
            "coin": self.coin,
            "decision": self.decision,
            "source": self.source,
        }


@dataclass
class VerifyOutcome:
    emitted: list[int]
    accepted_len: int
    got_bonus: bool
    records: list[PositionRecord]
    block_len: int


class AcceptancePolicy(Protocol):
    def decide(self, pos: Position) -> tuple[str, str]: ...


def accept_probability(p_target_tok: float, p_draft_tok: float) -> float:
    if not p_draft_tok > 0:
        raise ValueError("a proposed token must have positive draft probability")
    return min(1.0, p_target_tok / p_draft_tok)


def sd_decision(pos: Position) -> str:
    return ACCEPT if pos.coin < accept_probability(pos.p_target, pos.p_draft) else REJECT


class StandardPolicy:
    def decide(self, pos: Position) -> tuple[str, str]:
        if sd_decision(pos) == ACCEPT:
            return ACCEPT, SD_ACCEPT
        return REJECT, SD_REJECT


def residual_distribution(p_target: np.ndarray, p_draft: np.ndarray) -> np.ndarray:
    diff = np.maximum(0.0, np.asarray(p_target) - np.asarray(p_draft))
    total = diff.sum()
    if total <= 0.0:
        raise DegenerateResidualError("target and draft distributions coincide")
    return diff / total


def rejection_mass(p_target: np.ndarray, p_draft: np.ndarray) -> float:
    return float(np.maximum(0.0, np.asarray(p_draft) - np.asarray(p_target)).sum())


def per_token_output_distribution(p_target: np.ndarray, p_draft: np.ndarray) -> np.ndarray:
    """Exact law of the token emitted at one verified position."""
    p_target = np.asarray(p_target, dtype=np.float64)
    p_draft = np.asarray(p_draft, dtype=np.float64)
    out = np.minimum(p_target, p_draft)
    reject = rejection_mass(p_target, p_draft)
    if reject > 0.0:
        out = out + reject * residual_distribution(p_target, p_draft)
    return out


def propose_block(
    draft: SequenceModel,
    prompt: Sequence[int],
    prefix: Sequence[int],
    gamma: int,
    params: GenerationParams,
    rng: np.random.Generator,
) -> DraftBlock:
    """Draft ``gamma`` tokens autoregressively; drafting stops early after EOS."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    draft = with_params(draft, params)
    seq = list(prompt) + list(prefix)
    block = DraftBlock([], [], tuple(prompt), tuple(prefix))
    for _ in range(gamma):
        dist = draft.next_distribution(seq)
        tok = sample_token(dist, rng)
        block.tokens.append(tok)
        block.draft_probs.append(float(dist[tok]))
        block.draft_dists.append(dist)
        seq.append(tok)
        if tok == EOS:
            break
    return block


def verify_block(
    target: SequenceModel,
    block: DraftBlock,
    policy: AcceptancePolicy,
    params: GenerationParams,
    rng: np.random.Generator,
    coins: Sequence[float] | None = None,
    allow_bonus: bool = True,
) -> VerifyOutcome:
    """Verify one draft block against the target.

    Coins are drawn from ``rng`` one per examined position, in order, unless
    supplied explicitly. On the first reject a replacement is drawn from the
    residual and the block ends; if every token is accepted a bonus token is
    drawn from the target (skipped after EOS or when ``allow_bonus`` is false).
    """
    target = with_params(target, params)
    seq = list(block.base_context)
    prefix = list(block.prefix)
    records: list[PositionRecord] = []
    emitted: list[int] = []
    for i, tok in enumerate(block.tokens):
        p_t_dist = target.next_distribution(seq)
        p_d_dist = block.draft_dists[i]
        coin = float(rng.random()) if coins is None else float(coins[i])
        pos = Position(
            i, block.prompt, tuple(prefix), tok, float(p_t_dist[tok]), block.draft_probs[i], coin, p_t_dist
        )
        decision, source = policy.decide(pos)
        records.append(PositionRecord(i, tok, pos.p_target, pos.p_draft, coin, decision, source))
        if decision == REJECT:
            assert rejection_mass(p_t_dist, p_d_dist) > 0.0, "reject with zero rejection mass"
            emitted.append(sample_token(residual_distribution(p_t_dist, p_d_dist), rng))
            return VerifyOutcome(emitted, i, False, records, len(block))
        emitted.append(tok)
        seq.append(tok)
        prefix.append(tok)
        if tok == EOS:
            return VerifyOutcome(emitted, i + 1, False, records, len(block))
    bonus = False
    if allow_bonus:
        emitted.append(sample_token(target.next_distribution(seq), rng))
        bonus = True
    return VerifyOutcome(emitted, len(block), bonus, records, len(block))


def speculative_generate(
    target: SequenceModel,
    draft: SequenceModel,
    prompt: Sequence[int],
    gamma: int,
    params: GenerationParams,
    policy: AcceptancePolicy,
    rng: np.random.Generator,
) -> tuple[list[int], list[VerifyOutcome]]:
    """Decode one output with draft-and-verify blocks until EOS or ``max_len``."""
    prompt = tuple(prompt)
    out: list[int] = []
    outcomes: list[VerifyOutcome] = []
    while len(out) < params.max_len and (not out or out[-1] != EOS):
        remaining = params.max_len - len(out)
        block = propose_block(draft, prompt, out, min(gamma, remaining), params, rng)
        outcome = verify_block(target, block, policy, params, rng, allow_bonus=remaining > len(block))
        out.extend(outcome.emitted)
        outcomes.append(outcome)
    return out, outcomes


def acceptance_stats(outcomes: Sequence[VerifyOutcome], gamma: int) -> tuple[float, float]:
    """Mean accepted length per block and the acceptance ratio tau / gamma."""
    if not outcomes:
        raise EmptyStatsError("no verify outcomes")
    tau = sum(o.accepted_len for o in outcomes) / len(outcomes)
    return tau, tau / gamma


def write_audit(
    fh: IO[str], outcomes: Iterable[VerifyOutcome], context_id: int, start_block: int = 0
) -> int:
    """Dump per-position records as JSON lines; returns the number of blocks written."""
    n = 0
    for n, outcome in enumerate(outcomes, start=1):
        for rec in outcome.records:
            row = {"context_id": context_id, "block": start_block + n - 1, **rec.to_dict()}
            fh.write(json.dumps(row) + "\n")
    return n
