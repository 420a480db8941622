"""Speedup model, decoder runs under an abstract cost model, and comparison tables."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .lm import GenerationParams, SequenceModel, derived_rng, rollout
from .utility import UtilityFn, utility
from .verify import (
    PAD_OVERRIDE,
    SD_REJECT,
    AcceptancePolicy,
    StandardPolicy,
    acceptance_stats,
    propose_block,
    speculative_generate,
    verify_block,
    write_audit,
)


@dataclass(frozen=True)
class TimingProfile:
    t_draft: float = 1.0
    t_target: float = 3.94
    classifier_cost: float = 0.0  # charged per classifier query

    def __post_init__(self):
        if not (self.t_draft > 0 and self.t_target > 0):
            raise ValueError("t_draft and t_target must be > 0")
        if self.classifier_cost < 0:
            raise ValueError("classifier_cost must be >= 0")

    @classmethod
    def parse(cls, text: str) -> TimingProfile:
        """``"t_draft,t_target"`` as on the command line."""
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"profile must be 't_draft,t_target', got {text!r}")
        return cls(parts[0], parts[1])


def expected_speedup(eta: float, gamma: int, profile: TimingProfile) -> float:
    """(eta*gamma + 1) * t_target / (gamma * t_draft + t_target)."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    return (eta * gamma + 1) * profile.t_target / (gamma * profile.t_draft + profile.t_target)


@dataclass
class RunReport:
    decoder: str
    eta: float | None
    tau: float | None
    utility: float
    utility_se: float
    sim_cost: float
    tokens: int
    sim_speedup: float
    predicted_speedup: float
    blocks: int = 0
    rejections: int = 0
    overrides: int = 0
    classifier_queries: int = 0
    n_outputs: int = 0
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def ci(self) -> tuple[float, float]:
        return self.utility - 1.96 * self.utility_se, self.utility + 1.96 * self.utility_se

    @property
    def cost_per_token(self) -> float:
        return self.sim_cost / max(self.tokens, 1)

    def to_dict(self) -> dict:
        """Persistable fields; wall-clock is kept out so reports stay reproducible."""
        d = {k: v for k, v in self.__dict__.items() if k != "wall_clock"}
        d["ci"] = list(self.ci)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        d = {k: v for k, v in d.items() if k != "ci"}
        return cls(**d)


def decoder_id(kind: str, sigma: float | None = None) -> str:
    return f"pad(sigma={sigma:.2f})" if kind == "pad" else kind


def simulate_run(
    kind: str,
    target: SequenceModel,
    draft: SequenceModel,
    contexts: Sequence[Sequence[int]],
    u: UtilityFn,
    gamma: int,
    params: GenerationParams,
    profile: TimingProfile,
    seed: int,
    policy: AcceptancePolicy | None = None,
    name: str | None = None,
    samples_per_context: int = 1,
    audit: IO[str] | None = None,
) -> RunReport:
    """Decode every context and account simulated cost.

    Draft-and-verify decoders pay gamma*t_draft + t_target per block (partial
    blocks included) plus the classifier cost per query; target-only and
    draft-only decoders pay one forward pass per emitted token. Each (context,
    sample) pair owns the stream (seed, i, j), so decoders see paired seeds.
    """
    if kind not in ("target", "draft", "sd", "pad"):
        raise ValueError(f"unknown decoder {kind!r}")
    if kind == "sd":
        policy = StandardPolicy()
    if kind == "pad" and policy is None:
        raise ValueError("pad needs a policy")
    start = time.perf_counter()
    successes = tokens = blocks = rejections = overrides = queries = 0
    outcomes_all = []
    n_out = 0
    for i, ctx in enumerate(contexts):
        ctx = tuple(ctx)
        for j in range(samples_per_context):
            rng = derived_rng(seed, i, j)
            if kind in ("target", "draft"):
                out = rollout(target if kind == "target" else draft, ctx, params, rng)
            else:
                out, outcomes = speculative_generate(target, draft, ctx, gamma, params, policy, rng)
                outcomes_all.extend(outcomes)
                blocks += len(outcomes)
                for o in outcomes:
                    for r in o.records:
                        sd_rejected = r.source in (SD_REJECT, PAD_OVERRIDE)
                        rejections += sd_rejected
                        overrides += r.source == PAD_OVERRIDE
                        if kind == "pad" and sd_rejected and r.p_target >= getattr(policy.config, "prob_floor", 0.0):
                            queries += 1
                if audit is not None:
                    write_audit(audit, outcomes, context_id=i * samples_per_context + j)
            tokens += len(out)
            successes += utility(out, ctx, u)
            n_out += 1
    mean = successes / n_out
    se = math.sqrt(mean * (1 - mean) / n_out)
    if kind == "target":
        cost, eta, tau, predicted = tokens * profile.t_target, None, None, 1.0
    elif kind == "draft":
        cost, eta, tau = tokens * profile.t_draft, None, None
        predicted = profile.t_target / profile.t_draft
    else:
        cost = blocks * (gamma * profile.t_draft + profile.t_target) + queries * profile.classifier_cost
        tau, eta = acceptance_stats(outcomes_all, gamma)
        predicted = expected_speedup(eta, gamma, profile)
    sim_speedup = tokens * profile.t_target / cost if cost > 0 else 1.0
    return RunReport(
        decoder=name or decoder_id(kind, getattr(getattr(policy, "config", None), "sigma", None)),
        eta=eta,
        tau=tau,
        utility=mean,
        utility_se=se,
        sim_cost=cost,
        tokens=tokens,
        sim_speedup=sim_speedup,
        predicted_speedup=predicted,
        blocks=blocks,
        rejections=rejections,
        overrides=overrides,
        classifier_queries=queries,
        n_outputs=n_out,
        wall_clock=time.perf_counter() - start,
    )


@dataclass
class ReplayBlock:
    block: object
    coins: np.ndarray


def collect_blocks(
    target: SequenceModel,
    draft: SequenceModel,
    contexts: Sequence[Sequence[int]],
    gamma: int,
    params: GenerationParams,
    seed: int,
) -> list[ReplayBlock]:
    """Draft blocks along standard-SD trajectories, each with a full set of fixed coins."""
    blocks = []
    policy = StandardPolicy()
    for i, ctx in enumerate(contexts):
        rng = derived_rng(seed, i)
        coin_rng = derived_rng(seed, i, 1)
        out: list[int] = []
        while len(out) < params.max_len and (not out or out[-1] != 0):
            remaining = params.max_len - len(out)
            block = propose_block(draft, ctx, out, min(gamma, remaining), params, rng)
            coins = coin_rng.random(len(block))
            blocks.append(ReplayBlock(block, coins))
            outcome = verify_block(target, block, policy, params, rng, coins=coins, allow_bonus=remaining > len(block))
            out.extend(outcome.emitted)
    return blocks


def replay_eta(
    target: SequenceModel,
    blocks: Sequence[ReplayBlock],
    policy: AcceptancePolicy,
    params: GenerationParams,
    gamma: int,
) -> tuple[float, list[int]]:
    """Acceptance ratio of ``policy`` on fixed blocks and coins, plus per-block accepted lengths."""
    lengths = []
    scratch = np.random.default_rng(0)
    for rb in blocks:
        o = verify_block(target, rb.block, policy, params, scratch, coins=rb.coins, allow_bonus=False)
        lengths.append(o.accepted_len)
    return sum(lengths) / (len(lengths) * gamma), lengths


# canonical row order: target, SD, PAD by decreasing sigma, draft
def _row_key(report: RunReport) -> tuple:
    d = report.decoder
    if d == "target":
        return (0, 0.0, d)
    if d == "sd":
        return (1, 0.0, d)
    if d.startswith("pad"):
        try:
            sigma = float(d.split("=")[1].rstrip(")"))
        except (IndexError, ValueError):
            sigma = 0.0
        return (2, -sigma, d)
    if d == "draft":
        return (3, 0.0, d)
    return (4, 0.0, d)


@dataclass
class Comparison:
    rows: list[RunReport]

    def baseline(self) -> RunReport:
        return self.rows[0]

    def deltas(self) -> list[dict]:
        base = self.baseline()
        return [
            {
                "decoder": r.decoder,
                "d_utility": r.utility - base.utility,
                "d_speedup": r.sim_speedup - base.sim_speedup,
            }
            for r in self.rows
        ]

    def text(self) -> str:
        header = f"{'Setting':<18}{'Acc.':>16}{'eta (%)':>10}{'Spd.':>8}{'Pred.':>8}{'dAcc.':>9}"
        lines = [header, "-" * len(header)]
        for r, d in zip(self.rows, self.deltas()):
            eta = "-" if r.eta is None else f"{100 * r.eta:.1f}"
            acc = f"{100 * r.utility:.1f} +/- {100 * r.utility_se:.1f}"
            lines.append(
                f"{r.decoder:<18}{acc:>16}{eta:>10}{r.sim_speedup:>8.2f}{r.predicted_speedup:>8.2f}"
                f"{100 * d['d_utility']:>+9.1f}"
            )
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        return [{**r.to_dict(), **d} for r, d in zip(self.rows, self.deltas())]

    def jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.records())


def compare_report(reports: Sequence[RunReport]) -> Comparison:
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    return Comparison(sorted(reports, key=_row_key))
