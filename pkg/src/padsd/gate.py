"""Pivot-aware acceptance: override SD rejections of tokens scored as non-pivot."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .verify import ACCEPT, PAD_OVERRIDE, REJECT, SD_ACCEPT, SD_REJECT, Position, sd_decision

log = logging.getLogger(__name__)

DEFAULT_PROB_FLOOR = 1e-4


@dataclass(frozen=True)
class GateConfig:
    sigma: float = 0.5
    prob_floor: float = DEFAULT_PROB_FLOOR

    def __post_init__(self):
        # sigma = 0 is allowed and disables overrides entirely
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.prob_floor < 0:
            raise ValueError("prob_floor must be >= 0")


def pad_decide(sd: str, score: float, p_target_tok: float, config: GateConfig) -> tuple[str, str]:
    if sd == ACCEPT:
        return ACCEPT, SD_ACCEPT
    if p_target_tok < config.prob_floor:
        return REJECT, SD_REJECT
    if score < config.sigma:
        return ACCEPT, PAD_OVERRIDE
    return REJECT, SD_REJECT


Scorer = Callable[[Position], float]


class PadPolicy:
    """SD coin first; the classifier is only queried for SD rejections above the floor."""

    def __init__(self, classifier: Callable, config: GateConfig, extractor: Callable | None = None):
        self.classifier = classifier
        self.extractor = extractor
        self.config = config

    def score(self, pos: Position) -> float:
        try:
            x = pos if self.extractor is None else self.extractor(pos)
        except Exception:
            log.warning("feature extraction failed at position %d; scoring as pivot", pos.index, exc_info=True)
            return 1.0
        s = float(self.classifier(x))
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"pivot score {s} outside [0, 1]")
        return s

    def decide(self, pos: Position) -> tuple[str, str]:
        sd = sd_decision(pos)
        if sd == ACCEPT or pos.p_target < self.config.prob_floor:
            return pad_decide(sd, 1.0, pos.p_target, self.config)
        return pad_decide(sd, self.score(pos), pos.p_target, self.config)


def pad_policy(classifier: Callable, extractor: Callable | None, config: GateConfig) -> PadPolicy:
    return PadPolicy(classifier, config, extractor)
