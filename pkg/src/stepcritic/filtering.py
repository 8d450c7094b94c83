"""Keep a mined critique only if it actually helps the actor fix its answer."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal

from .gateway import ModelGateway, TransportError
from .mcts import derive_seed
from .types import CritiqueSample, FilterStats, SearchConfig

logger = logging.getLogger(__name__)

Decision = Literal["keep", "discard", "undetermined"]


def keep_decision(successes: int, keep_threshold: int) -> bool:
    return successes >= keep_threshold


@dataclass(frozen=True)
class FilterDecision:
    decision: Decision
    successes: int
    attempts: int
    transport_failures: int = 0
    reason: str = ""

    @property
    def stats(self) -> FilterStats:
        return FilterStats(self.successes, self.attempts)


def filter_sample(sample: CritiqueSample, config: SearchConfig, gateway: ModelGateway, *,
                  parallelism: int = 1) -> FilterDecision:
    """Refine the sample's answer with its critique ``refine_attempts`` times
    and count refinements that reach the ground truth.

    Each attempt gets its own seed derived from the sample id and attempt
    index.  Attempts lost to transport errors count as failures; if every
    attempt is lost the sample is ``undetermined``.
    """
    if sample.provenance != "negative_mined" or sample.correctness != 0:
        raise ValueError("only mined negative samples are filtered")
    q = sample.question

    def attempt(a: int) -> bool | None:
        seed = derive_seed(config.seed, sample.sample_id, a)
        try:
            refined = gateway.refine(q, sample.answer_path, sample.critique,
                                     temperature=config.temperature, seed=seed, sample_index=a)
        except TransportError as exc:
            logger.warning("refine attempt %d for %s failed: %s", a, q.id, exc)
            return None
        return gateway.grade(refined.final_answer, q.ground_truth)

    n = config.refine_attempts
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(attempt, range(n)))
    else:
        outcomes = [attempt(a) for a in range(n)]
    failures = sum(o is None for o in outcomes)
    successes = sum(o is True for o in outcomes)
    if failures == n:
        return FilterDecision("undetermined", 0, n, failures, "transport")
    kept = keep_decision(successes, config.keep_threshold)
    return FilterDecision("keep" if kept else "discard", successes, n, failures,
                          "" if kept else "below_threshold")


@dataclass
class FilterReport:
    attempts: int
    positives: int = 0
    negatives: int = 0
    kept: int = 0
    discarded: int = 0
    undetermined: int = 0
    malformed_lines: list[int] = field(default_factory=list)
    histogram: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.histogram:
            self.histogram = {k: 0 for k in range(self.attempts + 1)}

    def to_dict(self) -> dict:
        return {
            "attempts": self.attempts,
            "positives": self.positives,
            "negatives": self.negatives,
            "kept": self.kept,
            "discarded": self.discarded,
            "undetermined": self.undetermined,
            "malformed": len(self.malformed_lines),
            "malformed_lines": list(self.malformed_lines),
            "success_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
        }


def filter_dataset(samples: list[CritiqueSample], config: SearchConfig, gateway: ModelGateway, *,
                   parallelism: int = 1) -> tuple[list[CritiqueSample], FilterReport]:
    """Pass positives through, filter negatives; output keeps input order."""
    report = FilterReport(attempts=config.refine_attempts)

    def judge(sample: CritiqueSample) -> FilterDecision | None:
        if sample.provenance == "positive":
            return None
        return filter_sample(sample, config, gateway)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            decisions = list(pool.map(judge, samples))
    else:
        decisions = [judge(s) for s in samples]

    out = []
    for sample, decision in zip(samples, decisions):
        if decision is None:
            report.positives += 1
            out.append(sample)
            continue
        report.negatives += 1
        if decision.decision == "undetermined":
            report.undetermined += 1
            continue
        report.histogram[decision.successes] = report.histogram.get(decision.successes, 0) + 1
        if decision.decision == "keep":
            report.kept += 1
            out.append(replace(sample, filter_stats=decision.stats))
        else:
            report.discarded += 1
    return out, report
