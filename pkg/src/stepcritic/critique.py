"""Mining step-level critique samples from finished search trees."""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .gateway import GatewayError, ModelGateway, extract_answer, grade
from .mcts import SearchTree, select_leaf
from .types import NO_CORRECTIONS, CritiqueSample, DivergencePair, Question, ReasoningPath, SearchConfig

logger = logging.getLogger(__name__)

GradeFn = Callable[[str | None, str], bool]


def _is_correct(path: ReasoningPath, question: Question, grader: GradeFn) -> bool:
    return path.final_answer is not None and grader(path.final_answer, question.ground_truth)


def _is_incorrect(path: ReasoningPath, question: Question, grader: GradeFn) -> bool:
    return path.final_answer is not None and not grader(path.final_answer, question.ground_truth)


def _terminal_nodes(tree: SearchTree) -> list[int]:
    return [nid for nid in sorted(tree.nodes)
            if tree.nodes[nid].step is not None and tree.nodes[nid].step.is_terminal]


def pick_reference(tree: SearchTree, grader: GradeFn = grade, *,
                   include_rollouts: bool = True) -> ReasoningPath | None:
    """The correct path the search policy ends on.

    Greedy descent by value first.  If that does not end in a correct answer,
    the correct terminal node with the highest value (lowest id on ties); then,
    if allowed, the correct rollout launched from the highest-value node.
    """
    q = tree.question
    leaf = select_leaf(tree)
    greedy = tree.path_of(leaf)
    if tree.nodes[leaf].step is not None and tree.nodes[leaf].step.is_terminal and _is_correct(greedy, q, grader):
        return greedy
    candidates = []
    for nid in _terminal_nodes(tree):
        path = tree.path_of(nid)
        if _is_correct(path, q, grader):
            candidates.append((-tree.nodes[nid].value, nid, path))
    if candidates:
        return min(candidates, key=lambda c: (c[0], c[1]))[2]
    if include_rollouts:
        rolled = [(-tree.nodes[r.node_id].value, r.node_id, r.index, r.path)
                  for r in tree.rollouts if _is_correct(r.path, q, grader)]
        if rolled:
            return min(rolled, key=lambda c: c[:3])[3]
    return None


def collect_incorrect_paths(tree: SearchTree, grader: GradeFn = grade, *,
                            include_rollouts: bool = True) -> list[ReasoningPath]:
    """Every distinct path ending in a wrong final answer, in depth-first
    child order; a node's own path comes before the rollouts launched from it."""
    q = tree.question
    by_node: dict[int, list] = defaultdict(list)
    if include_rollouts:
        for r in tree.rollouts:
            by_node[r.node_id].append(r)
    out: list[ReasoningPath] = []
    seen: set[tuple[str, ...]] = set()

    def take(path: ReasoningPath) -> None:
        key = tuple(s.text for s in path.steps)
        if key not in seen and _is_incorrect(path, q, grader):
            seen.add(key)
            out.append(path)

    for nid in tree.depth_first():
        node = tree.nodes[nid]
        if node.step is not None and node.step.is_terminal:
            take(tree.path_of(nid))
        for r in sorted(by_node.get(nid, []), key=lambda r: r.index):
            take(r.path)
    return out


def find_divergence(reference: ReasoningPath, wrong: ReasoningPath,
                    lca_node_id: int | None = None) -> DivergencePair:
    """Split two paths at their longest common prefix of step texts."""
    if reference.question_id != wrong.question_id:
        raise ValueError("paths belong to different questions")
    ref, bad = reference.steps, wrong.steps
    k = 0
    while k < len(ref) and k < len(bad) and ref[k].text == bad[k].text:
        k += 1
    if k == len(ref) and k == len(bad):
        raise ValueError("no divergence: paths are identical")
    if k == len(ref) or k == len(bad):
        raise ValueError("no divergence: one path is a prefix of the other")
    return DivergencePair(wrong.question_id, ref[:k], ref[k:], bad[k:], lca_node_id)


def lca_node(tree: SearchTree, prefix) -> int | None:
    """Deepest tree node whose path matches the leading step texts of ``prefix``."""
    node_id = tree.root_id
    for step in prefix:
        nxt = next((c for c in tree.nodes[node_id].children if tree.nodes[c].step.text == step.text), None)
        if nxt is None:
            break
        node_id = nxt
    return node_id


def build_negative(question: Question, pair: DivergencePair, gateway: ModelGateway,
                   source: str = "search_tree") -> CritiqueSample:
    critique = gateway.annotate(question, pair)
    steps = pair.shared_prefix + pair.branch_b
    path = ReasoningPath(question.id, steps, None, source)  # type: ignore[arg-type]
    path = ReasoningPath(question.id, steps, extract_answer(path, gateway.marker), source)  # type: ignore[arg-type]
    return CritiqueSample(question, path, 0, critique, "negative_mined")


def build_positive(question: Question, correct: ReasoningPath, grader: GradeFn = grade) -> CritiqueSample:
    if not _is_correct(correct, question, grader):
        raise ValueError("positive sample requires a path with a correct final answer")
    return CritiqueSample(question, correct, 1, NO_CORRECTIONS, "positive")


@dataclass
class MiningStats:
    trees: int = 0
    no_reference: int = 0
    positives: int = 0
    negatives: int = 0
    skipped_annotations: int = 0
    incorrect_paths: int = 0
    errors: list[str] = field(default_factory=list)

    def merge(self, other: MiningStats) -> None:
        for name in ("trees", "no_reference", "positives", "negatives", "skipped_annotations", "incorrect_paths"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.errors.extend(other.errors)

    def to_dict(self) -> dict:
        return {
            "trees": self.trees,
            "no_reference": self.no_reference,
            "positives": self.positives,
            "negatives": self.negatives,
            "skipped_annotations": self.skipped_annotations,
            "incorrect_paths": self.incorrect_paths,
            "errors": list(self.errors),
        }


def mine_tree(tree: SearchTree, gateway: ModelGateway, config: SearchConfig | None = None, *,
              parallelism: int = 1) -> tuple[list[CritiqueSample], MiningStats]:
    """Positive sample(s) and one annotated negative per distinct incorrect
    path.  Trees without a correct reference yield nothing."""
    config = config or SearchConfig()
    stats = MiningStats(trees=1)
    q = tree.question
    reference = None if tree.no_reference else pick_reference(
        tree, gateway.grade, include_rollouts=config.mine_rollouts)
    if reference is None:
        stats.no_reference = 1
        return [], stats

    samples = [build_positive(q, reference, gateway.grade)]
    if config.all_positives:
        seen = {tuple(s.text for s in reference.steps)}
        for nid in _terminal_nodes(tree):
            path = tree.path_of(nid)
            key = tuple(s.text for s in path.steps)
            if key not in seen and _is_correct(path, q, gateway.grade):
                seen.add(key)
                samples.append(build_positive(q, path, gateway.grade))

    wrong_paths = collect_incorrect_paths(tree, gateway.grade, include_rollouts=config.mine_rollouts)
    stats.incorrect_paths = len(wrong_paths)
    pairs = []
    for wrong in wrong_paths:
        try:
            pair = find_divergence(reference, wrong)
        except ValueError as exc:
            stats.errors.append(f"{q.id}: {exc}")
            continue
        pair = DivergencePair(pair.question_id, pair.shared_prefix, pair.branch_a, pair.branch_b,
                              lca_node(tree, pair.shared_prefix))
        pairs.append((pair, wrong.source))

    def annotate(item):
        pair, source = item
        try:
            return build_negative(q, pair, gateway, source)
        except GatewayError as exc:
            logger.warning("annotation skipped for %s: %s", q.id, exc)
            return None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            negatives = list(pool.map(annotate, pairs))
    else:
        negatives = [annotate(p) for p in pairs]
    for sample in negatives:
        if sample is None:
            stats.skipped_annotations += 1
        else:
            samples.append(sample)
    stats.positives = sum(s.provenance == "positive" for s in samples)
    stats.negatives = sum(s.provenance == "negative_mined" for s in samples)
    return samples, stats
