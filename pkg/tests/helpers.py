"""Builders shared by the test modules."""

from __future__ import annotations

import json
import random
from pathlib import Path

from stepcritic.gateway import ScriptedGateway, ScriptedPolicy
from stepcritic.mcts import SearchTree
from stepcritic.types import Question, ReasoningPath, Step


def step(text: str, terminal: bool = False) -> Step:
    return Step(text, len(text.split()), terminal)


def path(qid: str, *texts: str, final: str | None = None, source: str = "search_tree") -> ReasoningPath:
    steps = [step(t) for t in texts]
    if final is not None:
        steps.append(step(f"Final answer: {final}.", terminal=True))
    return ReasoningPath(qid, tuple(steps), final, source)


def random_tree(rng: random.Random, n_nodes: int, question: Question | None = None) -> SearchTree:
    """Random-shape tree; node k hangs under a uniformly chosen earlier node."""
    tree = SearchTree.new(question or Question("q", "Q?", "1"))
    for k in range(1, n_nodes):
        tree.add_child(rng.randrange(k), step(f"s{k}"))
    return tree


def scripted(default: str = "echo", **kwargs) -> tuple[ScriptedPolicy, ScriptedGateway]:
    policy = ScriptedPolicy(default)
    return policy, ScriptedGateway(policy, backoff=0.0, **kwargs)


def corpus_questions(n: int) -> list[Question]:
    return [Question(f"q{i:02d}", f"What is {i} + {i + 3}?", str(2 * i + 3)) for i in range(n)]


def write_scripted_corpus(directory: Path, n: int = 10) -> tuple[Path, Path]:
    """Questions file plus a mock script giving every question two good and
    one bad first step, mixed rollouts, and per-attempt refinements."""
    directory.mkdir(parents=True, exist_ok=True)
    questions = corpus_questions(n)
    records = []
    for i, q in enumerate(questions):
        good, bad = q.ground_truth, str(int(q.ground_truth) + 1 + i % 3)
        first = [f"Add {i} and {i + 3} column by column.", f"Estimate {i} + {i + 3} roughly.",
                 f"Count up from {i} by {i + 3}."]
        records.append({"question_id": q.id, "kind": "steps", "prefix": [], "outputs": first})
        records.append({"question_id": q.id, "kind": "steps", "prefix": [first[0]],
                        "outputs": [f"The sum is {good}. Final answer: {good}.",
                                    f"Carry once.\nFinal answer: {bad}."]})
        records.append({"question_id": q.id, "kind": "steps", "prefix": [first[1]],
                        "outputs": [f"Roughly {bad}. Final answer: {bad}."]})
        records.append({"question_id": q.id, "kind": "steps", "prefix": [first[2]],
                        "outputs": [f"Final answer: {good}.", f"Final answer: {bad}."]})
        records.append({"question_id": q.id, "kind": "rollout", "prefix_hash": "*",
                        "outputs": [f"Final answer: {good}.", f"Final answer: {bad}.",
                                    f"Final answer: {good}.", f"Final answer: {bad}." if i % 2 else
                                    f"Final answer: {good}."]})
        records.append({"question_id": q.id, "kind": "refine", "prefix_hash": "*",
                        "outputs": [f"Recheck.\nFinal answer: {good if a < 2 + i % 4 else bad}."
                                    for a in range(10)]})
    qpath = directory / "questions.jsonl"
    qpath.write_text("".join(json.dumps(q.to_dict()) + "\n" for q in questions))
    spath = directory / "script.jsonl"
    spath.write_text("".join(json.dumps(r) + "\n" for r in records))
    return qpath, spath
