"""Monte Carlo tree search over reasoning steps.

Each iteration selects a leaf by greedy descent on node value, expands it
into ``n`` sampled next steps, estimates every new child by the fraction of
``m`` rollouts that reach the ground truth, and backs each child's estimate
up to the root as an incremental mean.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from .gateway import GenerationRequest, ModelGateway, TransportError, extract_answer
from .types import Node, Question, ReasoningPath, SearchConfig, Step, stable_hash, validate

logger = logging.getLogger(__name__)

TREE_SCHEMA = "stepcritic.tree/1"


class SearchError(Exception):
    """Contract violation inside the search engine."""


def derive_seed(*parts: Any) -> int:
    return int(stable_hash(list(parts), 8), 16) & 0x7FFFFFFF


@dataclass
class RolloutRecord:
    node_id: int
    index: int
    path: ReasoningPath

    def to_dict(self) -> dict[str, Any]:
        return {"node_id": self.node_id, "index": self.index, "path": self.path.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RolloutRecord:
        return cls(int(data["node_id"]), int(data["index"]), ReasoningPath.from_dict(data["path"]))


@dataclass
class SearchTree:
    question: Question
    nodes: dict[int, Node] = field(default_factory=dict)
    root_id: int = 0
    rng_seed: int = 0
    iteration_count: int = 0
    rollouts: list[RolloutRecord] = field(default_factory=list)
    partial: bool = False
    failed_rollouts: int = 0
    halt_reason: str = ""

    @classmethod
    def new(cls, question: Question, seed: int = 0) -> SearchTree:
        tree = cls(question=question, rng_seed=seed)
        tree.nodes[0] = Node(node_id=0)
        return tree

    @property
    def root(self) -> Node:
        return self.nodes[self.root_id]

    @property
    def no_reference(self) -> bool:
        """True when no rollout ever reached the ground truth."""
        return self.root.value == 0.0

    def add_child(self, parent_id: int, step: Step) -> int:
        node_id = len(self.nodes)
        self.nodes[node_id] = Node(node_id=node_id, parent_id=parent_id, step=step)
        self.nodes[parent_id].children.append(node_id)
        return node_id

    def ancestry(self, node_id: int) -> list[int]:
        """Node ids from the root down to ``node_id``."""
        chain = []
        current: int | None = node_id
        while current is not None:
            chain.append(current)
            current = self.nodes[current].parent_id
        return chain[::-1]

    def steps_to(self, node_id: int) -> list[Step]:
        return [self.nodes[i].step for i in self.ancestry(node_id) if self.nodes[i].step is not None]

    def path_tokens(self, node_id: int) -> int:
        return sum(s.token_count for s in self.steps_to(node_id))

    def path_of(self, node_id: int) -> ReasoningPath:
        steps = tuple(self.steps_to(node_id))
        path = ReasoningPath(self.question.id, steps, None, "search_tree")
        return ReasoningPath(self.question.id, steps, extract_answer(path), "search_tree")

    def leaves(self) -> list[int]:
        return [nid for nid, node in sorted(self.nodes.items()) if not node.children]

    def depth_first(self) -> list[int]:
        order, stack = [], [self.root_id]
        while stack:
            nid = stack.pop()
            order.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return order

    def check_invariants(self, tol: float = 1e-9) -> list[str]:
        problems = []
        roots = [n for n in self.nodes.values() if n.parent_id is None]
        if len(roots) != 1 or roots[0].node_id != self.root_id:
            problems.append("tree must have exactly one root")
        if self.root.step is not None:
            problems.append("root must not carry a step")
        seen = self.depth_first()
        if len(seen) != len(set(seen)) or set(seen) != set(self.nodes):
            problems.append("nodes not reachable exactly once from root")
        for node in self.nodes.values():
            if len(node.children) != len(set(node.children)):
                problems.append(f"node {node.node_id} has duplicate children")
            if node.parent_id is not None and node.step is None:
                problems.append(f"node {node.node_id} has no step")
            if node.visit_count != len(node.propagation_log):
                problems.append(f"node {node.node_id}: visit_count != len(propagation_log)")
            if not 0.0 <= node.value <= 1.0:
                problems.append(f"node {node.node_id}: value {node.value} outside [0, 1]")
            if node.propagation_log:
                mean = math.fsum(node.propagation_log) / len(node.propagation_log)
                if abs(mean - node.value) > tol:
                    problems.append(f"node {node.node_id}: value differs from log mean")
        return problems


def _best_child(tree: SearchTree, node: Node, use_ucb: bool, c: float) -> int:
    best_id, best_score = node.children[0], -math.inf
    for child_id in node.children:
        child = tree.nodes[child_id]
        if use_ucb:
            if child.visit_count == 0:
                return child_id
            score = child.value + c * math.sqrt(math.log(max(node.visit_count, 1)) / child.visit_count)
        else:
            score = child.value
        # strict comparison keeps the lowest index on ties
        if score > best_score:
            best_id, best_score = child_id, score
    return best_id


def select_leaf(tree: SearchTree, *, use_ucb: bool = False, c: float = 1.0) -> int:
    """Descend from the root to a leaf, taking the highest-value child at each
    level (lowest child index on ties)."""
    node = tree.root
    while node.children:
        node = tree.nodes[_best_child(tree, node, use_ucb, c)]
    return node.node_id


def is_terminal(tree: SearchTree, node_id: int, config: SearchConfig) -> bool:
    node = tree.nodes[node_id]
    if node.step is None:
        return False
    return node.step.is_terminal or tree.path_tokens(node_id) >= config.max_path_tokens


def expand(tree: SearchTree, leaf_id: int, n: int, gateway: ModelGateway, config: SearchConfig) -> list[int]:
    """Add up to ``n`` children under ``leaf_id``, one per distinct sampled step."""
    leaf = tree.nodes[leaf_id]
    if leaf.children:
        raise SearchError("expand on non-leaf")
    if is_terminal(tree, leaf_id, config):
        raise SearchError("expand on terminal node")
    req = GenerationRequest(
        question=tree.question,
        prior_steps=tuple(tree.steps_to(leaf_id)),
        max_new_tokens=config.step_token_cap,
        temperature=config.temperature,
        n_samples=n,
        seed=derive_seed(tree.rng_seed, tree.question.id, leaf_id),
    )
    steps = gateway.generate_steps(req)  # a transport error leaves the tree untouched
    seen: set[str] = set()
    new_ids = []
    for step in steps:
        if step.text in seen:
            continue
        seen.add(step.text)
        new_ids.append(tree.add_child(leaf_id, step))
    return new_ids


def simulate(tree: SearchTree, node_id: int, m: int, gateway: ModelGateway, config: SearchConfig,
             *, parallelism: int = 1) -> float:
    """Fraction of ``m`` rollouts from ``node_id`` whose answer matches the
    ground truth.  Does not touch node statistics."""
    if m < 1:
        raise ValueError("m must be ≥ 1")
    prefix = tuple(tree.steps_to(node_id))
    remaining = config.max_path_tokens - sum(s.token_count for s in prefix)
    node = tree.nodes[node_id]
    if node.step is not None and not node.step.is_terminal and remaining <= 0:
        return 0.0

    def one(r: int) -> ReasoningPath | None:
        try:
            return gateway.rollout(tree.question, prefix, max(remaining, 1),
                                   temperature=config.temperature, sample_index=r,
                                   seed=derive_seed(tree.rng_seed, tree.question.id, node_id, r))
        except TransportError as exc:
            logger.warning("rollout %d from node %d of %s failed: %s", r, node_id, tree.question.id, exc)
            return None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            paths = list(pool.map(one, range(m)))
    else:
        paths = [one(r) for r in range(m)]

    correct = 0
    for r, path in enumerate(paths):
        if path is None:
            tree.failed_rollouts += 1
            continue
        if gateway.grade(path.final_answer, tree.question.ground_truth):
            correct += 1
        if len(path.steps) > len(prefix):
            tree.rollouts.append(RolloutRecord(node_id, r, path))
    return correct / m


def backpropagate(tree: SearchTree, from_id: int, value: float) -> None:
    """Fold ``value`` into every node from ``from_id`` up to the root."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"value {value} outside [0, 1]")
    current: int | None = from_id
    while current is not None:
        node = tree.nodes[current]
        n_old = node.visit_count
        node.visit_count = n_old + 1
        node.value = (node.value * n_old + value) / node.visit_count
        node.propagation_log.append(value)
        current = node.parent_id


def run_search(question: Question, config: SearchConfig, gateway: ModelGateway, *,
               parallelism: int = 1) -> SearchTree:
    """Build a search tree for one question.

    Halts when the iteration budget is spent or selection lands on a terminal
    node.  A backend failure during expansion stops the run and returns the
    partial tree with ``partial`` set.
    """
    problems = validate(config)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    tree = SearchTree.new(question, config.seed)
    tree.halt_reason = "budget"
    for _ in range(config.search_iterations):
        leaf = select_leaf(tree, use_ucb=config.use_ucb, c=config.ucb_c)
        if is_terminal(tree, leaf, config):
            tree.halt_reason = "terminal_selected"
            break
        try:
            children = expand(tree, leaf, config.n_expand, gateway, config)
        except TransportError as exc:
            logger.error("expansion failed for %s: %s", question.id, exc)
            tree.partial, tree.halt_reason = True, "backend_error"
            break
        if not children:
            tree.halt_reason = "empty_expansion"
            break
        for child in children:
            value = simulate(tree, child, config.m_rollouts, gateway, config, parallelism=parallelism)
            backpropagate(tree, child, value)
        tree.iteration_count += 1
    if tree.failed_rollouts:
        tree.partial = True
    return tree


def tree_to_records(tree: SearchTree, config: SearchConfig | None = None) -> list[dict[str, Any]]:
    header = {
        "record": "header",
        "schema": TREE_SCHEMA,
        "config_hash": config.hash() if config else None,
        "config": config.to_dict() if config else None,
        "question": tree.question.to_dict(),
        "root_id": tree.root_id,
        "rng_seed": tree.rng_seed,
        "iteration_count": tree.iteration_count,
        "partial": tree.partial,
        "failed_rollouts": tree.failed_rollouts,
        "halt_reason": tree.halt_reason,
        "no_reference": tree.no_reference,
    }
    records = [header]
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        records.append({
            "record": "node",
            "node_id": node.node_id,
            "parent_id": node.parent_id,
            "text": None if node.step is None else node.step.text,
            "token_count": 0 if node.step is None else node.step.token_count,
            "terminal": False if node.step is None else node.step.is_terminal,
            "visit_count": node.visit_count,
            "value": node.value,
            "propagation_log": list(node.propagation_log),
        })
    records.extend({"record": "rollout", **r.to_dict()} for r in tree.rollouts)
    return records


def tree_from_records(records: list[dict[str, Any]]) -> tuple[SearchTree, SearchConfig | None]:
    if not records or records[0].get("record") != "header":
        raise ValueError("tree dump must start with a header record")
    header = records[0]
    if header.get("schema") != TREE_SCHEMA:
        raise ValueError(f"unsupported tree schema {header.get('schema')!r}")
    tree = SearchTree(
        question=Question.from_dict(header["question"]),
        root_id=int(header.get("root_id", 0)),
        rng_seed=int(header.get("rng_seed", 0)),
        iteration_count=int(header.get("iteration_count", 0)),
        partial=bool(header.get("partial", False)),
        failed_rollouts=int(header.get("failed_rollouts", 0)),
        halt_reason=header.get("halt_reason", ""),
    )
    for rec in records[1:]:
        kind = rec.get("record")
        if kind == "node":
            step = None
            if rec.get("parent_id") is not None:
                step = Step(rec["text"], int(rec["token_count"]), bool(rec["terminal"]))
            tree.nodes[int(rec["node_id"])] = Node(
                node_id=int(rec["node_id"]),
                parent_id=rec.get("parent_id"),
                step=step,
                visit_count=int(rec["visit_count"]),
                value=float(rec["value"]),
                propagation_log=[float(v) for v in rec["propagation_log"]],
            )
        elif kind == "rollout":
            tree.rollouts.append(RolloutRecord.from_dict(rec))
        else:
            raise ValueError(f"unknown tree record {kind!r}")
    for node_id in sorted(tree.nodes):
        parent = tree.nodes[node_id].parent_id
        if parent is not None:
            if parent not in tree.nodes:
                raise ValueError(f"node {node_id} refers to missing parent {parent}")
            tree.nodes[parent].children.append(node_id)
    if tree.root_id not in tree.nodes:
        raise ValueError("tree dump has no root node")
    config = SearchConfig.from_dict(header["config"]) if header.get("config") else None
    return tree, config
