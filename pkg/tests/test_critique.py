import pytest

from stepcritic.critique import (
    build_positive,
    collect_incorrect_paths,
    find_divergence,
    lca_node,
    mine_tree,
    pick_reference,
)
from stepcritic.gateway import REDACTION_TOKEN, SyntheticGateway
from stepcritic.mcts import RolloutRecord, backpropagate, run_search
from stepcritic.types import NO_CORRECTIONS, Question, SearchConfig

from .helpers import path, scripted, step

Q = Question("q", "What is 3 + 4?", "7")


def hand_tree():
    """root -> A (0.8) -> A1 'Final answer: 7.' (1.0), A2 'Final answer: 8.' (0.0)
             -> B (0.3) -> B1 'Final answer: 9.' (0.0)"""
    from .helpers import random_tree
    import random
    tree = random_tree(random.Random(0), 1, Q)
    a = tree.add_child(0, step("Add 3 and 4."))
    b = tree.add_child(0, step("Guess."))
    a1 = tree.add_child(a, step("Final answer: 7.", terminal=True))
    a2 = tree.add_child(a, step("Final answer: 8.", terminal=True))
    b1 = tree.add_child(b, step("Final answer: 9.", terminal=True))
    for nid, v in ((a1, 1.0), (a2, 0.0), (b1, 0.0), (b, 0.6)):
        backpropagate(tree, nid, v)
    return tree, (a, b, a1, a2, b1)


def test_reference_is_greedy_descent_when_correct():
    tree, (a, b, a1, a2, b1) = hand_tree()
    ref = pick_reference(tree)
    assert [s.text for s in ref.steps] == ["Add 3 and 4.", "Final answer: 7."]
    assert ref.final_answer == "7"


def test_reference_falls_back_to_best_correct_terminal_then_rollout():
    tree, (a, b, a1, a2, b1) = hand_tree()
    tree.nodes[a1].value, tree.nodes[a2].value = 0.0, 0.5
    assert pick_reference(tree).steps[-1].text == "Final answer: 7."
    tree.nodes[a1].step = step("Final answer: 6.", terminal=True)
    assert pick_reference(tree) is None
    rolled = path("q", "Guess.", "Think again.", final="7", source="rollout")
    tree.rollouts.append(RolloutRecord(b, 0, rolled))
    assert pick_reference(tree) == rolled
    assert pick_reference(tree, include_rollouts=False) is None


def test_incorrect_paths_in_depth_first_order_without_duplicates():
    tree, (a, b, a1, a2, b1) = hand_tree()
    tree.rollouts.append(RolloutRecord(b, 0, path("q", "Guess.", final="9", source="rollout")))
    tree.rollouts.append(RolloutRecord(b, 1, path("q", "Guess.", "Hmm.", final="5", source="rollout")))
    tree.rollouts.append(RolloutRecord(b, 2, path("q", "Guess.", "Stall.", source="rollout")))
    wrong = collect_incorrect_paths(tree)
    assert [p.final_answer for p in wrong] == ["8", "9", "5"]
    assert len(collect_incorrect_paths(tree, include_rollouts=False)) == 2


def test_divergence_and_lca():
    tree, (a, b, a1, a2, b1) = hand_tree()
    ref, bad = tree.path_of(a1), tree.path_of(a2)
    pair = find_divergence(ref, bad)
    assert [s.text for s in pair.shared_prefix] == ["Add 3 and 4."]
    assert lca_node(tree, pair.shared_prefix) == a
    with pytest.raises(ValueError, match="identical"):
        find_divergence(ref, ref)
    with pytest.raises(ValueError, match="prefix"):
        find_divergence(ref, tree.path_of(a))


def test_mine_tree_produces_positive_then_redacted_negatives():
    tree, _ = hand_tree()
    policy, gw = scripted()
    policy.add("q", "annotate", "*", ["The correct branch reaches 7; this one does not."])
    samples, stats = mine_tree(tree, gw, SearchConfig())
    assert samples[0].provenance == "positive" and samples[0].critique == NO_CORRECTIONS
    negatives = samples[1:]
    assert [s.answer_path.final_answer for s in negatives] == ["8", "9"]
    for s in negatives:
        assert s.correctness == 0 and "7" not in s.critique.split() and REDACTION_TOKEN in s.critique
    assert negatives[1].answer_path.steps[0].text == "Guess."
    assert (stats.positives, stats.negatives, stats.no_reference) == (1, 2, 0)


def test_tree_without_reference_yields_nothing():
    policy, gw = scripted()
    policy.add("q", "steps", [], ["Guess."])
    policy.add("q", "rollout", "*", ["Final answer: 9."])
    tree = run_search(Q, SearchConfig(n_expand=1, m_rollouts=2, search_iterations=3), gw)
    assert tree.no_reference
    samples, stats = mine_tree(tree, gw)
    assert samples == [] and stats.no_reference == 1


def test_annotator_failures_are_skipped():
    tree, _ = hand_tree()
    policy, gw = scripted()
    policy.add("q", "annotate", "*", [""])
    samples, stats = mine_tree(tree, gw)
    assert [s.provenance for s in samples] == ["positive"]
    assert stats.skipped_annotations == 2


def test_all_positives_option():
    tree, (a, b, a1, a2, b1) = hand_tree()
    other = tree.add_child(b, step("Final answer: 7.", terminal=True))
    backpropagate(tree, other, 1.0)
    _, gw = scripted()
    single, _ = mine_tree(tree, gw, SearchConfig())
    many, _ = mine_tree(tree, gw, SearchConfig(all_positives=True))
    assert sum(s.correctness for s in single) == 1
    assert sum(s.correctness for s in many) == 2


def test_build_positive_requires_correct_path():
    with pytest.raises(ValueError):
        build_positive(Q, path("q", final="8"))


def test_synthetic_mining_invariants():
    config = SearchConfig(seed=4, search_iterations=8)
    gw = SyntheticGateway(seed=4)
    for i in range(8):
        q = Question(f"s{i}", f"What is {i} + 2?", str(i + 2))
        samples, _ = mine_tree(run_search(q, config, gw), gw, config)
        for s in samples:
            correct = gw.grade(s.answer_path.final_answer, q.ground_truth)
            assert correct == (s.correctness == 1)
            if s.correctness == 0:
                assert s.critique != NO_CORRECTIONS
