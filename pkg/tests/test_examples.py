"""Small worked examples for each operation, with hand-computed expectations."""

import json
import math
import random

import httpx
import pytest

from stepcritic.critique import collect_incorrect_paths, find_divergence, mine_tree, pick_reference
from stepcritic.filtering import filter_dataset
from stepcritic.gateway import REDACTION_TOKEN, ChatClient, CriticVerdict, GenerationRequest, RemoteGateway
from stepcritic.gateway.grading import extract_from_text, grade
from stepcritic.losses import lm_loss, score_loss, total_loss
from stepcritic.mcts import (
    RolloutRecord,
    backpropagate,
    expand,
    is_terminal,
    run_search,
    select_leaf,
    simulate,
    tree_to_records,
)
from stepcritic.refine import batch_eval, run
from stepcritic.types import NO_CORRECTIONS, CritiqueSample, DivergencePair, Question, SearchConfig

from .helpers import path, random_tree, scripted, step

Q = Question("q", "What is 3 + 4?", "7")


def fresh_tree(q=Q):
    return random_tree(random.Random(0), 1, q)


# -- generation -------------------------------------------------------------

def test_scripted_steps_come_back_in_order():
    policy, gw = scripted()
    policy.add("q", "steps", [], ["step X", "step Y", "step Z"])
    steps = gw.generate_steps(GenerationRequest(Q, (), 30, n_samples=3))
    assert [s.text for s in steps] == ["step X", "step Y", "step Z"]


def test_long_continuation_is_cut_to_a_prefix():
    text = " ".join(f"w{i}" for i in range(45))
    policy, gw = scripted()
    policy.add("q", "steps", [], [text])
    (s,) = gw.generate_steps(GenerationRequest(Q, (), 30, n_samples=1))
    assert s.token_count <= 30 and text.startswith(s.text)


def test_single_sample_is_repeatable():
    policy, gw = scripted()
    policy.add("q", "steps", [], ["Add."])
    req = GenerationRequest(Q, (), 30, temperature=0.0, n_samples=1)
    assert gw.generate_steps(req) == gw.generate_steps(req)


def test_rollout_examples():
    policy, gw = scripted()
    prior = (step("Read."), step("Add."))
    policy.add("q", "rollout", ["Read.", "Add."], ["So the total is 7. Final answer: 7"])
    out = gw.rollout(Q, prior, 100)
    assert out.final_answer == "7" and out.steps[:2] == prior
    policy.add("q", "rollout", [], [" ".join(["again"] * 500)])
    looped = gw.rollout(Q, (), 64)
    assert looped.final_answer is None and looped.token_count <= 64


def test_critique_examples():
    policy, gw = scripted()
    policy.add("q", "critique", "*", [CriticVerdict(NO_CORRECTIONS, 0.95)])
    assert gw.critique(Q, path("q", final="7")) == CriticVerdict(NO_CORRECTIONS, 0.95)

    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "Step 2 is off by one."},
                                                      "finish_reason": "stop"}]})
    remote = RemoteGateway(ChatClient("http://m.test/v1", transport=httpx.MockTransport(handler)),
                           score_fallback=0.0, backoff=0.0)
    verdict = remote.critique(Q, path("q", final="8"))
    assert (verdict.critique, verdict.score) == ("Step 2 is off by one.", 0.0)


def test_refine_examples():
    policy, gw = scripted()
    policy.add("q", "refine", "*", ["Recount.\nFinal answer: 7."])
    out = gw.refine(Q, path("q", final="8"), "Step 1 is wrong.")
    assert [s.text for s in out.steps] == ["Recount.", "Final answer: 7."] and out.source == "refined"
    gw.refine(Q, path("q", final="7"), NO_CORRECTIONS)
    assert gw.calls.counts["refine"] == 2


def test_annotate_examples(monkeypatch):
    policy, gw = scripted()
    pair = DivergencePair("q", (step("Read."),), path("q", "Add.", final="42").steps,
                          path("q", "Guess.", final="41").steps)
    policy.add("q", "annotate", "*", ["Step 3 misreads the chart axis; re-examine the x-axis labels."])
    assert gw.annotate(Q, pair) == "Step 3 misreads the chart axis; re-examine the x-axis labels."
    policy2, gw2 = scripted()
    policy2.add("q", "annotate", "*", ["The first path gets 42 by adding; the second guesses."])
    assert gw2.annotate(Q, pair) == f"The first path gets {REDACTION_TOKEN} by adding; the second guesses."

    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(200, json={"choices": [{"message": {"content": "Step 2 guesses."}}]})
    monkeypatch.delenv("STEPCRITIC_BASE_URL", raising=False)
    remote = RemoteGateway(ChatClient("http://m.test/v1", transport=httpx.MockTransport(handler)))
    remote.annotate(Q, pair)
    prompt = bodies[0]["messages"][0]["content"]
    for s in pair.shared_prefix + pair.branch_a + pair.branch_b:
        assert s.text in prompt


@pytest.mark.parametrize("a, b, same", [("7.0", "7", True), ("B", "b", True), ("12", "21", False)])
def test_grade_examples(a, b, same):
    assert grade(a, b) is same


@pytest.mark.parametrize("text, expected", [
    ("So therefore Final answer: 42", "42"),
    ("Then final ANSWER:  B.", "B"),
    ("No marker here", None),
])
def test_extraction_examples(text, expected):
    assert extract_from_text(text) == expected


# -- search -----------------------------------------------------------------

def test_selection_examples():
    tree = fresh_tree()
    for v in (0.2, 0.8, 0.5):
        tree.nodes[tree.add_child(0, step(f"v{v}"))].value = v
    assert select_leaf(tree) == tree.nodes[0].children[1]
    tie = fresh_tree()
    for _ in range(2):
        tie.nodes[tie.add_child(0, step(f"t{len(tie.nodes)}"))].value = 0.5
    assert select_leaf(tie) == tie.nodes[0].children[0]
    assert select_leaf(fresh_tree()) == 0


def test_expand_examples():
    config = SearchConfig()
    policy, gw = scripted()
    policy.add("q", "steps", [], ["A", "B", "C"])
    tree = fresh_tree()
    assert len(expand(tree, 0, 3, gw, config)) == 3
    policy2, gw2 = scripted()
    policy2.add("q", "steps", [], ["A", "A", "B"])
    tree2 = fresh_tree()
    kids = expand(tree2, 0, 3, gw2, config)
    assert [tree2.nodes[k].step.text for k in kids] == ["A", "B"]


@pytest.mark.parametrize("m, correct, value", [(5, 3, 0.6), (4, 0, 0.0), (1, 1, 1.0)])
def test_simulate_examples(m, correct, value):
    policy, gw = scripted()
    policy.add("q", "rollout", "*", ["Final answer: 7."] * correct + ["Final answer: 1."] * (m - correct))
    tree = fresh_tree()
    child = tree.add_child(0, step("Add."))
    assert simulate(tree, child, m, gw, SearchConfig()) == value


def test_backpropagation_examples():
    tree = fresh_tree()
    a = tree.add_child(0, step("a"))
    b = tree.add_child(a, step("b"))
    backpropagate(tree, b, 0.0)
    backpropagate(tree, b, 1.0)
    assert (tree.nodes[b].visit_count, tree.nodes[b].value) == (2, 0.5)
    backpropagate(tree, b, 1.0)
    assert tree.nodes[b].visit_count == 3 and tree.nodes[b].value == pytest.approx(2 / 3, abs=1e-15)
    assert [tree.nodes[n].visit_count for n in (0, a, b)] == [3, 3, 3]
    c = tree.add_child(0, step("c"))
    backpropagate(tree, c, 0.6)
    assert (tree.nodes[c].visit_count, tree.nodes[c].value) == (1, 0.6)


def test_terminal_examples():
    tree = fresh_tree()
    marked = tree.add_child(0, step("Final answer: 7.", terminal=True))
    long = tree.add_child(0, step(" ".join(["w"] * 512)))
    mid = tree.add_child(0, step("Add."))
    config = SearchConfig(max_path_tokens=512)
    assert is_terminal(tree, marked, config) and is_terminal(tree, long, config)
    assert not is_terminal(tree, mid, config)


def test_three_iteration_trace_converges_on_good_branch():
    """Hand trace: iteration 1 expands root to G (4/4) and W (0/4); iteration 2
    expands G to G1 (4/4) and G2 (2/4); iteration 3 expands G1 to a terminal
    correct step (4/4); selection then lands on that terminal and halts."""
    policy, gw = scripted()
    policy.add("q", "steps", [], ["Good.", "Wrong."])
    policy.add("q", "steps", ["Good."], ["Good again.", "Hmm."])
    policy.add("q", "steps", ["Good.", "Good again."], ["Final answer: 7."])
    policy.add("q", "rollout", ["Good."], ["Final answer: 7."])
    policy.add("q", "rollout", ["Wrong."], ["Final answer: 9."])
    policy.add("q", "rollout", ["Good.", "Good again."], ["Final answer: 7."])
    policy.add("q", "rollout", ["Good.", "Hmm."], ["Final answer: 7.", "Final answer: 9."])
    config = SearchConfig(n_expand=2, m_rollouts=4, search_iterations=10)
    tree = run_search(Q, config, gw)
    good = tree.nodes[1]
    assert good.propagation_log == [1.0, 1.0, 0.5, 1.0]
    assert tree.nodes[0].propagation_log == [1.0, 0.0, 1.0, 0.5, 1.0]
    assert tree.iteration_count == 3 and tree.halt_reason == "terminal_selected"
    assert [tree.nodes[n].step.text for n in tree.ancestry(select_leaf(tree))[1:]] == [
        "Good.", "Good again.", "Final answer: 7."]
    assert tree.nodes[3].value == 1.0


def test_zero_iterations_and_repeatable_dumps():
    tree = run_search(Q, SearchConfig(search_iterations=0), scripted()[1])
    assert list(tree.nodes) == [0]
    config = SearchConfig(seed=9)
    policy, gw = scripted()
    policy.add("q", "rollout", "*", ["Final answer: 7.", "Final answer: 8."])
    dumps = [json.dumps(tree_to_records(run_search(Q, config, gw), config)) for _ in range(2)]
    assert dumps[0] == dumps[1]


# -- mining -----------------------------------------------------------------

def mining_tree():
    tree = fresh_tree()
    a = tree.add_child(0, step("A."))
    b = tree.add_child(0, step("B."))
    wrong1 = tree.add_child(a, step("Final answer: 8.", terminal=True))
    wrong2 = tree.add_child(b, step("Final answer: 9.", terminal=True))
    sibling = tree.add_child(b, step("Final answer: 7.", terminal=True))
    for nid, v in ((wrong1, 0.0), (wrong2, 0.0), (sibling, 0.8)):
        backpropagate(tree, nid, v)
    tree.nodes[a].value = 0.9  # greedy descent ends on the wrong answer under A
    return tree, sibling


def test_reference_fallback_to_correct_sibling():
    tree, sibling = mining_tree()
    assert pick_reference(tree) == tree.path_of(sibling)
    assert len(collect_incorrect_paths(tree)) == 2


def test_reference_absent_and_only_correct_terminals():
    tree = fresh_tree()
    backpropagate(tree, tree.add_child(0, step("Final answer: 9.", terminal=True)), 0.0)
    assert pick_reference(tree) is None
    ok = fresh_tree()
    backpropagate(ok, ok.add_child(0, step("Final answer: 7.", terminal=True)), 1.0)
    assert collect_incorrect_paths(ok) == []


def test_rollout_only_incorrect_path_is_included():
    tree = fresh_tree()
    good = tree.add_child(0, step("Add."))
    backpropagate(tree, tree.add_child(good, step("Final answer: 7.", terminal=True)), 1.0)
    tree.rollouts.append(RolloutRecord(good, 0, path("q", "Add.", "Slip.", final="6", source="rollout")))
    assert [p.final_answer for p in collect_incorrect_paths(tree)] == ["6"]


def test_divergence_examples():
    ref = path("q", "s1", "s2", "s3")
    wrong = path("q", "s1", "s2", "x3", "x4")
    pair = find_divergence(ref, wrong)
    assert [s.text for s in pair.shared_prefix] == ["s1", "s2"]
    assert [s.text for s in pair.branch_a] == ["s3"] and [s.text for s in pair.branch_b] == ["x3", "x4"]
    early = find_divergence(ref, path("q", "y1", "y2"))
    assert early.shared_prefix == () and early.branch_a == ref.steps
    with pytest.raises(ValueError):
        find_divergence(ref, ref)


def test_mining_counts_and_skips():
    tree, _ = mining_tree()
    policy, gw = scripted()
    policy.add("q", "annotate", "*", ["The branch picks the wrong operand."])
    samples, stats = mine_tree(tree, gw)
    assert (stats.positives, stats.negatives) == (1, 2)
    assert all(s.critique == "The branch picks the wrong operand." for s in samples if s.correctness == 0)
    _, empty = scripted()
    empty.policy.add("q", "annotate", "*", [""])
    _, skipped = mine_tree(tree, empty)
    assert skipped.skipped_annotations == 2 and skipped.negatives == 0


# -- filtering --------------------------------------------------------------

def test_filter_file_example():
    qs = [Question(f"n{i}", f"Q{i}?", "7") for i in range(4)]
    policy, gw = scripted()
    for q, s in zip(qs, (3, 2, 10, 0)):
        policy.add(q.id, "refine", "*", ["Final answer: 7."] * s + ["Final answer: 1."] * (10 - s))
    negatives = [CritiqueSample(q, path(q.id, "Go.", final="1"), 0, "Step 1 is wrong.", "negative_mined")
                 for q in qs]
    positives = [CritiqueSample(Question(f"p{i}", "Q?", "7"), path(f"p{i}", "Go.", final="7"), 1,
                                NO_CORRECTIONS, "positive") for i in range(5)]
    kept, report = filter_dataset(positives + negatives, SearchConfig(), gw)
    assert (report.positives, report.kept) == (5, 2)
    assert [s.question.id for s in kept if s.correctness == 0] == ["n0", "n2"]
    out, empty = filter_dataset([], SearchConfig(), gw)
    assert out == [] and (empty.kept, empty.discarded, empty.negatives) == (0, 0, 0)
    assert set(empty.histogram.values()) == {0}


# -- losses -----------------------------------------------------------------

def test_loss_examples():
    assert lm_loss([1.0, 1.0, 1.0]) == 0.0
    assert lm_loss([0.25] * 3) == pytest.approx(4.158883, abs=1e-6)
    assert lm_loss([0.5]) == pytest.approx(0.693147, abs=1e-6)
    assert score_loss(1, 0.5) == score_loss(0, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert score_loss(1, 1.0) == pytest.approx(1e-12, rel=1e-9)
    assert (total_loss(2.0, 0.5, 1.0), total_loss(2.0, 0.5, 0.0), total_loss(1.0, 1.0, 2.5)) == (2.5, 2.0, 3.5)


# -- inference loop ---------------------------------------------------------

def test_two_round_convergence():
    policy, gw = scripted()
    policy.add("q", "answer", [], ["Final answer: 8."])
    policy.add("q", "critique", ["Final answer: 8."], [CriticVerdict("Step 1 adds wrongly.", 0.2)])
    policy.add("q", "refine", ["Final answer: 8."], ["Final answer: 7."])
    policy.add("q", "critique", ["Final answer: 7."], [CriticVerdict(NO_CORRECTIONS, 0.9)])
    trace = run(Q, SearchConfig(), gw)
    assert len(trace.rounds) == 2 and trace.final_answer == "7"


def test_hundred_question_table():
    """58 right at the start; the critic flags the 42 wrong ones and the
    refiner fixes 8 of them in round 1."""
    qs = [Question(f"h{i:03d}", f"Q{i}?", "7") for i in range(100)]
    policy, gw = scripted()
    for i, q in enumerate(qs):
        first = "7" if i < 58 else "1"
        policy.add(q.id, "answer", [], [f"Final answer: {first}."])
        policy.add(q.id, "critique", ["Final answer: 7."], [CriticVerdict(NO_CORRECTIONS, 0.9)])
        policy.add(q.id, "critique", ["Final answer: 1."], [CriticVerdict("Wrong.", 0.1)])
        policy.add(q.id, "refine", ["Final answer: 1."], ["Final answer: 7." if i < 66 else "Final answer: 1."])
    _, report = batch_eval(qs, SearchConfig(max_refine_iters=2), gw)
    assert report.accuracies()[:2] == [0.58, 0.66]
    assert report.n_refine()[1:] == [42, 34]


def test_all_correct_needs_no_refinement():
    qs = [Question(f"c{i}", "Q?", "7") for i in range(10)]
    policy, gw = scripted()
    policy.add("*", "answer", [], ["Final answer: 7."])
    _, report = batch_eval(qs, SearchConfig(), gw)
    assert report.n_refine()[1] == 0 and gw.calls.counts["refine"] == 0
    assert all(a >= b for a, b in zip(report.n_refine()[1:], report.n_refine()[2:]))
