import json
import math

import numpy as np
import pytest

from sparsesr.cli import trace_schema
from sparsesr.engine import CycleConfig, Problem
from sparsesr.propose import BudgetExceeded, GrammarProposer, RecordingProposer, ReplayProposer
from sparsesr.search import (
    BUDGET_EXCEEDED,
    COMPLETED,
    ITERATIVE,
    MCTS,
    TREE_EXHAUSTED,
    SearchConfig,
    SearchNode,
    backpropagate,
    best_so_far,
    cycle_sequence,
    run_search,
    select,
    uct_score,
    uct_select,
)
from test_engine import toy_problem


def node_with(q, n, parent):
    c = SearchNode(f"{parent.id}_{len(parent.children)}", parent, parent.depth + 1)
    c.visits, c.value_sum = n, q * n
    parent.children.append(c)
    return c


def test_uct_hand_example():
    root = SearchNode("node_0")
    root.visits = 10
    a = node_with(0.5, 5, root)
    b = node_with(0.6, 2, root)
    assert uct_score(a, 10, math.sqrt(2)) == pytest.approx(0.5 + math.sqrt(2) * math.sqrt(math.log(10) / 5))
    assert uct_select(root, math.sqrt(2)) is b


def test_unvisited_child_first_and_ties_to_first():
    root = SearchNode("node_0")
    root.visits = 3
    node_with(0.9, 3, root)
    fresh = node_with(0.0, 0, root)
    assert uct_select(root, 1.0) is fresh
    tie = SearchNode("node_0")
    tie.visits = 4
    first = node_with(0.2, 2, tie)
    node_with(0.2, 2, tie)
    assert uct_select(tie, 1.0) is first


def test_backprop_counts_path():
    root = SearchNode("node_0")
    child = node_with(0.0, 0, root)
    leaf = node_with(0.0, 0, child)
    backpropagate(leaf, -2.0)
    backpropagate(child, -1.0)
    assert (root.visits, child.visits, leaf.visits) == (2, 2, 1)
    assert root.q == -1.5


def test_select_stops_at_partially_expanded_node():
    cfg = SearchConfig(n_successors=2)
    root = SearchNode("node_0", attempts=2)
    root.visits = 2
    a = node_with(-1.0, 1, root)
    a.attempts = 1
    node_with(-5.0, 1, root)
    assert select(root, cfg) is a


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_best_so_far_never_increases(seed):
    res = run_search(toy_problem(seed), SearchConfig(total_budget=6, n_successors=3), GrammarProposer(seed))
    curve = best_so_far(res.trace)
    assert curve and all(b <= a for a, b in zip(curve, curve[1:]))
    assert res.best.val_mse == min(r["val_mse"] for r in res.trace if r["event"] == "expand")


@pytest.mark.parametrize("seed", [0, 5])
def test_iterative_equals_single_successor_mcts(seed):
    prob = toy_problem(seed)
    it = run_search(prob, SearchConfig(total_budget=5, mode=ITERATIVE), GrammarProposer(seed))
    mc = run_search(prob, SearchConfig(total_budget=5, n_successors=1, mode=MCTS), GrammarProposer(seed))
    assert cycle_sequence(it) == cycle_sequence(mc)
    assert [r["node_id"] for r in it.trace] == ["node_0_0", "node_0_0_0", "node_0_0_0_0",
                                                  "node_0_0_0_0_0", "node_0_0_0_0_0_0"]


def test_tree_exhaustion_stops_early():
    cfg = SearchConfig(total_budget=50, n_successors=2, depth_limit=1)
    res = run_search(toy_problem(), cfg, GrammarProposer(0))
    assert res.status == TREE_EXHAUSTED and res.expansions == 1


def test_revisits_use_budget_when_leaves_are_terminal():
    # With seed 2 the second child wins UCT and its depth-limited children are
    # terminal, so later iterations re-backpropagate instead of expanding.
    cfg = SearchConfig(total_budget=6, n_successors=2, depth_limit=2)
    res = run_search(toy_problem(), cfg, GrammarProposer(2))
    events = [r["event"] for r in res.trace]
    assert res.status == COMPLETED and res.expansions == 2 and res.iterations == 6
    assert events.count("revisit") == 4
    backprops = events.count("expand") + events.count("revisit")
    assert res.root.visits == backprops


class Budgeted:
    def __init__(self, inner, limit):
        self.inner, self.limit, self.n = inner, limit, 0

    def complete(self, prompt, **kw):
        self.n += 1
        if self.n > self.limit:
            raise BudgetExceeded("token budget exhausted")
        return self.inner.complete(prompt, **kw)


def test_budget_exceeded_keeps_best():
    res = run_search(toy_problem(), SearchConfig(total_budget=10, n_successors=2), Budgeted(GrammarProposer(0), 3))
    assert res.status == BUDGET_EXCEEDED and res.best is not None


def test_trace_lines_validate(tmp_path):
    import jsonschema

    path = tmp_path / "trace.jsonl"
    run_search(toy_problem(), SearchConfig(total_budget=4, n_successors=2), GrammarProposer(0), path)
    v = jsonschema.Draft202012Validator(trace_schema())
    lines = path.read_text().splitlines()
    assert lines
    for line in lines:
        v.validate(json.loads(line))


def test_rollouts_change_rewards_but_not_tree_ids():
    cfg = SearchConfig(total_budget=3, n_successors=2, rollout_is_just_node_reward=False, rollout_depth=2)
    res = run_search(toy_problem(), cfg, GrammarProposer(0))
    ids = [n.id for n in res.root.walk()]
    assert all("rollout" not in i for i in ids)


@pytest.mark.parametrize("jobs", [1, 4])
def test_replay_is_identical_across_jobs(tmp_path, jobs):
    prob = toy_problem(2)
    cfg = SearchConfig(total_budget=5, n_successors=3)
    rec = RecordingProposer(GrammarProposer(2))
    run_search(prob, cfg, rec, tmp_path / "a.jsonl")
    out = tmp_path / f"b{jobs}.jsonl"
    run_search(prob, SearchConfig(total_budget=5, n_successors=3, jobs=jobs), ReplayProposer(rec.entries), out)
    assert (tmp_path / "a.jsonl").read_bytes() == out.read_bytes()
