"""Tree search over equation states, plus the single-chain iterative mode."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .engine import (
    CycleConfig,
    CycleFailed,
    CycleResult,
    HistoryEntry,
    Problem,
    format_equation,
    format_history_entry,
    heldout_mse,
    run_cycle,
)
from .exprlang import Term
from .linfit import LinearFit
from .propose import BudgetExceeded, Proposer

log = logging.getLogger(__name__)

MCTS = "mcts"
ITERATIVE = "iterative"

COMPLETED = "completed"
TREE_EXHAUSTED = "tree_exhausted"
BUDGET_EXCEEDED = "budget_exceeded"

ROOT_ID = "node_0"


@dataclass(frozen=True)
class SearchConfig:
    total_budget: int = 30
    n_successors: int = 5
    exploration: float = math.sqrt(2)
    depth_limit: int = 10
    rollout_is_just_node_reward: bool = True
    rollout_depth: int = 1
    mode: str = MCTS
    jobs: int = 1
    cycle: CycleConfig = field(default_factory=CycleConfig)

    def __post_init__(self):
        if self.total_budget < 1 or self.n_successors < 1 or self.depth_limit < 1 or self.rollout_depth < 0:
            raise ValueError("search counts must be positive")
        if self.exploration < 0:
            raise ValueError("exploration constant must be non-negative")
        if self.mode not in (MCTS, ITERATIVE):
            raise ValueError(f"unknown search mode '{self.mode}'")


@dataclass(eq=False)
class SearchNode:
    id: str
    parent: SearchNode | None = None
    depth: int = 0
    terms: tuple[Term, ...] = ()
    fit: LinearFit | None = None
    val_mse: float | None = None
    val_mse_per_output: tuple[float, ...] = ()
    history: tuple[HistoryEntry, ...] = ()
    result: CycleResult | None = None
    visits: int = 0
    value_sum: float = 0.0
    children: list[SearchNode] = field(default_factory=list)
    attempts: int = 0

    @property
    def q(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0

    @property
    def sources(self) -> list[str]:
        return [t.source for t in self.terms]

    def expandable(self, cfg: SearchConfig) -> bool:
        return self.depth < cfg.depth_limit and self.attempts < cfg.n_successors

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def uct_score(child: SearchNode, parent_visits: int, c: float) -> float:
    if child.visits == 0:
        return math.inf
    return child.q + c * math.sqrt(math.log(parent_visits) / child.visits)


def uct_select(parent: SearchNode, c: float) -> SearchNode:
    """Child with the highest UCT score; the first-created child wins ties."""
    if not parent.children:
        raise ValueError("node has no children")
    best, best_score = None, -math.inf
    for child in parent.children:
        s = uct_score(child, max(parent.visits, 1), c)
        if s > best_score:
            best, best_score = child, s
    return best


def backpropagate(node: SearchNode, reward: float) -> None:
    while node is not None:
        node.visits += 1
        node.value_sum += reward
        node = node.parent


def select(root: SearchNode, cfg: SearchConfig) -> SearchNode:
    node = root
    while not node.expandable(cfg) and node.children:
        node = uct_select(node, cfg.exploration)
    return node


@dataclass
class SearchResult:
    status: str
    best: SearchNode | None
    best_test_mse: float | None
    best_test_mse_per_output: list[float] | None
    equation: list[str]
    iterations: int
    expansions: int
    trace: list[dict]
    root: SearchNode
    tokens: dict

    def summary(self, target_names) -> dict:
        b = self.best
        return {
            "status": self.status,
            "iterations": self.iterations,
            "expansions": self.expansions,
            "n_nodes": sum(1 for _ in self.root.walk()),
            "best_node": b.id if b else None,
            "best_terms": b.sources if b else [],
            "best_weights": b.fit.W.tolist() if b else [],
            "best_val_mse": b.val_mse if b else None,
            "best_val_mse_per_output": list(b.val_mse_per_output) if b else [],
            "best_test_mse": self.best_test_mse,
            "best_test_mse_per_output": self.best_test_mse_per_output,
            "equation": self.equation,
            "targets": list(target_names),
            "tokens": self.tokens,
        }


class _Runner:
    def __init__(self, problem: Problem, cfg: SearchConfig, proposer: Proposer, sink: Callable[[dict], None] | None):
        self.problem = problem
        self.cfg = cfg
        self.proposer = proposer
        self.sink = sink
        self.trace: list[dict] = []
        self.best: SearchNode | None = None
        self.iteration = 0

    # -- helpers -----------------------------------------------------------

    def tokens(self) -> dict:
        meter = getattr(self.proposer, "meter", None)
        return meter.snapshot() if meter is not None else {"prompt_tokens": 0, "completion_tokens": 0}

    def best_equation(self) -> str:
        if self.best is None:
            return "None"
        return "\n".join(format_equation(self.best.sources, self.best.fit.W, self.problem.target_names))

    def emit(self, record: dict) -> None:
        record["best_val_mse"] = self.best.val_mse if self.best else None
        record["best_node"] = self.best.id if self.best else None
        self.trace.append(record)
        if self.sink:
            self.sink(record)

    def cycle(self, node: SearchNode, child_id: str, prefix: str, best_eq: str) -> CycleResult:
        return run_cycle(
            self.problem, node.terms, node.history, self.cfg.cycle, self.proposer,
            node_id=child_id, call_prefix=prefix, best_equation=best_eq,
            first_round=not node.terms,
        )

    def attempt(self, node: SearchNode, index: int, best_eq: str):
        """One successor: the child's cycle plus its optional rollout chain."""
        child_id = f"{node.id}_{index}"
        try:
            res = self.cycle(node, child_id, child_id, best_eq)
        except CycleFailed as exc:
            return child_id, None, None, str(exc)
        reward = -res.val_mse
        if not self.cfg.rollout_is_just_node_reward:
            state = SearchNode(child_id, node, node.depth + 1, tuple(res.terms), res.fit, res.val_mse,
                               history=node.history + (res.history_entry,))
            for j in range(1, self.cfg.rollout_depth + 1):
                rid = f"{child_id}/rollout{j}"
                try:
                    r = self.cycle(state, rid, rid, best_eq)
                except CycleFailed:
                    break
                reward = -r.val_mse
                state = SearchNode(rid, state, state.depth + 1, tuple(r.terms), r.fit, r.val_mse,
                                   history=state.history + (r.history_entry,))
        return child_id, res, reward, None

    def add_child(self, node: SearchNode, child_id: str, res: CycleResult) -> SearchNode:
        child = SearchNode(
            id=child_id, parent=node, depth=node.depth + 1, terms=tuple(res.terms), fit=res.fit,
            val_mse=res.val_mse, val_mse_per_output=tuple(float(v) for v in res.val_mse_per_output),
            history=node.history + (res.history_entry,), result=res,
        )
        node.children.append(child)
        if self.best is None or child.val_mse < self.best.val_mse:
            self.best = child
        return child

    def record(self, node: SearchNode, child_id: str, res: CycleResult | None, reward, error) -> dict:
        rec = {
            "iteration": self.iteration,
            "event": "expand" if res is not None else "failed",
            "node_id": child_id,
            "parent_id": node.id,
            "depth": node.depth + 1,
        }
        if res is None:
            rec["error"] = error
            return rec
        test_per, test = heldout_mse(res.terms, res.fit, self.problem.dataset)
        rec.update({
            "kept_terms": res.sources,
            "dropped_terms": res.dropped,
            "proposed_terms": res.proposed,
            "weights": res.fit.W.tolist(),
            "val_mse": res.val_mse,
            "val_mse_per_output": [float(v) for v in res.val_mse_per_output],
            "test_mse": test,
            "test_mse_per_output": [float(v) for v in test_per],
            "influence_agg": {t: float(v) for t, v in zip(res.influence.terms, res.influence.aggregate)},
            "rejected": res.rejected,
            "reward": reward,
            "history": format_history_entry(res.history_entry),
            "warnings": list(res.warnings),
        })
        if res.tlo is not None:
            rec["tlo_objective"] = res.tlo.objective
        return rec

    # -- expansion ---------------------------------------------------------

    def expand(self, node: SearchNode) -> tuple[list[SearchNode], bool]:
        best_eq = self.best_equation()
        indices = list(range(node.attempts, self.cfg.n_successors))
        if self.cfg.jobs > 1 and len(indices) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
                futures = [pool.submit(self.attempt, node, i, best_eq) for i in indices]
                outcomes = []
                for f in futures:
                    try:
                        outcomes.append(f.result())
                    except BudgetExceeded as exc:
                        outcomes.append(exc)
        else:
            outcomes = []
            for i in indices:
                try:
                    outcomes.append(self.attempt(node, i, best_eq))
                except BudgetExceeded as exc:
                    outcomes.append(exc)
                    break
        node.attempts = self.cfg.n_successors
        children, budget_hit = [], False
        for out in outcomes:
            if isinstance(out, BudgetExceeded):
                budget_hit = True
                continue
            child_id, res, reward, error = out
            if res is not None:
                child = self.add_child(node, child_id, res)
                backpropagate(child, reward)
                children.append(child)
            rec = self.record(node, child_id, res, reward, error)
            rec["tokens"] = self.tokens()
            self.emit(rec)
        return children, budget_hit

    def any_expandable(self, root: SearchNode) -> bool:
        return any(n.expandable(self.cfg) for n in root.walk())

    def run_mcts(self, root: SearchNode) -> tuple[str, int, int]:
        expansions = 0
        for it in range(1, self.cfg.total_budget + 1):
            self.iteration = it
            if not self.any_expandable(root):
                return TREE_EXHAUSTED, it - 1, expansions
            node = select(root, self.cfg)
            if node.expandable(self.cfg):
                _, budget_hit = self.expand(node)
                expansions += 1
                if budget_hit:
                    return BUDGET_EXCEEDED, it, expansions
            else:
                reward = -node.val_mse if node.val_mse is not None else 0.0
                backpropagate(node, reward)
                self.emit({"iteration": it, "event": "revisit", "node_id": node.id,
                           "parent_id": node.parent.id if node.parent else None,
                           "depth": node.depth, "reward": reward, "tokens": self.tokens()})
        return COMPLETED, self.cfg.total_budget, expansions

    def run_iterative(self, root: SearchNode) -> tuple[str, int, int]:
        node = root
        for it in range(1, self.cfg.total_budget + 1):
            self.iteration = it
            best_eq = self.best_equation()
            child_id = f"{node.id}_0"
            try:
                outcome = self.attempt(node, 0, best_eq)
            except BudgetExceeded:
                return BUDGET_EXCEEDED, it, it - 1
            node.attempts = 1
            _, res, reward, error = outcome
            if res is None:
                self.emit({**self.record(node, child_id, None, None, error), "tokens": self.tokens()})
                return TREE_EXHAUSTED, it, it
            child = self.add_child(node, child_id, res)
            backpropagate(child, reward)
            self.emit({**self.record(node, child_id, res, reward, None), "tokens": self.tokens()})
            node = child
        return COMPLETED, self.cfg.total_budget, self.cfg.total_budget


def run_search(
    problem: Problem,
    cfg: SearchConfig,
    proposer: Proposer,
    trace_path: str | Path | None = None,
) -> SearchResult:
    """Search for the equation with the lowest validation MSE.

    Every successor attempt (and every revisit of a terminal node) appends a
    record to ``trace_path`` as JSON lines, in a deterministic order.
    """
    fh = open(trace_path, "w", encoding="utf-8") if trace_path else None

    def sink(rec: dict) -> None:
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    runner = _Runner(problem, cfg, proposer, sink)
    root = SearchNode(ROOT_ID)
    try:
        if cfg.mode == MCTS:
            status, iterations, expansions = runner.run_mcts(root)
        else:
            status, iterations, expansions = runner.run_iterative(root)
    finally:
        if fh:
            fh.close()
    best = runner.best
    test_per, test, eq = None, None, []
    if best is not None:
        per, test = heldout_mse(best.terms, best.fit, problem.dataset)
        test_per = [float(v) for v in per]
        eq = format_equation(best.sources, best.fit.W, problem.target_names)
    return SearchResult(status, best, test, test_per, eq, iterations, expansions, runner.trace, root, runner.tokens())


def best_so_far(trace: list[dict]) -> list[float]:
    return [r["best_val_mse"] for r in trace if r.get("best_val_mse") is not None]


def cycle_sequence(result: SearchResult) -> list[tuple[str, tuple[str, ...], float]]:
    return [(r["node_id"], tuple(r["kept_terms"]), r["val_mse"]) for r in result.trace if r["event"] == "expand"]

