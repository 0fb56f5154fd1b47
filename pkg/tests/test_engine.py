import numpy as np
import pytest

from conftest import fixture_text
from sparsesr.data import Dataset, concat_splits
from sparsesr.engine import (
    CycleConfig,
    CycleFailed,
    HistoryEntry,
    Problem,
    equivalent_columns,
    format_equation,
    format_history_entry,
    parse_history_entry,
    run_cycle,
    tlo_optimize,
)
from sparsesr.exprlang import Term
from sparsesr.influence import REFIT_FULL
from sparsesr.propose import PROPOSE, GrammarProposer, render_terms_block
from sparsesr.prune import AGENTIC, render_decision_block
from sparsesr.simgen import gen_rational


class Scripted:
    """Replies with fixed TERMS / DECISION blocks and remembers the calls."""

    def __init__(self, terms, decision=None):
        self.terms, self.decision, self.calls = terms, decision, []

    def complete(self, prompt, *, kind, ctx, call_id):
        self.calls.append((kind, call_id))
        if kind == PROPOSE:
            return render_terms_block(self.terms)
        return self.decision


def toy_problem(seed=0, n=60):
    parts = {}
    for i, split in enumerate(("train", "val", "test")):
        r = np.random.default_rng(seed * 10 + i)
        x, z = r.uniform(0.5, 2.0, n), r.uniform(-1, 1, n)
        parts[split] = Dataset({"x": x, "z": z}, {"y": 3 * x - 2 * x * z, "u": np.sin(z)})
    return Problem(concat_splits(parts), "toy")


def test_history_example_round_trips():
    line = fixture_text("history_line.txt").strip()
    h = parse_history_entry(line)
    assert h.round == "node_0_0" and len(h.keep) == 6 and len(h.drop) == 8
    assert h.mse_after_per_output[1] == 1.789047395904737
    assert format_history_entry(h) == line


def test_history_format_rounds_overall_only():
    h = HistoryEntry("node_0_1", ("a",), (), 0.1234567891, (0.1234567891,), 2e-30, (2e-30,))
    line = format_history_entry(h)
    assert "MSE before pruning=0.123457 (per-output=[0.1234567891])" in line
    assert "MSE after pruning=0.0 (per-output=[2e-30])" in line


def test_equation_lines():
    W = np.array([[0.009194, -0.004518], [-0.0004414, 0.9776]])
    lines = format_equation(["cancer_volume", "chemo_dosage"], W, ["dv_dt", "dc_dt"])
    assert lines == ["dv_dt = 0.009194 cancer_volume - 0.0004414 chemo_dosage",
                     "dc_dt = - 0.004518 cancer_volume + 0.9776 chemo_dosage"]


def test_cycle_recovers_exact_model_and_keeps_k():
    prob = toy_problem()
    prop = Scripted(["x", "z", "x * z", "np.sin(z)", "x**2", "np.exp(z)", "z**2"])
    res = run_cycle(prob, [], (), CycleConfig(keep_n_terms=3), prop, node_id="node_0_0")
    assert set(res.sources) == {"x", "x * z", "np.sin(z)"}
    assert res.val_mse < 1e-25
    assert res.history_entry.round == "node_0_0" and len(res.history_entry.drop) == 4
    assert prop.calls == [(PROPOSE, "node_0_0/propose/0")]


def test_refit_improves_train_fit_over_restricted_weights():
    prob = toy_problem()
    prop = Scripted(["x", "z", "x**2", "np.exp(z)"])
    res = run_cycle(prob, [], (), CycleConfig(keep_n_terms=2), prop, node_id="n")
    keep = [res.candidates.index(t) for t in res.terms]
    from sparsesr.data import evaluate_terms

    phi = evaluate_terms(res.terms, prob.dataset, ["train"])["train"].matrix
    Y = prob.Y("train")
    before = np.mean((Y - phi @ res.candidate_weights[keep]) ** 2)
    after = np.mean((Y - phi @ res.fit.W) ** 2)
    assert after <= before + 1e-12


def test_parent_terms_are_candidates_again():
    prob = toy_problem()
    res = run_cycle(prob, [Term.parse("x")], (), CycleConfig(), Scripted(["z"]), node_id="n")
    assert [t.source for t in res.candidates] == ["x", "z"]


def test_failed_replies_retry_then_fail():
    prob = toy_problem()
    prop = Scripted([])
    prop.complete = lambda prompt, **kw: prop.calls.append(kw["call_id"]) or "nothing useful"
    with pytest.raises(CycleFailed):
        run_cycle(prob, [], (), CycleConfig(propose_retries=2), prop, node_id="n")
    assert prop.calls == ["n/propose/0", "n/propose/1", "n/propose/2"]


def test_all_terms_rejected_fails():
    with pytest.raises(CycleFailed):
        run_cycle(toy_problem(), [], (), CycleConfig(), Scripted(["np.log(z)", "w"]), node_id="n")


def test_exact_multiples_collapse_to_simplest():
    prob = toy_problem()
    res = run_cycle(prob, [], (), CycleConfig(), Scripted(["2 * x * z", "x * z", "x"]), node_id="n")
    assert "x * z" in res.sources and "2 * x * z" not in res.sources
    assert "exact multiple" in res.rejected["2 * x * z"]
    cols = np.column_stack([np.arange(4.0), 3 * np.arange(4.0), np.ones(4)])
    terms = [Term.parse(s) for s in ["x**2", "x", "z"]]
    assert equivalent_columns(terms, cols) == {0: 1}


def test_agentic_prune_uses_decision_and_limit():
    prob = toy_problem()
    decision = render_decision_block(["x", "x * z", "z"], ["np.sin(z)"])
    prop = Scripted(["x", "x * z", "z", "np.sin(z)"], decision)
    res = run_cycle(prob, [], (), CycleConfig(pruning=AGENTIC, keep_n_terms=2), prop, node_id="n")
    assert set(res.sources) == {"x", "x * z"}
    assert any("truncated by influence" in w for w in res.warnings)
    assert ("prune", "n/prune/0") in prop.calls


def test_refit_influence_variant_runs():
    res = run_cycle(toy_problem(), [], (), CycleConfig(influence=REFIT_FULL, keep_n_terms=3),
                    Scripted(["x", "z", "x * z", "np.sin(z)"]), node_id="n")
    assert res.influence.variant == REFIT_FULL


def test_nested_validation_reads_inner_then_outer():
    from sparsesr.data import nest_validation

    prob = toy_problem()
    prob = Problem(nest_validation(prob.dataset, 0.5, 0), "toy")
    cfg = CycleConfig(nested=True)
    assert cfg.prune_split == "val_inner" and cfg.reward_split == "val_outer"
    res = run_cycle(prob, [], (), cfg, Scripted(["x", "x * z", "np.sin(z)"]), node_id="n")
    assert res.val_mse < 1e-25


def test_tlo_tunes_constant_and_is_monotone():
    d = gen_rational(0)
    res = tlo_optimize([Term.parse("1 / (x_1**2 + c(0.5))"), Term.parse("x_1")], d)
    assert abs(res.terms[0].params[0] - 0.123) < 1e-6
    assert res.objective <= res.initial_objective
    assert all(b <= a * (1 + 1e-9) + 1e-300 for a, b in zip(res.trace, res.trace[1:]))


def test_tlo_drops_terms_nonfinite_at_start():
    d = gen_rational(0)
    res = tlo_optimize([Term.parse("1 / (x_1**2 + c(0.5))"), Term.parse("np.log(x_1)")], d)
    assert "np.log(x_1)" in res.dropped


def test_cycle_is_deterministic_without_tlo():
    prob = toy_problem()
    a = run_cycle(prob, [], (), CycleConfig(), GrammarProposer(4), node_id="n")
    b = run_cycle(prob, [], (), CycleConfig(), GrammarProposer(4), node_id="n")
    assert a.sources == b.sources and np.array_equal(a.fit.W, b.fit.W)
