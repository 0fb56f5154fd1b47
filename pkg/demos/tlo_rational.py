"""Tune the constant inside 1 / (x_1**2 + c) with term-local optimization."""

from sparsesr import GrammarProposer, Problem, SearchConfig, run_search
from sparsesr.engine import CycleConfig
from sparsesr.search import ITERATIVE
from sparsesr.simgen import TLO_POOL, describe, gen_rational

for seed in range(3):
    cfg = SearchConfig(mode=ITERATIVE, total_budget=10, cycle=CycleConfig(tlo=True))
    res = run_search(Problem(gen_rational(seed), describe("rational")), cfg, GrammarProposer(seed, TLO_POOL, 0.3))
    tuned = [t.source for t in res.best.terms if t.n_params]
    print(f"seed {seed}: test MSE {res.best_test_mse:.2e}, tuned terms {tuned}")
