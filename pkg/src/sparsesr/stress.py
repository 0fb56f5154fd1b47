"""Pruning stress protocols over fixed candidate pools.

Each run fits the whole pool on train, scores influence on validation,
keeps the top K by max-over-outputs influence and refits on the kept terms.
"""

from __future__ import annotations

import csv
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import TEST, TRAIN, VAL, evaluate_terms
from .exprlang import Term
from .influence import NO_REFIT, aggregate_influence, compute_influence
from .linfit import evaluate_mse, fit_linear
from .prune import prune_deterministic
from .simgen import StressData, gen_collinearity, gen_epistasis


@dataclass(frozen=True)
class PoolOutcome:
    kept: list[str]
    scores: dict[str, float]
    ranking: list[str]
    test_mse: float
    seconds: float


def prune_pool(sd: StressData, k: int, variant: str = NO_REFIT, lam: float = 0.0) -> PoolOutcome:
    terms = [Term.parse(s) for s in sd.pool]
    mats = evaluate_terms(terms, sd.dataset, [TRAIN, VAL, TEST])
    Ytr, Yva, Yte = (sd.dataset.target_matrix(s) for s in (TRAIN, VAL, TEST))
    sources = mats[TRAIN].sources
    start = time.perf_counter()
    fit = fit_linear(mats[TRAIN], Ytr, lam)
    rep = compute_influence(fit, mats[VAL], Yva, variant, phi_train=mats[TRAIN], Y_train=Ytr, lam=lam, terms=sources)
    scores = aggregate_influence(rep)
    decision = prune_deterministic(sources, scores, k=k)
    seconds = time.perf_counter() - start
    idx = [sources.index(s) for s in decision.keep]
    final = fit_linear(mats[TRAIN].matrix[:, idx], Ytr, lam)
    _, test = evaluate_mse(final, mats[TEST].matrix[:, idx], Yte)
    ranking = [sources[i] for i in sorted(range(len(sources)), key=lambda i: (-scores[i], i))]
    return PoolOutcome(decision.keep, dict(zip(sources, map(float, scores))), ranking, test, seconds)


@dataclass(frozen=True)
class CollinearityRow:
    rho: float
    seed: int
    variant: str
    group_recall: int
    n_groups: int
    duplicate_groups: int
    test_mse: float
    seconds: float
    kept: str


def run_collinearity(rho: float, seeds: Sequence[int], variant: str = NO_REFIT, k: int = 6,
                     n_patients: int = 200) -> list[CollinearityRow]:
    rows = []
    for seed in seeds:
        sd = gen_collinearity(rho, seed, n_patients)
        out = prune_pool(sd, k, variant)
        covered: dict[int, int] = {}
        for t in out.kept:
            g = sd.groups.get(t)
            if g is not None:
                covered[g] = covered.get(g, 0) + 1
        n_groups = len(set(sd.groups.values()))
        rows.append(CollinearityRow(rho, seed, variant, len(covered), n_groups,
                                    sum(1 for v in covered.values() if v > 1), out.test_mse, out.seconds,
                                    "; ".join(out.kept)))
    return rows


@dataclass(frozen=True)
class EpistasisRow:
    experiment: int
    seed: int
    variant: str
    signal_ranks: str
    all_retained: bool
    top_ranked: bool
    test_mse: float
    max_marginal_influence: float
    seconds: float


MARGINALS = {1: ["x1", "x2"], 2: ["x1", "x2", "x3", "x4"]}


def run_epistasis(experiment: int, seeds: Sequence[int], variant: str = NO_REFIT,
                  n_per_split: int = 2000) -> list[EpistasisRow]:
    rows = []
    k = experiment
    for seed in seeds:
        sd = gen_epistasis(experiment, seed, n_per_split)
        out = prune_pool(sd, k, variant)
        ranks = [out.ranking.index(s) + 1 for s in sd.signal]
        marg = max(abs(out.scores[m]) for m in MARGINALS[experiment])
        rows.append(EpistasisRow(experiment, seed, variant, " ".join(map(str, ranks)),
                                 all(s in out.kept for s in sd.signal), sorted(ranks) == list(range(1, k + 1)),
                                 out.test_mse, marg, out.seconds))
    return rows


def write_rows(rows: Sequence, path: str | Path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = list(asdict(rows[0]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})


def mean(values) -> float:
    return float(np.mean(list(values)))
