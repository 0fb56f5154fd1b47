"""One propose-and-prune cycle, the history buffer and term-local constant tuning."""

from __future__ import annotations

import ast
import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import TEST, TRAIN, VAL, VAL_INNER, VAL_OUTER, AllTermsRejected, Dataset, evaluate_terms
from .exprlang import ExprError, Term
from .influence import NO_REFIT, InfluenceReport, aggregate_influence, compute_influence
from .linfit import LinearFit, evaluate_mse, fit_linear
from .propose import (
    PROPOSE,
    PRUNE,
    BudgetExceeded,
    Proposer,
    ProposerContext,
    ProposerError,
    PruneFeedback,
    TermsBlockError,
    format_mse_list,
    format_mse_overall,
    format_preview,
    parse_terms_block,
    render_prompt,
)
from .prune import AGENTIC, TOP_K, DecisionError, PruneDecision, enforce_keep_limit, parse_decision_block, prune_deterministic

log = logging.getLogger(__name__)


class CycleFailed(RuntimeError):
    """A cycle produced no usable equation."""


# ---------------------------------------------------------------------------
# history


@dataclass(frozen=True)
class HistoryEntry:
    round: str
    keep: tuple[str, ...]
    drop: tuple[str, ...]
    mse_before: float
    mse_before_per_output: tuple[float, ...]
    mse_after: float
    mse_after_per_output: tuple[float, ...]


def format_history_entry(h: HistoryEntry) -> str:
    return (
        f"Round {h.round}:  KEEP={list(h.keep)!r}  |  DROP={list(h.drop)!r}  |  "
        f"MSE before pruning={format_mse_overall(h.mse_before)} "
        f"(per-output={format_mse_list(h.mse_before_per_output)}) |  "
        f"MSE after pruning={format_mse_overall(h.mse_after)} "
        f"(per-output={format_mse_list(h.mse_after_per_output)})"
    )


_HISTORY_RE = re.compile(
    r"^Round (?P<round>\S+):  KEEP=(?P<keep>\[.*?\])  \|  DROP=(?P<drop>\[.*?\])  \|  "
    r"MSE before pruning=(?P<b>\S+) \(per-output=(?P<bp>\[[^\]]*\])\) \|  "
    r"MSE after pruning=(?P<a>\S+) \(per-output=(?P<ap>\[[^\]]*\])\)$"
)


def parse_history_entry(line: str) -> HistoryEntry:
    m = _HISTORY_RE.match(line.strip())
    if not m:
        raise ValueError("not a history line")
    lit = ast.literal_eval
    return HistoryEntry(
        round=m["round"],
        keep=tuple(lit(m["keep"])),
        drop=tuple(lit(m["drop"])),
        mse_before=float(m["b"]),
        mse_before_per_output=tuple(float(v) for v in lit(m["bp"])),
        mse_after=float(m["a"]),
        mse_after_per_output=tuple(float(v) for v in lit(m["ap"])),
    )


def format_equation(sources: Sequence[str], W: np.ndarray, target_names: Sequence[str]) -> list[str]:
    """One ``target = w1 term1 + w2 term2 ...`` line per output, weights to 4 significant digits."""
    lines = []
    for m, name in enumerate(target_names):
        parts = []
        for k, src in enumerate(sources):
            w = float(W[k, m])
            mag = "%.4g" % abs(w)
            if not parts:
                parts.append(f"- {mag} {src}" if w < 0 else f"{mag} {src}")
            else:
                parts.append(f"{'-' if w < 0 else '+'} {mag} {src}")
        lines.append(f"{name} = " + " ".join(parts))
    return lines


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CycleConfig:
    keep_n_terms: int | None = 6
    terms_per_round: int = 5
    first_round_n_candidates: int = 10
    influence: str = NO_REFIT
    pruning: str = TOP_K
    prune_eps: float = 0.0
    ridge: float = 0.0
    tlo: bool = False
    tlo_maxiter: int = 200
    tlo_ftol: float = 1e-12
    tlo_gtol: float = 1e-8
    tlo_bounds: tuple[float | None, float | None] | None = None
    nested: bool = False
    simplified_prompts: bool = False
    data_preview: bool = True
    propose_retries: int = 2
    collapse_equivalent: bool = True

    @property
    def prune_split(self) -> str:
        return VAL_INNER if self.nested else VAL

    @property
    def reward_split(self) -> str:
        return VAL_OUTER if self.nested else VAL


@dataclass(frozen=True)
class Problem:
    dataset: Dataset
    description: str = ""

    @property
    def target_names(self) -> list[str]:
        return self.dataset.target_names

    def Y(self, split: str) -> np.ndarray:
        return self.dataset.target_matrix(split)


# ---------------------------------------------------------------------------
# term-local optimization


@dataclass(frozen=True)
class TloResult:
    terms: list[Term]
    theta: np.ndarray
    objective: float
    initial_objective: float
    trace: list[float]
    dropped: dict[str, str]
    converged: bool
    message: str


def _central_gradient(f, theta: np.ndarray) -> np.ndarray:
    g = np.empty_like(theta)
    for i in range(len(theta)):
        h = max(1e-6, 1e-6 * abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def tlo_optimize(
    terms: Sequence[Term],
    dataset: Dataset,
    train: str = TRAIN,
    val: str = VAL,
    lam: float = 0.0,
    maxiter: int = 200,
    ftol: float = 1e-12,
    gtol: float = 1e-8,
    bounds: tuple[float | None, float | None] | None = None,
) -> TloResult:
    """Tune every ``c(...)`` marker to minimize validation MSE of the train-refit model.

    Each objective evaluation rebuilds the parametric columns and refits the
    outer weights on ``train``. Terms that are not finite at their initial
    marker values are dropped with a reason.
    """
    Ytr, Yva = dataset.target_matrix(train), dataset.target_matrix(val)
    ftr, fva = dataset.frame(train), dataset.frame(val)
    dropped: dict[str, str] = {}
    fixed_tr, fixed_va, param_terms, survivors = [], [], [], []
    for t in terms:
        try:
            ctr, cva = t.evaluate(ftr), t.evaluate(fva)
        except ExprError as exc:
            dropped[t.source] = str(exc)
            continue
        if not (np.all(np.isfinite(ctr)) and np.all(np.isfinite(cva))):
            reason = "non-finite at initial marker values" if t.n_params else "non-finite"
            dropped[t.source] = reason
            continue
        survivors.append(t)
        if t.n_params:
            param_terms.append(t)
        else:
            fixed_tr.append(ctr)
            fixed_va.append(cva)

    theta0 = np.array([v for t in param_terms for v in t.params], dtype=float)
    sizes = [t.n_params for t in param_terms]

    def split(theta):
        out, i = [], 0
        for s in sizes:
            out.append(theta[i:i + s])
            i += s
        return out

    def objective(theta) -> float:
        cols_tr, cols_va = list(fixed_tr), list(fixed_va)
        for t, th in zip(param_terms, split(theta)):
            cols_tr.append(t.evaluate(ftr, th))
            cols_va.append(t.evaluate(fva, th))
        Ptr, Pva = np.column_stack(cols_tr), np.column_stack(cols_va)
        if not (np.all(np.isfinite(Ptr)) and np.all(np.isfinite(Pva))):
            return 1e100
        W = fit_linear(Ptr, Ytr, lam).W
        return float(np.mean((Yva - Pva @ W) ** 2))

    if not survivors:
        return TloResult([], theta0, float("nan"), float("nan"), [], dropped, True, "no terms")
    j0 = objective(theta0)
    if len(theta0) == 0:
        return TloResult(list(survivors), theta0, j0, j0, [j0], dropped, True, "no markers")

    trace = [j0]
    res = optimize.minimize(
        objective,
        theta0,
        jac=lambda th: _central_gradient(objective, th),
        method="L-BFGS-B",
        bounds=[bounds] * len(theta0) if bounds else None,
        callback=lambda th: trace.append(objective(th)),
        options={"maxiter": maxiter, "ftol": ftol, "gtol": gtol},
    )
    theta, j = np.asarray(res.x, dtype=float), float(res.fun)
    if not np.isfinite(j) or j > j0:
        theta, j = theta0, j0
    tuned = {id(t): t.with_params(th) for t, th in zip(param_terms, split(theta))}
    out_terms = [tuned.get(id(t), t) for t in survivors]
    return TloResult(out_terms, theta, j, j0, trace, dropped, bool(res.success), str(res.message))


# ---------------------------------------------------------------------------
# the cycle


def _size(e) -> int:
    return 1 + sum(_size(c) for c in e.children)


def equivalent_columns(terms: Sequence[Term], phi: np.ndarray, rtol: float = 1e-12) -> dict[int, int]:
    """Map each redundant column to the simplest column it is an exact multiple of.

    Two basis functions that differ only by a constant factor on every row
    (``u**2`` and ``u`` for ``u`` in {0, 5}) describe the same model; the one
    with the smaller expression tree survives, the earlier one on ties.
    """
    p = phi.shape[1]
    order = sorted(range(p), key=lambda j: (_size(terms[j].ast), j))
    kept: list[int] = []
    mapping: dict[int, int] = {}
    for j in order:
        b = phi[:, j]
        scale = np.max(np.abs(b))
        for i in kept:
            a = phi[:, i]
            aa = float(a @ a)
            if aa == 0.0 or scale == 0.0:
                continue
            s = float(a @ b) / aa
            if np.max(np.abs(b - s * a)) <= rtol * scale:
                mapping[j] = i
                break
        else:
            kept.append(j)
    return mapping


@dataclass(frozen=True)
class CycleResult:
    node_id: str
    terms: list[Term]
    fit: LinearFit
    val_mse_per_output: np.ndarray
    val_mse: float
    candidates: list[Term]
    dropped: list[str]
    influence: InfluenceReport
    candidate_weights: np.ndarray
    history_entry: HistoryEntry
    rejected: dict[str, str]
    proposed: list[str]
    tlo: TloResult | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def sources(self) -> list[str]:
        return [t.source for t in self.terms]

    def equation(self, target_names: Sequence[str]) -> list[str]:
        return format_equation(self.sources, self.fit.W, target_names)


def build_context(
    problem: Problem,
    terms: Sequence[Term],
    history: Sequence[HistoryEntry],
    cfg: CycleConfig,
    best_equation: str,
    first_round: bool,
) -> ProposerContext:
    d = problem.dataset
    preview = None
    if cfg.data_preview and not cfg.simplified_prompts:
        tr = d.mask(TRAIN)
        preview = format_preview(d.frame(TRAIN), {k: v[tr] for k, v in d.targets.items()})
    return ProposerContext(
        description=problem.description,
        current_terms=tuple(t.source for t in terms),
        current_equation=best_equation,
        history=tuple(format_history_entry(h) for h in history),
        preview=preview,
        terms_per_round=cfg.terms_per_round,
        first_round_n_candidates=cfg.first_round_n_candidates,
        first_round=first_round,
        keep_n_terms=cfg.keep_n_terms,
        feature_names=tuple(d.feature_names),
        train_frame=d.frame(TRAIN),
        tunable=cfg.tlo,
        simplified=cfg.simplified_prompts,
    )


def _propose(proposer: Proposer, ctx: ProposerContext, cfg: CycleConfig, call_prefix: str, warnings: list[str]):
    last = None
    prompt = render_prompt(PROPOSE, ctx)
    for attempt in range(cfg.propose_retries + 1):
        call_id = f"{call_prefix}/propose/{attempt}"
        try:
            reply = proposer.complete(prompt, kind=PROPOSE, ctx=ctx, call_id=call_id)
            parsed = parse_terms_block(reply)
        except BudgetExceeded:
            raise
        except (ProposerError, TermsBlockError) as exc:
            last = exc
            warnings.append(f"{call_id}: {exc}")
            continue
        warnings.extend(parsed.warnings)
        return parsed
    raise CycleFailed(f"proposer failed after {cfg.propose_retries + 1} attempts: {last}")


def _agentic_prune(proposer, ctx, feedback, scores, cfg, call_prefix, warnings) -> PruneDecision:
    prompt = render_prompt(PRUNE, ctx, feedback)
    last = None
    for attempt in range(cfg.propose_retries + 1):
        call_id = f"{call_prefix}/prune/{attempt}"
        try:
            reply = proposer.complete(prompt, kind=PRUNE, ctx=ctx, call_id=call_id)
            decision = parse_decision_block(reply, list(feedback.terms))
        except BudgetExceeded:
            raise
        except (ProposerError, DecisionError) as exc:
            last = exc
            warnings.append(f"{call_id}: {exc}")
            continue
        decision = enforce_keep_limit(decision, list(feedback.terms), scores, cfg.keep_n_terms)
        warnings.extend(decision.warnings)
        return decision
    raise CycleFailed(f"pruner failed after {cfg.propose_retries + 1} attempts: {last}")


def run_cycle(
    problem: Problem,
    terms: Sequence[Term],
    history: Sequence[HistoryEntry],
    cfg: CycleConfig,
    proposer: Proposer,
    *,
    node_id: str,
    call_prefix: str | None = None,
    best_equation: str = "None",
    first_round: bool | None = None,
) -> CycleResult:
    """Propose, fit, score, prune and refit once.

    ``terms`` and ``history`` describe the parent state; the result carries
    the child's kept terms, weights, validation MSE and new history entry.
    """
    d = problem.dataset
    call_prefix = call_prefix or node_id
    first_round = (not terms) if first_round is None else first_round
    warnings: list[str] = []

    ctx = build_context(problem, terms, history, cfg, best_equation, first_round)
    parsed = _propose(proposer, ctx, cfg, call_prefix, warnings)
    rejected = dict(parsed.rejected)

    candidates: list[Term] = []
    forms = set()
    for t in list(terms) + parsed.terms:
        if t.form not in forms:
            forms.add(t.form)
            candidates.append(t)
    if not candidates:
        raise CycleFailed("no candidate terms")

    tlo = None
    if cfg.tlo:
        tlo = tlo_optimize(candidates, d, TRAIN, cfg.prune_split, cfg.ridge,
                           cfg.tlo_maxiter, cfg.tlo_ftol, cfg.tlo_gtol, cfg.tlo_bounds)
        rejected.update(tlo.dropped)
        candidates = tlo.terms
        if not candidates:
            raise CycleFailed("all candidate terms rejected")

    splits = list(dict.fromkeys([TRAIN, cfg.prune_split, cfg.reward_split]))
    present = [s for s, n in d.split_sizes().items() if n > 0]
    try:
        mats = evaluate_terms(candidates, d, splits, check_splits=list(dict.fromkeys([TRAIN, VAL, TEST] + present)))
    except AllTermsRejected as exc:
        raise CycleFailed("all candidate terms rejected") from exc
    rejected.update(mats[TRAIN].rejected)
    candidates = mats[TRAIN].terms
    if cfg.collapse_equivalent and len(candidates) > 1:
        stacked = np.vstack([mats[s].matrix for s in splits])
        redundant = equivalent_columns(candidates, stacked)
        if redundant:
            for j, i in redundant.items():
                rejected[candidates[j].source] = f"exact multiple of '{candidates[i].source}' on the data"
            keep = [j for j in range(len(candidates)) if j not in redundant]
            mats = {s: mats[s].subset(keep) for s in splits}
            candidates = mats[TRAIN].terms
    sources = [t.source for t in candidates]

    Ytr = problem.Y(TRAIN)
    Yp = problem.Y(cfg.prune_split)
    fit = fit_linear(mats[TRAIN], Ytr, cfg.ridge)
    report = compute_influence(
        fit, mats[cfg.prune_split], Yp, cfg.influence,
        phi_train=mats[TRAIN], Y_train=Ytr, lam=cfg.ridge, terms=sources,
    )
    warnings.extend(report.notes)
    scores = aggregate_influence(report)

    if cfg.pruning == AGENTIC:
        feedback = PruneFeedback(tuple(sources), fit.W, report.delta, tuple(problem.target_names),
                                 tuple(float(v) for v in report.mse_full))
        pctx = ProposerContext(**{**ctx.__dict__, "current_terms": tuple(sources),
                                  "candidates": tuple(sources), "scores": tuple(float(s) for s in scores)})
        decision = _agentic_prune(proposer, pctx, feedback, scores, cfg, call_prefix, warnings)
    else:
        decision = prune_deterministic(sources, scores, cfg.pruning, cfg.keep_n_terms, cfg.prune_eps)
    if not decision.keep:
        raise CycleFailed("pruning kept no terms")

    index = {s: i for i, s in enumerate(sources)}
    keep_idx = [index[s] for s in sources if s in set(decision.keep)]
    kept_terms = [candidates[i] for i in keep_idx]
    final = fit_linear(mats[TRAIN].matrix[:, keep_idx], Ytr, cfg.ridge)
    per, overall = evaluate_mse(final, mats[cfg.reward_split].matrix[:, keep_idx], problem.Y(cfg.reward_split))

    drop = [s for s in sources if s not in set(decision.keep)]
    entry = HistoryEntry(
        round=node_id,
        keep=tuple(candidates[i].source for i in keep_idx),
        drop=tuple(drop),
        mse_before=float(np.mean(report.mse_full)),
        mse_before_per_output=tuple(float(v) for v in report.mse_full),
        mse_after=overall,
        mse_after_per_output=tuple(float(v) for v in per),
    )
    return CycleResult(
        node_id=node_id,
        terms=kept_terms,
        fit=final,
        val_mse_per_output=per,
        val_mse=overall,
        candidates=list(candidates),
        dropped=drop,
        influence=report,
        candidate_weights=fit.W,
        history_entry=entry,
        rejected=rejected,
        proposed=[t.source for t in parsed.terms],
        tlo=tlo,
        warnings=warnings,
    )


def heldout_mse(terms: Sequence[Term], fit: LinearFit, dataset: Dataset) -> tuple[np.ndarray, float]:
    mats = evaluate_terms(list(terms), dataset, [TEST])
    return evaluate_mse(fit, mats[TEST].matrix, dataset.target_matrix(TEST))


__all__ = [
    "CycleConfig", "CycleFailed", "CycleResult", "HistoryEntry", "Problem", "TloResult",
    "build_context", "equivalent_columns", "format_equation", "format_history_entry", "parse_history_entry",
    "heldout_mse", "run_cycle", "tlo_optimize",
]

