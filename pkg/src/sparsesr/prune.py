"""Keep/drop decisions: deterministic ranking and the DECISION wire format."""

from __future__ import annotations

import ast
import json
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

TOP_K = "top_k"
THRESHOLD = "threshold"
AGENTIC = "agentic"


class DecisionError(ValueError):
    pass


@dataclass(frozen=True)
class PruneDecision:
    keep: list[str]
    drop: list[str]
    mode: str
    warnings: list[str] = field(default_factory=list)


def _rank_order(scores: np.ndarray) -> list[int]:
    # Stable sort on -score keeps earlier candidates ahead on ties.
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def prune_deterministic(
    terms: Sequence[str],
    scores,
    mode: str = TOP_K,
    k: int | None = 6,
    eps: float = 0.0,
) -> PruneDecision:
    """Keep the ``k`` highest-scoring terms (``k=None`` keeps all) or those above ``eps``."""
    scores = np.asarray(scores, dtype=float)
    if len(terms) != len(scores):
        raise ValueError(f"{len(terms)} terms but {len(scores)} scores")
    if mode == TOP_K:
        if k is not None and k < 1:
            raise ValueError("k must be at least 1")
        chosen = set(_rank_order(scores)[: len(terms) if k is None else k])
    elif mode == THRESHOLD:
        chosen = {i for i, s in enumerate(scores) if s > eps}
    else:
        raise ValueError(f"unknown pruning mode '{mode}'")
    keep = [t for i, t in enumerate(terms) if i in chosen]
    drop = [t for i, t in enumerate(terms) if i not in chosen]
    return PruneDecision(keep, drop, mode)


# ---------------------------------------------------------------------------
# DECISION block

_DECISION_RE = re.compile(r"DECISION\s*(`{3,})[^\n]*\n(.*?)\n\s*`{3,}", re.DOTALL)


def _strip_comments(text: str) -> str:
    out = []
    for line in text.splitlines():
        quote = None
        escaped = False
        cut = len(line)
        for i, ch in enumerate(line):
            if quote:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == quote:
                    quote = None
            elif ch in "\"'":
                quote = ch
            elif ch == "#":
                cut = i
                break
        out.append(line[:cut])
    return "\n".join(out)


def _load_mapping(body: str) -> dict:
    body = _strip_comments(body).strip()
    if body.startswith("{{") and body.endswith("}}"):
        body = body[1:-1].strip()
    body = re.sub(r",(\s*[\]}])", r"\1", body)
    try:
        value = json.loads(body)
    except json.JSONDecodeError:
        try:
            value = ast.literal_eval(body)
        except (ValueError, SyntaxError) as exc:
            raise DecisionError(f"DECISION block is not a mapping: {exc}") from None
    if not isinstance(value, dict):
        raise DecisionError("DECISION block is not a mapping")
    return value


def _term_list(mapping: dict, key: str) -> list[str]:
    if key not in mapping:
        raise DecisionError(f"DECISION block has no '{key}' key")
    value = mapping[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise DecisionError(f"'{key}' must be a list of strings")
    return [v.strip() for v in value]


def parse_decision_block(text: str, candidates: Sequence[str] | None = None) -> PruneDecision:
    """Parse the first ``DECISION`` fenced block of a pruner reply.

    With ``candidates`` the partition is checked against the candidate list:
    every candidate must appear in exactly one of keep/drop and no unknown
    names are allowed.
    """
    blocks = _DECISION_RE.findall(text)
    if not blocks:
        raise DecisionError("no DECISION block found")
    warnings = []
    if len(blocks) > 1:
        warnings.append(f"{len(blocks)} DECISION blocks found; using the first")
    mapping = _load_mapping(blocks[0][1])
    keep = _term_list(mapping, "keep")
    drop = _term_list(mapping, "drop")
    both = [t for t in keep if t in set(drop)]
    if both:
        raise DecisionError(f"terms listed in both keep and drop: {both}")
    if candidates is not None:
        cand = [c.strip() for c in candidates]
        unknown = [t for t in keep + drop if t not in set(cand)]
        if unknown:
            raise DecisionError(f"unknown terms in DECISION: {unknown}")
        listed = set(keep) | set(drop)
        missing = [c for c in cand if c not in listed]
        if missing:
            raise DecisionError(f"terms missing from DECISION: {missing}")
    return PruneDecision(keep, drop, AGENTIC, warnings)


def render_decision_block(keep: Sequence[str], drop: Sequence[str]) -> str:
    body = json.dumps({"keep": list(keep), "drop": list(drop)}, indent=4)
    return f"DECISION\n```\n{body}\n```"


def enforce_keep_limit(
    decision: PruneDecision, terms: Sequence[str], scores, k: int | None
) -> PruneDecision:
    """Truncate an over-long agentic keep list to the ``k`` highest-scoring terms."""
    if k is None or len(decision.keep) <= k:
        return decision
    index = {t: i for i, t in enumerate(terms)}
    scores = np.asarray(scores, dtype=float)
    ranked = sorted(decision.keep, key=lambda t: (-scores[index[t]], index[t]))
    kept = set(ranked[:k])
    keep = [t for t in decision.keep if t in kept]
    drop = list(decision.drop) + [t for t in decision.keep if t not in kept]
    note = f"pruner kept {len(decision.keep)} terms, limit is {k}; truncated by influence"
    return PruneDecision(keep, drop, decision.mode, list(decision.warnings) + [note])
