"""Term proposers, prompt rendering and the TERMS wire format.

Every proposer implements ``complete(prompt, *, kind, ctx, call_id) -> str``
and returns raw reply text, so an HTTP model, the offline grammar sampler and
a recorded transcript are interchangeable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from ._rng import rng_for
from .exprlang import ExprError, Term

log = logging.getLogger(__name__)

PROPOSE = "propose"
PRUNE = "prune"
API_KEY_ENV = "IGSR_LLM_API_KEY"
PREVIEW_ROWS = 5


class ProposerError(RuntimeError):
    """The proposer could not produce a reply."""


class BudgetExceeded(ProposerError):
    """The run-level token budget has been spent."""


class TermsBlockError(ValueError):
    pass


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class ProposerContext:
    description: str
    current_terms: tuple[str, ...] = ()
    current_equation: str = "None"
    history: tuple[str, ...] = ()
    preview: str | None = None
    terms_per_round: int = 5
    first_round_n_candidates: int = 10
    first_round: bool = True
    keep_n_terms: int | None = 6
    feature_names: tuple[str, ...] = ()
    train_frame: Mapping[str, np.ndarray] | None = field(default=None, compare=False, repr=False)
    tunable: bool = False
    simplified: bool = False
    # Prune-only feedback: candidate sources and their aggregate influence.
    candidates: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()

    @property
    def n_requested(self) -> int:
        return self.first_round_n_candidates if self.first_round else self.terms_per_round


# ---------------------------------------------------------------------------
# templates and tables


def load_template(name: str) -> str:
    return resources.files("sparsesr.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def _fill(template: str, values: Mapping[str, object]) -> str:
    needed = {f for _, f, _, _ in string.Formatter().parse(template) if f}
    missing = needed - set(values)
    if missing:
        raise KeyError(f"unresolved placeholder(s): {sorted(missing)}")
    return template.format(**{k: values[k] for k in needed})


def _afterpoint(text: str) -> int:
    try:
        int(text)
        return -1
    except ValueError:
        pass
    pos = text.rfind(".")
    if pos < 0:
        pos = text.lower().rfind("e")
    return len(text) - pos - 1 if pos >= 0 else -1


def _decimal_align(cells: list[str]) -> list[str]:
    points = [_afterpoint(c) for c in cells]
    most = max(points)
    return [c + " " * (most - p) for c, p in zip(cells, points)]


def render_pipe_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Markdown pipe table: first column left-aligned text, the rest decimal-aligned numbers."""
    columns = []
    for j, h in enumerate(headers):
        raw = [r[j] for r in rows]
        if j == 0:
            cells = [str(v) for v in raw]
        else:
            cells = _decimal_align([format(float(v), "g") for v in raw])
        width = max([len(c) for c in cells] + [len(h) + 2])
        if j == 0:
            cells = [c.ljust(width) for c in cells]
            head = h.ljust(width)
            rule = ":" + "-" * (width + 1)
        else:
            cells = [c.rjust(width) for c in cells]
            head = h.rjust(width)
            rule = "-" * (width + 1) + ":"
        columns.append((head, rule, cells))
    lines = ["| " + " | ".join(c[0] for c in columns) + " |"]
    lines.append("|" + "|".join(c[1] for c in columns) + "|")
    for i in range(len(rows)):
        lines.append("| " + " | ".join(c[2][i] for c in columns) + " |")
    return "\n".join(lines)


def render_influence_tables(
    terms: Sequence[str], W: np.ndarray, delta: np.ndarray, target_names: Sequence[str]
) -> str:
    """One ``term | weight | influence`` table per output, each headed by the target name."""
    blocks = []
    for m, name in enumerate(target_names):
        rows = [(t, W[k, m], delta[k, m]) for k, t in enumerate(terms)]
        blocks.append(f"{name}:\n" + render_pipe_table(["term", "weight", "influence"], rows))
    return "\n\n".join(blocks)


def format_mse_overall(x: float) -> str:
    return str(round(float(x), 6))


def format_mse_list(values) -> str:
    return str([float(v) for v in values])


def format_preview(frame: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray], rows: int = PREVIEW_ROWS) -> str:
    names = list(frame) + list(targets)
    cols = [frame[k] for k in frame] + [targets[k] for k in targets]
    n = min(rows, len(cols[0])) if cols else 0
    body = [[f"{float(c[i]):.6g}" for c in cols] for i in range(n)]
    widths = [max([len(h)] + [len(r[j]) for r in body]) for j, h in enumerate(names)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(names, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


@dataclass(frozen=True)
class PruneFeedback:
    terms: tuple[str, ...]
    W: np.ndarray
    delta: np.ndarray
    target_names: tuple[str, ...]
    mse_per_output: tuple[float, ...]

    @property
    def mse_overall(self) -> float:
        return float(np.mean(self.mse_per_output))


def render_prompt(kind: str, ctx: ProposerContext, feedback: PruneFeedback | None = None) -> str:
    common = {
        "dataset_and_problem_description": ctx.description,
        "current_terms": str(list(ctx.current_terms)),
        "current_equation": ctx.current_equation,
        "history": "\n".join(ctx.history),
    }
    suffix = "_simple" if ctx.simplified else ""
    if kind == PROPOSE:
        values = dict(common, terms_per_round=ctx.terms_per_round,
                      first_round_n_candidates=ctx.first_round_n_candidates,
                      input_preview=ctx.preview or "")
        text = _fill(load_template(PROPOSE + suffix), values)
        if ctx.tunable:
            text += load_template("tlo_note")
        return text
    if kind == PRUNE:
        if feedback is None:
            raise ValueError("prune prompts need influence feedback")
        values = dict(
            common,
            keep_n_terms=ctx.keep_n_terms if ctx.keep_n_terms is not None else "any number of",
            input=render_influence_tables(feedback.terms, feedback.W, feedback.delta, feedback.target_names),
            mse_per_output=format_mse_list(feedback.mse_per_output),
            mse_overall=format_mse_overall(feedback.mse_overall),
        )
        return _fill(load_template(PRUNE + suffix), values)
    raise ValueError(f"unknown prompt kind '{kind}'")


# ---------------------------------------------------------------------------
# TERMS block

_TERMS_RE = re.compile(r"TERMS\s*```[^\n]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class ParsedTerms:
    terms: list[Term]
    rejected: dict[str, str]
    warnings: list[str] = field(default_factory=list)


def parse_terms_block(text: str) -> ParsedTerms:
    """Terms from the first ``TERMS`` fenced block; unparseable lines are rejected, not fatal."""
    blocks = _TERMS_RE.findall(text)
    if not blocks:
        # An empty block may close on the opening line's neighbour: TERMS\n```\n```
        if re.search(r"TERMS\s*```\s*```", text):
            return ParsedTerms([], {})
        raise TermsBlockError("no TERMS block found")
    warnings = [f"{len(blocks)} TERMS blocks found; using the first"] if len(blocks) > 1 else []
    terms, rejected = [], {}
    for line in blocks[0].splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            terms.append(Term.parse(line))
        except ExprError as exc:
            rejected[line] = str(exc)
    return ParsedTerms(terms, rejected, warnings)


def render_terms_block(sources: Sequence[str]) -> str:
    return "TERMS\n```\n" + "".join(f"{s}\n" for s in sources) + "```"


# ---------------------------------------------------------------------------
# grammar sampler


def grammar_terms(features: Sequence[str], tunable: bool = False) -> list[str]:
    """The enumerable term space the offline sampler draws from."""
    out = list(features)
    for i, a in enumerate(features):
        for b in features[i + 1:]:
            out.append(f"{a} * {b}")
    for a in features:
        out += [f"np.log({a} + 1)", f"np.sqrt({a})", f"{a}**2",
                f"np.sin({a})", f"np.cos({a})", f"np.exp({a})"]
    if tunable:
        for a in features:
            out += [f"np.exp(c(0.1) * {a})", f"np.sin(c(1.0) * {a})", f"1 / ({a}**2 + c(1.0))"]
    return out


def _finite_on(term: Term, frame: Mapping[str, np.ndarray] | None) -> bool:
    if frame is None:
        return True
    try:
        col = term.evaluate(frame)
    except ExprError:
        return False
    return bool(np.all(np.isfinite(col)))


def grammar_propose(
    seed: int,
    ctx: ProposerContext,
    n: int,
    pool: Sequence[str] | None = None,
    pool_prob: float = 1.0,
    call_id: str = "",
) -> list[Term]:
    """Sample up to ``n`` distinct terms, each finite on the context's train frame.

    Pool terms are offered first, each with probability ``pool_prob``; the
    rest are drawn uniformly from :func:`grammar_terms`. Terms already in the
    current model are never proposed again.
    """
    if n <= 0:
        return []
    rng = rng_for(seed, "grammar", call_id)
    seen = set()
    for s in ctx.current_terms:
        try:
            seen.add(Term.parse(s).form)
        except ExprError:
            pass
    chosen: list[Term] = []

    def offer(src: str) -> None:
        try:
            t = Term.parse(src)
        except ExprError:
            return
        if t.form in seen or not _finite_on(t, ctx.train_frame):
            return
        seen.add(t.form)
        chosen.append(t)

    for src in pool or ():
        draw = rng.random()
        if len(chosen) < n and draw < pool_prob:
            offer(src)
    space = grammar_terms(list(ctx.feature_names), tunable=ctx.tunable)
    for idx in rng.permutation(len(space)):
        if len(chosen) >= n:
            break
        offer(space[idx])
    return chosen


class Proposer(Protocol):
    def complete(self, prompt: str, *, kind: str, ctx: ProposerContext, call_id: str) -> str: ...


class GrammarProposer:
    """Offline stand-in for a language model.

    Propose calls return a TERMS block sampled by :func:`grammar_propose`;
    prune calls return a DECISION block keeping the highest-influence terms.
    """

    def __init__(self, seed: int, pool: Sequence[str] | None = None, pool_prob: float = 1.0):
        self.seed = int(seed)
        self.pool = list(pool or [])
        self.pool_prob = float(pool_prob)

    def complete(self, prompt: str, *, kind: str, ctx: ProposerContext, call_id: str) -> str:
        if kind == PROPOSE:
            terms = grammar_propose(self.seed, ctx, ctx.n_requested, self.pool, self.pool_prob, call_id)
            return render_terms_block([t.source for t in terms])
        if kind == PRUNE:
            from .prune import prune_deterministic, render_decision_block

            d = prune_deterministic(list(ctx.candidates), list(ctx.scores), k=ctx.keep_n_terms)
            return render_decision_block(d.keep, d.drop)
        raise ValueError(f"unknown call kind '{kind}'")


# ---------------------------------------------------------------------------
# HTTP client


class BudgetMeter:
    """Thread-safe running total of tokens against an optional cap."""

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def check(self) -> None:
        with self._lock:
            if self.budget is not None and self.total >= self.budget:
                raise BudgetExceeded(f"token budget {self.budget} exhausted ({self.total} used)")

    def add(self, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            self.prompt_tokens += max(0, int(prompt_tokens))
            self.completion_tokens += max(0, int(completion_tokens))

    def snapshot(self) -> dict:
        with self._lock:
            return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class LLMConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    temperature: float = 1.0
    max_retries: int = 5
    token_budget: int | None = 300_000
    timeout: float = 120.0
    backoff: float = 1.0


class LLMProposer:
    """Chat-completions client with retry, backoff and a shared token budget."""

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, config: LLMConfig, meter: BudgetMeter | None = None, transport=None, sleep=time.sleep):
        import httpx

        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise ProposerError(f"environment variable {API_KEY_ENV} is not set")
        self.config = config
        self.meter = meter or BudgetMeter(config.token_budget)
        self.retries_used = 0
        self._sleep = sleep
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=config.timeout,
            transport=transport,
        )
        self._httpx = httpx

    def chat(self, messages: list[dict]) -> ChatResponse:
        self.meter.check()
        body = {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}
        attempt = 0
        while True:
            try:
                resp = self._client.post("/chat/completions", json=body)
            except self._httpx.TransportError as exc:
                failure: str | None = f"transport error: {exc}"
            else:
                if resp.status_code in self.RETRY_STATUS:
                    failure = f"HTTP {resp.status_code}"
                elif resp.status_code >= 300:
                    raise ProposerError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    failure = None
            if failure is None:
                break
            if attempt >= self.config.max_retries:
                raise ProposerError(f"giving up after {attempt + 1} attempts ({failure})")
            delay = self.config.backoff * 2**attempt
            log.warning("chat request failed (%s); retry %d in %.1fs", failure, attempt + 1, delay)
            self._sleep(delay)
            attempt += 1
            self.retries_used += 1
        data = resp.json()
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProposerError("malformed chat-completions response") from None
        usage = data.get("usage") or {}
        out = ChatResponse(content or "", int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
        self.meter.add(out.prompt_tokens, out.completion_tokens)
        self.meter.check()
        return out

    def complete(self, prompt: str, *, kind: str, ctx: ProposerContext, call_id: str) -> str:
        return self.chat([{"role": "user", "content": prompt}]).content

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# transcripts


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ReplayProposer:
    """Serve replies from a recorded transcript.

    Entries are keyed by ``call_id``; the stored prompt hash guards against
    replaying a transcript into a run whose prompts have diverged.
    """

    def __init__(self, entries: Sequence[Mapping] | str | Path):
        if isinstance(entries, (str, Path)):
            entries = load_transcript(entries)
        self._by_id = {e["call_id"]: e for e in entries}

    def complete(self, prompt: str, *, kind: str, ctx: ProposerContext, call_id: str) -> str:
        entry = self._by_id.get(call_id)
        if entry is None:
            raise ProposerError(f"transcript has no reply for call '{call_id}'")
        if entry["prompt_sha256"] != prompt_hash(prompt):
            raise ProposerError(f"prompt for call '{call_id}' differs from the recorded one")
        return entry["reply"]


class RecordingProposer:
    """Wrap another proposer and keep every exchange for later replay."""

    def __init__(self, inner: Proposer):
        self.inner = inner
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()

    def complete(self, prompt: str, *, kind: str, ctx: ProposerContext, call_id: str) -> str:
        reply = self.inner.complete(prompt, kind=kind, ctx=ctx, call_id=call_id)
        with self._lock:
            self._entries[call_id] = {"call_id": call_id, "kind": kind,
                                      "prompt_sha256": prompt_hash(prompt), "reply": reply}
        return reply

    @property
    def entries(self) -> list[dict]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def save(self, path: str | Path) -> None:
        save_transcript(self.entries, path)


def save_transcript(entries: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def load_transcript(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "BudgetExceeded", "BudgetMeter", "GrammarProposer", "LLMConfig", "LLMProposer", "ParsedTerms",
    "Proposer", "ProposerContext", "ProposerError", "PruneFeedback", "RecordingProposer",
    "ReplayProposer", "format_mse_overall", "format_preview", "grammar_propose",
    "grammar_terms", "parse_terms_block", "render_influence_tables", "render_pipe_table",
    "render_prompt", "render_terms_block",
]
