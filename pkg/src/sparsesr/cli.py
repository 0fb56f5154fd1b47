"""Command-line entry points and run configuration."""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import simgen
from .data import (
    DataError,
    Dataset,
    load_table,
    nest_validation,
    split_dataset,
)
from .engine import CycleConfig, Problem
from .exprlang import ExprError
from .metrics import acc_at_tol, nmse, term_recall
from .propose import (
    GrammarProposer,
    LLMConfig,
    LLMProposer,
    ProposerError,
    RecordingProposer,
    ReplayProposer,
)
from .search import SearchConfig, SearchResult, run_search

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2  # argparse's own code for unknown flags and bad arguments
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_PROPOSER = 5
EXIT_NO_RESULT = 6

EXIT_CODES_HELP = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_UNEXPECTED}  unexpected internal error
  {EXIT_USAGE}  usage error (unknown flag, bad argument)
  {EXIT_CONFIG}  configuration file could not be read or is invalid
  {EXIT_DATA}  data could not be loaded or evaluated
  {EXIT_PROPOSER}  proposer failure (HTTP, missing API key, token budget, transcript mismatch)
  {EXIT_NO_RESULT}  the search finished without a single successful cycle
"""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    source: str = "simgen"  # "simgen" or "csv"
    path: str | None = None
    targets: list[str] = field(default_factory=list)
    generator: str = "pkpd"  # pkpd | synthetic | rational
    variant: str = simgen.CHEMO_RADIO
    synthetic_variant: int = 1
    patients: int = 100
    distractors: int = 0
    split: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    inner_fraction: float = 0.5
    description: str | None = None


@dataclass
class ProposerConfig:
    kind: str = "grammar"  # grammar | llm | replay
    pool: list[str] = field(default_factory=list)
    oracle_pool: bool = False
    pool_prob: float = 1.0
    transcript: str | None = None
    base_url: str = LLMConfig.base_url
    model: str = LLMConfig.model
    temperature: float = LLMConfig.temperature
    max_retries: int = LLMConfig.max_retries
    token_budget: int = 300_000
    timeout: float = LLMConfig.timeout


@dataclass
class RunConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    search: dict[str, Any] = field(default_factory=dict)
    cycle: dict[str, Any] = field(default_factory=dict)
    proposer: ProposerConfig = field(default_factory=ProposerConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, p = self.data, self.proposer
        if d.source == "csv":
            if not d.path:
                raise ConfigError("data.source = 'csv' needs data.path")
            if not d.targets:
                raise ConfigError("data.source = 'csv' needs data.targets")
        elif d.source == "simgen":
            if d.path:
                raise ConfigError("data.path is only valid with data.source = 'csv'")
            if d.generator not in ("pkpd", "synthetic", "rational"):
                raise ConfigError(f"unknown generator '{d.generator}'")
        else:
            raise ConfigError(f"data.source must be 'csv' or 'simgen', got '{d.source}'")
        if len(d.split) != 3 or any(f <= 0 for f in d.split) or not math.isclose(sum(d.split), 1.0):
            raise ConfigError("data.split must be three positive fractions summing to 1")
        if p.kind not in ("grammar", "llm", "replay"):
            raise ConfigError(f"proposer.kind must be grammar, llm or replay, got '{p.kind}'")
        if p.kind == "replay" and not p.transcript:
            raise ConfigError("proposer.kind = 'replay' needs proposer.transcript")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        try:
            self.search_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid search/cycle settings: {exc}") from None

    def cycle_config(self) -> CycleConfig:
        known = {f.name for f in fields(CycleConfig)}
        unknown = set(self.cycle) - known
        if unknown:
            raise ConfigError(f"unknown cycle keys: {sorted(unknown)}")
        kw = dict(self.cycle)
        if kw.get("keep_n_terms") == 0:
            kw["keep_n_terms"] = None
        if "tlo_bounds" in kw:
            lo, hi = kw["tlo_bounds"]
            kw["tlo_bounds"] = (None if math.isinf(lo) else lo, None if math.isinf(hi) else hi)
        return CycleConfig(**kw)

    def search_config(self, jobs: int | None = None) -> SearchConfig:
        known = {f.name for f in fields(SearchConfig)} - {"cycle"}
        unknown = set(self.search) - known
        if unknown:
            raise ConfigError(f"unknown search keys: {sorted(unknown)}")
        cfg = SearchConfig(**self.search, cycle=self.cycle_config())
        return replace(cfg, jobs=jobs) if jobs else cfg

    def to_dict(self) -> dict:
        """Every effective value, defaults included, in a TOML-safe form."""
        s = self.search_config()
        c = s.cycle
        search = {f.name: getattr(s, f.name) for f in fields(SearchConfig) if f.name != "cycle"}
        cycle = {f.name: getattr(c, f.name) for f in fields(CycleConfig)}
        if cycle["keep_n_terms"] is None:
            cycle["keep_n_terms"] = 0
        if cycle["tlo_bounds"] is None:
            del cycle["tlo_bounds"]
        else:
            lo, hi = cycle["tlo_bounds"]
            cycle["tlo_bounds"] = [-math.inf if lo is None else lo, math.inf if hi is None else hi]
        return {
            "seeds": list(self.seeds),
            "out": self.out,
            "data": _drop_none(asdict(self.data)),
            "search": search,
            "cycle": cycle,
            "proposer": _drop_none(asdict(self.proposer)),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        top = {"seeds", "out", "data", "search", "cycle", "proposer"}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        try:
            data = DataConfig(**raw.pop("data", {}))
            prop = ProposerConfig(**raw.pop("proposer", {}))
            return cls(data=data, proposer=prop, **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    d = cfg.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(tomli_w.dumps(d), encoding="utf-8")


def trace_schema() -> dict:
    from importlib.resources import files
    return json.loads(files("sparsesr").joinpath("trace.schema.json").read_text(encoding="utf-8"))


def validate_trace(path: str | Path) -> int:
    """Check every line of a trace file against the shipped schema; return the line count."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(trace_schema())
    n = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            validator.validate(json.loads(line))
    return n


# ---------------------------------------------------------------------------
# building a run


def build_dataset(cfg: RunConfig, seed: int) -> tuple[Dataset, str]:
    d = cfg.data
    if d.source == "csv":
        data = load_table(d.path, d.targets)
        if data.split is None:
            data = split_dataset(data, d.split, seed)
        desc = d.description or ""
    else:
        if d.generator == "pkpd":
            data = simgen.simulate_pkpd(d.variant, d.patients, seed=seed)
        elif d.generator == "synthetic":
            data = simgen.simulate_synthetic_variant(simgen.SyntheticSpec(d.synthetic_variant), d.patients, seed=seed)
        else:
            data = simgen.gen_rational(seed)
        if data.split is None:
            data = split_dataset(data, d.split, seed)
        desc = d.description if d.description is not None else simgen.describe(d.generator)
    if d.distractors:
        data = simgen.add_distractors(data, d.distractors, seed)
    if cfg.cycle_config().nested:
        data = nest_validation(data, d.inner_fraction, seed)
    return data, desc


def build_proposer(cfg: RunConfig, seed: int):
    p = cfg.proposer
    if p.kind == "grammar":
        pool = list(p.pool)
        if p.oracle_pool:
            pool += simgen.TLO_POOL if cfg.data.generator == "rational" else simgen.PKPD_ORACLE_POOL
        return GrammarProposer(seed, pool, p.pool_prob)
    if p.kind == "replay":
        return ReplayProposer(p.transcript)
    return LLMProposer(LLMConfig(p.base_url, p.model, p.temperature, p.max_retries, p.token_budget, p.timeout))


def write_run_outputs(result: SearchResult, problem: Problem, out: Path, seed: int, seconds: float,
                      started: str) -> None:
    summary = result.summary(problem.target_names)
    summary["seed"] = seed
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "best_equation.txt").write_text("".join(line + "\n" for line in result.equation), encoding="utf-8")
    timing = {"started_at": started, "wall_seconds": seconds}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")


def execute_run(cfg: RunConfig, seed: int, out: Path, jobs: int | None = None, record: Path | None = None
                ) -> SearchResult:
    out.mkdir(parents=True, exist_ok=True)
    data, desc = build_dataset(cfg, seed)
    problem = Problem(data, desc)
    proposer = build_proposer(cfg, seed)
    if record is not None:
        proposer = RecordingProposer(proposer)
    dump_config(cfg, out / "config.toml")
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        result = run_search(problem, cfg.search_config(jobs), proposer, out / "trace.jsonl")
    finally:
        if record is not None:
            proposer.save(record)
        close = getattr(getattr(proposer, "inner", proposer), "close", None)
        if close:
            close()
    write_run_outputs(result, problem, out, seed, time.perf_counter() - t0, started)
    return result


# ---------------------------------------------------------------------------
# subcommands


def _seeds_and_dirs(cfg: RunConfig, args) -> list[tuple[int, Path]]:
    out = Path(args.out or cfg.out)
    if args.seed is not None:
        return [(args.seed, out)]
    if len(cfg.seeds) == 1:
        return [(cfg.seeds[0], out)]
    return [(s, out / f"seed_{s}") for s in cfg.seeds]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    status = EXIT_OK
    for seed, out in _seeds_and_dirs(cfg, args):
        res = execute_run(cfg, seed, out, args.jobs)
        print(f"seed {seed}: {res.status}, best val MSE {res.best.val_mse if res.best else None}")
        for line in res.equation:
            print(f"  {line}")
        if res.best is None:
            status = EXIT_NO_RESULT
    return status


def cmd_replay_record(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out or cfg.out)
    transcript = Path(args.transcript) if args.transcript else out / "transcript.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    res = execute_run(cfg, seed, out, args.jobs, record=transcript)
    print(f"recorded transcript to {transcript}")
    return EXIT_OK if res.best is not None else EXIT_NO_RESULT


def cmd_simulate(args) -> int:
    if args.kind == "pkpd":
        variant = args.variant or simgen.CHEMO_RADIO
        if variant not in simgen.PKPD_VARIANTS:
            raise DataError(f"unknown PKPD variant '{variant}' (choose from {', '.join(simgen.PKPD_VARIANTS)})")
        data = simgen.simulate_pkpd(variant, args.patients, seed=args.seed)
    else:
        try:
            variant = int(args.variant or 1)
        except ValueError:
            raise DataError("synthetic variant must be an integer 1..5") from None
        data = simgen.simulate_synthetic_variant(simgen.SyntheticSpec(variant), args.patients, seed=args.seed)
    if args.distractors:
        data = simgen.add_distractors(data, args.distractors, args.seed)
    if args.split:
        data = split_dataset(data, args.split, args.seed)
    stem = f"{args.kind}_{variant}_seed{args.seed}"
    csv_path, man_path = simgen.export(data, args.out, stem)
    print(f"wrote {csv_path} ({data.n_rows} rows) and {man_path}")
    return EXIT_OK


def cmd_stress(args) -> int:
    from . import stress

    seeds = range(args.seeds)
    if args.kind == "collinearity":
        rows = [r for rho in args.rho for r in stress.run_collinearity(rho, seeds, args.variant, args.k)]
        for r in rows:
            print(f"rho={r.rho} seed={r.seed}: {r.group_recall}/{r.n_groups} groups, "
                  f"{r.duplicate_groups} duplicates, test MSE {r.test_mse:.3g}")
    else:
        rows = [r for e in args.experiment for r in stress.run_epistasis(e, seeds, args.variant)]
        for r in rows:
            print(f"exp={r.experiment} seed={r.seed}: signal ranks {r.signal_ranks}, test MSE {r.test_mse:.4g}, "
                  f"max marginal {r.max_marginal_influence:.2g}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stress.write_rows(rows, out)
    print(f"wrote {out}")
    return EXIT_OK


def _read_terms(path: str) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def cmd_eval(args) -> int:
    truth = load_table(args.truth, args.targets)
    pred = load_table(args.pred, args.targets)
    if truth.n_rows != pred.n_rows:
        raise DataError(f"row count mismatch: truth {truth.n_rows}, pred {pred.n_rows}")
    split = args.split
    y = truth.target_matrix(split)
    yhat = pred.target_matrix(split)
    scores = [nmse(y[:, j], yhat[:, j]) for j in range(y.shape[1])]
    for name, s in zip(truth.target_names, scores):
        print(f"NMSE[{name}] = {s:.6g}")
    overall = float(np.mean(scores))
    print(f"NMSE = {overall:.6g}")
    print(f"Acc_{args.tol:g} = {acc_at_tol([overall], args.tol):g}")
    if args.truth_terms and args.pred_terms:
        print(f"term recall = {term_recall(_read_terms(args.truth_terms), _read_terms(args.pred_terms)):.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _fractions(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated fractions, e.g. 0.7,0.15,0.15") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three fractions")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsesr",
        description="Influence-guided sparse symbolic regression.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a search from a TOML/JSON config", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="run only this seed (default: every seed in the config)")
    p.add_argument("--out", help="output directory (default: the config's 'out')")
    p.add_argument("--jobs", type=int, help="concurrent successor cycles per expansion")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay-record", help="run a search and record every proposer exchange",
                       epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--transcript", help="transcript path (default: <out>/transcript.jsonl)")
    p.set_defaults(func=cmd_replay_record)

    p = sub.add_parser("simulate", help="write a simulated dataset as CSV plus a JSON manifest",
                       epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=["pkpd", "synthetic"])
    p.add_argument("--variant", help="none|chemo|chemo_radio for pkpd, 1..5 for synthetic")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractors", type=int, default=0, help="append this many N(0,1) noise columns")
    p.add_argument("--split", type=_fractions, help="assign grouped train/val/test splits, e.g. 0.7,0.15,0.15")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stress", help="run a pruning stress protocol and write a CSV table",
                       epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=["collinearity", "epistasis"])
    p.add_argument("--rho", type=float, nargs="+", default=[0.95, 0.99, 0.999])
    p.add_argument("--experiment", type=int, nargs="+", choices=[1, 2], default=[1, 2])
    p.add_argument("--seeds", type=int, default=15, help="number of seeds, 0..n-1")
    p.add_argument("--variant", choices=["no_refit", "refit_full", "refit_efficient"], default="no_refit")
    p.add_argument("--k", type=int, default=6, help="terms kept (collinearity only)")
    p.add_argument("--out", default="stress.csv")
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("eval", help="score predictions against ground truth",
                       epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--pred", required=True, help="CSV with predicted target columns")
    p.add_argument("--truth", required=True, help="CSV with true target columns")
    p.add_argument("--targets", nargs="+", required=True)
    p.add_argument("--split", help="score only this split (needs a split column)")
    p.add_argument("--tol", type=float, default=0.1)
    p.add_argument("--truth-terms", help="file with one ground-truth term per line")
    p.add_argument("--pred-terms", help="file with one predicted term per line")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ExprError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProposerError as exc:
        print(f"proposer error: {exc}", file=sys.stderr)
        return EXIT_PROPOSER


if __name__ == "__main__":
    sys.exit(main())
