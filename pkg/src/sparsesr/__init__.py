"""Sparse symbolic regression with influence-guided pruning and tree search."""

from .data import Dataset, load_table, split_dataset, write_table
from .engine import CycleConfig, Problem, run_cycle
from .exprlang import Term, parse_expr
from .influence import NO_REFIT, REFIT_EFFICIENT, REFIT_FULL, compute_influence
from .linfit import fit_linear
from .propose import GrammarProposer, LLMConfig, LLMProposer, RecordingProposer, ReplayProposer
from .search import ITERATIVE, MCTS, SearchConfig, run_search

__version__ = "0.1.0"

__all__ = [
    "CycleConfig",
    "Dataset",
    "GrammarProposer",
    "ITERATIVE",
    "LLMConfig",
    "LLMProposer",
    "MCTS",
    "NO_REFIT",
    "Problem",
    "REFIT_EFFICIENT",
    "REFIT_FULL",
    "RecordingProposer",
    "ReplayProposer",
    "SearchConfig",
    "Term",
    "compute_influence",
    "fit_linear",
    "load_table",
    "parse_expr",
    "run_cycle",
    "run_search",
    "split_dataset",
    "write_table",
]
