"""Datasets, splits, CSV I/O and design matrices."""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import rng_for
from .exprlang import ExprError, Term

TRAIN = "train"
VAL = "val"
TEST = "test"
VAL_INNER = "val_inner"
VAL_OUTER = "val_outer"
SPLITS = (TRAIN, VAL, TEST)

GROUP_COLUMN = "trajectory_id"
SPLIT_COLUMN = "split"

_SPLIT_ALIASES = {"validation": VAL, "valid": VAL}


class DataError(ValueError):
    pass


class AllTermsRejected(DataError):
    def __init__(self, rejected: Mapping[str, str]):
        self.rejected = dict(rejected)
        super().__init__(f"all {len(rejected)} candidate terms were rejected")


def _normalize_split(label: str) -> str:
    return _SPLIT_ALIASES.get(label, label)


@dataclass(frozen=True)
class Dataset:
    """Named feature and target columns with per-row split labels.

    ``split`` is ``None`` until assigned; ``val_part`` marks validation rows
    as ``inner`` / ``outer`` when nested validation is enabled.
    """

    features: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    split: np.ndarray | None = None
    groups: np.ndarray | None = None
    val_part: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lengths = {len(v) for v in self.features.values()} | {len(v) for v in self.targets.values()}
        if self.split is not None:
            lengths.add(len(self.split))
        if self.groups is not None:
            lengths.add(len(self.groups))
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths: {sorted(lengths)}")
        if not self.targets:
            raise DataError("dataset has no target columns")
        overlap = set(self.features) & set(self.targets)
        if overlap:
            raise DataError(f"columns are both feature and target: {sorted(overlap)}")
        if self.split is not None:
            bad = set(np.unique(self.split)) - set(SPLITS)
            if bad:
                raise DataError(f"unknown split labels: {sorted(bad)}")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.targets.values())))

    @property
    def feature_names(self) -> list[str]:
        return list(self.features)

    @property
    def target_names(self) -> list[str]:
        return list(self.targets)

    @property
    def nested(self) -> bool:
        return self.val_part is not None

    def mask(self, split: str) -> np.ndarray:
        split = _normalize_split(split)
        if self.split is None:
            raise DataError("dataset splits are not assigned")
        if split in (VAL_INNER, VAL_OUTER):
            if self.val_part is None:
                raise DataError("nested validation is not enabled")
            part = "inner" if split == VAL_INNER else "outer"
            return (self.split == VAL) & (self.val_part == part)
        if split not in SPLITS:
            raise DataError(f"unknown split '{split}'")
        return self.split == split

    def frame(self, split: str | None = None) -> dict[str, np.ndarray]:
        """Feature columns restricted to ``split`` (all rows when None)."""
        if split is None:
            return dict(self.features)
        m = self.mask(split)
        return {k: v[m] for k, v in self.features.items()}

    def target_matrix(self, split: str | None = None) -> np.ndarray:
        Y = np.column_stack([self.targets[k] for k in self.targets])
        return Y if split is None else Y[self.mask(split)]

    def split_sizes(self) -> dict[str, int]:
        if self.split is None:
            return {}
        return {s: int(np.sum(self.split == s)) for s in SPLITS}

    def with_features(self, extra: Mapping[str, np.ndarray]) -> "Dataset":
        feats = dict(self.features)
        feats.update({k: np.asarray(v, dtype=float) for k, v in extra.items()})
        return replace(self, features=feats)


# ---------------------------------------------------------------------------
# CSV

def _fmt(v: float) -> str:
    return repr(float(v))


def write_table(d: Dataset, path: str | Path) -> None:
    """Write ``d`` as CSV; floats use shortest round-trip text."""
    names = list(d.features) + list(d.targets)
    header = list(names)
    if d.groups is not None:
        header.insert(0, GROUP_COLUMN)
    if d.split is not None:
        header.append(SPLIT_COLUMN)
    cols = [d.features[k] for k in d.features] + [d.targets[k] for k in d.targets]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(d.n_rows):
            row = [_fmt(c[i]) for c in cols]
            if d.groups is not None:
                row.insert(0, str(d.groups[i]))
            if d.split is not None:
                row.append(str(d.split[i]))
            w.writerow(row)


def load_table(path: str | Path, target_names: Sequence[str]) -> Dataset:
    """Read a comma-separated table with a header row.

    A ``trajectory_id`` column becomes the row grouping and a ``split``
    column (train/val/test) the split assignment; every other non-target
    column is a float feature.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [t for t in target_names if t not in header]
    if missing:
        raise DataError(f"{path}: missing target column(s) {missing}")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    cols: dict[str, list] = {h: [] for h in header}
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(r)} cells, expected {len(header)}")
        for h, cell in zip(header, r):
            cols[h].append(cell.strip())

    groups = np.array(cols.pop(GROUP_COLUMN)) if GROUP_COLUMN in cols else None
    split = None
    if SPLIT_COLUMN in cols:
        split = np.array([_normalize_split(s) for s in cols.pop(SPLIT_COLUMN)])

    numeric: dict[str, np.ndarray] = {}
    for j, h in enumerate(header):
        if h not in cols:
            continue
        values = []
        for i, cell in enumerate(cols[h]):
            try:
                values.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 2}, column '{h}'"
                ) from None
        numeric[h] = np.array(values, dtype=float)
    targets = {t: numeric.pop(t) for t in target_names}
    return Dataset(numeric, targets, split=split, groups=groups)


# ---------------------------------------------------------------------------
# splitting

def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return [n_train, n_val, n - n_train - n_val]


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")


def split_dataset(d: Dataset, fractions: Sequence[float], seed: int) -> Dataset:
    """Assign train/val/test labels deterministically from ``seed``.

    When the dataset carries trajectory groups, whole trajectories are
    assigned so no trajectory straddles two splits.
    """
    _check_fractions(fractions)
    rng = rng_for(seed, "split")
    if d.groups is not None:
        units, inverse = np.unique(d.groups, return_inverse=True)
    else:
        units, inverse = np.arange(d.n_rows), np.arange(d.n_rows)
    order = rng.permutation(len(units))
    counts = _split_counts(len(units), fractions)
    if min(counts) <= 0:
        raise DataError(f"split produced an empty partition: counts={counts}")
    unit_label = np.empty(len(units), dtype=object)
    start = 0
    for label, c in zip(SPLITS, counts):
        unit_label[order[start:start + c]] = label
        start += c
    split = np.array(unit_label[inverse], dtype="<U5")
    return replace(d, split=split, val_part=None)


def nest_validation(d: Dataset, inner_fraction: float = 0.5, seed: int = 0) -> Dataset:
    """Partition validation rows into disjoint inner (pruning) and outer (reward) parts."""
    if d.split is None:
        raise DataError("assign splits before nesting validation")
    if not 0.0 < inner_fraction < 1.0:
        raise DataError("inner_fraction must be in (0, 1)")
    rng = rng_for(seed, "nested-validation")
    val_rows = np.flatnonzero(d.split == VAL)
    if d.groups is not None:
        units, inverse = np.unique(d.groups[val_rows], return_inverse=True)
    else:
        units, inverse = np.arange(len(val_rows)), np.arange(len(val_rows))
    order = rng.permutation(len(units))
    n_inner = int(round(inner_fraction * len(units)))
    if n_inner == 0 or n_inner == len(units):
        raise DataError("nested validation produced an empty part")
    unit_part = np.full(len(units), "outer", dtype="<U5")
    unit_part[order[:n_inner]] = "inner"
    part = np.full(d.n_rows, "", dtype="<U5")
    part[val_rows] = unit_part[inverse]
    return replace(d, val_part=part)


def concat_splits(parts: Mapping[str, Dataset]) -> Dataset:
    """Stack independently generated datasets into one, labelled by split."""
    labels = list(parts)
    first = parts[labels[0]]
    feats = {k: np.concatenate([parts[s].features[k] for s in labels]) for k in first.features}
    targs = {k: np.concatenate([parts[s].targets[k] for s in labels]) for k in first.targets}
    split = np.concatenate([np.full(parts[s].n_rows, s, dtype="<U5") for s in labels])
    groups = None
    if first.groups is not None:
        groups = np.concatenate([np.array([f"{s}-{g}" for g in parts[s].groups]) for s in labels])
    return Dataset(feats, targs, split=split, groups=groups, meta=dict(first.meta))


# ---------------------------------------------------------------------------
# design matrices

@dataclass(frozen=True)
class DesignMatrix:
    """Evaluated basis functions (rows x terms) plus the terms that were dropped."""

    matrix: np.ndarray
    terms: list[Term]
    rejected: dict[str, str] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def sources(self) -> list[str]:
        return [t.source for t in self.terms]

    def subset(self, keep: Sequence[int]) -> "DesignMatrix":
        keep = list(keep)
        return DesignMatrix(self.matrix[:, keep], [self.terms[i] for i in keep], dict(self.rejected))


def _term_reason(term: Term, d: Dataset, split: str, params) -> tuple[np.ndarray | None, str | None]:
    try:
        col = term.evaluate(d.frame(split), params)
    except ExprError as exc:
        return None, str(exc)
    if not np.all(np.isfinite(col)):
        return None, f"non-finite on {split}"
    return col, None


def evaluate_terms(
    terms: Sequence[Term],
    d: Dataset,
    splits: Sequence[str],
    params: Mapping[str, Sequence[float]] | None = None,
    check_splits: Sequence[str] | None = None,
) -> dict[str, DesignMatrix]:
    """Design matrices for several splits with one shared rejection set.

    A term that fails (unknown variable or any non-finite value) on any of
    ``splits`` or ``check_splits`` is excluded from every matrix.
    """
    if not terms:
        raise DataError("no terms to evaluate")
    params = params or {}
    check = list(dict.fromkeys(list(splits) + list(check_splits or [])))
    columns: dict[str, list[np.ndarray]] = {s: [] for s in splits}
    kept: list[Term] = []
    rejected: dict[str, str] = {}
    for term in terms:
        cols = {}
        reason = None
        for s in check:
            col, reason = _term_reason(term, d, s, params.get(term.source))
            if reason is not None:
                break
            cols[s] = col
        if reason is not None:
            rejected[term.source] = reason
            continue
        kept.append(term)
        for s in splits:
            columns[s].append(cols[s])
    if not kept:
        raise AllTermsRejected(rejected)
    out = {}
    for s in splits:
        n = int(np.sum(d.mask(s)))
        mat = np.column_stack(columns[s]) if columns[s] else np.empty((n, 0))
        out[s] = DesignMatrix(mat, list(kept), dict(rejected))
    return out


def build_design_matrix(
    terms: Sequence[Term],
    d: Dataset,
    split: str,
    params: Mapping[str, Sequence[float]] | None = None,
    check_splits: Sequence[str] | None = None,
) -> DesignMatrix:
    """Evaluate ``terms`` on one split.

    ``check_splits`` defaults to every assigned split so that rejection is
    consistent across the whole cycle.
    """
    if check_splits is None:
        check_splits = [s for s, n in d.split_sizes().items() if n > 0] if d.split is not None else []
    return evaluate_terms(terms, d, [split], params, check_splits)[split]

