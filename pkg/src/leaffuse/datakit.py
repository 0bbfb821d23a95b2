"""Tabular data preparation: load, median-impute, perturb, split, standardize.

The preparation order is fixed: impute missing cells with column medians,
shuffle and perturb a ``delta`` fraction of rows (one uniformly chosen cell per
row is overwritten with its column median), split 8:1:1, then z-score the
original features with train-split statistics.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import fisher_yates, make_rng

MISSING_TOKENS = {"", "?"}


class DataError(ValueError):
    """Raised for malformed tables and violated data preconditions."""


@dataclass(frozen=True)
class RawTable:
    column_names: list[str]
    cells: np.ndarray  # (N, d) float64, NaN marks a missing cell
    labels: np.ndarray  # (N,) int64 in {0, 1}
    label_column: str
    label_map: dict[str, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    column_names: list[str]
    column_medians: np.ndarray
    row_ids: np.ndarray = None  # original row index of each current row
    perturbed: np.ndarray = None  # bool mask over current rows
    perturbed_cols: np.ndarray = None  # chosen column per row, -1 if untouched
    mean: np.ndarray = None
    std: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.row_ids is None:
            object.__setattr__(self, "row_ids", np.arange(n, dtype=np.int64))
        if self.perturbed is None:
            object.__setattr__(self, "perturbed", np.zeros(n, dtype=bool))
        if self.perturbed_cols is None:
            object.__setattr__(self, "perturbed_cols", np.full(n, -1, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PerturbationSpec:
    delta: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.delta <= 1.0):
            raise DataError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class SplitBundle:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def as_dict(self) -> dict[str, list[int]]:
        return {
            "train": self.train_idx.tolist(),
            "val": self.val_idx.tolist(),
            "test": self.test_idx.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitBundle":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text in MISSING_TOKENS:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else math.nan


def decode_labels(raw: list[str], positive: str | None = None) -> tuple[np.ndarray, dict[str, int]]:
    """Map raw label text to {0, 1}.

    Labels already spelled 0/1 are kept. Otherwise exactly two distinct values
    are required and the lexicographically larger one becomes class 1, unless
    ``positive`` names the positive class.
    """
    distinct = sorted(set(raw))
    if positive is not None:
        if positive not in distinct and len(distinct) > 1:
            raise DataError(f"positive label {positive!r} not present in {distinct}")
        if len(distinct) > 2:
            raise DataError(f"labels are not binary: {distinct}")
        mapping = {v: int(v == positive) for v in distinct}
    elif set(distinct) <= {"0", "1"}:
        mapping = {v: int(v) for v in distinct}
    elif len(distinct) == 2:
        mapping = {distinct[0]: 0, distinct[1]: 1}
    else:
        raise DataError(f"labels are not binary: {distinct}")
    return np.array([mapping[v] for v in raw], dtype=np.int64), mapping


def load_table(path: str | Path, label_column: str, positive_label: str | None = None) -> RawTable:
    """Read a comma-separated table with a header row."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: empty table")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header")
    li = header.index(label_column)
    feat_cols = [i for i in range(len(header)) if i != li]
    cells = np.empty((len(rows) - 1, len(feat_cols)), dtype=np.float64)
    raw_labels = []
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        cells[r] = [_parse_cell(row[i]) for i in feat_cols]
        raw_labels.append(row[li].strip())
    if any(lbl in MISSING_TOKENS for lbl in raw_labels):
        raise DataError(f"{path}: missing label")
    labels, mapping = decode_labels(raw_labels, positive_label)
    return RawTable([header[i] for i in feat_cols], cells, labels, label_column, mapping)


def impute_median(raw: RawTable | Dataset) -> Dataset:
    """Replace every missing cell by the median of its column's observed values.

    Even counts use the mean of the two middle values. Accepts an already
    imputed Dataset as well (a no-op apart from recomputing medians).
    """
    cells = raw.cells if isinstance(raw, RawTable) else raw.features
    cells = np.array(cells, dtype=np.float64)
    observed = ~np.isnan(cells)
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        names = [raw.column_names[j] for j in empty]
        raise DataError(f"fully missing column(s): {names}")
    medians = np.array([np.median(cells[observed[:, j], j]) for j in range(cells.shape[1])])
    rows, cols = np.nonzero(~observed)
    cells[rows, cols] = medians[cols]
    if isinstance(raw, Dataset):
        return replace(raw, features=cells, column_medians=medians)
    return Dataset(
        features=cells,
        labels=raw.labels.copy(),
        column_names=list(raw.column_names),
        column_medians=medians,
        meta={"label_column": raw.label_column, "label_map": raw.label_map},
    )


def perturb(data: Dataset, spec: PerturbationSpec) -> Dataset:
    """Shuffle rows, then overwrite one uniform cell in the first round(delta*N) rows.

    The overwrite value is the median of that column over the full imputed
    table (computed before any row is touched). Round-half-up is used for the
    row count.
    """
    rng = make_rng(spec.seed, "perturb")
    order = fisher_yates(data.n, rng)
    n_pert = int(math.floor(spec.delta * data.n + 0.5))
    feats = data.features[order].copy()
    medians = np.median(data.features, axis=0)
    cols = rng.integers(0, data.d, size=n_pert)
    feats[np.arange(n_pert), cols] = medians[cols]
    mask = np.zeros(data.n, dtype=bool)
    mask[:n_pert] = True
    chosen = np.full(data.n, -1, dtype=np.int64)
    chosen[:n_pert] = cols
    meta = dict(data.meta, delta=spec.delta, perturb_seed=int(spec.seed),
                perturb_medians=medians.tolist())
    return replace(
        data,
        features=feats,
        labels=data.labels[order].copy(),
        row_ids=data.row_ids[order].copy(),
        perturbed=mask,
        perturbed_cols=chosen,
        meta=meta,
    )


def split_8_1_1(data: Dataset | int, seed: int) -> SplitBundle:
    """Seeded 8:1:1 partition: floor(0.8N) train, floor(0.1N) val, rest test."""
    n = data if isinstance(data, int) else data.n
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    perm = fisher_yates(n, make_rng(seed, "split"))
    n_train = (8 * n) // 10
    n_val = n // 10
    return SplitBundle(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


def standardize(data: Dataset, split: SplitBundle) -> Dataset:
    """Z-score every column with train-split mean and population std.

    Zero-variance columns are only centered.
    """
    train = data.features[split.train_idx]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return replace(data, features=(data.features - mean) / scale, mean=mean, std=std)


def apply_standardization(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / np.where(std > 0, std, 1.0)


# -- persistence -------------------------------------------------------------

def write_prepared(out_dir: str | Path, data: Dataset, split: SplitBundle, seed: int,
                   extra: dict | None = None) -> list[Path]:
    """Write ``data.csv`` (post-perturbation, pre-standardization) and ``meta.json``.

    ``extra`` entries are merged into the metadata (e.g. a source hash).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label_column = data.meta.get("label_column", "label")
    csv_path = out_dir / "data.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(data.column_names) + [label_column])
        for row, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])
    meta = {
        "format": "leaffuse-prepared/1",
        "n": data.n,
        "d": data.d,
        "column_names": list(data.column_names),
        "label_column": label_column,
        "label_map": data.meta.get("label_map", {}),
        "column_medians": data.column_medians.tolist(),
        "perturb_medians": data.meta.get("perturb_medians"),
        "delta": data.meta.get("delta", 0.0),
        "seed": int(seed),
        "n_perturbed": int(data.perturbed.sum()),
        "perturbed_rows": np.flatnonzero(data.perturbed).tolist(),
        "perturbed_cols": data.perturbed_cols[data.perturbed].tolist(),
        "row_ids": data.row_ids.tolist(),
        "split": split.as_dict(),
        **(extra or {}),
    }
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return [csv_path, meta_path]


def read_prepared(out_dir: str | Path) -> tuple[Dataset, SplitBundle, dict]:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "meta.json").read_text())
    with (out_dir / "data.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    feats = np.array([[float(c) for c in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    mask = np.zeros(len(rows), dtype=bool)
    mask[meta["perturbed_rows"]] = True
    cols = np.full(len(rows), -1, dtype=np.int64)
    cols[meta["perturbed_rows"]] = meta["perturbed_cols"]
    data = Dataset(
        features=feats,
        labels=labels,
        column_names=meta["column_names"],
        column_medians=np.array(meta["column_medians"]),
        row_ids=np.array(meta["row_ids"], dtype=np.int64),
        perturbed=mask,
        perturbed_cols=cols,
        meta={k: meta[k] for k in ("label_column", "label_map", "delta", "perturb_medians")},
    )
    return data, SplitBundle.from_dict(meta["split"]), meta


def prepare(path: str | Path, label_column: str, delta: float, seed: int,
            positive_label: str | None = None) -> tuple[Dataset, SplitBundle]:
    """Full preparation chain up to (but excluding) standardization."""
    data = impute_median(load_table(path, label_column, positive_label))
    data = perturb(data, PerturbationSpec(delta, seed))
    return data, split_8_1_1(data, seed)
