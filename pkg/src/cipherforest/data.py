"""Dataset ingestion: CSV parsing against a column schema, train-statistics
preprocessing (min-max for continuous, label encoding for categoricals) and
the bundled synthetic generator used when no real dataset is fetched.

Validation rows reuse the training statistics: continuous values are clipped
into [0, 1]; categories unseen during training map to the reserved top
bucket (1.0) with a logged warning.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError
from .forest import Dataset

log = logging.getLogger(__name__)

COLUMN_KINDS = ("continuous", "categorical", "label")


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise SchemaError(f"column '{self.name}': unknown kind '{self.kind}'")


@dataclass
class TableSchema:
    columns: list[ColumnSchema]
    positive_label: str | None = None

    def __post_init__(self):
        labels = [c for c in self.columns if c.kind == "label"]
        if len(labels) != 1:
            raise SchemaError(f"schema must have exactly one label column, has {len(labels)}")

    @property
    def label_column(self) -> str:
        return next(c.name for c in self.columns if c.kind == "label")

    @property
    def feature_columns(self) -> list[ColumnSchema]:
        return [c for c in self.columns if c.kind != "label"]

    def to_json(self) -> str:
        return json.dumps(
            {
                "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
                "positive_label": self.positive_label,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "TableSchema":
        doc = json.loads(text)
        return cls(
            columns=[ColumnSchema(c["name"], c["kind"]) for c in doc["columns"]],
            positive_label=doc.get("positive_label"),
        )


@dataclass
class Table:
    """Raw string-valued rows plus their schema, before preprocessing."""

    header: list[str]
    rows: list[list[str]]
    schema: TableSchema


def read_csv(path: str, schema: TableSchema) -> Table:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        known = {c.name for c in schema.columns}
        for col in known:
            if col not in header:
                raise SchemaError(f"{path}: schema column '{col}' missing from header")
        rows = [[cell.strip() for cell in row] for row in reader if row]
    return Table(header=header, rows=rows, schema=schema)


def write_csv(path: str, table: Table) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.header)
        writer.writerows(table.rows)


@dataclass
class Preprocessor:
    """Column transforms fitted on the training split only."""

    schema: TableSchema
    continuous_range: dict = field(default_factory=dict)  # name -> (lo, hi)
    categories: dict = field(default_factory=dict)        # name -> {value: code}
    label_map: dict = field(default_factory=dict)         # value -> class index

    def fit(self, table: Table) -> "Preprocessor":
        cols = _columns_by_name(table)
        for col in self.schema.feature_columns:
            values = cols[col.name]
            if col.kind == "continuous":
                nums = _to_floats(values, col.name)
                self.continuous_range[col.name] = (float(nums.min()), float(nums.max()))
            else:
                seen = sorted(set(values))
                self.categories[col.name] = {v: i for i, v in enumerate(seen)}
        labels = sorted(set(cols[self.schema.label_column]))
        self.label_map = {v: i for i, v in enumerate(labels)}
        if self.schema.positive_label is not None and self.schema.positive_label not in self.label_map:
            raise SchemaError(
                f"positive label '{self.schema.positive_label}' not present in data"
            )
        return self

    def transform(self, table: Table) -> Dataset:
        cols = _columns_by_name(table)
        feats = []
        names = []
        for col in self.schema.feature_columns:
            values = cols[col.name]
            names.append(col.name)
            if col.kind == "continuous":
                lo, hi = self.continuous_range[col.name]
                nums = _to_floats(values, col.name)
                span = hi - lo if hi > lo else 1.0
                feats.append(np.clip((nums - lo) / span, 0.0, 1.0))
            else:
                mapping = self.categories[col.name]
                denom = max(len(mapping) - 1, 1)
                out = np.empty(len(values))
                unseen = 0
                for i, v in enumerate(values):
                    code = mapping.get(v)
                    if code is None:
                        out[i] = 1.0  # reserved bucket
                        unseen += 1
                    else:
                        out[i] = code / denom
                if unseen:
                    log.warning(
                        "column '%s': %d value(s) unseen in training mapped to the "
                        "reserved bucket", col.name, unseen,
                    )
                feats.append(out)
        labels = np.empty(len(table.rows), dtype=np.int64)
        for i, v in enumerate(cols[self.schema.label_column]):
            if v not in self.label_map:
                raise SchemaError(f"label value '{v}' unseen in training data")
            labels[i] = self.label_map[v]
        return Dataset(
            features=np.column_stack(feats),
            labels=labels,
            feature_names=names,
            task="classification",
            n_classes=len(self.label_map),
        )

    @property
    def positive_class(self) -> int:
        if self.schema.positive_label is not None:
            return self.label_map[self.schema.positive_label]
        return max(self.label_map.values())

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": json.loads(self.schema.to_json()),
                "continuous_range": self.continuous_range,
                "categories": self.categories,
                "label_map": self.label_map,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Preprocessor":
        doc = json.loads(text)
        return cls(
            schema=TableSchema.from_json(json.dumps(doc["schema"])),
            continuous_range={k: tuple(v) for k, v in doc["continuous_range"].items()},
            categories=doc["categories"],
            label_map=doc["label_map"],
        )


def _columns_by_name(table: Table) -> dict:
    idx = {name: i for i, name in enumerate(table.header)}
    out = {}
    for col in table.schema.columns:
        i = idx[col.name]
        out[col.name] = [row[i] for row in table.rows]
    return out


def _to_floats(values: list[str], column: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in values])
    except ValueError as exc:
        raise SchemaError(f"column '{column}': non-numeric continuous cell ({exc})") from exc


def split_rows(n_rows: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_rows)
    cut = int(round(n_rows * ratio))
    return order[:cut], order[cut:]


def split_table(table: Table, ratio: float, seed: int) -> tuple[Table, Table]:
    tr, va = split_rows(len(table.rows), ratio, seed)
    return (
        Table(table.header, [table.rows[i] for i in tr], table.schema),
        Table(table.header, [table.rows[i] for i in va], table.schema),
    )


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

SYNTHETIC_SCHEMA = TableSchema(
    columns=[
        ColumnSchema("u", "continuous"),
        ColumnSchema("v", "continuous"),
        ColumnSchema("hint", "categorical"),
        ColumnSchema("noise", "categorical"),
        ColumnSchema("income", "label"),
    ],
    positive_label="yes",
)


def synthetic_table(rows: int = 5000, seed: int = 0) -> Table:
    """XOR checkerboard on (u, v) with one noisy label-correlated categorical
    and one pure-noise categorical.  The label is a deterministic function of
    (u, v), so the best attainable accuracy is 1 by construction."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 1, rows)
    v = rng.uniform(0, 1, rows)
    label = (u > 0.5) ^ (v > 0.5)
    hint_flip = rng.uniform(0, 1, rows) < 0.1
    hint = np.where(label ^ hint_flip, "b", "a")
    noise = rng.choice(["n0", "n1", "n2", "n3"], rows)
    out_rows = [
        [f"{u[i]:.6f}", f"{v[i]:.6f}", hint[i], noise[i], "yes" if label[i] else "no"]
        for i in range(rows)
    ]
    return Table(header=["u", "v", "hint", "noise", "income"], rows=out_rows,
                 schema=SYNTHETIC_SCHEMA)


# ---------------------------------------------------------------------------
# the Adult Income layout (dataset fetched by the user, never vendored)
# ---------------------------------------------------------------------------

ADULT_COLUMNS = [
    ("age", "continuous"),
    ("workclass", "categorical"),
    ("fnlwgt", "continuous"),
    ("education", "categorical"),
    ("education-num", "continuous"),
    ("marital-status", "categorical"),
    ("occupation", "categorical"),
    ("relationship", "categorical"),
    ("race", "categorical"),
    ("sex", "categorical"),
    ("capital-gain", "continuous"),
    ("capital-loss", "continuous"),
    ("hours-per-week", "continuous"),
    ("native-country", "categorical"),
    ("income", "label"),
]

ADULT_SCHEMA = TableSchema(
    columns=[ColumnSchema(n, k) for n, k in ADULT_COLUMNS],
    positive_label=">50K",
)

ADULT_FETCH_HINT = (
    "fetch with: curl -o adult.csv https://archive.ics.uci.edu/ml/"
    "machine-learning-databases/adult/adult.data  (then prepend the header "
    "row: " + ",".join(n for n, _ in ADULT_COLUMNS) + ")"
)
