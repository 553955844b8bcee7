"""Dataset ingestion, preprocessing, and split management.

A loaded dataset keeps one float matrix of raw features: numeric columns hold
their values, categorical columns hold integer codes into a per-column
vocabulary.  Preprocessing expands categoricals to one-hot blocks and
standardizes numerics with running statistics accumulated by streaming over
the fitting rows (an optional rank-to-normal-scores quantile transform can be
applied to numerics first).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np


class DataError(ValueError):
    """Malformed input files, schema violations, or infeasible splits."""


@dataclass
class ColumnSpec:
    name: str
    type: str  # numeric | categorical | label
    categories: list[str] | None = None


def load_schema(path) -> list[ColumnSpec]:
    with open(path) as fh:
        raw = json.load(fh)
    cols = [ColumnSpec(c["name"], c["type"], c.get("categories")) for c in raw["columns"]]
    for c in cols:
        if c.type not in ("numeric", "categorical", "label"):
            raise DataError(f"column {c.name!r}: unknown type {c.type!r}")
    if sum(1 for c in cols if c.type == "label") > 1:
        raise DataError("schema declares more than one label column")
    return cols


class TabularDataset:
    def __init__(self, features: np.ndarray, cat_vocab: dict[int, list[str]],
                 labels: np.ndarray | None, name: str = "",
                 feature_names: list[str] | None = None,
                 label_vocab: list[str] | None = None):
        if labels is not None and len(labels) != len(features):
            raise DataError("label count does not match row count")
        self.features = features
        self.cat_vocab = cat_vocab  # feature index -> vocabulary
        self.labels = labels
        self.name = name
        self.feature_names = feature_names or [f"f{i}" for i in range(features.shape[1])]
        self.label_vocab = label_vocab

    def __len__(self):
        return len(self.features)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return int(self.labels.max()) + 1

    def cardinality(self, feature_index: int) -> int:
        return len(self.cat_vocab[feature_index])


def load_csv(path, schema: list[ColumnSpec], name: str = "",
             has_header: bool = True) -> TabularDataset:
    """Parse a CSV against a declared schema.

    Missing or non-numeric values in numeric columns are rejected; values
    outside a declared categorical vocabulary are rejected.
    """
    feature_cols = [c for c in schema if c.type != "label"]
    label_col = next((c for c in schema if c.type == "label"), None)

    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(schema):
                raise DataError(f"{path}:{lineno}: expected {len(schema)} fields, got {len(row)}")
            rows.append([v.strip() for v in row])
    if not rows:
        raise DataError(f"{path}: no data rows")

    col_of = {c.name: i for i, c in enumerate(schema)}
    # build vocabularies for categoricals without a declared one
    vocab: dict[str, list[str]] = {}
    for c in feature_cols:
        if c.type == "categorical":
            if c.categories is not None:
                vocab[c.name] = list(c.categories)
            else:
                vocab[c.name] = sorted({r[col_of[c.name]] for r in rows})
    label_vocab = None
    if label_col is not None:
        if label_col.categories is not None:
            label_vocab = list(label_col.categories)
        else:
            label_vocab = sorted({r[col_of[label_col.name]] for r in rows})

    features = np.zeros((len(rows), len(feature_cols)))
    labels = np.zeros(len(rows), dtype=np.int64) if label_col is not None else None
    cat_vocab: dict[int, list[str]] = {}
    for j, c in enumerate(feature_cols):
        src = col_of[c.name]
        if c.type == "numeric":
            for i, r in enumerate(rows):
                val = r[src]
                if val == "":
                    raise DataError(f"{path}: row {i + 1}: missing numeric value in {c.name!r}")
                try:
                    features[i, j] = float(val)
                except ValueError:
                    raise DataError(
                        f"{path}: row {i + 1}: non-numeric value {val!r} in {c.name!r}") from None
        else:
            lut = {v: k for k, v in enumerate(vocab[c.name])}
            cat_vocab[j] = vocab[c.name]
            for i, r in enumerate(rows):
                val = r[src]
                if val not in lut:
                    raise DataError(f"{path}: row {i + 1}: unknown category {val!r} in {c.name!r}")
                features[i, j] = lut[val]
    if label_col is not None:
        lut = {v: k for k, v in enumerate(label_vocab)}
        src = col_of[label_col.name]
        for i, r in enumerate(rows):
            val = r[src]
            if val not in lut:
                raise DataError(f"{path}: row {i + 1}: unknown label {val!r}")
            labels[i] = lut[val]

    return TabularDataset(features, cat_vocab, labels, name=name,
                          feature_names=[c.name for c in feature_cols],
                          label_vocab=label_vocab)


def save_csv(dataset: TabularDataset, path, label_name: str = "label"):
    """Write a dataset back out; numeric values round-trip bit-exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(dataset.feature_names)
        if dataset.labels is not None:
            header.append(label_name)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = []
            for j in range(dataset.num_features):
                if j in dataset.cat_vocab:
                    row.append(dataset.cat_vocab[j][int(dataset.features[i, j])])
                else:
                    row.append(repr(float(dataset.features[i, j])))
            if dataset.labels is not None:
                vocab = dataset.label_vocab
                row.append(vocab[dataset.labels[i]] if vocab else str(int(dataset.labels[i])))
            writer.writerow(row)


# -- preprocessing ---------------------------------------------------------------

@dataclass
class PreprocessState:
    mean: np.ndarray          # per raw feature (categoricals unused)
    var: np.ndarray
    count: int
    cat_layout: dict[int, tuple[int, int]]  # feature -> (output start, cardinality)
    num_layout: dict[int, int]              # feature -> output column
    output_dim: int
    quantile: bool = False
    quantile_tables: dict[int, np.ndarray] = field(default_factory=dict)
    epsilon: float = 1e-6

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "count": self.count,
            "cat_layout": {str(k): list(v) for k, v in self.cat_layout.items()},
            "num_layout": {str(k): v for k, v in self.num_layout.items()},
            "output_dim": self.output_dim,
            "quantile": self.quantile,
            "quantile_tables": {str(k): v.tolist() for k, v in self.quantile_tables.items()},
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessState":
        return cls(
            mean=np.asarray(d["mean"]),
            var=np.asarray(d["var"]),
            count=d["count"],
            cat_layout={int(k): tuple(v) for k, v in d["cat_layout"].items()},
            num_layout={int(k): v for k, v in d["num_layout"].items()},
            output_dim=d["output_dim"],
            quantile=d["quantile"],
            quantile_tables={int(k): np.asarray(v) for k, v in d["quantile_tables"].items()},
            epsilon=d["epsilon"],
        )


def fit_preprocess(dataset: TabularDataset, rows: np.ndarray | None = None,
                   quantile: bool = False, epsilon: float = 1e-6) -> PreprocessState:
    """Accumulate running normalization statistics over the fitting rows and
    freeze the one-hot layout.

    Statistics are accumulated with a streaming (Welford) update, so after a
    full pass they equal the exact full-dataset statistics.
    """
    x = dataset.features if rows is None else dataset.features[rows]
    f = dataset.num_features
    cat_layout: dict[int, tuple[int, int]] = {}
    num_layout: dict[int, int] = {}
    out = 0
    for j in range(f):
        if j in dataset.cat_vocab:
            card = dataset.cardinality(j)
            cat_layout[j] = (out, card)
            out += card
        else:
            num_layout[j] = out
            out += 1

    quantile_tables: dict[int, np.ndarray] = {}
    if quantile:
        for j in num_layout:
            quantile_tables[j] = np.sort(x[:, j])

    # streaming mean/variance over the (optionally quantile-transformed) numerics
    mean = np.zeros(f)
    m2 = np.zeros(f)
    count = 0
    values = x.copy()
    if quantile:
        for j in num_layout:
            values[:, j] = _normal_scores(values[:, j], quantile_tables[j])
    for i in range(len(values)):
        count += 1
        delta = values[i] - mean
        mean += delta / count
        m2 += delta * (values[i] - mean)
    var = m2 / count if count > 0 else np.ones(f)

    return PreprocessState(mean=mean, var=var, count=count,
                           cat_layout=cat_layout, num_layout=num_layout,
                           output_dim=out, quantile=quantile,
                           quantile_tables=quantile_tables, epsilon=epsilon)


_INV_NORM = np.frompyfunc(NormalDist().inv_cdf, 1, 1)


def _normal_scores(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    n = len(table)
    ranks = np.searchsorted(table, values, side="right")
    p = np.clip(ranks / (n + 1), 1e-6, 1 - 1e-6)
    return _INV_NORM(p).astype(np.float64)


def apply_preprocess(state: PreprocessState, batch: np.ndarray) -> np.ndarray:
    """Map a raw feature batch to the model-input representation."""
    if batch.ndim != 2 or batch.shape[1] != len(state.mean):
        raise DataError(f"batch shape {batch.shape} does not match fitted schema")
    out = np.zeros((len(batch), state.output_dim))
    for j, col in state.num_layout.items():
        v = batch[:, j]
        if state.quantile:
            v = _normal_scores(v, state.quantile_tables[j])
        if state.var[j] < state.epsilon ** 2:
            out[:, col] = 0.0  # constant column
        else:
            out[:, col] = (v - state.mean[j]) / np.sqrt(state.var[j] + state.epsilon)
    for j, (start, card) in state.cat_layout.items():
        codes = batch[:, j].astype(int)
        if np.any(codes < 0) or np.any(codes >= card):
            raise DataError(f"categorical feature {j} has codes outside [0, {card})")
        out[np.arange(len(batch)), start + codes] = 1.0
    return out


def expand_mask(state: PreprocessState, mask: np.ndarray) -> np.ndarray:
    """Broadcast a raw-feature corruption mask to model-input columns."""
    out = np.zeros((len(mask), state.output_dim))
    for j, col in state.num_layout.items():
        out[:, col] = mask[:, j]
    for j, (start, card) in state.cat_layout.items():
        out[:, start:start + card] = mask[:, j:j + 1]
    return out


# -- splits ------------------------------------------------------------------------

@dataclass
class SplitSpec:
    pretext_train: int
    pretext_val: int
    down_train: int
    down_val: int
    test: int
    label_fraction: float | None = None
    seed: int = 0

    def total(self) -> int:
        return self.pretext_train + self.pretext_val + self.down_train + self.down_val + self.test


# Presets: (pretext pool incl. validation, downstream train, test).  The
# pretext validation set is carved as 5% of the pretext pool, and the
# downstream validation set mirrors the downstream train size.
PRESETS: dict[str, dict] = {
    "higgs1pct": {"pretext": 98_000, "down": 980, "test": 500_000},
    "higgs5k": {"pretext": 50_000, "down": 5_000, "test": 25_000},
    "higgs100k": {"pretext": 100_000, "down": 100_000, "test": 500_000},
    "covtype1pct": {"pretext": 113_400, "down": 1_134, "test": 429_812},
    "covtype10pct": {"pretext": 464_809, "down": 46_480, "test": 116_203},
    "covtype15k": {"pretext": 11_340, "down": 11_340, "test": 565_892},
    "adult1pct": {"pretext": 8_170, "down": 86, "test": 16_281, "quantile": True},
    "mnist1pct": {"pretext": 57_000, "down": 600, "test": 10_000},
    "mnist10pct": {"pretext": 60_000, "down": 10_000, "test": 10_000},
}

PRETEXT_VAL_FRACTION = 0.05


def preset_split(name: str, seed: int = 0) -> SplitSpec:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    p = PRESETS[name]
    val = round(PRETEXT_VAL_FRACTION * p["pretext"])
    return SplitSpec(pretext_train=p["pretext"] - val, pretext_val=val,
                     down_train=p["down"], down_val=p["down"], test=p["test"],
                     seed=seed)


def _stratified_take(indices: np.ndarray, labels: np.ndarray, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Pick k of the given indices, class-stratified with at least one sample
    per class where class counts permit."""
    classes = np.unique(labels[indices])
    if k < len(classes):
        raise DataError(f"cannot stratify {k} samples over {len(classes)} classes")
    by_class = {c: indices[labels[indices] == c] for c in classes}
    quotas = {c: max(1, int(round(k * len(v) / len(indices)))) for c, v in by_class.items()}
    # adjust quotas to sum exactly to k, never dropping a class to zero
    order = sorted(classes, key=lambda c: -len(by_class[c]))
    diff = k - sum(quotas.values())
    i = 0
    while diff != 0:
        c = order[i % len(order)]
        if diff > 0 and quotas[c] < len(by_class[c]):
            quotas[c] += 1
            diff -= 1
        elif diff < 0 and quotas[c] > 1:
            quotas[c] -= 1
            diff += 1
        i += 1
    taken = [rng.choice(by_class[c], size=min(quotas[c], len(by_class[c])), replace=False)
             for c in classes]
    return np.sort(np.concatenate(taken))


def make_splits(dataset: TabularDataset, spec: SplitSpec) -> dict[str, np.ndarray]:
    """Seeded shuffle-and-partition into the five experiment splits."""
    n = len(dataset)
    if spec.total() > n:
        raise DataError(f"splits need {spec.total()} rows but dataset has {n}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)

    off = 0
    test = perm[off:off + spec.test]; off += spec.test
    pretext_train = perm[off:off + spec.pretext_train]; off += spec.pretext_train
    pretext_val = perm[off:off + spec.pretext_val]; off += spec.pretext_val
    pool = perm[off:]

    down_train_size = spec.down_train
    if spec.label_fraction is not None:
        # fraction of the labeled pool left after reserving validation rows,
        # so a fraction of 1.0 uses every remaining labeled sample
        down_train_size = max(1, round(spec.label_fraction * (len(pool) - spec.down_val)))
    if down_train_size + spec.down_val > len(pool):
        raise DataError("not enough rows left for the downstream splits")

    if dataset.labels is not None:
        down_train = _stratified_take(pool, dataset.labels, down_train_size, rng)
        rest = np.setdiff1d(pool, down_train)
        down_val = _stratified_take(rest, dataset.labels, spec.down_val, rng)
    else:
        down_train = pool[:down_train_size]
        down_val = pool[down_train_size:down_train_size + spec.down_val]

    return {
        "pretext_train": np.sort(pretext_train),
        "pretext_val": np.sort(pretext_val),
        "down_train": np.sort(down_train),
        "down_val": np.sort(down_val),
        "test": np.sort(test),
    }


def save_manifest(splits: dict[str, np.ndarray], path, metadata: dict | None = None):
    payload = {name: idx.tolist() for name, idx in splits.items()}
    if metadata:
        payload["_metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_manifest(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        payload = json.load(fh)
    return {name: np.asarray(idx, dtype=np.int64)
            for name, idx in payload.items() if not name.startswith("_")}
