"""Tabular data carrier, synthetic benchmark generators, and CSV I/O.

Two synthetic tasks share the same conditional feature and label model
and differ only in how the latent class marginal is set: a proxy task
(one noisy discrete measurement of the latent class per row) and a
multi-source task (several domains with distinct latent marginals, one
of them labeled).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from latentshift.backend import kernels
from latentshift.errors import DataError, ParseError
from latentshift.validate import check_row_stochastic, check_simplex

# Proxy task defaults: three latent classes, three proxy values.
PROXY_PS_GIVEN_Z = np.array([
    [0.7, 0.3, 0.0],
    [0.8, 0.1, 0.1],
    [0.1, 0.0, 0.9],
])
PROXY_TRAIN_PZ = np.array([0.15, 0.35, 0.5])
PROXY_TEST_PZ = np.array([0.7, 0.2, 0.1])

# Multi-source task defaults: three training domains, first one labeled.
MULTISOURCE_PZ = np.array([
    [0.0, 0.7, 0.3],
    [0.8, 0.1, 0.1],
    [0.1, 0.0, 0.9],
])
MULTISOURCE_TEST_PZ = np.array([0.7, 0.2, 0.1])

# Scale of the noise on the first feature (the other two use unit scale).
# The first feature is the latent-class carrier; its noise must stay small
# for the class structure to be recoverable.
X1_NOISE_STD = 0.2

UNLABELED = -1

_SPLIT_STREAM = {"train": 0, "test": 1}


def _int_column(values, name, allow_unlabeled=False):
    arr = np.asarray(values, dtype=np.int64)
    low = UNLABELED if allow_unlabeled else 0
    if arr.size and arr.min() < low:
        raise DataError(f"column {name!r} contains class ids below {low}")
    return arr


@dataclass
class TabularDataset:
    """Feature matrix plus optional label / proxy / source-id columns.

    labels uses -1 for unlabeled rows. latent_truth is filled by the
    generators for oracle checks and evaluation diagnostics only; the
    estimation modules read nothing but features and their declared
    target column.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    proxy: np.ndarray | None = None
    source_id: np.ndarray | None = None
    latent_truth: np.ndarray | None = None
    column_maps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n = self.features.shape[0]
        for name, allow in (("labels", True), ("proxy", False),
                            ("source_id", False), ("latent_truth", False)):
            col = getattr(self, name)
            if col is None:
                continue
            col = _int_column(col, name, allow_unlabeled=allow)
            if col.shape != (n,):
                raise DataError(f"column {name!r} length {col.shape} != {n} rows")
            setattr(self, name, col)

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def labeled_mask(self):
        if self.labels is None:
            return np.zeros(self.n_rows, dtype=bool)
        return self.labels != UNLABELED

    def subset(self, index):
        take = lambda col: None if col is None else col[index].copy()
        return TabularDataset(
            features=self.features[index].copy(),
            labels=take(self.labels),
            proxy=take(self.proxy),
            source_id=take(self.source_id),
            latent_truth=take(self.latent_truth),
            column_maps=dict(self.column_maps),
        )

    def column(self, role):
        col = getattr(self, role, None)
        if col is None:
            raise DataError(f"dataset has no {role!r} column")
        return col


def class_count(column):
    """Declared cardinality of a class-id column: 1 + max id."""
    valid = column[column >= 0]
    if valid.size == 0:
        raise DataError("column has no labeled entries")
    return int(valid.max()) + 1


def _sample_categorical(row_probs, rng):
    """One draw per row from per-row category distributions."""
    u = rng.random(row_probs.shape[0])
    cdf = np.cumsum(row_probs, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, row_probs.shape[1] - 1).astype(np.int64)


def outcome_logit(features, z):
    """Score driving P(Y=1 | X, Z); its feature weights flip with z."""
    x1, x2, x3 = features[:, 0], features[:, 1], features[:, 2]
    z = np.asarray(z, dtype=np.float64)
    base = -0.6 * x1 + 2.7 * x2 + 0.6 * x3 - 0.6 * z + 1.5
    shifted = 1.5 * x1 + (1.2 - 6.0 * z) * x2 + 2.1 * x3 - 0.6 * z + 1.5
    return np.where(z == 0, base, shifted)


def _sample_conditionals(z, rng):
    """Draw features and labels given latent assignments z."""
    n = z.shape[0]
    z_x = rng.standard_normal(n)
    eps1 = rng.normal(0.0, X1_NOISE_STD, n)
    eps2 = rng.standard_normal(n)
    eps3 = rng.standard_normal(n)
    x = np.column_stack([
        -z_x + z + eps1,
        2.0 * z_x + eps2,
        3.0 * z_x + eps3,
    ])
    p = kernels.sigmoid(np.ascontiguousarray(outcome_logit(x, z)))
    y = (rng.random(n) < p).astype(np.int64)
    return x, y


@dataclass
class ProxyTaskSpec:
    """Generator settings for the proxy task.

    pz overrides the split's default latent marginal when given.
    """

    n_samples: int = 10000
    seed: int = 0
    pz: np.ndarray | None = None
    ps_given_z: np.ndarray = field(default_factory=lambda: PROXY_PS_GIVEN_Z.copy())

    def __post_init__(self):
        if self.n_samples <= 0:
            raise DataError("n_samples must be positive")
        self.ps_given_z = check_row_stochastic(self.ps_given_z, "ps_given_z")
        if self.pz is not None:
            self.pz = check_simplex(self.pz, "pz")
            if self.pz.shape[0] != self.ps_given_z.shape[0]:
                raise DataError("pz length must match ps_given_z rows")


def generate_proxy_task(spec, split):
    """Synthesize one split of the proxy task, deterministic per seed."""
    if split not in _SPLIT_STREAM:
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    pz = spec.pz
    if pz is None:
        pz = PROXY_TRAIN_PZ if split == "train" else PROXY_TEST_PZ
    pz = check_simplex(pz, "pz")
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split]])
    z = _sample_categorical(np.tile(pz, (spec.n_samples, 1)), rng)
    x, y = _sample_conditionals(z, rng)
    s = _sample_categorical(spec.ps_given_z[z], rng)
    return TabularDataset(features=x, labels=y, proxy=s, latent_truth=z)


@dataclass
class MultiSourceTaskSpec:
    """Generator settings for the multi-source task."""

    n_samples_per_source: int = 10000
    seed: int = 0
    pz_per_source: np.ndarray = field(default_factory=lambda: MULTISOURCE_PZ.copy())
    labeled_source: int = 0
    pz_test: np.ndarray = field(default_factory=lambda: MULTISOURCE_TEST_PZ.copy())

    def __post_init__(self):
        if self.n_samples_per_source <= 0:
            raise DataError("n_samples_per_source must be positive")
        self.pz_per_source = check_row_stochastic(self.pz_per_source, "pz_per_source")
        if self.pz_per_source.shape[0] == 0:
            raise DataError("at least one source is required")
        if not 0 <= self.labeled_source < self.pz_per_source.shape[0]:
            raise DataError("labeled_source out of range")
        self.pz_test = check_simplex(self.pz_test, "pz_test")


def generate_multisource_task(spec, split):
    """Synthesize one split of the multi-source task.

    Training rows carry a source id and labels only on the labeled
    source; the test split is a single unseen domain without source ids.
    """
    if split not in _SPLIT_STREAM:
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split]])
    if split == "test":
        n = spec.n_samples_per_source
        z = _sample_categorical(np.tile(spec.pz_test, (n, 1)), rng)
        x, y = _sample_conditionals(z, rng)
        return TabularDataset(features=x, labels=y, latent_truth=z)
    parts = []
    for k, pz in enumerate(spec.pz_per_source):
        n = spec.n_samples_per_source
        z = _sample_categorical(np.tile(pz, (n, 1)), rng)
        x, y = _sample_conditionals(z, rng)
        if k != spec.labeled_source:
            y = np.full(n, UNLABELED, dtype=np.int64)
        parts.append((x, y, np.full(n, k, dtype=np.int64), z))
    return TabularDataset(
        features=np.concatenate([p[0] for p in parts]),
        labels=np.concatenate([p[1] for p in parts]),
        source_id=np.concatenate([p[2] for p in parts]),
        latent_truth=np.concatenate([p[3] for p in parts]),
    )


def split_train_val(data, fraction, seed):
    """Disjoint row partition into (train, val), deterministic per seed."""
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie strictly between 0 and 1")
    n = data.n_rows
    n_val = int(n * fraction)
    if n_val == 0 or n_val == n:
        raise DataError(f"fraction {fraction} yields an empty partition for {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return data.subset(train_idx), data.subset(val_idx)


_ROLE_FIELDS = {"label": "labels", "proxy": "proxy",
                "source": "source_id", "latent": "latent_truth"}


def load_csv(path, schema):
    """Parse a CSV into a TabularDataset using a column-role schema.

    schema maps "features" to a list of column names and optionally
    "label" / "proxy" / "source" / "latent" to single names. Categorical
    columns are mapped to contiguous ids over their sorted distinct
    values; the mapping is recorded for round-tripping. Empty label
    cells mean "unlabeled"; empty cells elsewhere are errors.
    """
    feature_names = schema.get("features")
    if not feature_names:
        raise DataError("schema must name at least one feature column")
    roles = {r: schema[r] for r in _ROLE_FIELDS if schema.get(r)}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        col_index = {name: i for i, name in enumerate(header)}
        for name in list(feature_names) + list(roles.values()):
            if name not in col_index:
                raise ParseError(f"missing declared column {name!r}", line=1)
        feat_idx = [col_index[n] for n in feature_names]
        role_idx = {r: col_index[n] for r, n in roles.items()}

        features = []
        raw_roles = {r: [] for r in roles}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=line_no
                )
            vals = []
            for j, name in zip(feat_idx, feature_names):
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {row[j]!r} in feature column {name!r}",
                        line=line_no,
                    ) from None
            features.append(vals)
            for role, j in role_idx.items():
                cell = row[j].strip()
                if cell == "" and role != "label":
                    raise ParseError(
                        f"empty cell in column {roles[role]!r}", line=line_no
                    )
                raw_roles[role].append(cell)

    if not features:
        raise ParseError("no data rows", line=2)
    columns = {}
    maps = {}
    for role, raw in raw_roles.items():
        distinct = sorted({v for v in raw if v != ""})
        mapping = {v: i for i, v in enumerate(distinct)}
        columns[_ROLE_FIELDS[role]] = np.array(
            [mapping[v] if v != "" else UNLABELED for v in raw], dtype=np.int64
        )
        maps[role] = mapping
    return TabularDataset(
        features=np.array(features, dtype=np.float64),
        column_maps=maps,
        **columns,
    )


def default_feature_names(n):
    return [f"x{i + 1}" for i in range(n)]


CSV_COLUMN_NAMES = {"labels": "y", "proxy": "s", "source_id": "u",
                    "latent_truth": "z_true"}


def write_csv(data, path, feature_names=None):
    """Write a dataset as UTF-8 comma-separated text, header included.

    Floats are written with repr for byte-stable reruns; unlabeled rows
    get an empty label cell.
    """
    names = feature_names or default_feature_names(data.n_features)
    if len(names) != data.n_features:
        raise DataError("feature_names length must match feature count")
    cols = [(name, None) for name in names]
    for attr, cname in CSV_COLUMN_NAMES.items():
        if getattr(data, attr) is not None:
            cols.append((cname, attr))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([c[0] for c in cols])
        for i in range(data.n_rows):
            row = [repr(v) for v in data.features[i]]
            for _, attr in cols[data.n_features:]:
                v = int(getattr(data, attr)[i])
                row.append("" if (attr == "labels" and v == UNLABELED) else str(v))
            writer.writerow(row)


def standardize_columns(train, *others):
    """Z-score features using the first dataset's statistics.

    Returns ([transformed datasets...], mean, std). Constant columns
    keep unit scale.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = []
    for ds in (train, *others):
        if ds is None:
            out.append(None)
            continue
        copy = ds.subset(np.arange(ds.n_rows))
        copy.features = (copy.features - mean) / std
        out.append(copy)
    return out, mean, std
