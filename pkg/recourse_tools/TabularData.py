# recourse_tools/TabularData.py
"""
Dataset ingestion, group partitioning and synthetic data generation.

A Dataset keeps the raw frame next to its encoded matrix, labels and group
ids. The train/test split is fixed at construction from a seed; training-split
statistics (median, MAD, observed range) are recorded for downstream use.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from recourse_tools.FeatureSchema import FeatureSchema, FeatureSpec, CONTINUOUS, CATEGORICAL
from recourse_tools.errors import (
    EmptyDataset, MissingColumn, NonNumeric, OutOfRange, UnknownLevel, NoPositives, SelectorError, SchemaError,
)

logger = logging.getLogger('TabularData')

DEFAULT_TRAIN_FRACTION = 0.8
MAD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainingStats:
    """Per-continuous-feature statistics of the training split, in encoded units."""
    median: np.ndarray
    mad: np.ndarray
    observed_min: np.ndarray
    observed_max: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ('median', 'mad', 'observed_min', 'observed_max')}

    @classmethod
    def from_dict(cls, payload):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in payload.items()})


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    frame: pd.DataFrame
    encoded: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray
    stats: TrainingStats

    @property
    def n_groups(self):
        return self.schema.n_groups

    def __len__(self):
        return len(self.labels)

    @property
    def train(self):
        return self.encoded[self.train_index], self.labels[self.train_index]

    @property
    def test(self):
        return self.encoded[self.test_index], self.labels[self.test_index]

    def raw_row(self, index):
        return {name: self.frame.iloc[index][name] for name in self.schema.names}

    @classmethod
    def from_frame(cls, frame, schema, train_fraction=DEFAULT_TRAIN_FRACTION, split_seed=0):
        """Encode a raw frame (feature columns + label column) under `schema`."""
        if len(frame) == 0:
            raise EmptyDataset("dataset has no rows")
        missing = [c for c in schema.names + [schema.label] if c not in frame.columns]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")

        n = len(frame)
        encoded, raw = encode_frame(frame, schema)

        labels = pd.to_numeric(frame[schema.label], errors='coerce').to_numpy()
        if not np.isin(labels, (0, 1)).all():
            raise NonNumeric(f"label column '{schema.label}' must hold 0/1 values")
        labels = labels.astype(int)

        if schema.group_feature is not None:
            groups = schema.level_indices_matrix(encoded, schema.group_feature)
        else:
            groups = np.zeros(n, dtype=int)

        train_index, test_index = train_test_split(n, train_fraction, split_seed)
        raw_frame = pd.DataFrame(raw)[schema.names]
        raw_frame[schema.label] = labels
        dataset = cls(
            schema=schema, frame=raw_frame, encoded=encoded, labels=labels, groups=groups,
            train_index=train_index, test_index=test_index,
            stats=training_stats(encoded[train_index], schema),
        )
        logger.info(f"Dataset encoded: {n} rows, width {schema.encoded_width}, "
                    f"{len(train_index)} train / {len(test_index)} test, K={schema.n_groups}")
        return dataset


def encode_frame(frame, schema):
    """Encoded matrix and cleaned raw columns for the feature columns of a frame."""
    n = len(frame)
    encoded = np.empty((n, schema.encoded_width))
    raw = {}
    for f in schema.features:
        if f.name not in frame.columns:
            raise MissingColumn(f"missing column: {f.name}")
        column = frame[f.name]
        sl = schema.block(f.name)
        if f.is_continuous:
            values = pd.to_numeric(column, errors='coerce').to_numpy(dtype=float)
            bad = ~np.isfinite(values)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise NonNumeric(f"feature '{f.name}', row {row}: value {column.iloc[row]!r} is not numeric")
            try:
                encoded[:, sl] = schema.scale_continuous(f, values)[:, None]
            except OutOfRange as e:
                row = int(np.flatnonzero((values < f.min) | (values > f.max))[0])
                raise OutOfRange(f"row {row}: {e}") from None
            raw[f.name] = values
        else:
            levels = column.astype(str).str.strip()
            codes = levels.map({lv: i for i, lv in enumerate(f.levels)})
            if codes.isna().any():
                row = int(np.flatnonzero(codes.isna().to_numpy())[0])
                raise UnknownLevel(f"feature '{f.name}', row {row}: unknown level '{levels.iloc[row]}'")
            codes = codes.to_numpy(dtype=int)
            block = np.full((n, len(f.levels)), schema.smoothing)
            block[np.arange(n), codes] = 1.0 - schema.smoothing * (len(f.levels) - 1)
            encoded[:, sl] = block
            raw[f.name] = levels.to_numpy()
    return encoded, raw


def load_csv(path, schema, train_fraction=DEFAULT_TRAIN_FRACTION, split_seed=0):
    """Read a UTF-8 comma-separated file with a header row and encode it."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} is empty") from None
    frame.columns = [c.strip() for c in frame.columns]
    return Dataset.from_frame(frame, schema, train_fraction=train_fraction, split_seed=split_seed)


def train_test_split(n, fraction=DEFAULT_TRAIN_FRACTION, seed=0):
    """Seeded permutation split; the training part always keeps at least one row."""
    if not 0.0 < fraction < 1.0:
        raise SchemaError(f"train fraction {fraction} outside (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n, max(1, int(round(fraction * n))))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def training_stats(train_encoded, schema):
    d_cont = schema.d_cont
    cont = train_encoded[:, :d_cont]
    if len(cont) == 0:
        zeros = np.zeros(d_cont)
        return TrainingStats(zeros, np.full(d_cont, MAD_FLOOR), zeros, zeros)
    median = np.median(cont, axis=0)
    mad = np.maximum(np.median(np.abs(cont - median), axis=0), MAD_FLOOR)
    return TrainingStats(median=median, mad=mad, observed_min=cont.min(axis=0), observed_max=cont.max(axis=0))


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionedData:
    """Training instances split by subgroup and by classifier decision."""
    positives: tuple          # per-group arrays
    negatives: tuple
    pooled_positives: np.ndarray
    pooled_negatives: np.ndarray
    pooled_positive_mean: np.ndarray
    group_positive_means: np.ndarray
    fallback_groups: tuple = field(default=())

    @property
    def n_groups(self):
        return len(self.positives)

    def subsample_negatives(self, per_group, pooled, seed):
        """Fixed, seeded negative subsamples for the level likelihoods.

        Returns (list of per-group arrays, pooled array). A size of 0 empties
        that level.
        """
        rng = np.random.default_rng(seed)

        def pick(rows, size):
            if size <= 0 or len(rows) == 0:
                return rows[:0]
            if len(rows) <= size:
                return rows
            return rows[np.sort(rng.choice(len(rows), size=size, replace=False))]

        groups = [pick(neg, per_group) for neg in self.negatives]
        return groups, pick(self.pooled_negatives, pooled)


def partition(dataset, classifier, rows=None, strict=False):
    """Split correctly-classified rows into per-group and pooled positive/negative sets.

    `rows` defaults to the training split. A subgroup without positives
    inherits the pooled positive mean unless `strict` is set, in which case
    NoPositives is raised.
    """
    rows = dataset.train_index if rows is None else np.asarray(rows)
    X = dataset.encoded[rows]
    y = dataset.labels[rows]
    g = dataset.groups[rows]
    predicted = classifier.predict_proba_batch(X) > 0.5
    correct = predicted == y.astype(bool)
    if not correct.any():
        raise EmptyDataset("no correctly classified instances to partition")

    pos_mask = correct & predicted
    neg_mask = correct & ~predicted
    if not pos_mask.any():
        raise EmptyDataset("no correctly classified positive instances")

    pooled_pos = X[pos_mask]
    pooled_mean = pooled_pos.mean(axis=0)
    positives, negatives, means, fallback = [], [], [], []
    for k in range(dataset.n_groups):
        pos_k = X[pos_mask & (g == k)]
        positives.append(pos_k)
        negatives.append(X[neg_mask & (g == k)])
        if len(pos_k) == 0:
            if strict:
                raise NoPositives(k)
            logger.warning(f"Subgroup {k} has no positives, falling back to the pooled positive mean")
            fallback.append(k)
            means.append(pooled_mean)
        else:
            means.append(pos_k.mean(axis=0))

    logger.info(f"Partitioned {int(correct.sum())} correctly classified rows: "
                f"{int(pos_mask.sum())} positive, {int(neg_mask.sum())} negative")
    return PartitionedData(
        positives=tuple(positives), negatives=tuple(negatives),
        pooled_positives=pooled_pos, pooled_negatives=X[neg_mask],
        pooled_positive_mean=pooled_mean, group_positive_means=np.array(means),
        fallback_groups=tuple(fallback),
    )


def select_instances(dataset, classifier, selector):
    """Resolve an instance selector to row indices.

    Accepted forms: a row index ('12'), a comma list ('3,7,9') or
    'negatives:N' for the first N correctly classified negatives of the test
    split.
    """
    selector = str(selector).strip()
    n = len(dataset)
    if selector.startswith('negatives:'):
        try:
            count = int(selector.split(':', 1)[1])
        except ValueError:
            raise SelectorError(f"bad selector '{selector}'") from None
        if count < 1:
            raise SelectorError(f"selector '{selector}' asks for no instance")
        rows = dataset.test_index
        probs = classifier.predict_proba_batch(dataset.encoded[rows])
        keep = rows[(probs <= 0.5) & (dataset.labels[rows] == 0)]
        if len(keep) == 0:
            raise SelectorError("no correctly classified negatives in the test split")
        return keep[:count]
    try:
        indices = np.array([int(part) for part in selector.split(',') if part.strip()], dtype=int)
    except ValueError:
        raise SelectorError(f"bad selector '{selector}'") from None
    if len(indices) == 0 or (indices < 0).any() or (indices >= n).any():
        raise SelectorError(f"selector '{selector}' matches no instance (dataset has {n} rows)")
    return indices


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    d_cont: int = 2
    d_cat: int = 2
    n_groups: int = 2
    n_levels: int = 3
    class_means: tuple = (0.3, 0.7)
    class_sd: float = 0.1


def synthetic_schema(spec):
    features = [FeatureSpec(name=f'x{i}', kind=CONTINUOUS, min=0.0, max=100.0) for i in range(spec.d_cont)]
    group_feature = None
    n_informative = spec.d_cat
    if spec.n_groups > 1:
        if spec.d_cat < 1:
            raise SchemaError("a grouped synthetic dataset needs at least one categorical feature")
        group_feature = 'group'
        features.append(FeatureSpec(name='group', kind=CATEGORICAL, mutable=False,
                                    levels=tuple(f'g{k}' for k in range(spec.n_groups))))
        n_informative -= 1
    for j in range(n_informative):
        features.append(FeatureSpec(name=f'c{j}', kind=CATEGORICAL,
                                    levels=tuple(f'l{v}' for v in range(spec.n_levels))))
    return FeatureSchema(features=tuple(features), label='label', group_feature=group_feature)


def _category_probs(n_levels, label):
    # Class 0 leans to the first level, class 1 to the last.
    weights = np.linspace(1.0, 3.0, n_levels)
    if label == 0:
        weights = weights[::-1]
    return weights / weights.sum()


def generate_synthetic_frame(spec, seed):
    if spec.n <= 0:
        raise EmptyDataset("synthetic spec asks for zero rows")
    schema = synthetic_schema(spec)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=spec.n)
    data = {}
    means = np.asarray(spec.class_means)[labels]
    for f in schema.continuous:
        value = rng.normal(means, spec.class_sd)
        data[f.name] = np.clip(value, 0.0, 1.0) * (f.max - f.min) + f.min
    groups = rng.integers(0, max(spec.n_groups, 1), size=spec.n)
    for f in schema.categorical:
        if f.name == schema.group_feature:
            data[f.name] = np.array(f.levels)[groups]
            continue
        p0, p1 = _category_probs(len(f.levels), 0), _category_probs(len(f.levels), 1)
        draws = np.array([rng.choice(len(f.levels), p=p1 if lab else p0) for lab in labels])
        data[f.name] = np.array(f.levels)[draws]
    frame = pd.DataFrame(data)[schema.names]
    frame[schema.label] = labels
    return frame, schema


def generate_synthetic(spec, seed, train_fraction=DEFAULT_TRAIN_FRACTION):
    """Deterministic class-conditional synthetic dataset."""
    frame, schema = generate_synthetic_frame(spec, seed)
    return Dataset.from_frame(frame, schema, train_fraction=train_fraction, split_seed=seed)


def generate_clustered(spec, n_clusters, seed, spread=0.04, separation=0.12,
                       train_fraction=DEFAULT_TRAIN_FRACTION):
    """Synthetic data whose classes form tight per-group clusters.

    The group feature doubles as the cluster id, so subgroup-level
    parameters have a distinct neighbourhood to pull toward.
    """
    spec = SyntheticSpec(n=spec.n, d_cont=spec.d_cont, d_cat=max(spec.d_cat, 1), n_groups=n_clusters,
                         n_levels=spec.n_levels, class_means=spec.class_means, class_sd=spec.class_sd)
    if spec.n <= 0:
        raise EmptyDataset("synthetic spec asks for zero rows")
    schema = synthetic_schema(spec)
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(n_clusters, spec.d_cont))
    labels = rng.integers(0, 2, size=spec.n)
    groups = rng.integers(0, n_clusters, size=spec.n)
    shift = np.where(labels[:, None] == 1, separation, -separation)
    cont = np.clip(centers[groups] + shift + rng.normal(0.0, spread, size=(spec.n, spec.d_cont)), 0.0, 1.0)
    data = {}
    for i, f in enumerate(schema.continuous):
        data[f.name] = cont[:, i] * (f.max - f.min) + f.min
    for f in schema.categorical:
        if f.name == schema.group_feature:
            data[f.name] = np.array(f.levels)[groups]
        else:
            p0, p1 = _category_probs(len(f.levels), 0), _category_probs(len(f.levels), 1)
            draws = np.array([rng.choice(len(f.levels), p=p1 if lab else p0) for lab in labels])
            data[f.name] = np.array(f.levels)[draws]
    frame = pd.DataFrame(data)[schema.names]
    frame[schema.label] = labels
    return Dataset.from_frame(frame, schema, train_fraction=train_fraction, split_seed=seed)
