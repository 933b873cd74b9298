# recourse_tools/Metrics.py
"""
Counterfactual quality metrics.

A counterfactual set is an (n_samples, encoded_width) array of decoded-form
counterfactuals (continuous clamped, categorical blocks one level each) for
one original instance. Distances follow one convention throughout:

    d(a, b) = sum_cont |a_i - b_i| / MAD_i + sum_cat [level_a != level_b]
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist

from recourse_tools.TabularData import MAD_FLOOR
from recourse_tools.errors import EmptyBatch

logger = logging.getLogger('Metrics')

QUANTIZATION_BINS = 10


@dataclass(frozen=True)
class DistanceContext:
    schema: object
    mad: np.ndarray
    bins: int = QUANTIZATION_BINS
    floor: float = MAD_FLOOR

    def __post_init__(self):
        mad = np.maximum(np.asarray(self.mad, dtype=float), self.floor)
        if mad.shape != (self.schema.d_cont,):
            raise ValueError(f"MAD has shape {mad.shape}, schema has {self.schema.d_cont} continuous features")
        object.__setattr__(self, 'mad', mad)

    @classmethod
    def from_stats(cls, schema, stats, bins=QUANTIZATION_BINS):
        return cls(schema=schema, mad=stats.mad, bins=bins)

    def quantize(self, X):
        """10-bin index of every continuous value (encoded units, clipped to [0, 1])."""
        cont = np.clip(np.atleast_2d(X)[:, :self.schema.d_cont], 0.0, 1.0)
        return np.minimum((cont * self.bins).astype(int), self.bins - 1)

    def levels(self, X):
        X = np.atleast_2d(X)
        return np.column_stack([self.schema.level_indices_matrix(X, f.name) for f in self.schema.categorical]) \
            if self.schema.d_cat else np.zeros((len(X), 0), dtype=int)

    def scaled(self, X):
        return np.atleast_2d(X)[:, :self.schema.d_cont] / self.mad

    def embed(self, X):
        """Rows in a space where Manhattan distance equals the pair distance."""
        X = np.atleast_2d(X)
        parts = [self.scaled(X)]
        levels = self.levels(X)
        for j, f in enumerate(self.schema.categorical):
            one_hot = np.zeros((len(X), len(f.levels)))
            one_hot[np.arange(len(X)), levels[:, j]] = 0.5
            parts.append(one_hot)
        return np.hstack(parts)

    def pair_distance(self, a, b):
        return float(self.distances_to(a, np.atleast_2d(b))[0])

    def distances_to(self, x, X):
        """Pair distance from a single row x to every row of X."""
        X = np.atleast_2d(X)
        cont = np.abs(self.scaled(X) - self.scaled(x)).sum(axis=1)
        changed = (self.levels(X) != self.levels(x)).sum(axis=1)
        return cont + changed


# ---------------------------------------------------------------------------
# Per-set metrics
# ---------------------------------------------------------------------------

def _check_sets(instances, sets):
    if len(instances) != len(sets):
        raise ValueError(f"{len(instances)} instances but {len(sets)} counterfactual sets")
    if len(instances) == 0:
        raise EmptyBatch("no instances to evaluate")


def validity(instances, sets, classifier):
    """Share of instances with at least one counterfactual scored above 0.5."""
    _check_sets(instances, sets)
    covered = [len(s) > 0 and bool((classifier.predict_proba_batch(np.atleast_2d(s)) > 0.5).any()) for s in sets]
    return float(np.mean(covered))


def proximity(instances, sets):
    """Mean over instances of the closest counterfactual's Euclidean distance (encoded space)."""
    _check_sets(instances, sets)
    closest = [np.min(np.linalg.norm(np.atleast_2d(s) - x, axis=1)) for x, s in zip(instances, sets)]
    return float(np.mean(closest))


def changed_fraction(x, samples, context):
    """Per-sample fraction of features changed (continuous compared after quantization)."""
    samples = np.atleast_2d(samples)
    cont = (context.quantize(samples) != context.quantize(x)).sum(axis=1)
    cat = (context.levels(samples) != context.levels(x)).sum(axis=1)
    return (cont + cat) / context.schema.d


def sparsity(instances, sets, context):
    _check_sets(instances, sets)
    return float(np.mean([changed_fraction(x, s, context).mean() for x, s in zip(instances, sets)]))


def diversity(samples, context):
    """Sum of pair distances over unordered pairs, divided by n^2."""
    samples = np.atleast_2d(samples)
    n = len(samples)
    if n < 2:
        return 0.0
    total = 0.0
    if context.schema.d_cont:
        total += pdist(context.scaled(samples), 'cityblock').sum()
    levels = context.levels(samples)
    for j in range(levels.shape[1]):
        total += np.count_nonzero(pdist(levels[:, [j]], 'hamming'))
    return float(total / n ** 2)


def diversity_by_sample_count(samples, context, counts):
    """Diversity of growing prefixes of the draw sequence."""
    samples = np.atleast_2d(samples)
    rows = [{'samples': int(c), 'diversity': diversity(samples[:c], context)}
            for c in counts if 0 < c <= len(samples)]
    return pd.DataFrame(rows, columns=['samples', 'diversity'])


def sample_costs(x, samples, context):
    """Recourse cost of each counterfactual: its pair distance to x."""
    return context.distances_to(x, samples)


def rank_by_cost(x, samples, probabilities, context, top_k):
    """Indices of the `top_k` cheapest counterfactuals among those scored above 0.5."""
    costs = sample_costs(x, samples, context)
    valid = np.flatnonzero(np.asarray(probabilities) > 0.5)
    order = valid[np.argsort(costs[valid], kind='stable')]
    return order[:top_k], costs[order[:top_k]]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    validity: float
    proximity: float
    sparsity: float
    diversity: np.ndarray
    robustness: pd.DataFrame = field(default_factory=pd.DataFrame)
    fairness: pd.DataFrame = field(default_factory=pd.DataFrame)
    costs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def diversity_mean(self):
        return float(np.mean(self.diversity)) if len(self.diversity) else 0.0

    @property
    def diversity_var(self):
        return float(np.var(self.diversity)) if len(self.diversity) else 0.0

    def to_dict(self):
        return {
            'validity': self.validity,
            'proximity': self.proximity,
            'sparsity': self.sparsity,
            'diversity_mean': self.diversity_mean,
            'diversity_var': self.diversity_var,
            'diversity': [float(v) for v in self.diversity],
            'costs': [float(v) for v in self.costs],
            'robustness': self.robustness.to_dict(orient='records'),
            'fairness': self.fairness.to_dict(orient='records'),
        }

    def summary_frame(self):
        return pd.DataFrame([{
            'validity': self.validity, 'proximity': self.proximity, 'sparsity': self.sparsity,
            'diversity_mean': self.diversity_mean, 'diversity_var': self.diversity_var,
        }])

    def write(self, prefix):
        """<prefix>_metrics.csv / .json, plus robustness and fairness CSVs when present."""
        self.summary_frame().to_csv(f'{prefix}_metrics.csv', index=False)
        with open(f'{prefix}_metrics.json', 'w', encoding='utf-8') as fh:
            json.dump(self.to_dict(), fh, indent=2)
        written = [f'{prefix}_metrics.csv', f'{prefix}_metrics.json']
        if len(self.robustness):
            self.robustness.to_csv(f'{prefix}_robustness.csv', index=False)
            written.append(f'{prefix}_robustness.csv')
        if len(self.fairness):
            self.fairness.to_csv(f'{prefix}_fairness.csv', index=False)
            written.append(f'{prefix}_fairness.csv')
        return written


def evaluate(instances, sets, classifier, context, robustness=None, fairness=None):
    """Headline metrics over matched instances / counterfactual sets."""
    _check_sets(instances, sets)
    report = MetricsReport(
        validity=validity(instances, sets, classifier),
        proximity=proximity(instances, sets),
        sparsity=sparsity(instances, sets, context),
        diversity=np.array([diversity(s, context) for s in sets]),
        robustness=robustness if robustness is not None else pd.DataFrame(),
        fairness=fairness if fairness is not None else pd.DataFrame(),
        costs=np.array([sample_costs(x, s, context).mean() for x, s in zip(instances, sets)]),
    )
    logger.info(f"Metrics over {len(instances)} instance(s): validity {report.validity:.3f}, "
                f"proximity {report.proximity:.3f}, sparsity {report.sparsity:.3f}, "
                f"diversity {report.diversity_mean:.3f}")
    return report
