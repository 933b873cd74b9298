# recourse_tools/Robustness.py
"""
How well counterfactuals sit on the positive-class data manifold.

Points are embedded with DistanceContext.embed so that sklearn's Manhattan
metric reproduces the pair distance used by the diversity metric.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.neighbors import NearestNeighbors, LocalOutlierFactor

from recourse_tools.errors import NeighborhoodTooSmall, EmptyBatch

logger = logging.getLogger('Robustness')

LOF_THRESHOLD = 1.5


def _check(counterfactuals, reference, k):
    if len(counterfactuals) == 0:
        raise EmptyBatch("no counterfactuals to score")
    if k < 1 or k > len(reference):
        raise NeighborhoodTooSmall(f"k={k} but the reference set has {len(reference)} point(s)")


def knn_distance(counterfactuals, reference, k, context):
    """Mean pair distance of each counterfactual to its k nearest reference points."""
    _check(counterfactuals, reference, k)
    nn = NearestNeighbors(n_neighbors=k, metric='manhattan').fit(context.embed(reference))
    distances, _ = nn.kneighbors(context.embed(counterfactuals))
    return distances.mean(axis=1)


def lof(counterfactuals, reference, k, context, threshold=LOF_THRESHOLD):
    """Local outlier factor of each counterfactual w.r.t. the reference set -> (scores, outlier fraction)."""
    _check(counterfactuals, reference, k)
    if k >= len(reference):
        raise NeighborhoodTooSmall(f"LOF needs k < reference size, got k={k} for {len(reference)} point(s)")
    model = LocalOutlierFactor(n_neighbors=k, novelty=True, metric='manhattan')
    model.fit(context.embed(reference))
    scores = -model.score_samples(context.embed(counterfactuals))
    return scores, float(np.mean(scores > threshold))


@dataclass(frozen=True)
class ClusterNeighborhoods:
    """k-Means partition of the reference positives; a counterfactual is scored against its instance's cluster."""
    model: KMeans
    labels: np.ndarray
    reference: np.ndarray
    context: object

    def cluster_of(self, X):
        return self.model.predict(self.context.embed(X))

    def members(self, cluster):
        return self.reference[self.labels == cluster]


def cluster_neighborhoods(reference, n_clusters, seed, context):
    if n_clusters < 1 or n_clusters > len(reference):
        raise NeighborhoodTooSmall(f"{n_clusters} cluster(s) for {len(reference)} reference point(s)")
    model = KMeans(n_clusters=n_clusters, random_state=seed, n_init=10).fit(context.embed(reference))
    sizes = np.bincount(model.labels_, minlength=n_clusters)
    logger.info(f"Clustered {len(reference)} reference positives into sizes {sizes.tolist()}")
    return ClusterNeighborhoods(model=model, labels=model.labels_, reference=np.asarray(reference), context=context)


def robustness_table(instances, sets, reference, ks, context, clusters=None, threshold=LOF_THRESHOLD):
    """kNN distance and LOF outlier fraction per k, plot-ready (one row per k).

    With `clusters`, each instance's counterfactuals are scored against the
    cluster its original instance falls in. kNN needs k <= the neighbourhood
    size and LOF needs k < it; an instance is skipped for whichever score its
    neighbourhood cannot support, and the outlier fraction is NaN when no
    instance supports LOF at that k.
    """
    rows = []
    for k in ks:
        distances, outliers = [], []
        for x, samples in zip(instances, sets):
            samples = np.atleast_2d(samples)
            ref = reference if clusters is None else clusters.members(clusters.cluster_of(x)[0])
            if k > len(ref):
                continue
            distances.append(knn_distance(samples, ref, k, context))
            if k < len(ref):
                scores, _ = lof(samples, ref, k, context, threshold)
                outliers.append(scores > threshold)
        if not distances:
            logger.warning(f"k={k}: no neighbourhood large enough, skipped")
            continue
        outlier_fraction = float(np.concatenate(outliers).mean()) if outliers else np.nan
        rows.append({'k': int(k), 'knn_distance': float(np.concatenate(distances).mean()),
                     'outlier_fraction': outlier_fraction, 'instances': len(distances),
                     'lof_instances': len(outliers)})
    return pd.DataFrame(rows, columns=['k', 'knn_distance', 'outlier_fraction', 'instances', 'lof_instances'])
