# recourse_tools/PointEstimate.py
"""Random-restart gradient ascent baseline: one counterfactual per restart."""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import softmax

from recourse_tools.PosteriorModel import proximity_term
from recourse_tools.errors import SchemaError

logger = logging.getLogger('PointEstimate')


@dataclass(frozen=True)
class BaselineConfig:
    steps: int = 500
    step_size: float = 0.05
    n_restarts: int = 10
    seed: int = 0
    init_radius: float = 0.5

    def __post_init__(self):
        if self.steps < 1 or self.n_restarts < 1 or self.step_size <= 0:
            raise SchemaError("baseline needs steps >= 1, n_restarts >= 1 and a positive step size")


@dataclass(frozen=True)
class PointCounterfactual:
    restart: int
    x_star: np.ndarray
    x_discrete: np.ndarray
    objective: float
    probability: float
    valid: bool
    row: dict


def _assemble(x, delta, logits, layout):
    x_star = np.array(x, dtype=float, copy=True)
    x_star[layout.cont_positions] += delta
    etas = [softmax(v) for v in logits]
    for sl, eta in zip(layout.cat_slices, etas):
        x_star[sl] = eta
    return x_star, etas


def point_estimate_baseline(x, classifier, layout, priors, config=None):
    """Maximize log f(x*) - w_prox * ||x* - x|| / (2 lambda) over (delta, eta' logits).

    Delta is projected onto its truncation bounds after every step. Returns
    the final iterate of each restart.
    """
    config = config or BaselineConfig()
    schema = layout.schema
    rng = np.random.default_rng(config.seed)
    x = np.asarray(x, dtype=float)
    n_c = len(layout.continuous)
    results = []
    for restart in range(config.n_restarts):
        delta = np.clip(rng.uniform(-config.init_radius, config.init_radius, size=n_c), layout.lower, layout.upper)
        logits = [rng.standard_normal(len(f.levels)) for f in layout.categorical]
        for _ in range(config.steps):
            x_star, etas = _assemble(x, delta, logits, layout)
            _, grad_f = classifier.log_proba_and_grad_batch(x_star[None, :])
            _, grad_prox = proximity_term(x_star - x, priors)
            g = grad_f[0] + grad_prox[0]
            delta = np.clip(delta + config.step_size * g[layout.cont_positions], layout.lower, layout.upper)
            for m, sl in enumerate(layout.cat_slices):
                g_eta = g[sl]
                logits[m] = logits[m] + config.step_size * etas[m] * (g_eta - np.dot(etas[m], g_eta))

        x_star, etas = _assemble(x, delta, logits, layout)
        log_f, _ = classifier.log_proba_and_grad_batch(x_star[None, :])
        prox, _ = proximity_term(x_star - x, priors)
        x_discrete = x_star.copy()
        x_discrete[layout.cont_positions] = np.clip(x_discrete[layout.cont_positions], 0.0, 1.0)
        for f, sl, eta in zip(layout.categorical, layout.cat_slices, etas):
            x_discrete[sl] = schema.smoothed_one_hot(len(f.levels), int(np.argmax(eta)))
        probability = classifier.predict_proba(x_discrete)
        results.append(PointCounterfactual(
            restart=restart, x_star=x_star, x_discrete=x_discrete,
            objective=float(log_f[0] + prox[0]), probability=probability,
            valid=probability > 0.5, row=schema.decode(x_discrete),
        ))
    n_valid = sum(r.valid for r in results)
    logger.info(f"Baseline: {config.n_restarts} restart(s), {n_valid} valid")
    return results


def baseline_frame(results, instance=None):
    """Samples-file layout with every restart as a draw of pseudo-chain 0."""
    records = []
    for r in results:
        record = {'instance': instance, 'chain': 0, 'draw': r.restart, 'objective': r.objective,
                  'probability': r.probability, 'discrete_probability': r.probability, 'valid': r.valid}
        record.update({f'cf:{name}': value for name, value in r.row.items()})
        records.append(record)
    return pd.DataFrame.from_records(records)
