# recourse_tools/PosteriorModel.py
"""
Unnormalized log posterior over counterfactual perturbations.

    log p(theta | x) = log prior (Gaussian chain mu_l1 -> mu_l2 -> delta,
                                  Dirichlet chain beta_l1 -> beta_l2 -> eta',
                                  inverse-gamma sigma, gamma alpha, causal edges)
                     + log |Jacobian| of the layout transform
                     + log f(x*) - w_prox * ||x* - x|| / (2 lambda)
                     + sum over level negatives y of
                       log f(y*) - w_prox * ||y* - positive mean|| / (2 lambda)

Gradients are assembled by hand: each density returns its partials with
respect to the constrained values, the likelihood terms go through the
classifier input gradient, and ParameterLayout.pullback applies the
transform Jacobian. The model is immutable after construction so every
chain can evaluate it concurrently.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import gammaln, digamma, log_ndtr

from recourse_tools.ParameterLayout import ParameterLayout
from recourse_tools.errors import NonFinite, EmptyLevel, WidthMismatch

logger = logging.getLogger('PosteriorModel')

LOG_2PI = np.log(2.0 * np.pi)
NORM_EPS = 1e-16


# ---------------------------------------------------------------------------
# Densities; each returns the value and its partial derivatives
# ---------------------------------------------------------------------------

def normal_logpdf(x, mean, sd):
    """Elementwise log N(x; mean, sd) -> (value, d/dx, d/dmean, d/dsd)."""
    z = (x - mean) / sd
    value = -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z
    dx = -z / sd
    return value, dx, -dx, (z * z - 1.0) / sd


def _log_phi(t):
    return -0.5 * LOG_2PI - 0.5 * t * t


def truncated_log_normalizer(mean, sd, lower, upper):
    """log of the normal mass inside (lower, upper) -> (value, d/dmean, d/dsd)."""
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(sd, dtype=float),
        np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    value = np.zeros(mean.shape)
    dmean = np.zeros(mean.shape)
    dsd = np.zeros(mean.shape)
    has_lo, has_hi = np.isfinite(lower), np.isfinite(upper)

    lo = has_lo & ~has_hi
    if lo.any():
        t = (mean[lo] - lower[lo]) / sd[lo]
        value[lo] = log_ndtr(t)
        h = np.exp(_log_phi(t) - value[lo])
        dmean[lo] = h / sd[lo]
        dsd[lo] = -h * t / sd[lo]

    hi = ~has_lo & has_hi
    if hi.any():
        t = (upper[hi] - mean[hi]) / sd[hi]
        value[hi] = log_ndtr(t)
        h = np.exp(_log_phi(t) - value[hi])
        dmean[hi] = -h / sd[hi]
        dsd[hi] = -h * t / sd[hi]

    both = has_lo & has_hi
    if both.any():
        a = (lower[both] - mean[both]) / sd[both]
        b = (upper[both] - mean[both]) / sd[both]
        # Work in whichever tail keeps the difference of CDFs accurate.
        upper_tail = a > 0
        big = np.where(upper_tail, log_ndtr(-a), log_ndtr(b))
        small = np.where(upper_tail, log_ndtr(-b), log_ndtr(a))
        log_z = big + np.log1p(-np.exp(small - big))
        value[both] = log_z
        pa = np.exp(_log_phi(a) - log_z)
        pb = np.exp(_log_phi(b) - log_z)
        dmean[both] = (pa - pb) / sd[both]
        dsd[both] = (a * pa - b * pb) / sd[both]
    return value, dmean, dsd


def inv_gamma_logpdf(x, shape, scale):
    value = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return value, -(shape + 1.0) / x + scale / (x * x)


def gamma_logpdf(x, shape, rate):
    value = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return value, (shape - 1.0) / x - rate


def dirichlet_logpdf(log_y, concentration):
    """log Dir(y; c) along the last axis -> (value, d/dlog_y, d/dc)."""
    total = concentration.sum(axis=-1)
    value = gammaln(total) - gammaln(concentration).sum(axis=-1) + ((concentration - 1.0) * log_y).sum(axis=-1)
    d_conc = digamma(total)[..., None] - digamma(concentration) + log_y
    return value, concentration - 1.0, d_conc


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def proximity_term(diff, priors):
    """-w_prox * ||diff|| / (2 lambda) per row and its gradient; the norm is smoothed at zero."""
    diff = np.atleast_2d(diff)
    norm = np.sqrt(np.einsum('ij,ij->i', diff, diff) + NORM_EPS)
    scale = priors.w_prox / (2.0 * priors.bandwidth)
    return -scale * norm, -scale * diff / norm[:, None]


def log_likelihood_instance(x, x_star, classifier, priors):
    """log f(x*) - w_prox * ||x* - x|| / (2 lambda)."""
    log_f, _ = classifier.log_proba_and_grad_batch(np.asarray(x_star, dtype=float)[None, :])
    prox, _ = proximity_term(np.asarray(x_star) - np.asarray(x), priors)
    return float(log_f[0] + prox[0])


def perturb_rows(rows, shift, simplexes, layout):
    """Apply a level perturbation: continuous shift, categorical blocks replaced."""
    out = np.array(rows, dtype=float, copy=True)
    if len(layout.cont_positions):
        out[:, layout.cont_positions] += shift
    for sl, y in zip(layout.cat_slices, simplexes):
        out[:, sl] = y
    return out


def level_term(rows, target, shift, simplexes, layout, classifier, priors):
    """Summed level likelihood over `rows` -> (value, d/dshift, [d/dsimplex ...])."""
    if len(rows) == 0:
        return 0.0, np.zeros(len(layout.cont_positions)), [np.zeros(sl.stop - sl.start) for sl in layout.cat_slices]
    y_star = perturb_rows(rows, shift, simplexes, layout)
    log_f, grad_f = classifier.log_proba_and_grad_batch(y_star)
    prox, grad_prox = proximity_term(y_star - target, priors)
    grad = (grad_f + grad_prox).sum(axis=0)
    return (float(log_f.sum() + prox.sum()),
            grad[layout.cont_positions],
            [grad[sl] for sl in layout.cat_slices])


@dataclass(frozen=True)
class LevelData:
    """Fixed negative subsample of one hierarchy level and the positive mean it is pulled toward."""
    negatives: np.ndarray
    target: np.ndarray

    @property
    def baseline(self):
        return self.negatives.mean(axis=0) if len(self.negatives) else self.target


def draw_level(probs, rng, mode='sample'):
    probs = np.asarray(probs, dtype=float)
    if mode == 'argmax':
        return int(np.argmax(probs))
    return int(rng.choice(len(probs), p=probs / probs.sum()))


@dataclass(frozen=True)
class CounterfactualSample:
    constrained: np.ndarray
    x_star: np.ndarray
    levels: np.ndarray
    log_posterior: float
    probability: float
    x_discrete: np.ndarray
    discrete_probability: float
    row: dict


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class PosteriorModel:
    """Log posterior and gradient for one local instance x."""

    def __init__(self, x, schema, classifier, priors, partitioned=None, group=None, include_likelihood=True):
        x = np.array(x, dtype=float)
        if x.shape != (schema.encoded_width,) or classifier.input_width != schema.encoded_width:
            raise WidthMismatch(f"instance width {x.shape}, schema {schema.encoded_width}, "
                                f"classifier {classifier.input_width}")
        priors.validate_against(schema)
        self.x = x
        self.x.setflags(write=False)
        self.schema = schema
        self.classifier = classifier
        self.priors = priors
        self.include_likelihood = include_likelihood
        self.layout = ParameterLayout(schema, priors)
        self.levels = priors.levels
        self.n_groups = self.layout.n_groups
        if group is None:
            group = 0 if schema.group_feature is None else int(np.argmax(x[schema.block(schema.group_feature)]))
        self.group = group

        lay = self.layout
        self.mu0 = np.array([priors.mu0_for(f.name) for f in lay.continuous])
        self.mass = [priors.mass_for(f) for f in lay.categorical]

        names = [f.name for f in lay.continuous]
        n_c = len(names)
        self.causal = np.zeros(n_c, dtype=bool)
        self.causal_parent = np.full(n_c, -1)
        self.causal_slope = np.zeros(n_c)
        self.causal_intercept = np.zeros(n_c)
        self.causal_sd = np.ones(n_c)
        for j, f in enumerate(lay.continuous):
            edge = f.causal_parent
            if edge is None:
                continue
            self.causal[j] = True
            # A frozen parent never moves, so its delta is 0.
            self.causal_parent[j] = names.index(edge.parent) if edge.parent in names else -1
            self.causal_slope[j] = edge.slope
            self.causal_intercept[j] = edge.intercept
            self.causal_sd[j] = edge.noise_sd

        self.level_l1 = None
        self.level_l2 = ()
        if include_likelihood and self.levels >= 2:
            if partitioned is None:
                raise ValueError("hierarchical models need partitioned training data")
            groups, pooled = partitioned.subsample_negatives(
                priors.subsample_group, priors.subsample_pooled, priors.subsample_seed)
            if priors.subsample_pooled > 0 and len(pooled) == 0:
                raise EmptyLevel("population level has no correctly classified negatives")
            self.level_l1 = LevelData(pooled, partitioned.pooled_positive_mean)
            if self.levels == 3:
                for k, rows in enumerate(groups):
                    if priors.subsample_group > 0 and len(rows) == 0:
                        raise EmptyLevel(f"subgroup {k} has no correctly classified negatives")
                self.level_l2 = tuple(LevelData(groups[k], partitioned.group_positive_means[k])
                                      for k in range(self.n_groups))
            logger.debug(f"Level subsamples: pooled {len(pooled)}, "
                         f"per group {[len(level.negatives) for level in self.level_l2]}")

    @property
    def dim(self):
        return self.layout.size

    @property
    def scale_levels(self):
        """Hierarchy levels that carry a sigma / alpha."""
        return {1: (3,), 2: (1, 3), 3: (1, 2, 3)}[self.levels]

    def __call__(self, theta):
        return self.log_posterior_and_grad(theta)

    # ------------------------------------------------------------------
    # Prior
    # ------------------------------------------------------------------

    def _zero_grads(self, c):
        K = self.n_groups
        n_c, n_m = len(self.layout.continuous), len(self.layout.categorical)
        return {
            'delta': np.zeros(n_c), 'mu_l1': np.zeros(n_c), 'mu_l2': np.zeros((K, n_c)),
            'sigma_l1': np.zeros(n_c), 'sigma_l2': np.zeros((K, n_c)), 'sigma_l3': np.zeros(n_c),
            'alpha_l1': np.zeros(n_m), 'alpha_l2': np.zeros((K, n_m)), 'alpha_l3': np.zeros(n_m),
            'log_beta_l1': [np.zeros_like(v) for v in c.beta_l1],
            'log_beta_l2': [np.zeros_like(v) for v in c.beta_l2],
            'log_eta': [np.zeros_like(v) for v in c.eta],
        }

    def log_prior(self, c):
        return self.log_prior_and_grad(c)[0]

    def log_prior_and_grad(self, c):
        """Log prior of constrained values and its partials (Jacobian not included)."""
        lay, priors, levels, k = self.layout, self.priors, self.levels, self.group
        g = self._zero_grads(c)
        total = 0.0

        if len(lay.continuous):
            if levels >= 2:
                v, dx, _, ds = normal_logpdf(c.mu_l1, self.mu0, c.sigma_l1)
                total += v.sum()
                g['mu_l1'] += dx
                g['sigma_l1'] += ds
            if levels == 3:
                v, dx, dm, ds = normal_logpdf(c.mu_l2, c.mu_l1[None, :], c.sigma_l2)
                total += v.sum()
                g['mu_l2'] += dx
                g['mu_l1'] += dm.sum(axis=0)
                g['sigma_l2'] += ds

            if levels == 1:
                parent_mean = self.mu0
            elif levels == 2:
                parent_mean = c.mu_l1
            else:
                parent_mean = c.mu_l2[k]
            parent_delta = np.where(self.causal_parent >= 0, c.delta[np.maximum(self.causal_parent, 0)], 0.0)
            mean = np.where(self.causal, self.causal_slope * parent_delta + self.causal_intercept, parent_mean)
            sd = np.where(self.causal, self.causal_sd, c.sigma_l3)
            v, dx, dm, ds = normal_logpdf(c.delta, mean, sd)
            log_z, dz_mean, dz_sd = truncated_log_normalizer(mean, sd, lay.lower, lay.upper)
            total += (v - log_z).sum()
            g['delta'] += dx
            d_mean = dm - dz_mean
            d_sd = ds - dz_sd
            plain = ~self.causal
            if levels == 2:
                g['mu_l1'] += np.where(plain, d_mean, 0.0)
            elif levels == 3:
                g['mu_l2'][k] += np.where(plain, d_mean, 0.0)
            g['sigma_l3'] += np.where(plain, d_sd, 0.0)
            linked = self.causal & (self.causal_parent >= 0)
            np.add.at(g['delta'], self.causal_parent[linked], (d_mean * self.causal_slope)[linked])

            if lay.learn_scales:
                for level in self.scale_levels:
                    v, dx = inv_gamma_logpdf(getattr(c, f'sigma_l{level}'), priors.gamma_a1,
                                             priors.gamma_b1 * lay.sigma_seed[level])
                    total += v.sum()
                    g[f'sigma_l{level}'] += dx

        for m, f in enumerate(lay.categorical):
            n_levels = len(f.levels)
            base = self.mass[m]
            if levels >= 2:
                v, dly, dc = dirichlet_logpdf(c.log_beta_l1[m], c.alpha_l1[m] * base)
                total += v
                g['log_beta_l1'][m] += dly
                g['alpha_l1'][m] += dc @ base
            if levels == 3:
                parent = n_levels * c.beta_l1[m][None, :]
                alpha = c.alpha_l2[:, m][:, None]
                v, dly, dc = dirichlet_logpdf(c.log_beta_l2[m], alpha * parent)
                total += v.sum()
                g['log_beta_l2'][m] += dly
                g['alpha_l2'][:, m] += (dc * parent).sum(axis=1)
                g['log_beta_l1'][m] += (dc * alpha).sum(axis=0) * n_levels * c.beta_l1[m]

            alpha = c.alpha_l3[m]
            if levels == 1:
                parent = base
            elif levels == 2:
                parent = n_levels * c.beta_l1[m]
            else:
                parent = n_levels * c.beta_l2[m][k]
            v, dly, dc = dirichlet_logpdf(c.log_eta[m], alpha * parent)
            total += v
            g['log_eta'][m] += dly
            g['alpha_l3'][m] += dc @ parent
            if levels == 2:
                g['log_beta_l1'][m] += dc * alpha * n_levels * c.beta_l1[m]
            elif levels == 3:
                g['log_beta_l2'][m][k] += dc * alpha * n_levels * c.beta_l2[m][k]

        if lay.learn_scales and len(lay.categorical):
            for level in self.scale_levels:
                v, dx = gamma_logpdf(getattr(c, f'alpha_l{level}'), priors.gamma_a2, priors.gamma_b2)
                total += v.sum()
                g[f'alpha_l{level}'] += dx
        return float(total), g

    # ------------------------------------------------------------------
    # Likelihood
    # ------------------------------------------------------------------

    def construct_counterfactual(self, c):
        """x* from x: continuous shifted by delta, mutable categorical blocks replaced by eta'."""
        return perturb_rows(self.x[None, :], c.delta, c.eta, self.layout)[0]

    def log_likelihood_level(self, level, c, k=None):
        """Level likelihood for 'L1' or 'L2' (group k); 0 when the level is absent or empty."""
        if level == 'L1':
            data = self.level_l1
            if data is None:
                return 0.0
            return level_term(data.negatives, data.target, c.mu_l1, c.beta_l1,
                              self.layout, self.classifier, self.priors)[0]
        if level == 'L2':
            if not self.level_l2:
                return 0.0
            data = self.level_l2[k]
            return level_term(data.negatives, data.target, c.mu_l2[k], [b[k] for b in c.beta_l2],
                              self.layout, self.classifier, self.priors)[0]
        raise ValueError(f"unknown level '{level}'")

    def _likelihood_and_grad(self, c, g):
        lay = self.layout
        x_star = self.construct_counterfactual(c)
        log_f, grad_f = self.classifier.log_proba_and_grad_batch(x_star[None, :])
        prox, grad_prox = proximity_term(x_star - self.x, self.priors)
        total = float(log_f[0] + prox[0])
        gx = grad_f[0] + grad_prox[0]
        g['delta'] += gx[lay.cont_positions]
        for m, sl in enumerate(lay.cat_slices):
            g['log_eta'][m] += gx[sl] * c.eta[m]

        if self.level_l1 is not None:
            data = self.level_l1
            v, g_mu, g_simplex = level_term(data.negatives, data.target, c.mu_l1, c.beta_l1,
                                            lay, self.classifier, self.priors)
            total += v
            g['mu_l1'] += g_mu
            for m, gs in enumerate(g_simplex):
                g['log_beta_l1'][m] += gs * c.beta_l1[m]
        for k, data in enumerate(self.level_l2):
            v, g_mu, g_simplex = level_term(data.negatives, data.target, c.mu_l2[k], [b[k] for b in c.beta_l2],
                                            lay, self.classifier, self.priors)
            total += v
            g['mu_l2'][k] += g_mu
            for m, gs in enumerate(g_simplex):
                g['log_beta_l2'][m][k] += gs * c.beta_l2[m][k]
        return total

    def log_posterior_and_grad(self, theta):
        """(log posterior, gradient) at an unconstrained vector; NonFinite when either is not finite."""
        with np.errstate(over='ignore', invalid='ignore', divide='ignore', under='ignore'):
            c, log_jac = self.layout.transform(theta)
            value, g = self.log_prior_and_grad(c)
            value += log_jac
            if self.include_likelihood:
                value += self._likelihood_and_grad(c, g)
            grad = self.layout.pullback(theta, g)
        if not np.isfinite(value) or not np.isfinite(grad).all():
            raise NonFinite("log posterior or gradient is not finite")
        return value, grad

    # ------------------------------------------------------------------
    # Draw post-processing
    # ------------------------------------------------------------------

    def counterfactual_sample(self, theta, rng, log_posterior=np.nan, mode=None):
        """Discretize one draw: one level per categorical feature, decoded row attached."""
        mode = mode or self.priors.discretize
        c, _ = self.layout.transform(theta)
        schema, lay = self.schema, self.layout
        x_star = self.construct_counterfactual(c)
        x_discrete = x_star.copy()
        x_discrete[lay.cont_positions] = np.clip(x_discrete[lay.cont_positions], 0.0, 1.0)
        eta_by_name = {f.name: c.eta[m] for m, f in enumerate(lay.categorical)}
        levels = []
        for f in schema.categorical:
            sl = schema.block(f.name)
            if f.name in eta_by_name:
                level = draw_level(eta_by_name[f.name], rng, mode)
                x_discrete[sl] = schema.smoothed_one_hot(len(f.levels), level)
            else:
                level = int(np.argmax(self.x[sl]))
            levels.append(level)
        probs = self.classifier.predict_proba_batch(np.vstack([x_star, x_discrete]))
        return CounterfactualSample(
            constrained=lay.flatten(c), x_star=x_star, levels=np.array(levels, dtype=int),
            log_posterior=float(log_posterior), probability=float(probs[0]),
            x_discrete=x_discrete, discrete_probability=float(probs[1]),
            row=schema.decode(x_discrete),
        )

    def samples_frame(self, batch, seed=0, instance=None):
        """One row per draw: chain/draw ids, constrained columns, probabilities and the decoded counterfactual."""
        rng = np.random.default_rng(seed)
        columns = self.layout.column_names()
        records = []
        for chain_id, draw_id, theta, log_post, divergent in batch.iter_draws():
            sample = self.counterfactual_sample(theta, rng, log_posterior=log_post)
            record = {'instance': instance, 'chain': chain_id, 'draw': draw_id}
            record.update(zip(columns, sample.constrained))
            record.update({'log_posterior': sample.log_posterior, 'divergent': bool(divergent),
                           'probability': sample.probability,
                           'discrete_probability': sample.discrete_probability})
            record.update({f'cf:{name}': value for name, value in sample.row.items()})
            records.append(record)
        return pd.DataFrame.from_records(records)

    def level_baselines(self):
        """Mean of each level's negative subsample: the rows the level perturbation is applied to."""
        population = self.level_l1.baseline if self.level_l1 is not None else None
        groups = [data.baseline for data in self.level_l2]
        return population, groups


# ---------------------------------------------------------------------------
# Hierarchy comparison
# ---------------------------------------------------------------------------

def _raw(feature, encoded):
    return feature.min + np.asarray(encoded) * (feature.max - feature.min)


def hierarchy_comparison(frame, model, interval=0.9):
    """Local vs subgroup vs population view of a samples frame.

    Continuous features: posterior median and central interval of x + delta,
    of the subgroup baseline + mu_l2 and of the population baseline + mu_l1,
    in raw units. Categorical features: modal level and its frequency for the
    discretized counterfactual and for argmax beta_l1 / beta_l2.
    """
    schema, lay = model.schema, model.layout
    lo_q, hi_q = (1.0 - interval) / 2.0, 1.0 - (1.0 - interval) / 2.0
    population, groups = model.level_baselines()
    group_labels = lay._group_labels()
    rows = []

    def summarize(feature, level, values):
        values = np.asarray(values, dtype=float)
        rows.append({'feature': feature.name, 'level': level, 'median': float(np.median(values)),
                     'lower': float(np.quantile(values, lo_q)), 'upper': float(np.quantile(values, hi_q)),
                     'mode': '', 'mode_frequency': np.nan})

    def mode_of(feature, level, indices):
        counts = np.bincount(np.asarray(indices, dtype=int), minlength=len(feature.levels))
        best = int(np.argmax(counts))
        rows.append({'feature': feature.name, 'level': level, 'median': np.nan, 'lower': np.nan,
                     'upper': np.nan, 'mode': feature.levels[best],
                     'mode_frequency': float(counts[best] / max(counts.sum(), 1))})

    for j, f in enumerate(lay.continuous):
        pos = lay.cont_positions[j]
        summarize(f, 'local', _raw(f, model.x[pos] + frame[f'delta[{f.name}]']))
        if lay.has('mu_l2'):
            for k, g in enumerate(group_labels):
                base = groups[k][pos] if groups else model.x[pos]
                summarize(f, f'subgroup:{g}', _raw(f, base + frame[f'mu_l2[{g},{f.name}]']))
        if lay.has('mu_l1'):
            base = population[pos] if population is not None else model.x[pos]
            summarize(f, 'population', _raw(f, base + frame[f'mu_l1[{f.name}]']))

    for f in lay.categorical:
        local = frame[f'cf:{f.name}'].map({lv: i for i, lv in enumerate(f.levels)})
        mode_of(f, 'local', local.to_numpy())
        if model.levels == 3:
            for g in group_labels:
                cols = [f'beta_l2[{g},{f.name}={lv}]' for lv in f.levels]
                mode_of(f, f'subgroup:{g}', np.argmax(frame[cols].to_numpy(), axis=1))
        if model.levels >= 2:
            cols = [f'beta_l1[{f.name}={lv}]' for lv in f.levels]
            mode_of(f, 'population', np.argmax(frame[cols].to_numpy(), axis=1))
    logger.info(f"Hierarchy comparison over {len(frame)} draws, {len(rows)} rows")
    return pd.DataFrame(rows, columns=['feature', 'level', 'median', 'lower', 'upper', 'mode', 'mode_frequency'])
