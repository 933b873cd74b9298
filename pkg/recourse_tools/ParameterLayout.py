# recourse_tools/ParameterLayout.py
"""
Unconstrained parameter vector for the counterfactual posterior.

Block order:
    mu_l1, mu_l2, delta,
    log_sigma_l1, log_sigma_l2, log_sigma_l3,
    log_alpha_l1, log_alpha_l2, log_alpha_l3,
    beta_l1:<feature>..., beta_l2:<feature>..., eta:<feature>...

Blocks that the hierarchy depth does not use are absent, as are the scale
blocks when scales are fixed. Only mutable features get parameters.

Transforms:
    sigma, alpha    exp(u), log-Jacobian u
    delta           identity, lb + exp(u), ub - exp(u) or lb + (ub - lb) * sigmoid(u)
    simplex         stick-breaking, z_k = sigmoid(u_k),
                    y_k = z_k * prod_{j<k} (1 - z_j), y_L = prod_j (1 - z_j)
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from recourse_tools.errors import NonFinite, WidthMismatch, SchemaError

logger = logging.getLogger('ParameterLayout')


# ---------------------------------------------------------------------------
# Elementary bijections
# ---------------------------------------------------------------------------

def stick_breaking(u):
    """R^(L-1) -> open L-simplex along the last axis.

    Returns (y, log_y, log_jac); log_y is computed in log space so it stays
    finite when y underflows.
    """
    u = np.asarray(u, dtype=float)
    a = log_expit(u)
    b = log_expit(-u)
    cum = np.cumsum(b, axis=-1)
    log_rest = np.concatenate([np.zeros(u.shape[:-1] + (1,)), cum[..., :-1]], axis=-1)
    log_y = np.concatenate([a + log_rest, cum[..., -1:]], axis=-1)
    log_jac = np.sum(a + b + log_rest, axis=-1)
    return np.exp(log_y), log_y, log_jac


def stick_breaking_inverse(y):
    y = np.asarray(y, dtype=float)
    tail = np.cumsum(y[..., ::-1], axis=-1)[..., ::-1]
    return np.log(y[..., :-1]) - np.log(tail[..., 1:])


def stick_breaking_vjp(u, g_log_y):
    """Pull a gradient with respect to log y back to u (Jacobian term excluded)."""
    z = expit(u)
    suffix = np.cumsum(g_log_y[..., ::-1], axis=-1)[..., ::-1]
    return g_log_y[..., :-1] * (1.0 - z) - z * suffix[..., 1:]


def stick_breaking_log_jac_grad(u):
    u = np.asarray(u, dtype=float)
    n_levels = u.shape[-1] + 1
    return 1.0 - expit(u) * (n_levels - np.arange(n_levels - 1))


def bounded(u, lower, upper):
    """Elementwise map of u onto (lower, upper); infinite bounds leave that side open.

    Returns (value, log_jac, d value / du, d log_jac / du).
    """
    u = np.asarray(u, dtype=float)
    lower = np.broadcast_to(lower, u.shape)
    upper = np.broadcast_to(upper, u.shape)
    value = u.copy()
    log_jac = np.zeros_like(u)
    dvalue = np.ones_like(u)
    dlog_jac = np.zeros_like(u)

    has_lo, has_hi = np.isfinite(lower), np.isfinite(upper)
    lo = has_lo & ~has_hi
    hi = ~has_lo & has_hi
    both = has_lo & has_hi
    with np.errstate(over='ignore'):
        if lo.any():
            e = np.exp(u[lo])
            value[lo] = lower[lo] + e
            log_jac[lo] = u[lo]
            dvalue[lo] = e
            dlog_jac[lo] = 1.0
        if hi.any():
            e = np.exp(u[hi])
            value[hi] = upper[hi] - e
            log_jac[hi] = u[hi]
            dvalue[hi] = -e
            dlog_jac[hi] = 1.0
    if both.any():
        s = expit(u[both])
        width = upper[both] - lower[both]
        value[both] = lower[both] + width * s
        log_jac[both] = np.log(width) + log_expit(u[both]) + log_expit(-u[both])
        dvalue[both] = width * s * (1.0 - s)
        dlog_jac[both] = 1.0 - 2.0 * s
    return value, log_jac, dvalue, dlog_jac


def bounded_inverse(value, lower, upper):
    value = np.asarray(value, dtype=float)
    lower = np.broadcast_to(lower, value.shape)
    upper = np.broadcast_to(upper, value.shape)
    u = value.copy()
    has_lo, has_hi = np.isfinite(lower), np.isfinite(upper)
    lo = has_lo & ~has_hi
    hi = ~has_lo & has_hi
    both = has_lo & has_hi
    u[lo] = np.log(value[lo] - lower[lo])
    u[hi] = np.log(upper[hi] - value[hi])
    u[both] = np.log(value[both] - lower[both]) - np.log(upper[both] - value[both])
    return u


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    name: str
    start: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def slice(self):
        return slice(self.start, self.start + self.size)


@dataclass
class Constrained:
    """Constrained parameter values. Simplex blocks come as lists, one entry per mutable categorical feature."""
    delta: np.ndarray
    sigma_l3: np.ndarray
    alpha_l3: np.ndarray
    mu_l1: np.ndarray | None = None
    mu_l2: np.ndarray | None = None
    sigma_l1: np.ndarray | None = None
    sigma_l2: np.ndarray | None = None
    alpha_l1: np.ndarray | None = None
    alpha_l2: np.ndarray | None = None
    beta_l1: list = field(default_factory=list)
    log_beta_l1: list = field(default_factory=list)
    beta_l2: list = field(default_factory=list)
    log_beta_l2: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    log_eta: list = field(default_factory=list)


class ParameterLayout:
    """Maps a flat unconstrained vector to named, constrained parameter blocks."""

    def __init__(self, schema, priors, n_groups=None):
        self.schema = schema
        self.levels = priors.levels
        self.n_groups = schema.n_groups if n_groups is None else n_groups
        self.learn_scales = priors.learns_scales

        self.continuous = [f for f in schema.continuous if f.mutable]
        self.categorical = [f for f in schema.categorical if f.mutable]
        if not self.continuous and not self.categorical:
            raise SchemaError("schema has no mutable features to perturb")
        self.cont_positions = np.array([schema.block(f.name).start for f in self.continuous], dtype=int)
        self.cat_slices = [schema.block(f.name) for f in self.categorical]
        bounds = [priors.bounds_for(f) for f in self.continuous]
        self.lower = np.array([b[0] for b in bounds], dtype=float)
        self.upper = np.array([b[1] for b in bounds], dtype=float)

        # Seed scales; used as-is when scales are fixed, as inverse-gamma scale otherwise.
        self.sigma_seed = {
            level: np.array([priors.sigma_scale_for(f.name, level) for f in self.continuous])
            for level in (1, 2, 3)
        }
        self.alpha_seed = np.full(len(self.categorical), priors.alpha_scale)

        self.blocks = {}
        self._offset = 0
        n_c, n_m, K = len(self.continuous), len(self.categorical), self.n_groups
        if n_c:
            if self.levels >= 2:
                self._add('mu_l1', (n_c,))
            if self.levels == 3:
                self._add('mu_l2', (K, n_c))
            self._add('delta', (n_c,))
            if self.learn_scales:
                if self.levels >= 2:
                    self._add('log_sigma_l1', (n_c,))
                if self.levels == 3:
                    self._add('log_sigma_l2', (K, n_c))
                self._add('log_sigma_l3', (n_c,))
        if n_m and self.learn_scales:
            if self.levels >= 2:
                self._add('log_alpha_l1', (n_m,))
            if self.levels == 3:
                self._add('log_alpha_l2', (K, n_m))
            self._add('log_alpha_l3', (n_m,))
        if self.levels >= 2:
            for f in self.categorical:
                self._add(f'beta_l1:{f.name}', (len(f.levels) - 1,))
        if self.levels == 3:
            for f in self.categorical:
                self._add(f'beta_l2:{f.name}', (K, len(f.levels) - 1))
        for f in self.categorical:
            self._add(f'eta:{f.name}', (len(f.levels) - 1,))
        self.size = self._offset
        logger.debug(f"Layout: {len(self.blocks)} blocks, {self.size} coordinates, levels={self.levels}")

    def _add(self, name, shape):
        block = Block(name, self._offset, shape)
        self.blocks[name] = block
        self._offset += block.size

    def has(self, name):
        return name in self.blocks

    def get(self, theta, name):
        block = self.blocks[name]
        return theta[block.slice].reshape(block.shape)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise WidthMismatch(f"parameter vector has shape {theta.shape}, layout expects ({self.size},)")
        return theta

    def _group_labels(self):
        if self.schema.group_feature is None:
            return [str(k) for k in range(self.n_groups)]
        return list(self.schema.feature(self.schema.group_feature).levels)

    # ------------------------------------------------------------------
    # Forward / inverse
    # ------------------------------------------------------------------

    def transform(self, theta):
        """Unconstrained vector -> (Constrained, log|Jacobian|)."""
        theta = self._check(theta)
        if not np.isfinite(theta).all():
            raise NonFinite("unconstrained vector holds non-finite values")
        n_c, n_m, K = len(self.continuous), len(self.categorical), self.n_groups
        log_jac = 0.0

        if n_c:
            delta, lj, _, _ = bounded(self.get(theta, 'delta'), self.lower, self.upper)
            log_jac += float(lj.sum())
        else:
            delta = np.zeros(0)

        def scale(name, seed):
            nonlocal log_jac
            if self.has(name):
                u = self.get(theta, name)
                log_jac += float(u.sum())
                with np.errstate(over='ignore'):
                    return np.exp(u)
            return seed

        c = Constrained(
            delta=delta,
            sigma_l3=scale('log_sigma_l3', self.sigma_seed[3]),
            alpha_l3=scale('log_alpha_l3', self.alpha_seed),
        )
        if self.levels >= 2:
            c.mu_l1 = self.get(theta, 'mu_l1') if n_c else np.zeros(0)
            c.sigma_l1 = scale('log_sigma_l1', self.sigma_seed[1])
            c.alpha_l1 = scale('log_alpha_l1', self.alpha_seed)
        if self.levels == 3:
            c.mu_l2 = self.get(theta, 'mu_l2') if n_c else np.zeros((K, 0))
            c.sigma_l2 = scale('log_sigma_l2', np.tile(self.sigma_seed[2], (K, 1)))
            c.alpha_l2 = scale('log_alpha_l2', np.tile(self.alpha_seed, (K, 1)))

        for f in self.categorical:
            for prefix, values, logs in (('beta_l1', c.beta_l1, c.log_beta_l1),
                                         ('beta_l2', c.beta_l2, c.log_beta_l2),
                                         ('eta', c.eta, c.log_eta)):
                name = f'{prefix}:{f.name}'
                if not self.has(name):
                    continue
                y, log_y, lj = stick_breaking(self.get(theta, name))
                values.append(y)
                logs.append(log_y)
                log_jac += float(np.sum(lj))
        return c, log_jac

    def pullback(self, theta, grads):
        """Gradient over theta of (objective + log|Jacobian|).

        `grads` maps constrained names to d objective / d value; simplex
        entries ('log_beta_l1', 'log_beta_l2', 'log_eta') are lists of
        gradients with respect to log y.
        """
        theta = self._check(theta)
        out = np.zeros(self.size)
        if self.has('delta'):
            block = self.blocks['delta']
            _, _, dvalue, dlog_jac = bounded(self.get(theta, 'delta'), self.lower, self.upper)
            out[block.slice] = grads['delta'] * dvalue + dlog_jac
        for name in ('mu_l1', 'mu_l2'):
            if self.has(name):
                out[self.blocks[name].slice] = np.ravel(grads[name])
        for level in ('l1', 'l2', 'l3'):
            for kind in ('sigma', 'alpha'):
                name = f'log_{kind}_{level}'
                if self.has(name):
                    u = self.get(theta, name)
                    out[self.blocks[name].slice] = np.ravel(grads[f'{kind}_{level}'] * np.exp(u) + 1.0)
        for prefix, key in (('beta_l1', 'log_beta_l1'), ('beta_l2', 'log_beta_l2'), ('eta', 'log_eta')):
            for m, f in enumerate(self.categorical):
                name = f'{prefix}:{f.name}'
                if not self.has(name):
                    continue
                u = self.get(theta, name)
                g = stick_breaking_vjp(u, grads[key][m]) + stick_breaking_log_jac_grad(u)
                out[self.blocks[name].slice] = np.ravel(g)
        return out

    def inverse(self, c):
        """Constrained -> unconstrained vector."""
        theta = np.zeros(self.size)

        def put(name, value):
            if self.has(name):
                theta[self.blocks[name].slice] = np.ravel(value)

        if self.has('delta'):
            put('delta', bounded_inverse(c.delta, self.lower, self.upper))
        put('mu_l1', c.mu_l1)
        put('mu_l2', c.mu_l2)
        for level in ('l1', 'l2', 'l3'):
            for kind in ('sigma', 'alpha'):
                name = f'log_{kind}_{level}'
                if self.has(name):
                    put(name, np.log(getattr(c, f'{kind}_{level}')))
        for prefix, values in (('beta_l1', c.beta_l1), ('beta_l2', c.beta_l2), ('eta', c.eta)):
            for m, f in enumerate(self.categorical):
                if self.has(f'{prefix}:{f.name}'):
                    put(f'{prefix}:{f.name}', stick_breaking_inverse(values[m]))
        return theta

    # ------------------------------------------------------------------
    # Named constrained columns
    # ------------------------------------------------------------------

    def column_names(self):
        """Names of the constrained values produced by flatten(), in order."""
        groups = self._group_labels()
        cont = [f.name for f in self.continuous]
        names = []
        if self.has('mu_l1'):
            names += [f'mu_l1[{n}]' for n in cont]
        if self.has('mu_l2'):
            names += [f'mu_l2[{g},{n}]' for g in groups for n in cont]
        names += [f'delta[{n}]' for n in cont]
        for level in ('l1', 'l2', 'l3'):
            for kind, feats in (('sigma', cont), ('alpha', [f.name for f in self.categorical])):
                if not self.has(f'log_{kind}_{level}'):
                    continue
                if level == 'l2':
                    names += [f'{kind}_l2[{g},{n}]' for g in groups for n in feats]
                else:
                    names += [f'{kind}_{level}[{n}]' for n in feats]
        if self.levels >= 2:
            names += [f'beta_l1[{f.name}={lv}]' for f in self.categorical for lv in f.levels]
        if self.levels == 3:
            names += [f'beta_l2[{g},{f.name}={lv}]' for f in self.categorical for g in groups for lv in f.levels]
        names += [f'eta[{f.name}={lv}]' for f in self.categorical for lv in f.levels]
        return names

    def flatten(self, c):
        parts = []
        if self.has('mu_l1'):
            parts.append(np.ravel(c.mu_l1))
        if self.has('mu_l2'):
            parts.append(np.ravel(c.mu_l2))
        parts.append(np.ravel(c.delta))
        for level in ('l1', 'l2', 'l3'):
            for kind in ('sigma', 'alpha'):
                if self.has(f'log_{kind}_{level}'):
                    parts.append(np.ravel(getattr(c, f'{kind}_{level}')))
        parts += [np.ravel(v) for v in c.beta_l1]
        parts += [np.ravel(v) for v in c.beta_l2]
        parts += [np.ravel(v) for v in c.eta]
        return np.concatenate(parts) if parts else np.zeros(0)
