# recourse_tools/PriorConfig.py
"""
Hyper-parameters of the counterfactual posterior, read from an INI file.

[priors]            global values (mu0, lambda, w_prox, sigma_scale, gamma hyper-parameters,
                    hierarchy depth, likelihood subsample sizes)
[feature:<name>]    per-feature overrides: mu0, sigma_scale, mass, lower, upper
[discretize]        mode = sample | argmax

Seed scales: with learn_scales off, sigma at level l is fixed to
sigma_scale_l * (per-feature sigma_scale) and alpha to alpha_scale. With
learn_scales on, sigma ~ InvGamma(gamma_a1, gamma_b1 * seed scale) and
alpha ~ Gamma(gamma_a2, rate gamma_b2).
"""
import configparser
import logging
from dataclasses import dataclass, field

import numpy as np

from recourse_tools.FeatureSchema import NON_DECREASING, NON_INCREASING
from recourse_tools.errors import SchemaError

logger = logging.getLogger('PriorConfig')

DISCRETIZE_MODES = ('sample', 'argmax')


@dataclass(frozen=True)
class PriorConfig:
    mu0: float = 0.0
    sigma_scale_l1: float = 1.0
    sigma_scale_l2: float = 1.0
    sigma_scale_l3: float = 1.0
    alpha_scale: float = 1.0
    gamma_a1: float = 1.0
    gamma_b1: float = 1.0
    gamma_a2: float = 1.0
    gamma_b2: float = 1.0
    bandwidth: float = 0.7
    w_prox: float = 1.0
    levels: int = 1
    learn_scales: bool | None = None
    subsample_group: int = 32
    subsample_pooled: int = 64
    subsample_seed: int = 0
    discretize: str = 'sample'
    feature_mu0: dict = field(default_factory=dict)
    feature_sigma_scale: dict = field(default_factory=dict)
    mass: dict = field(default_factory=dict)
    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise SchemaError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.w_prox < 0:
            raise SchemaError(f"w_prox must be non-negative, got {self.w_prox}")
        for name in ('gamma_a1', 'gamma_b1', 'gamma_a2', 'gamma_b2',
                     'sigma_scale_l1', 'sigma_scale_l2', 'sigma_scale_l3', 'alpha_scale'):
            if getattr(self, name) <= 0:
                raise SchemaError(f"{name} must be positive, got {getattr(self, name)}")
        if self.levels not in (1, 2, 3):
            raise SchemaError(f"levels must be 1, 2 or 3, got {self.levels}")
        if self.discretize not in DISCRETIZE_MODES:
            raise SchemaError(f"discretize must be one of {DISCRETIZE_MODES}")
        if self.subsample_group < 0 or self.subsample_pooled < 0:
            raise SchemaError("subsample sizes must be non-negative")
        for name, vec in self.mass.items():
            if len(vec) == 0 or min(vec) <= 0:
                raise SchemaError(f"mass for '{name}' must be strictly positive")
        for name, scale in self.feature_sigma_scale.items():
            if scale <= 0:
                raise SchemaError(f"sigma_scale for '{name}' must be positive")
        for name in set(self.lower) & set(self.upper):
            if not self.lower[name] < self.upper[name]:
                raise SchemaError(f"truncation bounds for '{name}' are not ordered")

    # ------------------------------------------------------------------
    # Derived values
    # ------------------------------------------------------------------

    @property
    def learns_scales(self):
        """Flat models use fixed seed scales unless told otherwise; hierarchies learn them."""
        if self.learn_scales is None:
            return self.levels > 1
        return self.learn_scales

    def mu0_for(self, name):
        return self.feature_mu0.get(name, self.mu0)

    def sigma_scale_for(self, name, level):
        base = {1: self.sigma_scale_l1, 2: self.sigma_scale_l2, 3: self.sigma_scale_l3}[level]
        return base * self.feature_sigma_scale.get(name, 1.0)

    def mass_for(self, feature):
        vec = self.mass.get(feature.name)
        if vec is None:
            return np.ones(len(feature.levels))
        if len(vec) != len(feature.levels):
            raise SchemaError(f"mass for '{feature.name}' has {len(vec)} entries, "
                              f"feature has {len(feature.levels)} levels")
        return np.asarray(vec, dtype=float)

    def bounds_for(self, feature):
        """(lower, upper) truncation of delta; monotone constraints tighten them."""
        lb = self.lower.get(feature.name, -np.inf)
        ub = self.upper.get(feature.name, np.inf)
        if feature.monotone == NON_DECREASING:
            lb = max(lb, 0.0)
        elif feature.monotone == NON_INCREASING:
            ub = min(ub, 0.0)
        if not lb < ub:
            raise SchemaError(f"truncation bounds for '{feature.name}' are empty ({lb}, {ub})")
        return lb, ub

    def validate_against(self, schema):
        names = set(schema.names)
        for table in (self.mass, self.lower, self.upper, self.feature_mu0, self.feature_sigma_scale):
            unknown = set(table) - names
            if unknown:
                raise SchemaError(f"prior overrides reference unknown features: {sorted(unknown)}")
        for name in self.mass:
            feature = schema.feature(name)
            if feature.is_continuous:
                raise SchemaError(f"mass given for continuous feature '{name}'")
            self.mass_for(feature)
        for name in set(self.lower) | set(self.upper):
            if not schema.feature(name).is_continuous:
                raise SchemaError(f"truncation given for categorical feature '{name}'")
        for feature in schema.continuous:
            if feature.mutable:
                self.bounds_for(feature)
        return self

    def to_dict(self):
        out = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            out[key] = {k: list(v) if isinstance(v, (tuple, list)) else v for k, v in value.items()} \
                if isinstance(value, dict) else value
        return out

    def replace(self, **changes):
        values = {key: getattr(self, key) for key in self.__dataclass_fields__}
        values.update(changes)
        return PriorConfig(**values)

    # ------------------------------------------------------------------
    # INI I/O
    # ------------------------------------------------------------------

    @classmethod
    def from_ini(cls, path):
        config = configparser.ConfigParser()
        if not config.read(path):
            raise SchemaError(f"prior config not found: {path}")
        return cls.from_config(config)

    @classmethod
    def from_config(cls, config):
        section = 'priors'
        values = {}
        floats = ('mu0', 'sigma_scale_l1', 'sigma_scale_l2', 'sigma_scale_l3', 'alpha_scale',
                  'gamma_a1', 'gamma_b1', 'gamma_a2', 'gamma_b2', 'bandwidth', 'w_prox')
        ints = ('levels', 'subsample_group', 'subsample_pooled', 'subsample_seed')
        if config.has_section(section):
            for key in floats:
                if config.has_option(section, key):
                    values[key] = _parse(config, section, key, float)
            for key in ints:
                if config.has_option(section, key):
                    values[key] = _parse(config, section, key, int)
            # Short INI spellings: 'lambda' is the bandwidth, 'sigma_scale' the local seed scale.
            if config.has_option(section, 'lambda'):
                values['bandwidth'] = _parse(config, section, 'lambda', float)
            if config.has_option(section, 'sigma_scale'):
                values['sigma_scale_l3'] = _parse(config, section, 'sigma_scale', float)
            if config.has_option(section, 'learn_scales'):
                raw = config.get(section, 'learn_scales').strip().lower()
                values['learn_scales'] = None if raw == 'auto' else _parse(
                    config, section, 'learn_scales', lambda _: config.getboolean(section, 'learn_scales'))
        if config.has_option('discretize', 'mode'):
            values['discretize'] = config.get('discretize', 'mode').strip().lower()

        tables = {'feature_mu0': {}, 'feature_sigma_scale': {}, 'mass': {}, 'lower': {}, 'upper': {}}
        for name in config.sections():
            if not name.startswith('feature:'):
                continue
            feature = name.split(':', 1)[1].strip()
            if config.has_option(name, 'mu0'):
                tables['feature_mu0'][feature] = _parse(config, name, 'mu0', float)
            if config.has_option(name, 'sigma_scale'):
                tables['feature_sigma_scale'][feature] = _parse(config, name, 'sigma_scale', float)
            if config.has_option(name, 'mass'):
                tables['mass'][feature] = tuple(_parse(
                    config, name, 'mass', lambda s: [float(v) for v in s.split(',') if v.strip()]))
            for key in ('lower', 'upper'):
                if config.has_option(name, key):
                    tables[key][feature] = _parse(config, name, key, float)
        values.update(tables)
        priors = cls(**values)
        logger.info(f"Priors loaded: levels={priors.levels}, bandwidth={priors.bandwidth}, "
                    f"w_prox={priors.w_prox}, learn_scales={priors.learns_scales}")
        return priors


def _parse(config, section, key, convert):
    raw = config.get(section, key)
    try:
        return convert(raw)
    except ValueError:
        raise SchemaError(f"[{section}] {key}: cannot parse '{raw}'") from None
