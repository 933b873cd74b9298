# recourse_tools/FeatureSchema.py
"""
Declarative feature description for a tabular dataset.

The schema fixes the encoded feature space every other module works in:
continuous features first (min-max scaled into [0, 1]), then one smoothed
one-hot block per categorical feature. Schemas are read from INI files with
the same configparser conventions as the run configuration.
"""
import configparser
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from recourse_tools.errors import SchemaError, UnknownLevel, NonNumeric, OutOfRange, WidthMismatch

logger = logging.getLogger('FeatureSchema')

CONTINUOUS = 'continuous'
CATEGORICAL = 'categorical'
NON_DECREASING = 'non_decreasing'
NON_INCREASING = 'non_increasing'
DEFAULT_SMOOTHING = 0.01
RANGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CausalEdge:
    """Linear dependency delta_child | delta_parent ~ N(slope*delta_parent + intercept, noise_sd)."""
    parent: str
    slope: float
    intercept: float = 0.0
    noise_sd: float = 1.0


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    min: float = 0.0
    max: float = 1.0
    levels: tuple = ()
    mutable: bool = True
    monotone: str | None = None
    causal_parent: CausalEdge | None = None

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if not self.min < self.max:
                raise SchemaError(f"feature '{self.name}': min {self.min} must be below max {self.max}")
            if self.levels:
                raise SchemaError(f"feature '{self.name}': continuous features take no levels")
        elif self.kind == CATEGORICAL:
            if len(self.levels) < 2:
                raise SchemaError(f"feature '{self.name}': needs at least 2 levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"feature '{self.name}': duplicate level names")
            if self.causal_parent is not None:
                raise SchemaError(f"feature '{self.name}': causal edges need continuous features")
        else:
            raise SchemaError(f"feature '{self.name}': unknown kind '{self.kind}'")
        if self.monotone not in (None, NON_DECREASING, NON_INCREASING):
            raise SchemaError(f"feature '{self.name}': unknown monotone constraint '{self.monotone}'")
        if self.monotone is not None and (self.kind != CONTINUOUS or not self.mutable):
            raise SchemaError(f"feature '{self.name}': monotone only applies to mutable continuous features")

    @property
    def is_continuous(self):
        return self.kind == CONTINUOUS

    @property
    def width(self):
        return 1 if self.is_continuous else len(self.levels)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    label: str = 'label'
    group_feature: str | None = None
    smoothing: float = DEFAULT_SMOOTHING
    _slices: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.features:
            raise SchemaError("schema declares no features")
        # Continuous before categorical in encoded order; relative order kept.
        ordered = tuple(f for f in self.features if f.is_continuous) + \
            tuple(f for f in self.features if not f.is_continuous)
        object.__setattr__(self, 'features', ordered)

        names = [f.name for f in ordered]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names in schema")
        if self.label in names:
            raise SchemaError(f"label column '{self.label}' collides with a feature name")
        if not 0.0 < self.smoothing < 1.0:
            raise SchemaError(f"smoothing {self.smoothing} outside (0, 1)")

        by_name = {f.name: f for f in ordered}
        for f in ordered:
            if not f.is_continuous and self.smoothing * (len(f.levels) - 1) >= 0.5:
                raise SchemaError(f"smoothing {self.smoothing} too large for '{f.name}' ({len(f.levels)} levels)")
            edge = f.causal_parent
            if edge is None:
                continue
            parent = by_name.get(edge.parent)
            if parent is None or not parent.is_continuous or edge.parent == f.name:
                raise SchemaError(f"causal edge {edge.parent} -> {f.name} must join two distinct continuous features")
            if edge.noise_sd <= 0:
                raise SchemaError(f"causal edge {edge.parent} -> {f.name}: noise_sd must be positive")
        if self.group_feature is not None:
            group = by_name.get(self.group_feature)
            if group is None or group.is_continuous:
                raise SchemaError(f"group feature '{self.group_feature}' must be a categorical feature")

        slices = {}
        offset = 0
        for f in ordered:
            slices[f.name] = slice(offset, offset + f.width)
            offset += f.width
        object.__setattr__(self, '_slices', slices)

    # ------------------------------------------------------------------
    # Layout
    # ------------------------------------------------------------------

    @property
    def continuous(self):
        return [f for f in self.features if f.is_continuous]

    @property
    def categorical(self):
        return [f for f in self.features if not f.is_continuous]

    @property
    def d_cont(self):
        return len(self.continuous)

    @property
    def d_cat(self):
        return len(self.categorical)

    @property
    def d(self):
        return len(self.features)

    @property
    def encoded_width(self):
        return sum(f.width for f in self.features)

    @property
    def names(self):
        return [f.name for f in self.features]

    def feature(self, name):
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"unknown feature '{name}'")

    def block(self, name):
        """Slice of the encoded vector occupied by feature `name`."""
        return self._slices[name]

    @property
    def mutability_mask(self):
        """z over features: 1 for continuous, 0 for categorical."""
        return np.array([1.0 if f.is_continuous else 0.0 for f in self.features])

    @property
    def n_groups(self):
        if self.group_feature is None:
            return 1
        return len(self.feature(self.group_feature).levels)

    def canonical(self):
        """Plain-dict form used for hashing and manifests."""
        return {
            'label': self.label,
            'group_feature': self.group_feature,
            'smoothing': self.smoothing,
            'features': [
                {
                    'name': f.name, 'kind': f.kind, 'min': f.min, 'max': f.max,
                    'levels': list(f.levels), 'mutable': f.mutable, 'monotone': f.monotone,
                    'causal_parent': None if f.causal_parent is None else [
                        f.causal_parent.parent, f.causal_parent.slope,
                        f.causal_parent.intercept, f.causal_parent.noise_sd],
                }
                for f in self.features
            ],
        }

    def schema_hash(self):
        # group_feature only drives partitioning, a classifier does not depend on it
        canonical = {k: v for k, v in self.canonical().items() if k != 'group_feature'}
        payload = json.dumps(canonical, sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()

    # ------------------------------------------------------------------
    # Encoding
    # ------------------------------------------------------------------

    def smoothed_one_hot(self, n_levels, index):
        vec = np.full(n_levels, self.smoothing)
        vec[index] = 1.0 - self.smoothing * (n_levels - 1)
        return vec

    def scale_continuous(self, feature, values):
        """Min-max scale raw values of `feature` into [0, 1].

        Values past the declared bounds by more than float noise raise OutOfRange.
        """
        values = np.asarray(values, dtype=float)
        width = feature.max - feature.min
        slack = RANGE_TOLERANCE * width
        outside = (values < feature.min - slack) | (values > feature.max + slack)
        if outside.any():
            bad = float(np.ravel(values)[np.flatnonzero(np.ravel(outside))[0]])
            raise OutOfRange(f"feature '{feature.name}': value {bad!r} outside [{feature.min}, {feature.max}]")
        return np.clip((values - feature.min) / width, 0.0, 1.0)

    def encode(self, row):
        """Encode a mapping of raw feature values to the encoded vector."""
        out = np.empty(self.encoded_width)
        for f in self.features:
            value = row[f.name]
            sl = self.block(f.name)
            if f.is_continuous:
                try:
                    number = float(value)
                except (TypeError, ValueError):
                    raise NonNumeric(f"feature '{f.name}': value {value!r} is not numeric") from None
                if not np.isfinite(number):
                    raise NonNumeric(f"feature '{f.name}': value {value!r} is not finite")
                out[sl] = self.scale_continuous(f, number)
            else:
                level = str(value).strip()
                if level not in f.levels:
                    raise UnknownLevel(f"feature '{f.name}': unknown level '{level}'")
                out[sl] = self.smoothed_one_hot(len(f.levels), f.levels.index(level))
        return out

    def decode(self, vector):
        """Decode an encoded vector back to raw values.

        Continuous values are clamped to [min, max]; categorical blocks map
        to their argmax level.
        """
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.encoded_width,):
            raise WidthMismatch(f"expected width {self.encoded_width}, got {vector.shape}")
        row = {}
        for f in self.features:
            sl = self.block(f.name)
            if f.is_continuous:
                raw = f.min + float(vector[sl][0]) * (f.max - f.min)
                row[f.name] = min(max(raw, f.min), f.max)
            else:
                row[f.name] = f.levels[int(np.argmax(vector[sl]))]
        return row

    def level_indices(self, vector):
        """Argmax level index per categorical feature."""
        vector = np.asarray(vector, dtype=float)
        return np.array([int(np.argmax(vector[self.block(f.name)])) for f in self.categorical], dtype=int)

    def level_indices_matrix(self, encoded, name):
        """Argmax level index of feature `name` for every row of an encoded matrix."""
        return np.argmax(np.asarray(encoded)[:, self.block(name)], axis=1).astype(int)

    # ------------------------------------------------------------------
    # INI I/O
    # ------------------------------------------------------------------

    @classmethod
    def from_ini(cls, path):
        config = configparser.ConfigParser()
        if not config.read(path):
            raise SchemaError(f"schema file not found: {path}")
        return cls.from_config(config)

    @classmethod
    def from_config(cls, config):
        label = config.get('dataset', 'label', fallback='label')
        group_feature = config.get('dataset', 'group_feature', fallback='').strip() or None
        smoothing = _get_float(config, 'dataset', 'smoothing', DEFAULT_SMOOTHING)

        edges = {}
        for section in config.sections():
            if section.startswith('causal:'):
                child = section.split(':', 1)[1].strip()
                edges[child] = CausalEdge(
                    parent=config.get(section, 'parent', fallback='').strip(),
                    slope=_get_float(config, section, 'slope', 0.0),
                    intercept=_get_float(config, section, 'intercept', 0.0),
                    noise_sd=_get_float(config, section, 'noise_sd', 1.0),
                )

        features = []
        for section in config.sections():
            if not section.startswith('feature:'):
                continue
            name = section.split(':', 1)[1].strip()
            kind = config.get(section, 'kind', fallback=CONTINUOUS).strip().lower()
            try:
                mutable = config.getboolean(section, 'mutable', fallback=True)
            except ValueError:
                raise SchemaError(f"[{section}] mutable: expected a boolean") from None
            monotone = config.get(section, 'monotone', fallback='').strip().lower() or None
            if kind == CATEGORICAL:
                levels = tuple(v.strip() for v in config.get(section, 'levels', fallback='').split(',') if v.strip())
                features.append(FeatureSpec(name=name, kind=kind, levels=levels, mutable=mutable,
                                            monotone=monotone, causal_parent=edges.pop(name, None)))
            else:
                features.append(FeatureSpec(
                    name=name, kind=kind,
                    min=_get_float(config, section, 'min', 0.0),
                    max=_get_float(config, section, 'max', 1.0),
                    mutable=mutable, monotone=monotone,
                    causal_parent=edges.pop(name, None),
                ))
        if edges:
            raise SchemaError(f"causal edges reference unknown features: {sorted(edges)}")
        schema = cls(features=tuple(features), label=label, group_feature=group_feature, smoothing=smoothing)
        logger.info(f"Schema loaded: {schema.d_cont} continuous, {schema.d_cat} categorical, "
                    f"encoded width {schema.encoded_width}")
        return schema

    def write_ini(self, path):
        config = configparser.ConfigParser()
        config['dataset'] = {'label': self.label, 'smoothing': repr(self.smoothing)}
        if self.group_feature is not None:
            config['dataset']['group_feature'] = self.group_feature
        for f in self.features:
            section = f'feature:{f.name}'
            if f.is_continuous:
                config[section] = {'kind': f.kind, 'min': repr(f.min), 'max': repr(f.max),
                                   'mutable': str(f.mutable).lower()}
            else:
                config[section] = {'kind': f.kind, 'levels': ', '.join(f.levels),
                                   'mutable': str(f.mutable).lower()}
            if f.monotone:
                config[section]['monotone'] = f.monotone
            if f.causal_parent is not None:
                config[f'causal:{f.name}'] = {
                    'parent': f.causal_parent.parent, 'slope': repr(f.causal_parent.slope),
                    'intercept': repr(f.causal_parent.intercept),
                    'noise_sd': repr(f.causal_parent.noise_sd),
                }
        with open(path, 'w') as configfile:
            config.write(configfile)


def _get_float(config, section, key, default):
    try:
        return float(config.get(section, key, fallback=str(default)))
    except ValueError:
        raise SchemaError(f"[{section}] {key}: expected a number") from None
