import numpy as np
import pytest

from recourse_tools.FeatureSchema import FeatureSchema, FeatureSpec, CausalEdge
from recourse_tools.MlpClassifier import MlpClassifier, TrainConfig, train
from recourse_tools.TabularData import SyntheticSpec, generate_synthetic


def make_schema(causal=False, monotone=None, group=True):
    features = [
        FeatureSpec(name='age', kind='continuous', min=20.0, max=70.0, monotone=monotone),
        FeatureSpec(name='hours', kind='continuous', min=0.0, max=80.0,
                    causal_parent=CausalEdge('age', slope=-0.5, intercept=0.0, noise_sd=0.2) if causal else None),
        FeatureSpec(name='color', kind='categorical', levels=('red', 'green', 'blue')),
        FeatureSpec(name='group', kind='categorical', levels=('a', 'b'), mutable=False),
    ]
    return FeatureSchema(features=tuple(features), label='label', group_feature='group' if group else None)


def make_classifier(schema, seed=0, hidden=4):
    """Small fixed random network over the schema's encoded width."""
    rng = np.random.default_rng(seed)
    width = schema.encoded_width
    return MlpClassifier(rng.normal(0.0, 1.5, size=(hidden, width)), rng.normal(0.0, 0.5, size=hidden),
                         rng.normal(0.0, 1.5, size=hidden), 0.1, schema_hash=schema.schema_hash())


@pytest.fixture
def schema():
    return make_schema()


@pytest.fixture
def classifier(schema):
    return make_classifier(schema)


@pytest.fixture(scope='session')
def synthetic():
    return generate_synthetic(SyntheticSpec(n=200), seed=3)


@pytest.fixture(scope='session')
def trained(synthetic):
    return train(synthetic, TrainConfig(epochs=60, batch_size=32, hidden_units=32, learning_rate=1e-2, seed=0))
