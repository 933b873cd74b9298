import configparser
import os

import numpy as np
import pytest

from conftest import make_schema
from recourse_tools.NutsSampler import NutsConfig
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.errors import SchemaError


def parse(text):
    config = configparser.ConfigParser()
    config.read_string(text)
    return config


def test_defaults():
    priors = PriorConfig()
    assert priors.levels == 1
    assert not priors.learns_scales
    assert PriorConfig(levels=3).learns_scales
    assert PriorConfig(levels=3, learn_scales=False).learns_scales is False


def test_short_ini_spellings():
    priors = PriorConfig.from_config(parse(
        "[priors]\nlambda = 0.3\nsigma_scale = 2.5\nlevels = 2\nlearn_scales = auto\n"
        "[discretize]\nmode = argmax\n"
        "[feature:color]\nmass = 1, 2, 3\n"
        "[feature:age]\nlower = 0\nsigma_scale = 0.5\n"))
    assert priors.bandwidth == 0.3
    assert priors.sigma_scale_l3 == 2.5
    assert priors.levels == 2 and priors.learns_scales
    assert priors.discretize == 'argmax'
    assert priors.sigma_scale_for('age', 3) == pytest.approx(1.25)
    schema = make_schema()
    assert np.array_equal(priors.mass_for(schema.feature('color')), [1.0, 2.0, 3.0])
    assert priors.bounds_for(schema.feature('age')) == (0.0, np.inf)


def test_monotone_tightens_bounds():
    schema = make_schema(monotone='non_decreasing')
    priors = PriorConfig(lower={'age': -0.2}, upper={'age': 0.4})
    assert priors.bounds_for(schema.feature('age')) == (0.0, 0.4)
    with pytest.raises(SchemaError):
        PriorConfig(upper={'age': -0.1}).bounds_for(schema.feature('age'))


@pytest.mark.parametrize('changes', [
    {'bandwidth': 0.0}, {'w_prox': -1.0}, {'levels': 4}, {'gamma_a1': 0.0},
    {'discretize': 'round'}, {'mass': {'color': (1.0, 0.0, 1.0)}}, {'lower': {'age': 1.0}, 'upper': {'age': 0.5}},
])
def test_invalid_values(changes):
    with pytest.raises(SchemaError):
        PriorConfig(**changes)


def test_validate_against_schema():
    schema = make_schema()
    with pytest.raises(SchemaError):
        PriorConfig(mass={'ghost': (1.0, 1.0)}).validate_against(schema)
    with pytest.raises(SchemaError):
        PriorConfig(mass={'color': (1.0, 1.0)}).validate_against(schema)
    with pytest.raises(SchemaError):
        PriorConfig(lower={'color': 0.0}).validate_against(schema)
    assert PriorConfig(mass={'color': (1.0, 1.0, 1e-4)}).validate_against(schema)


def test_unparseable_value():
    with pytest.raises(SchemaError):
        PriorConfig.from_config(parse("[priors]\nw_prox = lots\n"))
    with pytest.raises(SchemaError):
        NutsConfig.from_config(parse("[sampler]\nburn_in = many\n"))


def test_example_priors_file():
    config = configparser.ConfigParser()
    config.read(os.path.join(os.path.dirname(__file__), 'example_priors.ini'))
    priors = PriorConfig.from_config(config)
    nuts = NutsConfig.from_config(config)
    assert priors.levels == 3
    assert priors.mass['workclass'][-1] == pytest.approx(1e-4)
    assert nuts.burn_in == 5000 and nuts.n_chains == 4


def test_replace_keeps_other_fields():
    priors = PriorConfig(w_prox=2.0).replace(levels=3)
    assert priors.w_prox == 2.0 and priors.levels == 3
    nuts = NutsConfig().replace(n_chains=2, seed=None)
    assert nuts.n_chains == 2 and nuts.seed == 0
