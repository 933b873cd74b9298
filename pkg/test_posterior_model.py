import numpy as np
import pandas as pd
import pytest

from conftest import make_schema, make_classifier
from recourse_tools.MlpClassifier import MlpClassifier
from recourse_tools.NutsSampler import NutsConfig, run_chains
from recourse_tools.PosteriorModel import (
    PosteriorModel, hierarchy_comparison, log_likelihood_instance, truncated_log_normalizer, normal_logpdf,
)
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.TabularData import Dataset, partition
from recourse_tools.errors import EmptyLevel, WidthMismatch

TRUNCATED = dict(lower={'age': -0.3}, upper={'age': 0.5, 'hours': 0.2})


def age_network(schema, seed=0):
    """Mostly an age threshold, with a little noise from the other inputs."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, 0.3, size=(4, schema.encoded_width))
    b1 = rng.normal(0.0, 0.3, size=4)
    W2 = rng.normal(0.0, 0.3, size=4)
    W1[0] = 0.0
    W1[0, schema.block('age').start] = 10.0
    b1[0] = -5.0
    W2[0] = 5.0
    return MlpClassifier(W1, b1, W2, 0.0, schema_hash=schema.schema_hash())


def grouped_dataset(schema, n=200, seed=0, b_all_positive=False):
    rng = np.random.default_rng(seed)
    age = rng.uniform(20, 70, size=n)
    group = rng.choice(['a', 'b'], size=n)
    if b_all_positive:
        age = np.where(group == 'b', rng.uniform(60, 70, size=n), age)
    frame = pd.DataFrame({'age': age, 'hours': rng.uniform(0, 80, size=n),
                          'color': rng.choice(['red', 'green', 'blue'], size=n),
                          'group': group, 'label': (age > 45).astype(int)})
    return Dataset.from_frame(frame, schema, split_seed=seed)


def build_model(levels, causal, seed=0):
    schema = make_schema(causal=causal)
    classifier = age_network(schema)
    data = grouped_dataset(schema)
    priors = PriorConfig(levels=levels, subsample_group=8, subsample_pooled=12, **(TRUNCATED if causal else {}))
    x = data.encoded[np.argmin(data.frame['age'].to_numpy())]
    return PosteriorModel(x, schema, classifier, priors, partitioned=partition(data, classifier))


def numeric_grad(fn, theta, eps=1e-6):
    grad = np.zeros_like(theta)
    for j in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[j] += eps
        down[j] -= eps
        grad[j] = (fn(up) - fn(down)) / (2 * eps)
    return grad


@pytest.mark.parametrize('causal', [False, True])
@pytest.mark.parametrize('levels', [1, 2, 3])
def test_gradient_matches_finite_differences(levels, causal):
    model = build_model(levels, causal)
    rng = np.random.default_rng(10 * levels + causal)
    for _ in range(3):
        theta = rng.normal(scale=0.5, size=model.dim)
        _, grad = model(theta)
        fd = numeric_grad(lambda t: model(t)[0], theta)
        assert np.allclose(grad, fd, rtol=1e-4, atol=1e-5)


def test_likelihood_adds_instance_term(schema, classifier):
    x = np.full(schema.encoded_width, 0.4)
    priors = PriorConfig()
    full = PosteriorModel(x, schema, classifier, priors)
    prior_only = PosteriorModel(x, schema, classifier, priors, include_likelihood=False)
    theta = np.random.default_rng(2).normal(size=full.dim)
    c, _ = full.layout.transform(theta)
    expected = log_likelihood_instance(x, full.construct_counterfactual(c), classifier, priors)
    assert full(theta)[0] - prior_only(theta)[0] == pytest.approx(expected)


def test_counterfactual_keeps_frozen_block(schema, classifier):
    x = np.zeros(schema.encoded_width)
    x[schema.block('group')] = schema.smoothed_one_hot(2, 1)
    model = PosteriorModel(x, schema, classifier, PriorConfig())
    assert model.group == 1
    c, _ = model.layout.transform(np.ones(model.dim))
    x_star = model.construct_counterfactual(c)
    assert np.array_equal(x_star[schema.block('group')], x[schema.block('group')])
    assert x_star[schema.block('color')].sum() == pytest.approx(1.0)


def test_truncated_normalizer_matches_cdf_difference():
    from scipy.stats import norm
    value, _, _ = truncated_log_normalizer(np.array([0.2]), np.array([0.5]), np.array([-0.3]), np.array([0.4]))
    assert value[0] == pytest.approx(np.log(norm.cdf(0.4, 0.2, 0.5) - norm.cdf(-0.3, 0.2, 0.5)))
    value, dmean, dsd = truncated_log_normalizer(np.zeros(1), np.ones(1), np.array([-np.inf]), np.array([np.inf]))
    assert value[0] == 0.0 and dmean[0] == 0.0 and dsd[0] == 0.0


def test_normal_logpdf():
    value, dx, dmean, dsd = normal_logpdf(1.0, 0.0, 2.0)
    assert value == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(2.0) - 0.125)
    assert dx == pytest.approx(-0.25) and dmean == pytest.approx(0.25)


def test_empty_subgroup_level():
    schema = make_schema()
    classifier = age_network(schema)
    data = grouped_dataset(schema, b_all_positive=True)
    parts = partition(data, classifier)
    x = data.encoded[0]
    with pytest.raises(EmptyLevel):
        PosteriorModel(x, schema, classifier, PriorConfig(levels=3), partitioned=parts)
    # the two-level model only needs the pooled negatives
    PosteriorModel(x, schema, classifier, PriorConfig(levels=2), partitioned=parts)


def test_hierarchical_model_needs_training_data(schema, classifier):
    with pytest.raises(ValueError):
        PosteriorModel(np.zeros(schema.encoded_width), schema, classifier, PriorConfig(levels=2))


def test_width_mismatch(schema):
    classifier = make_classifier(make_schema(group=False), seed=1)
    other = MlpClassifier(np.zeros((2, 3)), np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(WidthMismatch):
        PosteriorModel(np.zeros(3), schema, classifier, PriorConfig())
    with pytest.raises(WidthMismatch):
        PosteriorModel(np.zeros(schema.encoded_width), schema, other, PriorConfig())


def test_level_baselines_are_subsample_means():
    model = build_model(3, causal=False)
    population, groups = model.level_baselines()
    assert np.allclose(population, model.level_l1.negatives.mean(axis=0))
    assert len(groups) == 2
    assert model.log_likelihood_level('L2', model.layout.transform(np.zeros(model.dim))[0], k=1) < 0


def test_samples_frame_and_hierarchy_comparison():
    model = build_model(3, causal=False)
    config = NutsConfig(burn_in=60, n_samples=25, n_chains=2, max_depth=6, seed=4)
    batch = run_chains(config, model, model.dim)
    frame = model.samples_frame(batch, seed=1, instance=7)
    assert len(frame) == 50
    assert set(frame['chain']) == {0, 1}
    assert (frame['instance'] == 7).all()
    assert frame['cf:color'].isin(['red', 'green', 'blue']).all()
    assert (frame['cf:group'] == frame['cf:group'].iloc[0]).all()
    assert frame['probability'].between(0, 1).all()

    table = hierarchy_comparison(frame, model)
    age = table[table['feature'] == 'age']
    assert list(age['level']) == ['local', 'subgroup:a', 'subgroup:b', 'population']
    assert (age['lower'] <= age['median']).all() and (age['median'] <= age['upper']).all()
    color = table[table['feature'] == 'color']
    assert len(color) == 4
    assert color['mode_frequency'].between(0, 1).all()


@pytest.mark.slow
def test_near_zero_mass_keeps_a_level_out_of_the_draws():
    schema = make_schema()
    priors = PriorConfig(mass={'color': (1.0, 1.0, 1e-4)})
    x = schema.encode({'age': 30.0, 'hours': 40.0, 'color': 'red', 'group': 'a'})
    model = PosteriorModel(x, schema, age_network(schema), priors)
    tail = model.layout.blocks['eta:color'].start + 1

    def init(index, rng):
        # the stick feeding 'blue' has an exponential tail of scale 1e4 in unconstrained space
        theta = rng.uniform(-2.0, 2.0, size=model.dim)
        theta[tail] = rng.exponential(1e4)
        return theta

    clean_runs = 0
    for run in range(10):
        config = NutsConfig(burn_in=200, n_samples=1000, n_chains=1, max_depth=4, seed=run)
        frame = model.samples_frame(run_chains(config, model, model.dim, init=init), seed=run)
        clean_runs += int((frame['cf:color'] == 'blue').sum() == 0)
    assert clean_runs >= 9


@pytest.mark.parametrize('levels', [1, 3])
def test_lower_bound_keeps_counterfactual_above_the_instance(levels):
    schema = make_schema()
    classifier = age_network(schema)
    data = grouped_dataset(schema)
    priors = PriorConfig(levels=levels, subsample_group=8, subsample_pooled=12, lower={'age': 0.0})
    row = int(np.argmin(data.frame['age'].to_numpy()))
    model = PosteriorModel(data.encoded[row], schema, classifier, priors,
                           partitioned=partition(data, classifier) if levels > 1 else None)
    batch = run_chains(NutsConfig(burn_in=100, n_samples=100, n_chains=2, max_depth=6, seed=3), model, model.dim)
    delta = np.array([model.layout.transform(theta)[0].delta for theta in batch.draws.reshape(-1, model.dim)])
    assert (delta[:, 0] >= 0.0).all()
    frame = model.samples_frame(batch, seed=3)
    assert (frame['cf:age'] >= data.frame['age'].iloc[row] - 1e-9).all()


def test_causal_edge_couples_the_child_delta_to_its_parent():
    schema = make_schema(causal=True)
    x = schema.encode({'age': 30.0, 'hours': 40.0, 'color': 'red', 'group': 'a'})
    model = PosteriorModel(x, schema, age_network(schema), PriorConfig())
    block = model.layout.blocks['delta'].slice
    for seed in range(3):
        batch = run_chains(NutsConfig(burn_in=150, n_samples=200, n_chains=2, max_depth=6, seed=seed),
                           model, model.dim)
        delta = batch.draws[..., block].reshape(-1, 2)
        assert np.corrcoef(delta.T)[0, 1] < 0.0


@pytest.mark.slow
def test_tight_subgroup_scale_shrinks_subgroups_onto_the_population():
    schema = make_schema()
    classifier = age_network(schema)
    data = grouped_dataset(schema)
    parts = partition(data, classifier)
    x = data.encoded[np.argmin(data.frame['age'].to_numpy())]

    def spread(sigma_l2, seed):
        priors = PriorConfig(levels=3, learn_scales=False, sigma_scale_l2=sigma_l2,
                             subsample_group=8, subsample_pooled=12)
        model = PosteriorModel(x, schema, classifier, priors, partitioned=parts)
        config = NutsConfig(burn_in=300, n_samples=200, n_chains=2, max_depth=8, mass_matrix='diagonal', seed=seed)
        draws = run_chains(config, model, model.dim).draws.reshape(-1, model.dim)
        mu_l1 = draws[:, model.layout.blocks['mu_l1'].slice]
        mu_l2 = draws[:, model.layout.blocks['mu_l2'].slice].reshape(len(draws), model.n_groups, -1)
        return float(np.abs(mu_l2 - mu_l1[:, None, :]).mean())

    for seed in range(3):
        assert spread(0.05, seed) < spread(0.5, seed)
