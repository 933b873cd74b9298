import numpy as np
import pytest

from conftest import make_schema, make_classifier
from recourse_tools.NutsSampler import (
    NutsConfig, Chain, DualAveraging, leapfrog, regularized_variance, run_chains, init_rng,
)
from recourse_tools.Diagnostics import split_rhat
from recourse_tools.PosteriorModel import PosteriorModel
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.errors import AllChainsDiverged, NonFinite, SchemaError


class Gaussian:
    """Zero-mean Gaussian target with covariance `cov`."""

    def __init__(self, cov):
        self.precision = np.linalg.inv(np.atleast_2d(cov))

    def __call__(self, q):
        with np.errstate(over='ignore', invalid='ignore'):
            grad = -self.precision @ q
            logp = 0.5 * float(q @ grad)
        if not np.isfinite(logp) or not np.isfinite(grad).all():
            raise NonFinite("overflow")
        return logp, grad


def test_leapfrog_single_step():
    target = Gaussian(np.eye(1))
    q, p, logp, grad = leapfrog(np.array([1.0]), np.array([0.0]), 0.1, target)
    assert q[0] == pytest.approx(0.995)
    assert p[0] == pytest.approx(-0.09975)
    assert logp == pytest.approx(-0.5 * 0.995 ** 2)
    assert grad[0] == pytest.approx(-0.995)


def test_leapfrog_is_reversible():
    target = Gaussian(np.array([[1.0, 0.3], [0.3, 2.0]]))
    q0, p0 = np.array([0.4, -1.0]), np.array([1.2, 0.5])
    q1, p1, _, _ = leapfrog(q0, p0, 0.2, target)
    q2, p2, _, _ = leapfrog(q1, -p1, 0.2, target)
    assert np.allclose(q2, q0) and np.allclose(-p2, p0)


def test_dual_averaging_shrinks_on_rejection():
    averager = DualAveraging(1.0, 0.8)
    steps = [averager.update(0.0) for _ in range(5)]
    assert all(b < a for a, b in zip(steps, steps[1:]))


def test_regularized_variance_shrinks_toward_floor():
    window = np.random.default_rng(0).normal(0.0, 2.0, size=(200, 3))
    var = regularized_variance(window)
    assert np.all(var < window.var(axis=0, ddof=1))
    assert np.allclose(var, 4.0, rtol=0.25)


def test_config_validation():
    with pytest.raises(SchemaError):
        NutsConfig(target_accept=1.0)
    with pytest.raises(SchemaError):
        NutsConfig(mass_matrix='dense')
    with pytest.raises(SchemaError):
        NutsConfig(n_chains=0)


def test_standard_normal():
    config = NutsConfig(burn_in=400, n_samples=1000, n_chains=2, seed=3)
    batch = run_chains(config, Gaussian(np.eye(2)), 2)
    assert batch.draws.shape == (2, 1000, 2)
    flat = batch.draws.reshape(-1, 2)
    assert np.allclose(flat.mean(axis=0), 0.0, atol=0.15)
    assert np.allclose(flat.var(axis=0), 1.0, atol=0.2)
    assert 0.6 < batch.accept_stat.mean() < 0.97
    assert batch.divergence_rate == 0.0


@pytest.mark.slow
@pytest.mark.parametrize('mass_matrix', ['identity', 'diagonal'])
def test_correlated_gaussian(mass_matrix):
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    config = NutsConfig(burn_in=1000, n_samples=4000, n_chains=4, seed=5, mass_matrix=mass_matrix)
    batch = run_chains(config, Gaussian(cov), 2)
    flat = batch.draws.reshape(-1, 2)
    assert np.abs(flat.mean(axis=0)).max() < 0.05
    assert np.abs(flat.std(axis=0) - 1.0).max() < 0.1
    assert np.corrcoef(flat.T)[0, 1] == pytest.approx(0.9, abs=0.05)
    assert max(split_rhat(batch.draws[:, :, j]) for j in range(2)) < 1.01


@pytest.mark.slow
def test_ten_dimensional_standard_normal():
    config = NutsConfig(burn_in=1000, n_samples=2000, n_chains=4, seed=8)
    batch = run_chains(config, Gaussian(np.eye(10)), 10)
    flat = batch.draws.reshape(-1, 10)
    assert np.abs(flat.mean(axis=0)).max() < 0.05
    assert np.abs(flat.std(axis=0) - 1.0).max() < 0.1
    assert max(split_rhat(batch.draws[:, :, j]) for j in range(10)) < 1.01
    assert batch.divergence_rate == 0.0


def test_threads_do_not_change_draws():
    config = NutsConfig(burn_in=50, n_samples=40, n_chains=3, seed=11)
    target = Gaussian(np.diag([1.0, 4.0]))
    serial = run_chains(config, target, 2, threads=1)
    parallel = run_chains(config, target, 2, threads=3)
    assert np.array_equal(serial.draws, parallel.draws)
    assert serial.chain_ids == parallel.chain_ids == (0, 1, 2)


def test_seed_changes_draws():
    target = Gaussian(np.eye(1))
    a = run_chains(NutsConfig(burn_in=20, n_samples=10, n_chains=1, seed=0), target, 1)
    b = run_chains(NutsConfig(burn_in=20, n_samples=10, n_chains=1, seed=1), target, 1)
    assert not np.array_equal(a.draws, b.draws)


def test_explicit_initial_points():
    config = NutsConfig(burn_in=0, n_samples=1, n_chains=2, seed=0)
    init = np.array([[0.5], [-0.5]])
    batch = run_chains(config, Gaussian(np.eye(1)), 1, init=init)
    assert batch.n_chains == 2
    assert batch.step_sizes[0, 0] == pytest.approx(config.step_size)


def test_short_diagonal_warmup_keeps_its_step_size():
    # burn-in 6: the mass window closes on the last warm-up iteration
    target = Gaussian(np.eye(2))
    diagonal = Chain(0, target, 2, NutsConfig(burn_in=6, n_samples=1, seed=2, mass_matrix='diagonal'))
    identity = Chain(0, target, 2, NutsConfig(burn_in=6, n_samples=1, seed=2))
    step = diagonal.adapt()
    assert step == pytest.approx(identity.adapt())
    assert step != pytest.approx(1.0)
    assert not np.allclose(diagonal.inv_mass, 1.0)


def test_init_stream_is_apart_from_the_chain_stream():
    seen = {}

    def init(index, rng):
        seen[index] = rng.standard_normal(4)
        return np.zeros(1)

    run_chains(NutsConfig(burn_in=0, n_samples=1, n_chains=2, seed=7), Gaussian(np.eye(1)), 1, init=init)
    for index in (0, 1):
        chain_stream = np.random.Generator(np.random.Philox(7 + index)).standard_normal(4)
        assert not np.allclose(seen[index], chain_stream)
        assert np.array_equal(seen[index], init_rng(7, index).standard_normal(4))
    assert not np.allclose(seen[0], seen[1])


def test_collapsing_step_size_fails_every_chain():
    tiny = Gaussian(np.eye(1) * 1e-24)
    config = NutsConfig(burn_in=200, n_samples=10, n_chains=2, seed=0)
    with pytest.raises(AllChainsDiverged):
        run_chains(config, tiny, 1)


def test_summary_lists_chains():
    config = NutsConfig(burn_in=30, n_samples=20, n_chains=2, seed=2)
    batch = run_chains(config, Gaussian(np.eye(1)), 1)
    summary = batch.summary()
    assert summary['chain_ids'] == [0, 1]
    assert summary['failed_chains'] == []
    assert len(summary['step_sizes']) == 2
    frame = batch.to_frame(['x'])
    assert list(frame.columns) == ['chain', 'draw', 'x', 'log_posterior', 'divergent']
    assert len(frame) == 40


@pytest.mark.slow
def test_recovers_the_prior_without_likelihood():
    schema = make_schema()
    priors = PriorConfig(mu0=0.2, sigma_scale_l3=0.5)
    model = PosteriorModel(np.full(schema.encoded_width, 0.5), schema, make_classifier(schema), priors,
                           include_likelihood=False)
    batch = run_chains(NutsConfig(burn_in=400, n_samples=1000, n_chains=2, seed=1), model, model.dim)
    delta = batch.draws[..., model.layout.blocks['delta'].slice].reshape(-1, 2)
    assert np.allclose(delta.mean(axis=0), 0.2, atol=0.07)
    assert np.allclose(delta.std(axis=0), 0.5, atol=0.08)
    eta = np.array([model.layout.transform(theta)[0].eta[0] for theta in batch.draws.reshape(-1, model.dim)])
    assert np.allclose(eta.mean(axis=0), 1.0 / 3.0, atol=0.05)
