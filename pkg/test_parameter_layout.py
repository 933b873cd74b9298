import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_schema
from recourse_tools.ParameterLayout import (
    ParameterLayout, stick_breaking, stick_breaking_inverse, stick_breaking_vjp,
    stick_breaking_log_jac_grad, bounded, bounded_inverse,
)
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.errors import NonFinite, WidthMismatch

TRUNCATED = dict(lower={'age': -0.3, 'hours': 0.0}, upper={'age': 0.5})


def numeric_grad(fn, x, eps=1e-6):
    grad = np.zeros_like(x)
    for j in range(len(x)):
        up, down = x.copy(), x.copy()
        up[j] += eps
        down[j] -= eps
        grad[j] = (fn(up) - fn(down)) / (2 * eps)
    return grad


def test_stick_breaking_of_zeros():
    y, log_y, _ = stick_breaking(np.zeros(2))
    assert np.allclose(y, [0.5, 0.25, 0.25])
    assert np.allclose(log_y, np.log(y))


@given(arrays(float, 3, elements=st.floats(-8, 8)))
def test_stick_breaking_inverse(u):
    y, _, _ = stick_breaking(u)
    assert y.sum() == pytest.approx(1.0)
    assert np.allclose(stick_breaking_inverse(y), u, atol=1e-6)


def test_stick_breaking_log_jacobian():
    u = np.array([0.3, -1.2, 2.0])
    jac = np.column_stack([numeric_grad(lambda v: stick_breaking(v)[0][i], u) for i in range(3)]).T
    _, _, log_jac = stick_breaking(u)
    assert log_jac == pytest.approx(np.log(abs(np.linalg.det(jac))), rel=1e-6)
    assert np.allclose(stick_breaking_log_jac_grad(u), numeric_grad(lambda v: stick_breaking(v)[2], u), atol=1e-6)


def test_stick_breaking_vjp():
    u = np.array([0.7, -0.4])
    g = np.array([0.2, -1.0, 0.5])
    assert np.allclose(stick_breaking_vjp(u, g), numeric_grad(lambda v: stick_breaking(v)[1] @ g, u), atol=1e-6)


def test_stick_breaking_stays_finite_when_entries_underflow():
    y, log_y, log_jac = stick_breaking(np.array([800.0, 800.0]))
    assert np.isfinite(log_y).all() and np.isfinite(log_jac)
    assert y[0] == pytest.approx(1.0)


@pytest.mark.parametrize('lower, upper', [(-np.inf, np.inf), (0.0, np.inf), (-np.inf, 0.2), (-0.5, 0.25)])
def test_bounded_modes(lower, upper):
    u = np.linspace(-3, 3, 7)
    value, log_jac, dvalue, dlog_jac = bounded(u, lower, upper)
    assert ((value >= lower) & (value <= upper)).all()
    assert np.allclose(log_jac, np.log(np.abs(dvalue)))
    assert np.allclose(dvalue, numeric_grad(lambda v: bounded(v, lower, upper)[0].sum(), u), atol=1e-6)
    assert np.allclose(dlog_jac, numeric_grad(lambda v: bounded(v, lower, upper)[1].sum(), u), atol=1e-6)
    assert np.allclose(bounded_inverse(value, lower, upper), u, atol=1e-8)


@pytest.mark.parametrize('levels, size', [(1, 4), (2, 14), (3, 28)])
def test_block_sizes(levels, size):
    layout = ParameterLayout(make_schema(), PriorConfig(levels=levels))
    assert layout.size == size
    names = layout.column_names()
    assert not any('group=' in n for n in names)
    theta = np.random.default_rng(0).normal(size=layout.size)
    c, _ = layout.transform(theta)
    assert len(layout.flatten(c)) == len(names)


def test_three_level_column_names():
    layout = ParameterLayout(make_schema(), PriorConfig(levels=3))
    names = layout.column_names()
    assert 'mu_l2[b,hours]' in names
    assert 'beta_l2[a,color=blue]' in names
    assert 'sigma_l2[b,age]' in names
    assert names.index('delta[age]') < names.index('eta[color=red]')


def test_frozen_feature_gets_no_parameters():
    schema = make_schema()
    layout = ParameterLayout(schema, PriorConfig())
    assert [f.name for f in layout.continuous] == ['age', 'hours']
    assert [f.name for f in layout.categorical] == ['color']


def test_inverse_recovers_theta():
    layout = ParameterLayout(make_schema(), PriorConfig(levels=3, **TRUNCATED))
    theta = np.random.default_rng(1).normal(size=layout.size)
    c, _ = layout.transform(theta)
    assert np.allclose(layout.inverse(c), theta, atol=1e-8)


def test_bad_vectors():
    layout = ParameterLayout(make_schema(), PriorConfig())
    with pytest.raises(WidthMismatch):
        layout.transform(np.zeros(layout.size + 1))
    with pytest.raises(NonFinite):
        layout.transform(np.full(layout.size, np.nan))


@pytest.mark.parametrize('levels', [1, 2, 3])
def test_pullback_matches_finite_differences(levels):
    layout = ParameterLayout(make_schema(), PriorConfig(levels=levels, learn_scales=True, **TRUNCATED))
    rng = np.random.default_rng(levels)
    theta = rng.normal(scale=0.5, size=layout.size)
    c0, _ = layout.transform(theta)
    weights = {}
    for name in ('delta', 'mu_l1', 'mu_l2', 'sigma_l1', 'sigma_l2', 'sigma_l3', 'alpha_l1', 'alpha_l2', 'alpha_l3'):
        value = getattr(c0, name)
        if value is not None:
            weights[name] = rng.normal(size=np.shape(value))
    for key, source in (('log_beta_l1', c0.beta_l1), ('log_beta_l2', c0.beta_l2), ('log_eta', c0.eta)):
        weights[key] = [rng.normal(size=v.shape) for v in source]

    def objective(t):
        c, log_jac = layout.transform(t)
        total = log_jac
        for name in weights:
            if name.startswith('log_'):
                total += sum(float(np.sum(w * v)) for w, v in zip(weights[name], getattr(c, name)))
            else:
                total += float(np.sum(weights[name] * getattr(c, name)))
        return total

    assert np.allclose(layout.pullback(theta, weights), numeric_grad(objective, theta), rtol=1e-5, atol=1e-6)
