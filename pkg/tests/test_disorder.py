import math

import numpy as np
import pytest

from disorder import (
    DistributionSpec,
    Environment,
    a_frequency,
    beta_regime,
    compute_XL,
    disordered_decay_scan,
    dq_distance,
    environment_events,
    localization_radius,
    margin_k,
    sample_environment,
)
from errors import ConfigError, DomainError, ParameterError
from percolation import SpaceTimeBox

UNIT = DistributionSpec.constant(1.0)


def constant_environment(x_min: int, x_max: int, lam: float, delta: float = 1.0) -> Environment:
    n = x_max - x_min + 1

    return Environment(x_min=x_min, x_max=x_max, delta=np.full(n, delta), lam=np.full(n - 1, lam),
                       lambda_spec=UNIT, delta_spec=UNIT)


@pytest.mark.parametrize("name, params", [
    ("cauchy", {"loc": 0.0}),
    ("uniform", {"low": 1.0}),
    ("uniform", {"low": 2.0, "high": 1.0}),
    ("constant", {"value": 0.0}),
    ("gamma", {"shape": -1.0, "scale": 1.0}),
])
def test_distribution_spec_rejects_invalid(name, params):
    with pytest.raises(ConfigError):
        DistributionSpec(name=name, params=params)


def test_distribution_support_and_json():
    spec = DistributionSpec(name="uniform", params={"low": 0.05, "high": 0.2})

    assert spec.support() == (0.05, 0.2)
    assert DistributionSpec(name="exponential", params={"scale": 2.0}).support() == (0.0, math.inf)
    assert spec.to_json() == {"name": "uniform", "params": {"low": 0.05, "high": 0.2}}


def test_ratio_bound():
    lam = DistributionSpec(name="uniform", params={"low": 0.05, "high": 0.2})
    env = sample_environment(lam, UNIT, 0, 4, seed=1)

    assert env.ratio_bound == pytest.approx(0.2)
    assert env.bounded_ratio(0.25)
    assert not env.bounded_ratio(0.1)

    heavy = sample_environment(lam, DistributionSpec(name="exponential", params={"scale": 1.0}), 0, 4, seed=1)
    assert heavy.ratio_bound == math.inf


def test_sample_environment_is_reproducible():
    lam = DistributionSpec(name="lognormal", params={"mean": -1.0, "sigma": 0.5})
    first = sample_environment(lam, UNIT, -3, 5, seed=7)
    second = sample_environment(lam, UNIT, -3, 5, seed=7)

    assert len(first.delta) == 9
    assert len(first.lam) == 8
    np.testing.assert_array_equal(first.lam, second.lam)
    assert not np.array_equal(first.lam, sample_environment(lam, UNIT, -3, 5, seed=8).lam)


def test_environment_validation():
    with pytest.raises(ParameterError):
        Environment(x_min=0, x_max=1, delta=np.array([1.0, 0.0]), lam=np.array([1.0]),
                    lambda_spec=UNIT, delta_spec=UNIT)

    with pytest.raises(DomainError):
        Environment(x_min=0, x_max=2, delta=np.ones(3), lam=np.ones(3), lambda_spec=UNIT, delta_spec=UNIT)

    with pytest.raises(DomainError):
        sample_environment(UNIT, UNIT, 3, 2, seed=0)


def test_rates_must_be_positive():
    with pytest.raises(ConfigError):
        DistributionSpec(name="uniform", params={"low": 0.0, "high": 0.1})

    with pytest.raises(ParameterError):
        constant_environment(0, 4, 0.0)

    spec = DistributionSpec(name="uniform", params={"low": 0.01, "high": 0.1})
    assert np.all(sample_environment(spec, UNIT, 0, 10, seed=0).lam > 0)


def test_box_rates_slice_the_environment():
    env = Environment(x_min=-2, x_max=3, delta=np.arange(1.0, 7.0), lam=np.arange(10.0, 15.0),
                      lambda_spec=UNIT, delta_spec=UNIT)
    lam, delta = env.box_rates(SpaceTimeBox(x_min=0, x_max=2, t_min=-1.0, t_max=1.0))

    np.testing.assert_array_equal(delta, [3.0, 4.0, 5.0])
    np.testing.assert_array_equal(lam, [12.0, 13.0])
    assert env.lam_at(0) == 12.0

    with pytest.raises(DomainError):
        env.box_rates(SpaceTimeBox(x_min=0, x_max=5, t_min=-1.0, t_max=1.0))


def test_dq_distance():
    assert dq_distance(0, 0.0, 3, 0.0) == 3
    assert dq_distance(0, 0.0, 0, math.exp(2)) == pytest.approx(2.0)
    assert dq_distance(0, 0.0, 0, math.exp(2), q=2.0) == pytest.approx(4.0)
    assert dq_distance(0, 0.0, 1, 0.5) == 1

    with pytest.raises(ParameterError):
        dq_distance(0, 0.0, 1, 0.0, q=0.5)


def test_compute_xl_for_constant_environment():
    c = 0.3
    result = compute_XL(constant_environment(-1, 9, c), 8)

    assert margin_k(8) == 3
    assert result.K == 3
    assert result.sites == (0, 1, 2, 6, 7, 8)
    assert result.log_x_l == pytest.approx(-12 * math.log(1 + 2 * c))


def test_compute_xl_domain():
    with pytest.raises(ParameterError):
        compute_XL(constant_environment(-1, 8, 0.3), 7)

    with pytest.raises(DomainError):
        compute_XL(constant_environment(0, 9, 0.3), 8)


def test_environment_events_hold_for_small_radii():
    env = constant_environment(-2, 10, 0.01)
    events = environment_events(env, 8, 4, {x: 0 for x in range(-2, 11)}, rho=1.0)

    assert events.K == 3 and events.k == 2
    assert events.all_hold


def test_environment_events_report_witnesses():
    radii = {x: 0 for x in range(-2, 11)}
    radii[4] = 10
    events = environment_events(constant_environment(-2, 10, 0.01), 8, 4, radii, rho=1.0)

    assert not events.A and not events.C and not events.D
    assert events.B
    assert events.witness_A == events.witness_C == events.witness_D == 4


def test_environment_events_need_every_radius():
    with pytest.raises(DomainError):
        environment_events(constant_environment(-2, 10, 0.01), 8, 4, {x: 0 for x in range(0, 9)}, rho=1.0)


def test_b_event_fails_for_strong_couplings():
    events = environment_events(constant_environment(-2, 10, 5.0), 8, 4, {x: 0 for x in range(-2, 11)}, rho=1.0)

    assert not events.B


def test_localization_radius():
    assert localization_radius([1, 2, 3, 4], [0.9, 0.5, 0.1, 0.01], 0.5) == 3
    assert localization_radius([1, 2, 3, 4], [1.0] * 4, 0.5) is None


def test_decay_scan_with_negligible_bridges():
    # Without bridges the cluster of (x, 0) is its death-free interval, which reaches a time
    # distance e on either side with probability 2 e^{-e} - e^{-2e}
    env = constant_environment(0, 8, 1e-12)
    scan = disordered_decay_scan(env, [1, 2], trials=500, seed=0, gamma=0.5)
    first = [row for row in scan.rows if row.r == 1]
    expected = 2 * math.exp(-math.e) - math.exp(-2 * math.e)

    assert sorted(scan.radii) == [2, 3, 4, 5, 6]
    assert set(scan.radii.values()) == {1}
    assert not scan.censored

    for row in first:
        assert row.probability == pytest.approx(expected, abs=4 * math.sqrt(expected * (1 - expected) / 500))


@pytest.mark.parametrize("weaker, stronger", [
    (constant_environment(0, 8, 0.05), constant_environment(0, 8, 0.5)),
    (constant_environment(0, 8, 0.1, delta=2.0), constant_environment(0, 8, 0.1, delta=1.0)),
])
def test_decay_scan_is_monotone_in_environment(weaker, stronger):
    low = disordered_decay_scan(weaker, [1, 2], trials=200, seed=4, gamma=0.5)
    high = disordered_decay_scan(stronger, [1, 2], trials=200, seed=4, gamma=0.5)

    for a, b in zip(low.rows, high.rows):
        assert (a.x, a.r) == (b.x, b.r)
        assert b.probability >= a.probability - 3 * math.hypot(a.se, b.se)


def test_decay_scan_needs_positive_radii():
    with pytest.raises(ParameterError):
        disordered_decay_scan(constant_environment(0, 8, 1e-12), [0], trials=10, seed=0, gamma=0.5)


def test_beta_regime():
    assert beta_regime(1, 2).met
    assert beta_regime(1, 2).beta == pytest.approx(5 * math.exp(2) + 1)

    capped = beta_regime(10, 10)
    assert capped.beta == 1000.0
    assert not capped.met


def test_a_frequency_extremes():
    def small(env, L):
        return {x: 0 for x in range(env.x_min, env.x_max + 1)}

    def large(env, L):
        return {x: L for x in range(env.x_min, env.x_max + 1)}

    lam = DistributionSpec(name="uniform", params={"low": 0.01, "high": 0.1})

    assert a_frequency(lam, UNIT, [8], small, environments=3, seed=0) == {8: 1.0}
    assert a_frequency(lam, UNIT, [8], large, environments=3, seed=0) == {8: 0.0}
