"""
Tests for the Intelligent Driver Model used by simulated traffic
"""

import math

import numpy as np
import pytest

from src.errors import ConfigurationError, DomainError
from src.sim.idm import IDMParams, IDMRanges, desired_gap, idm_accel


def test_standstill_free_road():
    params = IDMParams()
    assert idm_accel(params, 0.0) == pytest.approx(params.a)
    assert idm_accel(params, 0.0, math.inf, 10.0) == pytest.approx(params.a)


def test_desired_speed_free_road():
    params = IDMParams(v0=25.0)
    assert idm_accel(params, 25.0) == pytest.approx(0.0, abs=1e-12)
    assert idm_accel(params, 30.0) < 0.0


def test_hand_evaluated_example():
    params = IDMParams(v0=25.0, T=1.5, s0=2.0, a=1.5, b=2.0, delta=4.0)
    s_star = 2.0 + 20.0 * 1.5 + 20.0 * 5.0 / (2.0 * math.sqrt(1.5 * 2.0))
    expected = 1.5 * (1.0 - (20.0 / 25.0) ** 4 - (s_star / 30.0) ** 2)
    assert desired_gap(params, 20.0, 5.0) == pytest.approx(s_star, abs=1e-12)
    assert idm_accel(params, 20.0, 30.0, 15.0) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(-5.2892, abs=1e-3)


def test_closer_leader_brakes_harder():
    params = IDMParams()
    gaps = [5.0, 10.0, 20.0, 40.0, 80.0]
    accels = [idm_accel(params, 20.0, g, 20.0) for g in gaps]
    assert all(a1 < a2 for a1, a2 in zip(accels, accels[1:]))


def test_missing_lead_speed_means_same_speed():
    params = IDMParams()
    assert idm_accel(params, 20.0, 30.0) == pytest.approx(idm_accel(params, 20.0, 30.0, 20.0))


def test_nonpositive_gap_raises():
    with pytest.raises(DomainError):
        idm_accel(IDMParams(), 10.0, 0.0, 10.0)


def test_params_validation():
    with pytest.raises(ConfigurationError) as err:
        IDMParams(T=0.0)
    assert err.value.field == "idm.T"


def test_ranges_sample_inside_bounds():
    ranges = IDMRanges()
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = ranges.sample(rng)
        assert ranges.v0[0] <= p.v0 <= ranges.v0[1]
        assert ranges.T[0] <= p.T <= ranges.T[1]
        assert ranges.s0[0] <= p.s0 <= ranges.s0[1]
        assert ranges.a[0] <= p.a <= ranges.a[1]
        assert ranges.b[0] <= p.b <= ranges.b[1]
        assert p.delta == 4.0


def test_ranges_validation():
    with pytest.raises(ConfigurationError) as err:
        IDMRanges(v0=(30.0, 20.0))
    assert err.value.field == "merging.idm.v0"
