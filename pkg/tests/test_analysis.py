import math

import pytest
from hypothesis import given, settings, strategies as st

from occupancy.analysis import (
    Regime,
    estimate_delta_from_AK,
    estimate_delta_from_T,
    expected_extinction_time,
    expected_occupation,
    local_time_regeneration_intensity,
    malthusian_eta,
    mean_total_progeny,
    regime_of,
    theory_values,
)
from occupancy.lifetime import BUILTIN_SPECS, builtin_spec


class TestExpectedOccupation:
    def test_subcritical_values(self):
        assert expected_occupation(0.5, 1) == pytest.approx(1.0, abs=1e-15)
        assert expected_occupation(0.5, 2) == pytest.approx(0.25, abs=1e-15)
        assert expected_occupation(0.5, 3) == pytest.approx(0.25 / 3, abs=1e-15)

    def test_critical_values_are_one_over_k(self):
        for k in range(1, 9):
            assert expected_occupation(1.0, k) == pytest.approx(1.0 / k, abs=1e-15)

    def test_supercritical_values(self):
        # delta^(K-1)/(K delta^K) = 1/(K delta)
        for delta in (1.5, 2.0, 4.0):
            for k in range(1, 6):
                assert expected_occupation(delta, k) == pytest.approx(
                    1.0 / (k * delta), rel=1e-14
                )

    def test_degenerate_delta_zero(self):
        assert expected_occupation(0.0, 1) == 1.0
        assert expected_occupation(0.0, 2) == 0.0

    def test_continuous_across_criticality(self):
        eps = 1e-8
        for k in range(1, 6):
            at = expected_occupation(1.0, k)
            assert expected_occupation(1.0 - eps, k) == pytest.approx(at, abs=1e-6)
            assert expected_occupation(1.0 + eps, k) == pytest.approx(at, abs=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            expected_occupation(-0.1, 1)
        with pytest.raises(ValueError):
            expected_occupation(0.5, 0)
        with pytest.raises(ValueError):
            expected_occupation(0.5, 1.5)


class TestExtinctionTimeAndProgeny:
    def test_half_rate_value(self):
        assert expected_extinction_time(0.5) == pytest.approx(1.3862943611198906, abs=1e-12)

    def test_zero_rate_limit(self):
        assert expected_extinction_time(0.0) == 1.0
        # continuity of the -log(1-d)/d form near 0
        assert expected_extinction_time(1e-9) == pytest.approx(1.0, abs=1e-8)

    def test_rejects_critical_and_above(self):
        for delta in (1.0, 1.5):
            with pytest.raises(ValueError):
                expected_extinction_time(delta)
            with pytest.raises(ValueError):
                mean_total_progeny(delta)

    def test_progeny_value(self):
        assert mean_total_progeny(0.5) == pytest.approx(2.0, abs=1e-14)

    def test_occupation_sums_to_extinction_time(self):
        # sum_K E(A_K) telescopes to E(T); truncate where the geometric
        # tail bound delta^M/(M(1-delta)) is below 1e-12
        for delta in (0.3, 0.6, 0.9):
            m = 1
            while delta**m / (m * (1.0 - delta)) > 1e-12:
                m += 1
            partial = math.fsum(expected_occupation(delta, k) for k in range(1, m + 1))
            assert abs(partial - expected_extinction_time(delta)) <= 1e-10 + 1e-12

    def test_weighted_occupation_sums_to_progeny(self):
        # sum_K K * E(A_K) = integral of X = mean progeny (unit-mean lifetimes)
        for delta in (0.3, 0.6, 0.9):
            m = 1
            while delta**m / (1.0 - delta) > 1e-12:
                m += 1
            partial = math.fsum(k * expected_occupation(delta, k) for k in range(1, m + 1))
            assert abs(partial - mean_total_progeny(delta)) <= 1e-10 + 1e-12


class TestMalthusian:
    def test_exponential_lifetime_rate_two(self):
        root = malthusian_eta(builtin_spec("exp1"), 2.0)
        assert abs(root.eta - 1.0) <= 1e-10
        assert abs(root.z - 0.5) <= 1e-10
        assert root.residual <= 1e-12

    def test_gamma22_rate_two(self):
        # eta solves eta^2 + 2 eta - 4 = 0, the positive root sqrt(5)-1
        root = malthusian_eta(builtin_spec("gamma22"), 2.0)
        assert root.eta == pytest.approx(1.2360679774997897, abs=1e-9)
        assert root.z == pytest.approx(0.3819660112501051, abs=1e-9)

    def test_mix_rate_two(self):
        # frozen from a 40-digit solve of 2(1 - L(eta)) = eta
        root = malthusian_eta(builtin_spec("mix"), 2.0)
        assert root.eta == pytest.approx(0.8685170918213298, abs=1e-11)
        assert root.z == pytest.approx(0.5657414540893351, abs=1e-11)

    def test_rejects_subcritical_and_critical(self):
        for delta in (0.5, 1.0):
            with pytest.raises(ValueError):
                malthusian_eta(builtin_spec("exp1"), delta)


class TestEstimators:
    def test_round_trip_subcritical(self):
        for delta in [0.1 * i for i in range(1, 10)]:
            for k in (2, 3, 4, 5):
                a = expected_occupation(delta, k)
                assert estimate_delta_from_AK(a, k, Regime.SUBCRITICAL) == pytest.approx(
                    delta, abs=1e-9
                )

    def test_round_trip_supercritical(self):
        for delta in (1.5, 2.0, 4.0):
            for k in (2, 3, 4, 5):
                a = expected_occupation(delta, k)
                assert estimate_delta_from_AK(a, k, Regime.SUPERCRITICAL) == pytest.approx(
                    delta, abs=1e-9
                )

    def test_level_one_and_critical_rejected(self):
        with pytest.raises(ValueError):
            estimate_delta_from_AK(1.0, 1, Regime.SUBCRITICAL)
        with pytest.raises(ValueError):
            estimate_delta_from_AK(0.25, 2, Regime.CRITICAL)
        with pytest.raises(ValueError):
            estimate_delta_from_AK(0.0, 2, Regime.SUBCRITICAL)

    def test_from_extinction_time_value(self):
        # largest root of 1 - d = exp(-2d), frozen from a 40-digit solve
        assert estimate_delta_from_T(2.0) == pytest.approx(0.7968121300200200, abs=1e-9)

    def test_from_extinction_time_round_trip(self):
        for delta in [0.1 * i for i in range(1, 10)]:
            t = expected_extinction_time(delta)
            assert estimate_delta_from_T(t) == pytest.approx(delta, abs=1e-9)

    def test_short_times_map_to_zero(self):
        assert estimate_delta_from_T(1.0) == 0.0
        assert estimate_delta_from_T(0.3) == 0.0
        assert estimate_delta_from_T(0.0) == 0.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            estimate_delta_from_T(-1.0)
        with pytest.raises(ValueError):
            estimate_delta_from_T(math.inf)


class TestRegenerationIntensity:
    def test_builtins_equal_one(self):
        for spec in BUILTIN_SPECS.values():
            assert abs(local_time_regeneration_intensity(spec) - 1.0) <= 1e-12


class TestTheoryValues:
    def test_subcritical_bundle(self):
        tv = theory_values(0.5, k_max=4)
        assert tv.regime is Regime.SUBCRITICAL
        assert tv.occupation_at(2) == pytest.approx(0.25)
        assert tv.extinction_time == pytest.approx(1.3862943611198906)
        assert tv.eta is None and tv.z is None

    def test_supercritical_bundle_with_spec(self):
        tv = theory_values(2.0, k_max=3, spec=builtin_spec("exp1"))
        assert tv.regime is Regime.SUPERCRITICAL
        assert tv.extinction_time is None
        assert tv.eta == pytest.approx(1.0, abs=1e-10)
        assert tv.z == pytest.approx(0.5, abs=1e-10)

    def test_regime_classification(self):
        assert regime_of(0.0) is Regime.SUBCRITICAL
        assert regime_of(1.0) is Regime.CRITICAL
        assert regime_of(1.0000000001) is Regime.SUPERCRITICAL


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(2, 6))
def test_subcritical_estimator_inverts_everywhere(delta, k):
    a = expected_occupation(delta, k)
    assert estimate_delta_from_AK(a, k, Regime.SUBCRITICAL) == pytest.approx(delta, abs=1e-9)
