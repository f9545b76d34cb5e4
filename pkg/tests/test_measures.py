import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mfsc.forward import CoefficientSpec, constant, simulate
from mfsc.grid import make_grid
from mfsc.measures import (LAW_BOUND_C0, AtomicMeasure, BoundaryIndex, EmptySample,
                           FourierWeight, MeasureSegment, char_fn, law_derivative,
                           law_distance_sq, measure_norm_sq, reconstruct_moments,
                           segment_norm_sq)


def test_char_fn_point_mass():
    mu = AtomicMeasure.dirac(0.7)
    assert char_fn(mu, 2.0) == pytest.approx(np.exp(-1j * 1.4))
    assert abs(char_fn(mu, 3.3)) == pytest.approx(1.0)


def test_char_fn_normalised_at_zero():
    mu = AtomicMeasure.empirical(np.random.default_rng(0).normal(size=50))
    assert char_fn(mu, 0.0) == pytest.approx(1.0)


def test_char_fn_two_atoms():
    mu = AtomicMeasure(np.array([-1.0, 1.0]), np.array([0.5, 0.5]))
    assert char_fn(mu, np.pi) == pytest.approx(-1.0)


@pytest.mark.parametrize("x0", [0.0, 1.0, -3.0])
def test_point_mass_norm_is_two(x0):
    assert measure_norm_sq(AtomicMeasure.dirac(x0), FourierWeight.rational(),
                           self_check=True) == pytest.approx(2.0, abs=1e-3)


def test_identical_measures_have_zero_distance():
    diff = AtomicMeasure.dirac(0.3) - AtomicMeasure.dirac(0.3)
    assert measure_norm_sq(diff) == pytest.approx(0.0, abs=1e-14)


def test_close_point_masses_against_reference_integral():
    # |mu_hat|^2 = 2 - 2 cos(0.1 y); integrate each piece on the half line exactly
    flat = quad(lambda y: 2.0 / (1 + y) ** 2, 0, np.inf)[0]
    osc = quad(lambda y: 2.0 / (1 + y) ** 2, 0, np.inf, weight="cos", wvar=0.1)[0]
    ref = 2 * (flat - osc)
    got = measure_norm_sq(AtomicMeasure.dirac(0.0) - AtomicMeasure.dirac(0.1))
    assert got == pytest.approx(ref, abs=1e-4)


def test_self_check_flags_coarse_quadrature():
    from mfsc.measures import QuadratureUnderResolved
    coarse = FourierWeight.rational(R=5.0, dy=2.5)
    mu = AtomicMeasure.dirac(0.0) - AtomicMeasure.dirac(3.0)
    with pytest.raises(QuadratureUnderResolved):
        measure_norm_sq(mu, coarse, self_check=True)


def test_empty_sample_rejected():
    with pytest.raises(EmptySample):
        AtomicMeasure.empirical(np.array([]))


def test_law_distance_identical_samples():
    x = np.random.default_rng(1).normal(size=200)
    assert law_distance_sq(x, x) == pytest.approx(0.0, abs=1e-14)


def test_law_bound_for_shift():
    x = np.random.default_rng(2).normal(size=300)
    h = 0.1
    assert law_distance_sq(x, x + h, FourierWeight.gaussian()) <= LAW_BOUND_C0 * h * h


def test_law_bound_for_scaling():
    x = np.random.default_rng(3).normal(size=1000)
    bound = LAW_BOUND_C0 * np.mean(x * x)
    assert law_distance_sq(x, 2 * x, FourierWeight.gaussian()) <= bound


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20),
       st.lists(st.floats(-2, 2), min_size=1, max_size=20))
def test_law_bound_on_random_couplings(xs, shifts):
    n = min(len(xs), len(shifts))
    x1 = np.array(xs[:n])
    x2 = x1 + np.array(shifts[:n])
    lhs = law_distance_sq(x1, x2, FourierWeight.gaussian())
    assert lhs <= LAW_BOUND_C0 * np.mean((x1 - x2) ** 2) + 1e-10


def test_segment_of_identical_measures():
    mu = AtomicMeasure.dirac(0.0) - AtomicMeasure.dirac(1.0)
    seg = MeasureSegment(tuple([mu] * 11), 0.01)
    assert segment_norm_sq(seg) == pytest.approx(0.1 * measure_norm_sq(mu), rel=1e-9)


def test_zero_length_segment():
    seg = MeasureSegment((AtomicMeasure.dirac(1.0),), 0.01)
    assert segment_norm_sq(seg) == 0.0


def _ensemble(mu, sigma, n=4096, x0=0.0, seed=0):
    spec = CoefficientSpec(constant(mu), constant(sigma), alpha=x0)
    return simulate(spec, None, make_grid(1.0, 0.01, 0.0), n, seed)


def test_mean_derivative_under_unit_drift():
    ens = _ensemble(1.0, 0.0, n=16)
    assert law_derivative(ens, 50)[0] == pytest.approx(1.0, rel=0.02)


def test_second_moment_derivative_of_brownian():
    ens = _ensemble(0.0, 1.0)
    d = np.mean([law_derivative(ens, k)[1] for k in range(1, 100)])
    assert d == pytest.approx(1.0, rel=0.05)


def test_constant_ensemble_has_zero_derivative():
    ens = _ensemble(0.0, 0.0, n=8, x0=2.0)
    assert np.all(law_derivative(ens, 10) == 0.0)


def test_derivative_needs_interior_index():
    with pytest.raises(BoundaryIndex):
        law_derivative(_ensemble(0.0, 1.0, n=8), 0)


@pytest.mark.parametrize("theta", [0.0, 1.0])
def test_reconstructed_moments_match_end_values(theta):
    spec = CoefficientSpec(lambda t, x, xb, m, mb, xi: -theta * x, constant(1.0), alpha=0.5)
    ens = simulate(spec, None, make_grid(1.0, 0.01, 0.0), 4096, 4)
    assert np.allclose(reconstruct_moments(ens), ens.moments(2)[-1], rtol=0.05)
