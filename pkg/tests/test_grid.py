import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from allen_cahn_clt.errors import GridMismatch, NonFiniteInput, WidthUnresolvable
from allen_cahn_clt.grid import (GridSpec, MollifierSpec, RngStream, ScalarField,
                                 convolve, covariance_field, covariance_init,
                                 initial_condition, inner_product, make_mollifier,
                                 read_field, reflect, sample_white_noise,
                                 white_noise_array, write_field)


def test_grid_rejects_non_power_of_two_and_oversize():
    with pytest.raises(ValueError):
        GridSpec(1, 12, 1.0)
    with pytest.raises(ValueError):
        GridSpec(3, 1024, 1.0, max_sites=1 << 20)
    g = GridSpec(2, 8, 3.0)
    assert g.h * g.n == g.L


def test_field_values_must_be_finite():
    g = GridSpec(1, 4, 1.0)
    with pytest.raises(NonFiniteInput):
        ScalarField(g, [0.0, np.nan, 1.0, 2.0])


def test_arithmetic_requires_identical_grids():
    a = ScalarField.constant(GridSpec(1, 4, 1.0), 1.0)
    b = ScalarField.constant(GridSpec(1, 4, 2.0), 1.0)
    with pytest.raises(GridMismatch):
        a + b
    with pytest.raises(GridMismatch):
        inner_product(a, b)


def test_binary_record_round_trip(tmp_path):
    g = GridSpec(3, 8, 1.5)
    f = ScalarField(g, RngStream(1).standard_normal(g.shape), time=0.25)
    write_field(tmp_path / "f.bin", f)
    back = read_field(tmp_path / "f.bin")
    assert back.grid == g and back.time == 0.25
    assert np.array_equal(back.values, f.values)
    assert len((tmp_path / "f.bin").read_bytes()) == 24 + 8 * g.size


def test_white_noise_replays_bit_exactly():
    g = GridSpec(1, 4, 1.0)
    a = sample_white_noise(g, RngStream(7, 3))
    b = sample_white_noise(g, RngStream(7, 3))
    assert np.array_equal(a.values, b.values)
    assert a.time == 0.0
    assert not np.array_equal(a.values, sample_white_noise(g, RngStream(7, 4)).values)


def test_white_noise_site_variance():
    g = GridSpec(1, 4, 1.0)
    draws = np.array([white_noise_array(g, RngStream(11, r))[0] for r in range(100_000)])
    target = g.h ** -g.d
    se = target * math.sqrt(2 / (len(draws) - 1))
    assert abs(draws.var(ddof=1) - target) < 3 * se


def test_negated_stream_negates_noise():
    g = GridSpec(2, 8, 1.0)
    rng = RngStream(5, 2)
    assert np.array_equal(sample_white_noise(g, rng.negated()).values,
                          -sample_white_noise(g, rng).values)


def test_mollifier_unit_mass_nonnegative_compact():
    g = GridSpec(1, 256, 4.0)
    spec = MollifierSpec(0.25)
    rho = make_mollifier(spec, g)
    assert abs(g.cell * rho.values.sum() - 1) <= 1e-12
    assert rho.values.min() >= 0
    k = int(round(0.25 / g.h))
    assert rho.at(k) == 0.0 and rho.at(-k) == 0.0
    assert np.all(rho.values[g.radius() >= 0.25] == 0.0)


@given(width=st.floats(0.05, 0.45), d=st.integers(1, 3))
def test_mollifier_invariants_any_width(width, d):
    g = GridSpec(d, 32 if d < 3 else 16, 1.0)
    spec = MollifierSpec(width)
    if width < 2 * g.h:
        with pytest.raises(WidthUnresolvable):
            make_mollifier(spec, g)
        return
    rho = make_mollifier(spec, g)
    assert rho.values.min() >= 0
    assert abs(g.cell * rho.values.sum() - 1) <= 1e-12


def test_convolution_with_lattice_delta_is_identity():
    g = GridSpec(2, 16, 2.0)
    f = ScalarField(g, RngStream(3).standard_normal(g.shape))
    delta = np.zeros(g.shape)
    delta[0, 0] = g.h ** -g.d
    out = convolve(f, ScalarField(g, delta))
    assert np.max(np.abs(out.values - f.values)) < 1e-12


def test_convolution_commutes_and_associates():
    g = GridSpec(3, 8, 1.0)
    r = RngStream(9)
    f, h, k = (ScalarField(g, r.advance(i).standard_normal(g.shape)) for i in range(3))
    assert np.max(np.abs(convolve(f, h).values - convolve(h, f).values)) <= 1e-12
    left = convolve(convolve(f, h), k).values
    right = convolve(f, convolve(h, k)).values
    assert np.max(np.abs(left - right)) <= 1e-10 * np.max(np.abs(left))


def test_convolution_second_moments_add():
    g = GridSpec(1, 512, 4.0)
    a = make_mollifier(MollifierSpec(0.3), g)
    b = make_mollifier(MollifierSpec(0.5), g)
    x2 = g.radius() ** 2

    def m2(f):
        return g.cell * np.sum(x2 * f.values)

    # centred, unit-mass kernels: second moments add exactly up to round-off
    assert abs(m2(convolve(a, b)) - (m2(a) + m2(b))) < 1e-10


def test_initial_condition_site_variance_matches_covariance_at_zero():
    g = GridSpec(1, 64, 2.0)
    moll = MollifierSpec(0.125)
    vals = np.array([initial_condition(g, moll, RngStream(1, r)).values[[0, 32]] for r in range(4000)])
    target = covariance_init(moll, g, 0)
    for site in range(2):
        v = vals[:, site]
        se = target * math.sqrt(2 / (len(v) - 1))
        assert abs(v.var(ddof=1) - target) < 3 * se
    # stationarity: the two sites agree within the combined error
    assert abs(vals[:, 0].var() - vals[:, 1].var()) < 3 * math.sqrt(2) * target * math.sqrt(2 / len(vals))


def test_initial_condition_decorrelates_beyond_twice_the_width():
    g = GridSpec(1, 64, 2.0)
    moll = MollifierSpec(0.125)
    lag = int(math.ceil(2 * 0.125 / g.h))
    pairs = np.array([initial_condition(g, moll, RngStream(2, r)).values[[0, lag]] for r in range(4000)])
    prod = pairs[:, 0] * pairs[:, 1]
    assert abs(prod.mean()) < 3 * prod.std(ddof=1) / math.sqrt(len(prod))


def test_initial_condition_odd_in_the_noise():
    g = GridSpec(3, 16, 1.0)
    moll = MollifierSpec(0.2)
    rng = RngStream(4, 1)
    assert np.array_equal(initial_condition(g, moll, rng.negated()).values,
                          -initial_condition(g, moll, rng).values)


def test_covariance_init_properties():
    g = GridSpec(2, 32, 2.0)
    moll = MollifierSpec(0.3)
    rho = make_mollifier(moll, g)
    c0 = covariance_init(moll, g, 0)
    assert abs(c0 - g.cell * np.sum(rho.values**2)) < 1e-10 * c0
    C = covariance_field(moll, g)
    assert abs(g.cell * C.values.sum() - 1) < 1e-10
    assert np.all(C.values[g.radius() >= 0.6] == 0.0)
    assert covariance_init(moll, g, (10, 0)) == 0.0
    assert np.allclose(reflect(C).values, C.values, atol=1e-14 * c0)
    assert C.values.max() == pytest.approx(c0)


def test_inner_product_examples():
    g = GridSpec(2, 16, 3.0)
    one = ScalarField.constant(g, 1.0)
    assert inner_product(one, one) == pytest.approx(9.0, rel=1e-14)
    a = ScalarField.from_function(g, lambda x, y: np.cos(2 * np.pi * x / 3.0) + 0 * y)
    b = ScalarField.from_function(g, lambda x, y: np.cos(4 * np.pi * y / 3.0) + 0 * x)
    assert abs(inner_product(a, b)) < 1e-12


def test_inner_product_gaussian_norm():
    w = 0.3
    g = GridSpec(3, 64, 4.0)
    f = ScalarField.from_function(g, lambda x, y, z: np.exp(-(x**2 + y**2 + z**2) / (2 * w**2)))
    # ||exp(-|x|^2 / (2 w^2))||^2 = (pi w^2)^(d/2)
    assert inner_product(f, f) == pytest.approx((math.pi * w**2) ** 1.5, rel=1e-8)


@given(st.integers(0, 2**32), st.integers(0, 100))
def test_inner_product_symmetric_and_positive(seed, replica):
    g = GridSpec(1, 16, 1.0)
    r = RngStream(seed, replica)
    f = ScalarField(g, r.standard_normal(g.shape))
    h = ScalarField(g, r.advance().standard_normal(g.shape))
    assert inner_product(f, h) == pytest.approx(inner_product(h, f), rel=1e-12, abs=1e-15)
    assert inner_product(f, f) >= 0
