import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seisoed.errors import DomainError, NumericalError
from seisoed.integrate import (SampleStream, convergence_rate, expectation_mc,
                               expectation_quadrature, gauss_legendre_1d, relative_errors,
                               smolyak_total_degree, stream_generator, tensor_rule,
                               write_convergence_csv)


def test_gauss_legendre_one_point():
    x, w = gauss_legendre_1d(1)
    assert np.array_equal(x, [0.0]) and np.array_equal(w, [2.0])


def test_gauss_legendre_two_points():
    x, w = gauss_legendre_1d(2)
    assert np.allclose(x, [-1 / math.sqrt(3), 1 / math.sqrt(3)], rtol=0, atol=1e-15)
    assert np.allclose(w, [1.0, 1.0], rtol=0, atol=1e-15)
    assert np.sum(w * x**2) == pytest.approx(2 / 3, abs=1e-15)


def test_gauss_legendre_degree_eight():
    x, w = gauss_legendre_1d(5)
    assert abs(np.sum(w * x**8) - 2 / 9) < 1e-14


def test_gauss_legendre_matches_numpy():
    for n in (3, 7, 20, 41):
        x, w = gauss_legendre_1d(n)
        xr, wr = np.polynomial.legendre.leggauss(n)
        assert np.allclose(x, xr, rtol=0, atol=1e-14)
        assert np.allclose(w, wr, rtol=0, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.data())
def test_gauss_legendre_exactness(n, data):
    k = data.draw(st.integers(0, 2 * n - 1))
    x, w = gauss_legendre_1d(n)
    exact = 0.0 if k % 2 else 2.0 / (k + 1)
    assert np.sum(w * x**k) == pytest.approx(exact, abs=1e-12)


def test_gauss_legendre_rejects_zero():
    with pytest.raises(DomainError):
        gauss_legendre_1d(0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.data())
def test_tensor_rule_exactness(n, dim, data):
    powers = data.draw(st.lists(st.integers(0, 2 * n - 1), min_size=dim, max_size=dim))
    rule = tensor_rule([n] * dim)
    vals = np.prod(rule.points ** np.array(powers), axis=1)
    exact = math.prod(0.0 if p % 2 else 2.0 / (p + 1) for p in powers)
    assert np.sum(rule.weights * vals) == pytest.approx(exact, abs=1e-12)


@pytest.mark.parametrize("level", [0, 1, 4, 9])
def test_smolyak_one_dimension_is_gauss_legendre(level):
    rule = smolyak_total_degree(1, level)
    x, w = gauss_legendre_1d(level + 1)
    assert np.allclose(rule.points[:, 0], x, rtol=0, atol=1e-15)
    assert np.allclose(rule.weights, w, rtol=0, atol=1e-15)


def test_smolyak_three_dimensional_ladder():
    sizes = [smolyak_total_degree(3, lv).size for lv in range(4, 9)]
    assert sizes == [165, 351, 681, 1233, 2097]
    assert all(b > a for a, b in zip(sizes, sizes[1:]))


@pytest.mark.parametrize("dim,level", [(2, 3), (2, 6), (3, 5), (4, 3), (7, 2)])
def test_smolyak_weights_sum_and_points_in_cube(dim, level):
    rule = smolyak_total_degree(dim, level)
    assert abs(rule.weights.sum() - 2.0**dim) <= 1e-12 * 2.0**dim
    assert np.all(np.abs(rule.points) <= 1.0)
    assert rule.tag == "smolyak-total-degree" and rule.level == level


def test_smolyak_two_dimensional_monomial():
    rule = smolyak_total_degree(2, 4)
    vals = rule.points[:, 0] ** 2 * rule.points[:, 1] ** 2
    assert abs(np.sum(rule.weights * vals) - 4 / 9) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 5), st.data())
def test_smolyak_total_degree_exactness(dim, level, data):
    # exact for monomials whose per-coordinate degree budget fits the index set
    powers = data.draw(st.lists(st.integers(0, 3), min_size=dim, max_size=dim))
    need = sum((p // 2) + 1 for p in powers)
    if need > level + dim:
        return
    rule = smolyak_total_degree(dim, level)
    vals = np.prod(rule.points ** np.array(powers), axis=1)
    exact = math.prod(0.0 if p % 2 else 2.0 / (p + 1) for p in powers)
    assert np.sum(rule.weights * vals) == pytest.approx(exact, abs=1e-12)


def test_smolyak_rejects_bad_arguments():
    with pytest.raises(DomainError):
        smolyak_total_degree(0, 2)
    with pytest.raises(DomainError):
        smolyak_total_degree(2, -1)


def test_quadrature_constant_and_linear():
    rule = smolyak_total_degree(3, 3)
    box = ([1.0, -2.0, 10.0], [3.0, 5.0, 20.0])
    assert expectation_quadrature(lambda t: np.full(len(t), 2.5), rule, box) == pytest.approx(
        2.5, abs=1e-12)
    assert expectation_quadrature(lambda t: t[:, 0], rule, box) == pytest.approx(2.0, abs=1e-12)


def test_quadrature_non_finite_raises():
    rule = tensor_rule([3])
    with pytest.raises(NumericalError, match="not finite"):
        expectation_quadrature(lambda t: np.where(t[:, 0] > 0, np.inf, 1.0), rule, ([-1.0], [1.0]))


def test_mc_constant_and_moment():
    box = ([-1.0], [1.0])
    est, err = expectation_mc(lambda t: np.full(len(t), 7.0), box, 10, seed=0)
    assert est == 7.0 and err == 0.0
    est, err = expectation_mc(lambda t: t[:, 0] ** 2, box, 100_000, seed=0)
    assert abs(est - 1 / 3) <= 3 * err


def test_mc_rejects_small_and_non_finite():
    with pytest.raises(DomainError):
        expectation_mc(lambda t: t[:, 0], ([0.0], [1.0]), 1, seed=0)
    with pytest.raises(NumericalError):
        expectation_mc(lambda t: np.full(len(t), np.nan), ([0.0], [1.0]), 5, seed=0)


def test_quadrature_and_mc_agree():
    box = ([0.0, -1.0, 2.0], [1.0, 1.0, 3.0])

    def f(t):
        return np.exp(0.5 * t[:, 0]) * np.cos(t[:, 1]) + np.log(t[:, 2])

    quad = expectation_quadrature(f, smolyak_total_degree(3, 8), box)
    est, err = expectation_mc(f, box, 20_000, seed=3)
    assert abs(quad - est) <= 3 * err


def test_streams_reproducible_and_distinct():
    a = stream_generator(5, 1, 2).random(4)
    b = stream_generator(5, 1, 2).random(4)
    c = stream_generator(5, 1, 3).random(4)
    d = stream_generator(6, 1, 2).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    with pytest.raises(DomainError):
        stream_generator(0, 1, 2, 3, 4)


def test_sample_stream_order_independent():
    s = SampleStream(11, np.array([0.0, 5.0]), np.array([1.0, 6.0]))
    whole = s.draw(0, 10)
    pieces = np.concatenate([s.draw(7, 3), s.draw(0, 7)])
    assert np.array_equal(whole, np.concatenate([pieces[3:], pieces[:3]]))
    assert np.all((whole >= [0.0, 5.0]) & (whole < [1.0, 6.0]))


def test_stream_correlation_small():
    x = np.array([stream_generator(0, 0, i).random() for i in range(4000)])
    y = np.array([stream_generator(0, 1, i).random() for i in range(4000)])
    assert abs(np.corrcoef(x, y)[0, 1]) < 4 / math.sqrt(4000)
    assert abs(np.corrcoef(x[:-1], x[1:])[0, 1]) < 4 / math.sqrt(4000)


def test_convergence_rate_examples():
    sizes = np.array([10.0, 100.0, 1000.0, 10000.0])
    assert convergence_rate(sizes**-1.0, sizes) == pytest.approx(1.0, abs=1e-12)
    assert convergence_rate(sizes**-0.5, sizes) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DomainError):
        convergence_rate([1.0, 0.0, 0.5], [1, 2, 3])
    with pytest.raises(DomainError):
        convergence_rate([1.0, 0.5], [1, 2])


def test_relative_errors_definition():
    assert np.allclose(relative_errors([1.0, 2.0, 4.0]), [0.5, 0.5])


def test_convergence_csv(tmp_path):
    path = tmp_path / "c.csv"
    write_convergence_csv(path, [10, 20], [1.0, 1.5], [None, 1 / 3], ["seed = 0"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed = 0"
    assert lines[1] == "size,estimate,rel_error"
    assert lines[3] == "20,1.5,0.33333333333333331"
