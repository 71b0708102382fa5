import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepinverse import sensing
from deepinverse.errors import DimensionError, DomainError, FormatError

from oracles import matvec_loops


def test_same_seed_same_matrix():
    a = sensing.gen_ensemble(20, 64, seed=3)
    b = sensing.gen_ensemble(20, 64, seed=3)
    np.testing.assert_array_equal(a.entries, b.entries)
    assert not np.array_equal(a.entries, sensing.gen_ensemble(20, 64, seed=4).entries)


def test_gaussian_entry_variance():
    phi = sensing.gen_ensemble(200, 400, seed=0)
    assert phi.entries.var() == pytest.approx(1 / 200, rel=0.02)
    assert abs(phi.entries.mean()) < 5 * math.sqrt(1 / 200 / phi.entries.size)


def test_entries_read_only():
    phi = sensing.gen_ensemble(4, 16, seed=0)
    with pytest.raises(ValueError):
        phi.entries[0, 0] = 1.0


def test_orthonormal_rows():
    phi = sensing.gen_ensemble(30, 64, seed=1, kind="orthonormal")
    np.testing.assert_allclose(phi.entries @ phi.entries.T, np.eye(30), atol=1e-12)


def test_square_orthonormal_proxy_inverts():
    phi = sensing.gen_ensemble(64, 64, seed=2, kind="orthonormal")
    x = np.random.default_rng(0).uniform(size=(8, 8))
    np.testing.assert_allclose(sensing.proxy(phi, sensing.measure(phi, x)), x, atol=1e-12)


@pytest.mark.parametrize("m, n", [(0, 10), (11, 10), (3, 0)])
def test_bad_sizes(m, n):
    with pytest.raises(DomainError):
        sensing.gen_ensemble(m, n, seed=0)


def test_unknown_kind():
    with pytest.raises(DomainError):
        sensing.gen_ensemble(2, 4, seed=0, kind="bernoulli")


def test_measure_matches_loops():
    phi = sensing.gen_ensemble(7, 16, seed=5)
    x = np.random.default_rng(1).standard_normal(16)
    np.testing.assert_allclose(sensing.measure(phi, x), matvec_loops(phi.entries, x), atol=1e-13)


def test_measure_and_proxy_dimension_errors():
    phi = sensing.gen_ensemble(5, 16, seed=0)
    with pytest.raises(DimensionError):
        sensing.measure(phi, np.ones(15))
    with pytest.raises(DimensionError):
        sensing.proxy(phi, np.ones(4))
    with pytest.raises(DimensionError):
        sensing.proxy(phi, np.ones(5), shape=(3, 5))


def test_proxy_non_square_needs_shape():
    phi = sensing.gen_ensemble(4, 12, seed=0)
    y = np.ones(4)
    with pytest.raises(DimensionError, match="square"):
        sensing.proxy(phi, y)
    assert sensing.proxy(phi, y, shape=(3, 4)).shape == (3, 4)


def test_ratio_to_measurements():
    assert sensing.measurements_for_ratio(0.1, 1024) == 102
    assert sensing.measurements_for_ratio(0.01, 1024) == 10
    assert sensing.measurements_for_ratio(1e-6, 1024) == 1
    with pytest.raises(DomainError):
        sensing.measurements_for_ratio(0.0, 1024)


def test_noise_level():
    y = np.random.default_rng(0).standard_normal(100_000)
    noisy = sensing.add_noise(y, 20.0, seed=1)
    snr = 10 * math.log10(np.sum(y ** 2) / np.sum((noisy - y) ** 2))
    assert snr == pytest.approx(20.0, abs=0.05)
    np.testing.assert_array_equal(sensing.add_noise(y, math.inf, seed=1), y)
    with pytest.raises(DomainError):
        sensing.add_noise(np.zeros(3), 20.0, seed=0)


def test_ensemble_file_round_trip(tmp_path):
    phi = sensing.gen_ensemble(6, 16, seed=9, kind="orthonormal")
    path = tmp_path / "phi.dics"
    sensing.save_ensemble(phi, path)
    back = sensing.load_ensemble(path)
    assert (back.m, back.n, back.seed, back.generator) == (6, 16, 9, "pcg64-orthonormal")
    np.testing.assert_array_equal(back.entries, phi.entries)


def test_ensemble_file_errors(tmp_path):
    phi = sensing.gen_ensemble(3, 4, seed=0)
    path = tmp_path / "phi.dics"
    sensing.save_ensemble(phi, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="offset"):
        sensing.load_ensemble(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        sensing.load_ensemble(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated"):
        sensing.load_ensemble(path)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 20), extra=st.integers(0, 20), seed=st.integers(0, 2**32))
def test_adjoint_dot_product(m, extra, seed):
    n = m + extra
    phi = sensing.gen_ensemble(m, n, seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(m)
    lhs = float(sensing.measure(phi, x) @ y)
    rhs = float(x @ sensing.proxy(phi, y, shape=(n,)))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_measure_superposition(seed, a, b):
    phi = sensing.gen_ensemble(5, 16, seed=seed)
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 16))
    lhs = sensing.measure(phi, a * x1 + b * x2)
    rhs = a * sensing.measure(phi, x1) + b * sensing.measure(phi, x2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_normal_operator_is_psd(seed):
    phi = sensing.gen_ensemble(6, 16, seed=seed)
    x = np.random.default_rng(seed).standard_normal(16)
    back = sensing.proxy(phi, sensing.measure(phi, x), shape=(16,))
    assert float(x @ back) >= -1e-12
