import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavestack.channels import (ScattererSet, coloring_matrix, correlation_matrix,
                                direction_vector, read_complex_csv, sample_correlated_field,
                                sample_iid_rayleigh, sample_scatterer_channel, sample_scatterers,
                                spatial_correlation, steering_field)
from wavestack.em import DegenerateGeometryError, SimGeometry
from wavestack.estimators import dft_matrix_2d


def test_iid_rayleigh_is_deterministic():
    a = sample_iid_rayleigh(1, 1, seed=7).matrix
    b = sample_iid_rayleigh(1, 1, seed=7).matrix
    assert np.array_equal(a, b)


def test_iid_rayleigh_shape_and_tag():
    h = sample_iid_rayleigh(3, 2, seed=0)
    assert h.shape == (3, 2) and h.model == "iid-rayleigh"


def test_iid_rayleigh_moments():
    H = sample_iid_rayleigh(2, 2 * 100_000, seed=3).matrix
    var = np.mean(np.abs(H) ** 2)
    assert 0.99 <= var <= 1.01
    # zero mean within 3 sigma of the sample mean (sigma = 1/sqrt(n))
    assert abs(H.mean()) <= 3 / np.sqrt(H.size)


def test_seed_is_required():
    with pytest.raises(ValueError):
        sample_iid_rayleigh(1, 1, seed=None)


def test_rejects_empty_dimensions():
    with pytest.raises(ValueError):
        sample_iid_rayleigh(0, 2, seed=0)


@pytest.mark.parametrize("dist,expected", [(0.0, 1.0), (0.5, 0.0), (0.25, 2 / np.pi)])
def test_spatial_correlation_values(dist, expected):
    assert spatial_correlation([0, 0, 0], [dist, 0, 0], 1.0) == pytest.approx(expected, abs=1e-15)


def test_single_position_field_is_unit_variance():
    h = sample_correlated_field([[0, 0, 0]], 1.0, seed=1, draws=100_000)
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=0.02)


def test_half_wavelength_positions_uncorrelated():
    h = sample_correlated_field([[0, 0, 0], [0.5, 0, 0]], 1.0, seed=2, draws=100_000)
    assert abs(np.mean(h[:, 0] * np.conj(h[:, 1]))) <= 0.02


def test_duplicate_positions_are_identical():
    h = sample_correlated_field([[0, 0, 0], [0, 0, 0], [0.3, 0, 0]], 1.0, seed=4, draws=100)
    assert np.allclose(h[:, 0], h[:, 1], rtol=0, atol=1e-12)


def test_covariance_fidelity():
    pos = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.37, 0, 0], [0.8, 0.2, 0]])
    h = sample_correlated_field(pos, 1.0, seed=5, draws=100_000)
    emp = h.T @ h.conj() / len(h)
    assert np.max(np.abs(emp - correlation_matrix(pos, 1.0))) <= 0.02


def test_coloring_clamps_negative_eigenvalues():
    pos = np.linspace(0, 0.05, 30)[:, None] * np.array([1.0, 0, 0])
    R = correlation_matrix(pos, 1.0)
    C = coloring_matrix(R)
    assert np.all(np.isfinite(C))
    assert np.max(np.abs(C @ C.conj().T - R)) <= 1e-10


def test_single_scatterer_two_segment_path():
    g = 0.7 - 0.2j
    s = ScattererSet([[0.3, 0.1, 2.0]], [g])
    tx, rx = np.array([[0.0, 0, 0]]), np.array([[0.2, -0.1, 5.0]])
    H = sample_scatterer_channel(tx, rx, s, 0.01).matrix
    d1 = np.linalg.norm(tx[0] - s.positions[0])
    d2 = np.linalg.norm(rx[0] - s.positions[0])
    expected = g * np.exp(2j * np.pi * (d1 + d2) / 0.01) / (d1 * d2)
    assert H[0, 0] == pytest.approx(expected, rel=1e-12)


@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_scatterer_rank_bound(K, n_tx, n_rx, seed):
    rng = np.random.default_rng(seed)
    tx = rng.uniform(-1, 1, (n_tx, 3)) * [1, 1, 0]
    rx = rng.uniform(-1, 1, (n_rx, 3)) * [1, 1, 0] + [0, 0, 10]
    H = sample_scatterer_channel(tx, rx, None, 0.1, seed=seed, box=([-2, -2, 3], [2, 2, 7]),
                                 count=K).matrix
    s = np.linalg.svd(H, compute_uv=False)
    assert np.sum(s > s[0] * 1e-9) <= K


def test_seven_by_seven_arrays_with_eight_scatterers_have_rank_at_most_eight():
    lam = 1.0
    g = np.arange(7) * 0.5
    xy = np.array([(x, y) for y in g for x in g])
    tx = np.c_[xy, np.zeros(49)]
    rx = np.c_[xy, np.full(49, 30.0)]
    H = sample_scatterer_channel(tx, rx, None, lam, seed=0,
                                 box=([-10, -10, 5], [10, 10, 25]), count=8).matrix
    assert np.linalg.matrix_rank(H) <= 8


def test_scatterer_on_element_is_degenerate():
    s = ScattererSet([[0.0, 0, 0]], [1.0])
    with pytest.raises(DegenerateGeometryError):
        sample_scatterer_channel([[0, 0, 0]], [[0, 0, 1]], s, 0.1)


def test_scatterer_set_validation():
    with pytest.raises(ValueError):
        ScattererSet(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        ScattererSet([[0, 0, 1]], [np.inf])


def test_scatterer_channel_is_deterministic():
    s1 = sample_scatterers(8, seed=11, low=[-1, -1, 1], high=[1, 1, 2])
    s2 = sample_scatterers(8, seed=11, low=[-1, -1, 1], high=[1, 1, 2])
    assert np.array_equal(s1.positions, s2.positions) and np.array_equal(s1.gains, s2.gains)


def test_boresight_steering_is_all_ones():
    geo = SimGeometry(nx=5, ny=4)
    f = steering_field((0.3, np.pi / 2), geo.atom_positions(1), geo.wavelength)
    assert np.allclose(f, 1, rtol=0, atol=1e-12)


def test_opposite_azimuths_give_conjugate_fields():
    geo = SimGeometry(nx=4, ny=4)
    P = geo.atom_positions(1)
    a = steering_field((0.4, 1.1), P, geo.wavelength)
    b = steering_field((0.4 + np.pi, 1.1), P, geo.wavelength)
    assert np.allclose(a, np.conj(b), rtol=0, atol=1e-12)


def test_steering_field_has_unit_magnitude():
    geo = SimGeometry(nx=3, ny=3)
    f = steering_field((1.0, 0.2), geo.atom_positions(1), geo.wavelength)
    assert np.allclose(np.abs(f), 1.0, rtol=0, atol=1e-15)


def test_on_grid_direction_matches_dft_column():
    nx = ny = 9
    geo = SimGeometry(nx=nx, ny=ny, atom_spacing=6.0 * SimGeometry().wavelength)
    F = dft_matrix_2d(nx, ny)
    # output bin (ku, kv) = (2, 7) corresponds to direction cosines (-2/9, 2/9) * lambda / s
    ku, kv = 2, 7
    ratio = geo.wavelength / geo.atom_spacing
    cx, cy = -2 / 9 * ratio, 2 / 9 * ratio
    az, el = np.arctan2(cy, cx), np.arccos(np.hypot(cx, cy))
    f = steering_field((az, el), geo.atom_positions(1), geo.wavelength)
    row = F[kv * nx + ku].conj()  # the matched DFT basis vector
    phase = f[0] / row[0]
    assert abs(phase) == pytest.approx(np.sqrt(nx * ny))
    assert np.allclose(f, phase * row, rtol=0, atol=1e-9)


def test_direction_vector_convention():
    assert np.allclose(direction_vector(0.0, np.pi / 2), [0, 0, 1], atol=1e-16)
    assert np.allclose(direction_vector(np.pi / 2, 0.0), [0, 1, 0], atol=1e-16)


def test_elevation_out_of_range():
    with pytest.raises(ValueError):
        steering_field((0.0, 2.0), [[0, 0, 0]], 1.0)


def test_channel_csv_round_trip(tmp_path):
    h = sample_iid_rayleigh(3, 4, seed=9)
    h.to_csv(tmp_path / "h.csv")
    assert np.array_equal(read_complex_csv(tmp_path / "h.csv"), h.matrix)
