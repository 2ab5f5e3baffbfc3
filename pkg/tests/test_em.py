import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavestack.em import (DegenerateGeometryError, PhaseConfig, SimGeometry, SimStack,
                          build_propagation_matrix, end_to_end_channel, propagation_coefficient,
                          rs_coefficients, sim_transfer, wrap_phase)

from oracles import naive_transfer

LAM = SimGeometry().wavelength


def test_on_axis_coefficient_matches_hand_value():
    geo = SimGeometry(atom_spacing=LAM / 2)
    w = propagation_coefficient(geo, [0, 0, 0], [0, 0, LAM])
    assert w == pytest.approx(1 / (8 * np.pi) - 0.25j, rel=1e-12)


def test_in_plane_point_couples_with_zero():
    geo = SimGeometry()
    assert propagation_coefficient(geo, [0, 0, 0], [LAM, 0, 0]) == 0


def test_point_behind_source_plane_is_exactly_zero():
    w = rs_coefficients([[0, 0, 0]], [[0.1 * LAM, 0, -LAM]], LAM, 1.0)
    assert w[0, 0] == 0


def test_coefficient_decays_with_distance():
    geo = SimGeometry()
    d = np.array([0.3, 0.1, 1.0]) / np.linalg.norm([0.3, 0.1, 1.0])
    near = propagation_coefficient(geo, [0, 0, 0], d * LAM)
    far = propagation_coefficient(geo, [0, 0, 0], 2 * d * LAM)
    assert abs(far) < abs(near)


def test_coincident_points_raise():
    with pytest.raises(DegenerateGeometryError):
        propagation_coefficient(SimGeometry(), [0, 0, 0], [0, 0, 0])


def test_non_unit_normal_rejected():
    with pytest.raises(ValueError):
        propagation_coefficient(SimGeometry(), [0, 0, 0], [0, 0, 1], [0, 0, 2])


def test_reciprocity_with_normals_along_displacement():
    p, q = np.array([0.1, 0.2, 0.0]), np.array([0.4, -0.1, 0.5])
    d = (q - p) / np.linalg.norm(q - p)
    fwd = rs_coefficients([p], [q], LAM, 1e-6, d)
    back = rs_coefficients([q], [p], LAM, 1e-6, -d)
    assert fwd[0, 0] == back[0, 0]


def test_single_atom_two_layers_matches_coefficient():
    geo = SimGeometry(num_layers=2, nx=1, ny=1, thickness=LAM)
    W = build_propagation_matrix(geo, 2)
    assert W.shape == (1, 1)
    assert W[0, 0] == pytest.approx(1 / (8 * np.pi) - 0.25j, rel=1e-12)


def test_two_by_two_grid_groups_by_distance():
    geo = SimGeometry(num_layers=2, nx=2, ny=2, thickness=LAM)
    W = build_propagation_matrix(geo, 2)
    assert np.allclose(np.diag(W), W[0, 0], rtol=1e-14, atol=0)
    # neighbours at lambda/2 (indices differing along one axis) and diagonals at lambda/sqrt(2)
    side = [W[0, 1], W[1, 0], W[0, 2], W[2, 0], W[1, 3], W[3, 1], W[2, 3], W[3, 2]]
    diag = [W[0, 3], W[3, 0], W[1, 2], W[2, 1]]
    assert np.allclose(side, side[0], rtol=1e-14, atol=0)
    assert np.allclose(diag, diag[0], rtol=1e-14, atol=0)


def test_mirror_symmetry_of_propagation_matrix():
    geo = SimGeometry(num_layers=2, nx=4, ny=3)
    W = build_propagation_matrix(geo, 2)
    idx = np.arange(geo.num_atoms).reshape(geo.ny, geo.nx)
    sigma = idx[:, ::-1].ravel()  # mirror x -> -x
    assert np.allclose(W, W[np.ix_(sigma, sigma)], rtol=1e-13, atol=0)


def test_layer_index_out_of_range(small_geometry):
    for bad in (0, small_geometry.num_layers + 2):
        with pytest.raises(IndexError):
            build_propagation_matrix(small_geometry, bad)


def test_port_matrix_shapes(small_geometry):
    stack = SimStack(small_geometry)
    assert stack.input_matrix.shape == (9, 2)
    assert stack.output_matrix.shape == (2, 9)
    assert len(stack.inner_matrices()) == 2


def test_single_layer_transfer_is_phase_diagonal(rng):
    geo = SimGeometry(num_layers=1, nx=2, ny=2)
    stack = SimStack(geo, PhaseConfig.random(1, 4, rng))
    S = sim_transfer(stack)
    assert np.array_equal(S, np.diag(np.exp(1j * stack.phases.theta[0])))


def test_zero_phases_give_plain_product(small_geometry):
    stack = SimStack(small_geometry)
    W = stack.cached_W
    assert np.allclose(sim_transfer(stack), W[3] @ W[2], rtol=1e-14, atol=0)


def test_transfer_matches_triple_loop_oracle(rng):
    geo = SimGeometry(num_layers=3, nx=3, ny=3)
    stack = SimStack(geo, PhaseConfig.random(3, 9, rng))
    S = sim_transfer(stack)
    ref = naive_transfer(stack)
    assert np.linalg.norm(S - ref) / np.linalg.norm(ref) <= 1e-12


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_transfer_oracle_property(L, nx, ny, seed):
    rng = np.random.default_rng(seed)
    geo = SimGeometry(num_layers=L, nx=nx, ny=ny)
    stack = SimStack(geo, PhaseConfig.random(L, nx * ny, rng))
    ref = naive_transfer(stack)
    assert np.linalg.norm(sim_transfer(stack) - ref) <= 1e-12 * np.linalg.norm(ref)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_phases_wrap_into_canonical_range(values):
    w = wrap_phase(np.array(values))
    assert np.all(w >= 0) and np.all(w < 2 * np.pi)


def test_wrap_of_tiny_negative_is_zero_not_two_pi():
    assert wrap_phase(np.array([-1e-18]))[0] == 0.0


def test_unit_modulus_after_updates(rng):
    ph = PhaseConfig.random(2, 5, rng)
    for _ in range(50):
        ph.update(ph.theta + rng.normal(scale=10, size=ph.theta.shape))
    assert np.max(np.abs(np.abs(ph.coefficients) - 1)) <= 1e-15


def test_non_finite_phases_rejected():
    with pytest.raises(ValueError):
        PhaseConfig(np.array([[np.nan]]))


def test_transfer_invariant_to_two_pi_shift(rng, small_geometry):
    stack = SimStack(small_geometry, PhaseConfig.random(3, 9, rng))
    shifted = stack.with_phases(stack.phases.theta + 2 * np.pi)
    S = sim_transfer(stack)
    # theta + 2pi is itself rounded, so equality holds to the last few ulps
    assert np.linalg.norm(sim_transfer(shifted) - S) <= 1e-14 * np.linalg.norm(S)
    exact = stack.with_phases(np.full_like(stack.phases.theta, 0.5) + 2 * np.pi)
    assert np.array_equal(sim_transfer(exact),
                          sim_transfer(stack.with_phases(np.full_like(stack.phases.theta, 0.5))))


def test_cache_rebuild_is_bit_exact(small_geometry):
    stack = SimStack(small_geometry)
    before = {k: v.copy() for k, v in stack.cached_W.items()}
    stack.rebuild_cache()
    assert before.keys() == stack.cached_W.keys()
    for k in before:
        assert np.array_equal(before[k], stack.cached_W[k])


def test_end_to_end_with_identity_channel(small_geometry):
    tx, rx = SimStack(small_geometry), SimStack(small_geometry)
    H = np.eye(9)
    G = end_to_end_channel(tx, H, rx)
    ref = (rx.output_matrix @ rx.cached_W[3] @ rx.cached_W[2] @ H
           @ tx.cached_W[3] @ tx.cached_W[2] @ tx.input_matrix)
    assert np.allclose(G, ref, rtol=1e-13, atol=0)


def test_end_to_end_single_layer_is_product_of_port_matrices():
    geo = SimGeometry(num_layers=1, nx=2, ny=2, num_input_ports=1, num_output_ports=1)
    tx, rx = SimStack(geo), SimStack(geo)
    G = end_to_end_channel(tx, np.eye(4), rx)
    assert np.allclose(G, rx.output_matrix @ tx.input_matrix, rtol=1e-14, atol=0)


def test_four_port_hundred_atom_end_to_end_is_4x4(rng):
    geo = SimGeometry(num_input_ports=4, num_output_ports=4)
    tx = SimStack(geo, PhaseConfig.random(4, 100, rng))
    rx = SimStack(geo, PhaseConfig.random(4, 100, rng))
    H = rng.normal(size=(100, 100)) + 1j * rng.normal(size=(100, 100))
    assert end_to_end_channel(tx, H, rx).shape == (4, 4)


def test_zero_channel_gives_zero_end_to_end(small_geometry):
    G = end_to_end_channel(SimStack(small_geometry), np.zeros((9, 9)), SimStack(small_geometry))
    assert not np.any(G)


def test_channel_dimension_mismatch(small_geometry):
    with pytest.raises(ValueError):
        end_to_end_channel(SimStack(small_geometry), np.zeros((9, 8)))


@pytest.mark.parametrize("field,value", [("wavelength", 0.0), ("num_layers", 0), ("nx", 0),
                                         ("thickness", -1.0), ("atom_spacing", 0.0)])
def test_geometry_constraints(field, value):
    with pytest.raises(ValueError, match=field):
        SimGeometry(**{field: value})


def test_geometry_defaults_and_thickness():
    geo = SimGeometry()
    assert geo.num_atoms == 100 and geo.num_layers == 4
    assert geo.atom_spacing == pytest.approx(LAM / 2)
    assert geo.total_thickness == pytest.approx(10 * LAM)
    assert geo.layer_z(4) - geo.layer_z(3) == pytest.approx(geo.layer_spacing)


def test_geometry_config_round_trip():
    geo = SimGeometry(num_layers=3, nx=5, ny=4, thickness=6 * LAM, num_input_ports=2)
    again = SimGeometry.from_config(geo.to_config())
    for key, value in geo.to_config().items():
        assert again.to_config()[key] == pytest.approx(value, rel=1e-14)


def test_geometry_config_rejects_unknown_keys():
    with pytest.raises(KeyError):
        SimGeometry.from_config({"layers": 2, "colour": "blue"})
