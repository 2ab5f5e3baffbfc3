"""Seeded channel generators.

All generators are pure functions of their arguments and seed; a seed of
``None`` is not accepted so that every realization can be reproduced.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .em import DegenerateGeometryError


@dataclass
class ChannelRealization:
    matrix: np.ndarray
    model: str
    seed: int
    geometry: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    def to_csv(self, path):
        """Write ``H`` as rows of ``re,im`` pairs (one CSV row per matrix row)."""
        write_complex_csv(path, self.matrix)


@dataclass
class ScattererSet:
    positions: np.ndarray
    gains: np.ndarray
    path_loss_exponent: float = 1.0
    reference_loss: float = 1.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.gains = np.asarray(self.gains, dtype=complex).ravel()
        if len(self.positions) < 1:
            raise ValueError("need at least one scatterer")
        if self.positions.shape[1] != 3 or len(self.gains) != len(self.positions):
            raise ValueError("scatterer positions must be (K, 3) with one gain per scatterer")
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("scatterer gains must be finite")

    def __len__(self):
        return len(self.gains)


def _rng(seed):
    if seed is None:
        raise ValueError("a seed is required for reproducible channels")
    return np.random.default_rng(seed)


def complex_gaussian(rng, size):
    """Circularly symmetric CN(0, 1) samples."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2)


def sample_iid_rayleigh(rx: int, tx: int, seed) -> ChannelRealization:
    if rx < 1 or tx < 1:
        raise ValueError("rx and tx must be >= 1")
    H = complex_gaussian(_rng(seed), (rx, tx))
    return ChannelRealization(H, "iid-rayleigh", seed, {"rx": rx, "tx": tx})


def spatial_correlation(p, q, wavelength):
    """Isotropic-scattering correlation ``sinc(2 |p - q| / lambda)``."""
    if wavelength <= 0:
        raise ValueError("wavelength must be > 0")
    d = np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(q, dtype=float), axis=-1)
    return np.sinc(2 * d / wavelength)


def correlation_matrix(positions, wavelength):
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    return spatial_correlation(P[:, None, :], P[None, :, :], wavelength)


def coloring_matrix(R):
    """``C`` with ``C C^H = R`` from an eigendecomposition, negative eigenvalues clamped."""
    vals, vecs = np.linalg.eigh(R)
    # eigenvalues within rounding of zero are treated as exactly zero
    floor = len(vals) * np.finfo(float).eps * max(vals.max(), 1.0)
    vals = np.where(vals > floor, vals, 0.0)
    return vecs * np.sqrt(vals)


def sample_correlated_field(positions, wavelength, seed, draws=None):
    """Zero-mean complex Gaussian field with sinc spatial correlation.

    Returns shape ``(len(positions),)`` or ``(draws, len(positions))``.
    """
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    if len(P) < 1:
        raise ValueError("need at least one position")
    C = coloring_matrix(correlation_matrix(P, wavelength))
    rng = _rng(seed)
    n = 1 if draws is None else int(draws)
    z = complex_gaussian(rng, (n, len(P)))
    h = z @ C.T
    return h[0] if draws is None else h


def sample_scatterers(count, seed, low, high, gain_std=1.0) -> ScattererSet:
    """Scatterers uniform in the box ``[low, high]`` with CN(0, gain_std^2) gains."""
    if count < 1:
        raise ValueError("need at least one scatterer")
    rng = _rng(seed)
    pos = rng.uniform(np.asarray(low, float), np.asarray(high, float), size=(count, 3))
    gains = gain_std * complex_gaussian(rng, count)
    return ScattererSet(pos, gains)


def spherical_response(elements, scatterers: ScattererSet, wavelength):
    """``(len(elements), K)`` spherical-wave responses ``exp(j 2 pi d / lambda) / d^ple``."""
    E = np.atleast_2d(np.asarray(elements, dtype=float))
    d = np.linalg.norm(E[:, None, :] - scatterers.positions[None, :, :], axis=-1)
    if np.any(d == 0):
        raise DegenerateGeometryError("a scatterer coincides with an array element")
    amp = np.sqrt(scatterers.reference_loss) / d**scatterers.path_loss_exponent
    return amp * np.exp(2j * np.pi * d / wavelength)


def scatterer_matrix(tx_positions, rx_positions, scatterers: ScattererSet, wavelength):
    A_rx = spherical_response(rx_positions, scatterers, wavelength)
    A_tx = spherical_response(tx_positions, scatterers, wavelength)
    return (A_rx * scatterers.gains) @ A_tx.T


def sample_scatterer_channel(tx_positions, rx_positions, scatterers, wavelength, seed=None,
                             box=None, count=8) -> ChannelRealization:
    """Multipath channel ``H = sum_k g_k a_rx(k) a_tx(k)^T``.

    When ``scatterers`` is None, ``count`` scatterers are drawn from ``seed``
    inside ``box = (low, high)``.
    """
    tx = np.atleast_2d(np.asarray(tx_positions, dtype=float))
    rx = np.atleast_2d(np.asarray(rx_positions, dtype=float))
    if len(tx) == 0 or len(rx) == 0:
        raise ValueError("position lists must be nonempty")
    if scatterers is None:
        if box is None:
            raise ValueError("either scatterers or a placement box is required")
        scatterers = sample_scatterers(count, seed, *box)
    H = scatterer_matrix(tx, rx, scatterers, wavelength)
    geometry = {"scatterers": scatterers.positions.tolist(), "num_tx": len(tx), "num_rx": len(rx)}
    return ChannelRealization(H, "scatterer-multipath", seed, geometry)


def direction_vector(azimuth, elevation):
    """Unit propagation direction; elevation is measured from the array plane (boresight = pi/2)."""
    ce = np.cos(elevation)
    return np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def steering_field(direction, positions, wavelength):
    """Plane-wave phase profile ``exp(-j 2 pi <k, p> / lambda)`` over ``positions``."""
    az, el = direction
    if not -np.pi / 2 <= el <= np.pi / 2:
        raise ValueError("elevation must lie in [-pi/2, pi/2]")
    k = direction_vector(az, el)
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    phase = (P @ k) / wavelength
    return np.exp(-2j * np.pi * phase)


def write_complex_csv(path, M):
    M = np.atleast_2d(np.asarray(M))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([v for z in row for v in (repr(float(z.real)), repr(float(z.imag)))])


def read_complex_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            vals = np.array([float(v) for v in row])
            rows.append(vals[0::2] + 1j * vals[1::2])
    return np.array(rows)
