"""Surface-shape optimization for flexible intelligent metasurfaces (FIM).

Each element of a FIM may move along the surface normal by at most the
morphing range R. Displacements and R are expressed in wavelengths and
candidate displacements live on a grid of ``step`` wavelengths.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .channels import (ScattererSet, complex_gaussian, correlation_matrix, scatterer_matrix,
                       spherical_response)

DEFAULT_STEP = 0.01


@dataclass
class FimArray:
    """Planar element grid with per-element normal displacements (in wavelengths)."""

    base_positions: np.ndarray
    wavelength: float
    morphing_range: float = 0.0
    displacement: np.ndarray | None = None
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.base_positions = np.atleast_2d(np.asarray(self.base_positions, dtype=float))
        self.normal = np.asarray(self.normal, dtype=float)
        if self.morphing_range < 0:
            raise ValueError(f"morphing range must be >= 0, got {self.morphing_range}")
        if self.displacement is None:
            self.displacement = np.zeros(len(self.base_positions))
        self.displacement = np.asarray(self.displacement, dtype=float).copy()
        if self.displacement.shape != (len(self.base_positions),):
            raise ValueError("one displacement per element is required")
        if np.any(np.abs(self.displacement) > self.morphing_range):
            raise ValueError("displacement exceeds the morphing range")

    @classmethod
    def square(cls, nx, ny, wavelength, morphing_range=0.0, center=(0.0, 0.0, 0.0),
               spacing_wl=0.5, normal=(0.0, 0.0, 1.0)):
        ix = (np.arange(nx) - (nx - 1) / 2) * spacing_wl * wavelength
        iy = (np.arange(ny) - (ny - 1) / 2) * spacing_wl * wavelength
        yy, xx = np.meshgrid(iy, ix, indexing="ij")
        pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(nx * ny)], axis=1) + np.asarray(center)
        return cls(pos, wavelength, morphing_range, normal=np.asarray(normal, dtype=float))

    def __len__(self):
        return len(self.base_positions)

    @property
    def positions(self) -> np.ndarray:
        return self.positions_with(self.displacement)

    def positions_with(self, displacement) -> np.ndarray:
        d = np.asarray(displacement, dtype=float)
        base = self.base_positions.reshape(self.base_positions.shape[:1] + (1,) * (d.ndim - 1) + (3,))
        return base + (d * self.wavelength)[..., None] * self.normal

    def is_rigid(self) -> bool:
        return not np.any(self.displacement)

    def copy(self, morphing_range=None):
        return FimArray(self.base_positions.copy(), self.wavelength,
                        self.morphing_range if morphing_range is None else morphing_range,
                        self.displacement.copy(), self.normal.copy())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_m", "y_m", "z_m", "displacement_wl"])
            for p, d in zip(self.base_positions, self.displacement):
                w.writerow([repr(float(v)) for v in (*p, d)])


def displacement_grid(morphing_range, step=DEFAULT_STEP) -> np.ndarray:
    """Candidate displacements ordered 0, +s, -s, +2s, -2s, ... (all within [-R, R])."""
    if morphing_range < 0:
        raise ValueError("morphing range must be >= 0")
    k_max = int(np.floor(morphing_range / step + 1e-9))
    k = np.arange(1, k_max + 1)
    order = np.concatenate([[0], np.column_stack([k, -k]).ravel()])
    return np.clip(order * step, -morphing_range, morphing_range)


def morph_single_user(field_sampler, fim: FimArray, morphing_range=None,
                      step=DEFAULT_STEP) -> FimArray:
    """Move every element to the grid position with the largest ``|h|^2``.

    ``field_sampler`` maps an ``(M, 3)`` array of positions to complex field
    values; it is called once with every candidate position so that a jointly
    sampled random field stays consistent. Ties go to the smallest |displacement|.
    """
    R = fim.morphing_range if morphing_range is None else morphing_range
    cands = displacement_grid(R, step)
    pos = fim.positions_with(np.broadcast_to(cands, (len(fim), len(cands))))
    h = np.asarray(field_sampler(pos.reshape(-1, 3))).reshape(len(fim), len(cands))
    best = np.argmax(np.abs(h) ** 2, axis=1)
    out = fim.copy(morphing_range=R)
    out.displacement = cands[best]
    return out


# -- diversity gain ----------------------------------------------------------------


def _truncated_coloring(R, rtol=1e-12):
    vals, vecs = np.linalg.eigh(R)
    keep = vals > rtol * vals.max()
    return vecs[:, keep] * np.sqrt(vals[keep])


def field_power_samples(max_range, wavelength, trials, seed, step=DEFAULT_STEP, chunk=4096):
    """``(trials, P)`` samples of ``|h|^2`` along the normal, with the displacement grid.

    The field is the sinc-correlated Rayleigh process on the segment
    ``[-max_range, max_range]`` (in wavelengths); displacements are sorted.
    """
    k_max = int(np.floor(max_range / step + 1e-9))
    disp = np.arange(-k_max, k_max + 1) * step
    pos = np.zeros((len(disp), 3))
    pos[:, 2] = disp * wavelength
    C = _truncated_coloring(correlation_matrix(pos, wavelength))
    rng = np.random.default_rng(seed)
    out = np.empty((trials, len(disp)))
    for a in range(0, trials, chunk):
        n = min(chunk, trials - a)
        h = complex_gaussian(rng, (n, C.shape[1])) @ C.T
        out[a:a + n] = np.abs(h) ** 2
    return out, disp


def gain_from_samples(power, disp, morphing_range):
    """``10 log10(E[max_{|d| <= R} |h|^2] / E[|h(0)|^2])`` from sampled powers."""
    inside = np.abs(disp) <= morphing_range + 1e-12
    zero = np.argmin(np.abs(disp))
    best = power[:, inside].max(axis=1)
    return 10 * np.log10(best.mean() / power[:, zero].mean())


def diversity_gain_curve(ranges, wavelength=1.0, trials=10_000, seed=0, step=DEFAULT_STEP):
    """Diversity gain (dB) for each morphing range, on common random numbers."""
    ranges = np.atleast_1d(np.asarray(ranges, dtype=float))
    if np.any(ranges < 0):
        raise ValueError("morphing ranges must be >= 0")
    if trials < 1:
        raise ValueError("need at least one trial")
    power, disp = field_power_samples(ranges.max(), wavelength, trials, seed, step)
    return np.array([gain_from_samples(power, disp, R) for R in ranges])


def diversity_gain(morphing_range, wavelength=1.0, trials=10_000, seed=0, step=DEFAULT_STEP):
    return float(diversity_gain_curve([morphing_range], wavelength, trials, seed, step)[0])


# -- capacity ------------------------------------------------------------------------


def water_filling(eigenvalues, noise_power, total_power):
    """Capacity-optimal power over parallel channels with gains ``eigenvalues``.

    Returns ``(allocation, capacity_bits)`` with allocation in input order.
    """
    g = np.asarray(eigenvalues, dtype=float)
    if total_power <= 0:
        raise ValueError("total power must be > 0")
    if np.any(g < 0):
        raise ValueError("eigenvalues must be >= 0")
    if not np.any(g > 0):
        raise ValueError("all eigenvalues are zero")
    order = np.argsort(-g)
    gs = g[order]
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(gs > 0, noise_power / np.where(gs > 0, gs, 1.0), np.inf)
    # gains so small that noise/g overflows are unusable
    pos = np.isfinite(inv)
    if not pos[0]:
        raise ValueError("all eigenvalues are zero (or too small to carry power)")
    k = np.arange(1, len(gs) + 1)
    mu = (total_power + np.cumsum(np.where(pos, inv, 0.0))) / k
    active = int(np.max(np.nonzero(pos & (mu > inv))[0])) + 1
    level = mu[active - 1]
    p_sorted = np.zeros_like(gs)
    p_sorted[:active] = level - inv[:active]
    alloc = np.empty_like(p_sorted)
    alloc[order] = p_sorted
    cap = float(np.sum(np.log2(1 + alloc * g / noise_power)))
    return alloc, cap


def water_filling_capacity_batch(eigenvalues, noise_power, total_power):
    """Water-filled capacity for each row of ``eigenvalues`` (shape ``(B, n)``)."""
    g = -np.sort(-np.asarray(eigenvalues, dtype=float), axis=1)
    g = np.maximum(g, 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(g > 0, noise_power / np.where(g > 0, g, 1.0), np.inf)
    k = np.arange(1, g.shape[1] + 1)
    mu = (total_power + np.cumsum(np.where(np.isfinite(inv), inv, 0.0), axis=1)) / k
    valid = mu > inv
    active = valid.shape[1] - np.argmax(valid[:, ::-1], axis=1)
    level = np.take_along_axis(mu, (active - 1)[:, None], axis=1)
    on = (k[None, :] <= active[:, None]) & valid.any(axis=1)[:, None]
    p = np.where(on, level - np.where(np.isfinite(inv), inv, 0), 0.0)
    return np.sum(np.log2(1 + p * g / noise_power), axis=1)


@dataclass
class EigenchannelSpectrum:
    singular_values: np.ndarray
    capacity: float
    allocation: np.ndarray

    @property
    def gains_db(self):
        with np.errstate(divide="ignore"):
            return 20 * np.log10(self.singular_values)

    @classmethod
    def from_channel(cls, H, noise_power, total_power):
        s = np.linalg.svd(H, compute_uv=False)
        alloc, cap = water_filling(s**2, noise_power, total_power)
        return cls(s, cap, alloc)


@dataclass
class BcdResult:
    rigid: EigenchannelSpectrum
    morphed: EigenchannelSpectrum
    tx: FimArray
    rx: FimArray
    capacity_trace: list
    sweeps: int


def _singular_values_small(A_rx, gains, A_tx):
    """Nonzero singular values of ``A_rx diag(g) A_tx^T`` via thin QR factors.

    ``A_tx`` may carry a leading batch axis.
    """
    R_rx = np.linalg.qr(A_rx, mode="r")
    R_tx = np.linalg.qr(A_tx, mode="r")
    core = (R_rx * gains) @ np.swapaxes(R_tx, -1, -2)
    return np.linalg.svd(core, compute_uv=False)


def fim_capacity_bcd(scatterers: ScattererSet, tx: FimArray, rx: FimArray, power, noise,
                     morphing_range=None, step=DEFAULT_STEP, tol=1e-9, max_sweeps=100):
    """Block coordinate descent over element displacements with water-filling.

    Each sweep visits tx elements then rx elements (row-major). An element
    moves to the candidate with the highest water-filled capacity, and only
    when that strictly improves on its current position. Sweeps stop once a
    full sweep gains less than ``tol`` bits.
    """
    lam = tx.wavelength
    R = tx.morphing_range if morphing_range is None else morphing_range
    tx = tx.copy(morphing_range=R)
    rx = rx.copy(morphing_range=R)
    rigid_H = scatterer_matrix(tx.base_positions, rx.base_positions, scatterers, lam)
    rigid = EigenchannelSpectrum.from_channel(rigid_H, noise, power)
    g = scatterers.gains
    A = {"tx": spherical_response(tx.positions, scatterers, lam),
         "rx": spherical_response(rx.positions, scatterers, lam)}
    arrays = {"tx": tx, "rx": rx}

    def capacity(A_rx, A_tx):
        s = _singular_values_small(A_rx, g, A_tx)
        return water_filling_capacity_batch(np.atleast_2d(s**2), noise, power)

    current = float(capacity(A["rx"], A["tx"])[0])
    trace = [current]
    cands = displacement_grid(R, step)
    sweeps = 0
    while len(cands) > 1 and sweeps < max_sweeps:
        start = current
        for side in ("tx", "rx"):
            fim = arrays[side]
            for i in range(len(fim)):
                pts = fim.base_positions[i] + (cands * lam)[:, None] * fim.normal
                rows = spherical_response(pts, scatterers, lam)
                stacked = np.repeat(A[side][None], len(cands), axis=0)
                stacked[:, i, :] = rows
                caps = capacity(A["rx"], stacked) if side == "tx" else capacity(stacked, A["tx"])
                best = int(np.argmax(caps))
                # margin keeps last-bit differences between batched evaluations from counting
                if caps[best] > current * (1 + 1e-12):
                    current = float(caps[best])
                    fim.displacement[i] = cands[best]
                    A[side][i] = rows[best]
        sweeps += 1
        trace.append(current)
        if current - start < tol:
            break
    morphed_H = scatterer_matrix(tx.positions, rx.positions, scatterers, lam)
    morphed = EigenchannelSpectrum.from_channel(morphed_H, noise, power)
    return BcdResult(rigid, morphed, tx, rx, trace, sweeps)

