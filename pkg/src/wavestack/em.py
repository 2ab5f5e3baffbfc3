"""Physical model of a stacked intelligent metasurface.

Layers are parallel planes normal to +z. Layer 1 sits at z = 0 and layer l at
z = (l - 1) * layer_spacing. Atoms form a square grid centred on the z axis
and are indexed row-major (``n = iy * nx + ix``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
Z_AXIS = np.array([0.0, 0.0, 1.0])


class DegenerateGeometryError(ValueError):
    """Two points that must be distinct coincide."""


@dataclass(frozen=True)
class SimGeometry:
    """Physical layout of an L-layer SIM.

    Lengths are in metres. ``atom_spacing``, ``thickness`` and ``atom_area``
    default to lambda/2, 10 lambda and ``atom_spacing**2``.
    Port arrays default to lambda/2-spaced linear arrays along x, placed one
    ``layer_spacing`` in front of layer 1 (inputs) and behind layer L (outputs).
    """

    wavelength: float = SPEED_OF_LIGHT / 28e9
    num_layers: int = 4
    nx: int = 10
    ny: int = 10
    atom_spacing: float | None = None
    thickness: float | None = None
    atom_area: float | None = None
    num_input_ports: int = 0
    num_output_ports: int = 0
    port_spacing: float | None = None
    port_standoff: float | None = None
    input_port_positions: tuple | None = field(default=None, compare=True)
    output_port_positions: tuple | None = field(default=None, compare=True)

    def __post_init__(self):
        # Resolve defaults once so every derived quantity is a plain float.
        lam = float(self.wavelength)
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.atom_spacing is None:
            set_("atom_spacing", lam / 2)
        if self.thickness is None:
            set_("thickness", 10 * lam)
        if self.atom_area is None:
            set_("atom_area", float(self.atom_spacing) ** 2)
        if self.port_spacing is None:
            set_("port_spacing", lam / 2)
        checks = {
            "wavelength": lam > 0,
            "num_layers": int(self.num_layers) >= 1,
            "nx": int(self.nx) >= 1,
            "ny": int(self.ny) >= 1,
            "atom_spacing": self.atom_spacing > 0,
            "thickness": self.thickness > 0,
            "atom_area": self.atom_area > 0,
            "num_input_ports": self.num_input_ports >= 0,
            "num_output_ports": self.num_output_ports >= 0,
            "port_spacing": self.port_spacing > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"SimGeometry.{name} is out of range: {getattr(self, name)!r}")
        if self.port_standoff is None:
            set_("port_standoff", self.layer_spacing)
        elif self.port_standoff <= 0:
            raise ValueError(f"SimGeometry.port_standoff must be > 0, got {self.port_standoff}")
        for name in ("input_port_positions", "output_port_positions"):
            pos = getattr(self, name)
            if pos is not None:
                arr = np.asarray(pos, dtype=float).reshape(-1, 3)
                set_(name, tuple(map(tuple, arr)))

    @property
    def num_atoms(self) -> int:
        return int(self.nx) * int(self.ny)

    @property
    def layer_spacing(self) -> float:
        if self.num_layers == 1:
            return float(self.thickness)
        return float(self.thickness) / (self.num_layers - 1)

    @property
    def total_thickness(self) -> float:
        return (self.num_layers - 1) * self.layer_spacing

    def layer_z(self, layer: int) -> float:
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} outside 1..{self.num_layers}")
        return (layer - 1) * self.layer_spacing

    def grid_xy(self) -> np.ndarray:
        """(N, 2) in-plane coordinates of the atom grid, row-major."""
        ix = np.arange(self.nx) - (self.nx - 1) / 2
        iy = np.arange(self.ny) - (self.ny - 1) / 2
        yy, xx = np.meshgrid(iy, ix, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1) * self.atom_spacing

    def atom_positions(self, layer: int) -> np.ndarray:
        xy = self.grid_xy()
        z = np.full((xy.shape[0], 1), self.layer_z(layer))
        return np.hstack([xy, z])

    def _linear_ports(self, count: int, z: float) -> np.ndarray:
        x = (np.arange(count) - (count - 1) / 2) * self.port_spacing
        return np.stack([x, np.zeros(count), np.full(count, z)], axis=1)

    def input_ports(self) -> np.ndarray:
        if self.input_port_positions is not None:
            return np.array(self.input_port_positions, dtype=float)
        return self._linear_ports(self.num_input_ports, -self.port_standoff)

    def output_ports(self) -> np.ndarray:
        if self.output_port_positions is not None:
            return np.array(self.output_port_positions, dtype=float)
        z = self.layer_z(self.num_layers) + self.port_standoff
        return self._linear_ports(self.num_output_ports, z)

    # -- key-value serialization -------------------------------------------------

    def to_config(self) -> dict:
        """Flat key-value view; lengths other than the wavelength are in wavelengths."""
        lam = self.wavelength
        out = {
            "wavelength_m": lam,
            "layers": int(self.num_layers),
            "grid_nx": int(self.nx),
            "grid_ny": int(self.ny),
            "atom_spacing_wl": self.atom_spacing / lam,
            "thickness_wl": self.thickness / lam,
            "atom_area_wl2": self.atom_area / lam**2,
            "tx_ports": int(self.num_input_ports),
            "rx_ports": int(self.num_output_ports),
            "port_spacing_wl": self.port_spacing / lam,
            "port_standoff_wl": self.port_standoff / lam,
        }
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "SimGeometry":
        known = {
            "wavelength_m", "layers", "grid_nx", "grid_ny", "atom_spacing_wl",
            "thickness_wl", "atom_area_wl2", "tx_ports", "rx_ports",
            "port_spacing_wl", "port_standoff_wl",
        }
        unknown = set(cfg) - known
        if unknown:
            raise KeyError(f"unknown geometry keys: {sorted(unknown)}")
        lam = float(cfg.get("wavelength_m", SPEED_OF_LIGHT / 28e9))

        def scaled(key, power=1):
            v = cfg.get(key)
            return None if v is None else float(v) * lam**power

        return cls(
            wavelength=lam,
            num_layers=int(cfg.get("layers", 4)),
            nx=int(cfg.get("grid_nx", 10)),
            ny=int(cfg.get("grid_ny", 10)),
            atom_spacing=scaled("atom_spacing_wl"),
            thickness=scaled("thickness_wl"),
            atom_area=scaled("atom_area_wl2", 2),
            num_input_ports=int(cfg.get("tx_ports", 0)),
            num_output_ports=int(cfg.get("rx_ports", 0)),
            port_spacing=scaled("port_spacing_wl"),
            port_standoff=scaled("port_standoff_wl"),
        )


def rs_coefficients(src, dst, wavelength, area, normal=Z_AXIS) -> np.ndarray:
    """Rayleigh-Sommerfeld coupling from every ``src`` point to every ``dst`` point.

    Returns a ``(len(dst), len(src))`` matrix. Points behind the source plane
    (negative obliquity) couple with exactly zero.
    """
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    normal = np.asarray(normal, dtype=float)
    disp = dst[:, None, :] - src[None, :, :]
    r = np.linalg.norm(disp, axis=-1)
    if np.any(r == 0):
        raise DegenerateGeometryError("coincident source and destination points")
    cos_chi = np.clip(disp @ normal / r, 0.0, 1.0)
    w = (area * cos_chi / r) * (1 / (2 * np.pi * r) - 1j / wavelength)
    return w * np.exp(2j * np.pi * r / wavelength)


def propagation_coefficient(geometry: SimGeometry, from_point, to_point,
                            source_plane_normal=Z_AXIS) -> complex:
    normal = np.asarray(source_plane_normal, dtype=float)
    if not np.isclose(np.linalg.norm(normal), 1.0, rtol=0, atol=1e-12):
        raise ValueError("source_plane_normal must have unit norm")
    w = rs_coefficients(from_point, to_point, geometry.wavelength, geometry.atom_area, normal)
    return complex(w[0, 0])


def build_propagation_matrix(geometry: SimGeometry, layer: int) -> np.ndarray:
    """Propagation matrix feeding ``layer``.

    ``layer`` 2..L gives W^l between consecutive layers. ``layer == 1`` is the
    input-port to layer-1 coupling (N x ports) and ``layer == L + 1`` the
    layer-L to output-port coupling (ports x N).
    """
    L = geometry.num_layers
    if not 1 <= layer <= L + 1:
        raise IndexError(f"layer index {layer} outside 1..{L + 1}")
    if layer == 1:
        src, dst = geometry.input_ports(), geometry.atom_positions(1)
        if len(src) == 0:
            raise ValueError("geometry has no input ports")
    elif layer == L + 1:
        src, dst = geometry.atom_positions(L), geometry.output_ports()
        if len(dst) == 0:
            raise ValueError("geometry has no output ports")
    else:
        src, dst = geometry.atom_positions(layer - 1), geometry.atom_positions(layer)
    return rs_coefficients(src, dst, geometry.wavelength, geometry.atom_area)


class PhaseConfig:
    """Per-atom phase shifts, shape (L, N), stored wrapped into [0, 2pi)."""

    def __init__(self, theta):
        theta = np.array(theta, dtype=float)
        if theta.ndim != 2:
            raise ValueError("theta must have shape (layers, atoms)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("phases must be finite")
        self.theta = wrap_phase(theta)

    @classmethod
    def zeros(cls, num_layers, num_atoms):
        return cls(np.zeros((num_layers, num_atoms)))

    @classmethod
    def random(cls, num_layers, num_atoms, rng):
        return cls(rng.uniform(0, 2 * np.pi, size=(num_layers, num_atoms)))

    @property
    def coefficients(self) -> np.ndarray:
        return np.exp(1j * self.theta)

    def update(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected phases of shape {self.theta.shape}, got {theta.shape}")
        self.theta = wrap_phase(theta)

    def copy(self):
        return PhaseConfig(self.theta.copy())


def wrap_phase(theta):
    wrapped = np.mod(theta, 2 * np.pi)
    # mod can round up to exactly 2pi for tiny negative inputs
    return np.where(wrapped >= 2 * np.pi, 0.0, wrapped)


class SimStack:
    """A SIM: geometry, trainable phases and cached propagation matrices.

    ``cached_W[l]`` holds the matrix feeding layer ``l`` (see
    :func:`build_propagation_matrix`); entries for port couplings are only
    present when the geometry defines ports.
    """

    def __init__(self, geometry: SimGeometry, phases: PhaseConfig | None = None):
        self.geometry = geometry
        L, N = geometry.num_layers, geometry.num_atoms
        self.phases = phases if phases is not None else PhaseConfig.zeros(L, N)
        if self.phases.theta.shape != (L, N):
            raise ValueError(f"phases shape {self.phases.theta.shape} != {(L, N)}")
        self.cached_W = {}
        self.rebuild_cache()

    def rebuild_cache(self):
        g = self.geometry
        cache = {l: build_propagation_matrix(g, l) for l in range(2, g.num_layers + 1)}
        if g.num_input_ports or g.input_port_positions:
            cache[1] = build_propagation_matrix(g, 1)
        if g.num_output_ports or g.output_port_positions:
            cache[g.num_layers + 1] = build_propagation_matrix(g, g.num_layers + 1)
        self.cached_W = cache

    @property
    def input_matrix(self) -> np.ndarray:
        if 1 not in self.cached_W:
            raise ValueError("stack geometry has no input ports")
        return self.cached_W[1]

    @property
    def output_matrix(self) -> np.ndarray:
        key = self.geometry.num_layers + 1
        if key not in self.cached_W:
            raise ValueError("stack geometry has no output ports")
        return self.cached_W[key]

    def inner_matrices(self) -> list:
        """W^2 .. W^L in propagation order."""
        return [self.cached_W[l] for l in range(2, self.geometry.num_layers + 1)]

    def with_phases(self, theta) -> "SimStack":
        clone = SimStack.__new__(SimStack)
        clone.geometry = self.geometry
        clone.phases = PhaseConfig(theta)
        clone.cached_W = self.cached_W
        return clone

    def transfer(self) -> np.ndarray:
        return sim_transfer(self)


def sim_transfer(stack: SimStack) -> np.ndarray:
    """S = Phi^L W^L ... Phi^2 W^2 Phi^1 (N x N)."""
    coeffs = stack.phases.coefficients
    S = np.diag(coeffs[0])
    for W, d in zip(stack.inner_matrices(), coeffs[1:]):
        S = d[:, None] * (W @ S)
    return S


def end_to_end_channel(stack_tx: SimStack, channel, stack_rx: SimStack | None = None) -> np.ndarray:
    """Port-to-port matrix through the transmit SIM, the channel and the receive SIM."""
    H = np.asarray(channel)
    N_tx = stack_tx.geometry.num_atoms
    if H.ndim != 2 or H.shape[1] != N_tx:
        raise ValueError(f"channel must have {N_tx} columns, got shape {H.shape}")
    G = H @ (sim_transfer(stack_tx) @ stack_tx.input_matrix)
    if stack_rx is None:
        return G
    if H.shape[0] != stack_rx.geometry.num_atoms:
        raise ValueError(
            f"channel must have {stack_rx.geometry.num_atoms} rows, got shape {H.shape}")
    return stack_rx.output_matrix @ (sim_transfer(stack_rx) @ G)

