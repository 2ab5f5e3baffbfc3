"""Experiment configuration files.

The format is flat ``key = value`` text; keys carry a dotted section prefix
(``geometry.layers = 4``). ``#`` starts a comment. Lists are comma separated.
Every key has a typed default that may depend on the experiment kind, and
keys that the selected kind does not use are rejected.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .em import SPEED_OF_LIGHT, SimGeometry
from .optim import OptimizerState

KINDS = ("mimo-diag", "papr", "doa", "semantic", "fim-diversity", "fim-capacity")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = f"line {line}: " if line is not None else ""
        prefix = f"{key}: " if key is not None else ""
        super().__init__(f"{where}{prefix}{message}")
        self.key = key
        self.line = line


# -- value types -------------------------------------------------------------------


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected a boolean (true/false)")


def _parse_float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("expected a finite number")
    return v


def _parse_int(text):
    try:
        return int(text)
    except ValueError:
        v = float(text)
        if not v.is_integer():
            raise ValueError("expected an integer") from None
        return int(v)


def _list_of(parse):
    def parse_list(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(parse(t) for t in items)
    return parse_list


def _optional(parse):
    def parse_opt(text):
        return None if text.lower() == "auto" else parse(text)
    return parse_opt


def _format(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: object
    default: object
    doc: str
    check: object = None
    check_msg: str = ""


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _all(pred):
    return lambda vs: len(vs) > 0 and all(pred(v) for v in vs)


INT, FLOAT, BOOL, STR = _parse_int, _parse_float, _parse_bool, str
INTS, FLOATS = _list_of(_parse_int), _list_of(_parse_float)

# fmt: off
SCHEMA = {
    "kind": Field(STR, None, "experiment kind", lambda v: v in KINDS, f"must be one of {KINDS}"),
    "seeds": Field(INTS, (0,), "experiment seeds", _all(_nonneg), "must be a nonempty list of seeds >= 0"),
    "output_dir": Field(STR, "results", "directory for report.json and CSV sidecars"),

    "geometry.wavelength_m": Field(FLOAT, SPEED_OF_LIGHT / 28e9, "carrier wavelength (28 GHz)", _positive, "must be > 0"),
    "geometry.layers": Field(INT, 4, "metasurface layers per SIM", _positive, "must be >= 1"),
    "geometry.grid_nx": Field(INT, 10, "atoms along x", _positive, "must be >= 1"),
    "geometry.grid_ny": Field(INT, 10, "atoms along y", _positive, "must be >= 1"),
    "geometry.atom_spacing_wl": Field(FLOAT, 0.5, "atom pitch in wavelengths", _positive, "must be > 0"),
    "geometry.thickness_wl": Field(FLOAT, 10.0, "first-to-last layer distance in wavelengths", _positive, "must be > 0"),
    "geometry.atom_area_wl2": Field(_optional(FLOAT), None, "atom area in wavelengths^2 (auto = pitch^2)",
                                    lambda v: v is None or v > 0, "must be > 0"),
    "geometry.tx_ports": Field(INT, 4, "transmit ports (streams)", _nonneg, "must be >= 0"),
    "geometry.rx_ports": Field(INT, 4, "receive ports", _nonneg, "must be >= 0"),
    "geometry.port_spacing_wl": Field(FLOAT, 0.5, "port pitch in wavelengths", _positive, "must be > 0"),
    "geometry.port_standoff_wl": Field(_optional(FLOAT), None, "port distance from the stack (auto = layer spacing)",
                                       lambda v: v is None or v > 0, "must be > 0"),

    "optimizer.rate": Field(FLOAT, 0.1, "initial step (radians for the largest phase move)", _positive, "must be > 0"),
    "optimizer.decay": Field(FLOAT, 0.5, "step multiplier on plateaus", lambda v: 0 < v <= 1, "must be in (0, 1]"),
    "optimizer.decay_interval": Field(INT, 50, "plateau length that triggers a decay", _positive, "must be >= 1"),
    "optimizer.max_iters": Field(INT, 10000, "iteration budget", _positive, "must be >= 1"),
    "optimizer.tol": Field(FLOAT, 0.0, "stop once the loss falls below this value", _nonneg, "must be >= 0"),
    "optimizer.patience": Field(INT, 500, "stop after this many iterations without improvement", _positive, "must be >= 1"),

    "channel.model": Field(STR, "iid-rayleigh", "MIMO channel between the SIMs",
                           lambda v: v in ("iid-rayleigh", "correlated"), "must be iid-rayleigh or correlated"),
    "channel.antennas": Field(INT, 64, "transmit antennas of the digital baseline", _positive, "must be >= 1"),
    "channel.realizations": Field(INT, 10, "Rayleigh precoder draws per stream count", _positive, "must be >= 1"),
    "channel.scatterers": Field(INT, 8, "scatterers in the multipath channel", _positive, "must be >= 1"),
    "channel.distance_wl": Field(FLOAT, 30.0, "tx-to-rx array distance in wavelengths", _positive, "must be > 0"),
    "channel.box_halfwidth_wl": Field(FLOAT, 10.0, "lateral half-width of the scatterer box", _positive, "must be > 0"),
    "channel.box_zmin_wl": Field(FLOAT, 5.0, "nearest scatterer plane", _positive, "must be > 0"),
    "channel.box_zmax_wl": Field(FLOAT, 25.0, "farthest scatterer plane", _positive, "must be > 0"),
    "channel.snr_db": Field(FLOAT, 10.0, "transmit power over noise times mean path gain"),

    "mimo.layer_counts": Field(INTS, (1, 2, 3, 4), "layer counts per side to sweep", _all(_positive), "entries must be >= 1"),

    "papr.stream_counts": Field(INTS, (1, 2, 4, 8, 16), "BPSK stream counts", _all(_positive), "entries must be >= 1"),
    "papr.percentile": Field(FLOAT, 99.9, "peak statistic (100 = maximum)", lambda v: 0 < v <= 100, "must be in (0, 100]"),
    "papr.max_enumerate": Field(INT, 16, "enumerate all symbol vectors up to this many streams", lambda v: 1 <= v <= 20,
                                "must be in 1..20"),
    "papr.symbols": Field(INT, 65536, "random symbol vectors beyond max_enumerate", _positive, "must be >= 1"),

    "doa.train": Field(BOOL, True, "also train a stack (otherwise only the ideal DFT)"),
    "doa.snr_db": Field(FLOAT, 30.0, "receive SNR for evaluation"),

    "semantic.images": Field(STR, "", "IDX image file (optionally .gz)"),
    "semantic.labels": Field(STR, "", "IDX label file (optionally .gz)"),
    "semantic.classes": Field(STR, "SIMNTU", "class letters", lambda v: len(v) > 0 and len(set(v)) == len(v),
                              "must be nonempty with distinct letters"),
    "semantic.label_mapping": Field(STR, "letters", "how numeric labels map to characters",
                                    lambda v: v in ("letters", "byclass"), "must be letters or byclass"),
    "semantic.transpose": Field(BOOL, True, "transpose stored images (EMNIST stores them column-major)"),
    "semantic.test_fraction": Field(FLOAT, 0.2, "held-out fraction", lambda v: 0 < v < 1, "must be in (0, 1)"),
    "semantic.per_class": Field(INT, 0, "cap on images per class (0 = all)", _nonneg, "must be >= 0"),
    "semantic.epochs": Field(INT, 30, "training epochs", _positive, "must be >= 1"),
    "semantic.batch_size": Field(INT, 64, "mini-batch size", _positive, "must be >= 1"),
    "semantic.temperature": Field(FLOAT, 1.0, "softmax temperature on normalized energies", _positive, "must be > 0"),
    "semantic.tx_power_dbm": Field(FLOAT, 40.0, "transmit power"),
    "semantic.noise_dbm": Field(FLOAT, -104.0, "receiver noise power"),
    "semantic.rx_nx": Field(INT, 3, "receive antennas along x", _positive, "must be >= 1"),
    "semantic.rx_ny": Field(INT, 2, "receive antennas along y", _positive, "must be >= 1"),
    "semantic.rx_spacing_wl": Field(FLOAT, 2.0, "receive antenna pitch", _positive, "must be > 0"),
    "semantic.rx_distance_wl": Field(FLOAT, 10.0, "receive array distance behind the last layer", _positive, "must be > 0"),

    "fim.ranges_wl": Field(FLOATS, (0.0, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2), "morphing ranges in wavelengths",
                           _all(_nonneg), "entries must be >= 0"),
    "fim.trials": Field(INT, 10000, "Monte-Carlo field realizations", _positive, "must be >= 1"),
    "fim.step_wl": Field(FLOAT, 0.01, "displacement grid step", _positive, "must be > 0"),
    "fim.nx": Field(INT, 7, "elements along x", _positive, "must be >= 1"),
    "fim.ny": Field(INT, 7, "elements along y", _positive, "must be >= 1"),
    "fim.spacing_wl": Field(FLOAT, 0.5, "element pitch", _positive, "must be > 0"),
    "fim.power": Field(FLOAT, 1.0, "total transmit power", _positive, "must be > 0"),
    "fim.tol": Field(FLOAT, 1e-9, "stop when a sweep gains less capacity (bits)", _nonneg, "must be >= 0"),
    "fim.max_sweeps": Field(INT, 100, "BCD sweep cap", _positive, "must be >= 1"),
}
# fmt: on

_COMMON = ("kind", "seeds", "output_dir")
_OPTIM = tuple(k for k in SCHEMA if k.startswith("optimizer."))
_GEOM = tuple(k for k in SCHEMA if k.startswith("geometry."))

KIND_KEYS = {
    "mimo-diag": _COMMON + _GEOM + _OPTIM + ("channel.model", "mimo.layer_counts"),
    "papr": _COMMON + ("channel.antennas", "channel.realizations", "papr.stream_counts",
                       "papr.percentile", "papr.max_enumerate", "papr.symbols"),
    "doa": _COMMON + tuple(k for k in _GEOM if "port" not in k) + _OPTIM + ("doa.train", "doa.snr_db"),
    "semantic": _COMMON + tuple(k for k in _GEOM if "port" not in k)
    + ("optimizer.rate", "optimizer.decay", "optimizer.decay_interval")
    + tuple(k for k in SCHEMA if k.startswith("semantic.")),
    "fim-diversity": _COMMON + ("fim.ranges_wl", "fim.trials", "fim.step_wl"),
    "fim-capacity": _COMMON + tuple(k for k in SCHEMA if k.startswith("channel.")
                                    and k not in ("channel.model", "channel.antennas", "channel.realizations"))
    + ("fim.ranges_wl", "fim.step_wl", "fim.nx", "fim.ny", "fim.spacing_wl", "fim.power",
       "fim.tol", "fim.max_sweeps"),
}

KIND_DEFAULTS = {
    "mimo-diag": {"optimizer.max_iters": 1000},
    "doa": {"geometry.layers": 3, "geometry.grid_nx": 9, "geometry.grid_ny": 9,
            "geometry.atom_spacing_wl": 6.0, "geometry.thickness_wl": 648.0,
            "optimizer.max_iters": 300},
    "semantic": {"geometry.grid_nx": 21, "geometry.grid_ny": 21,
                 "optimizer.rate": 0.05, "optimizer.decay": 0.7, "optimizer.decay_interval": 5},
    "fim-capacity": {"fim.ranges_wl": (0.1, 0.5)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; ``values`` holds every key the kind uses."""

    values: tuple

    @property
    def kind(self) -> str:
        return self["kind"]

    @property
    def seeds(self) -> tuple:
        return self["seeds"]

    def __getitem__(self, key):
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def as_dict(self) -> dict:
        return dict(self.values)

    def section(self, name) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values if k.startswith(prefix)}

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        merged = self.as_dict()
        merged.update(overrides)
        return build_config(merged)

    def to_text(self) -> str:
        lines = [f"# effective configuration for {self.kind}"]
        for key, value in self.values:
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """sha256 of the effective config, independent of the output directory."""
        blob = "\n".join(f"{k} = {_format(v)}" for k, v in self.values if k != "output_dir")
        return hashlib.sha256(blob.encode()).hexdigest()

    def geometry(self) -> SimGeometry:
        g = self.section("geometry")
        return SimGeometry.from_config({k: v for k, v in g.items() if v is not None})

    def optimizer(self) -> OptimizerState:
        o = self.section("optimizer")
        return OptimizerState(**o)


def parse_text(text: str) -> ExperimentConfig:
    raw, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in raw:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        raw[key], lines[key] = value, lineno
    return build_config(raw, lines)


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def build_config(raw: dict, lines: dict | None = None) -> ExperimentConfig:
    """Validate a key -> value mapping (strings are parsed, other values checked)."""
    lines = lines or {}
    if "kind" not in raw:
        raise ConfigError("missing required key", "kind")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}", "kind",
                          lines.get("kind"))
    allowed = KIND_KEYS[kind]
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, lines.get(key))
        if key not in allowed:
            raise ConfigError(f"not used by kind {kind!r}", key, lines.get(key))
    values = []
    for key in allowed:
        spec = SCHEMA[key]
        if key in raw:
            value = raw[key]
            if isinstance(value, str) and spec.parse is not STR:
                try:
                    value = spec.parse(value)
                except ValueError as exc:
                    raise ConfigError(f"cannot parse {value!r}: {exc}", key, lines.get(key)) from None
            elif isinstance(value, list):
                value = tuple(value)
        else:
            value = KIND_DEFAULTS.get(kind, {}).get(key, spec.default)
        if spec.check is not None and not spec.check(value):
            raise ConfigError(f"{spec.check_msg}, got {_format(value)}", key, lines.get(key))
        values.append((key, value))
    cfg = ExperimentConfig(tuple(values))
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig):
    if cfg.kind == "fim-capacity" and cfg["channel.box_zmin_wl"] >= cfg["channel.box_zmax_wl"]:
        raise ConfigError("must be below channel.box_zmax_wl", "channel.box_zmin_wl")
    if cfg.kind == "fim-capacity" and cfg["channel.box_zmax_wl"] >= cfg["channel.distance_wl"]:
        raise ConfigError("scatterers must lie between the arrays", "channel.box_zmax_wl")
    if cfg.kind == "mimo-diag" and cfg["geometry.tx_ports"] != cfg["geometry.rx_ports"]:
        raise ConfigError("diagonalization needs tx_ports == rx_ports", "geometry.rx_ports")
    if cfg.kind == "mimo-diag" and cfg["geometry.tx_ports"] < 1:
        raise ConfigError("at least one stream is required", "geometry.tx_ports")
    if cfg.kind == "semantic":
        if len(cfg["semantic.classes"]) > cfg["semantic.rx_nx"] * cfg["semantic.rx_ny"]:
            raise ConfigError("more classes than receive antennas", "semantic.classes")
        if cfg["geometry.layers"] < 2:
            raise ConfigError("semantic encoding needs at least 2 layers", "geometry.layers")


def describe(kind: str) -> str:
    """Documented defaults for ``kind`` as config text."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}", "kind")
    out = []
    for key in KIND_KEYS[kind]:
        spec = SCHEMA[key]
        default = kind if key == "kind" else KIND_DEFAULTS.get(kind, {}).get(key, spec.default)
        out.append(f"# {spec.doc}\n{key} = {_format(default)}")
    return "\n".join(out) + "\n"
