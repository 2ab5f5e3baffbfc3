"""Seeded experiment pipelines: one function per experiment kind.

Each ``run_*`` function maps ``(config, seed)`` to a :class:`SeedResult`
carrying JSON-ready metrics, loss traces and matrices for export.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .channels import (coloring_matrix, complex_gaussian, correlation_matrix, direction_vector,
                       sample_scatterers, scatterer_matrix, steering_field)
from .config import ExperimentConfig
from .em import SimGeometry
from .emnist import ingest_emnist
from .estimators import (SimClassifier, SimDoaEstimator, SimPairPrecoder, bins_to_directions,
                         interference_to_signal, on_grid_directions)
from .fim import FimArray, diversity_gain_curve, fim_capacity_bcd
from .optim import LossTrace


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    traces: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)


def _db(x):
    with np.errstate(divide="ignore"):
        return 10 * np.log10(x)


def _optim_kwargs(cfg: ExperimentConfig):
    return dict(cfg.section("optimizer"))


# -- MIMO diagonalization ----------------------------------------------------------


@dataclass
class DiagonalizationReport:
    layer_counts: list
    terminal_loss: list
    isr: list
    end_to_end: list

    def isr_db(self):
        return [float(_db(np.mean(v))) for v in self.isr]


def mimo_channel(geometry: SimGeometry, model, seed):
    """Channel between the transmit SIM's last layer and the receive SIM's first."""
    rng = np.random.default_rng([seed, 0])
    N = geometry.num_atoms
    H = complex_gaussian(rng, (N, N))
    if model == "correlated":
        C = coloring_matrix(correlation_matrix(geometry.atom_positions(1), geometry.wavelength))
        H = C @ H @ C.T
    return H


def mimo_diag(geometries, channel, seed, **optim) -> DiagonalizationReport:
    """Train one tx/rx SIM pair per geometry (typically one per layer count)."""
    losses, isrs, ests = [], [], []
    for geo in geometries:
        L = geo.num_layers
        est = SimPairPrecoder(geo, random_state=np.random.default_rng([seed, 1, L]), **optim)
        est.fit(channel)
        losses.append(est.loss_)
        isrs.append(interference_to_signal(est.end_to_end_))
        ests.append(est)
    return DiagonalizationReport([g.num_layers for g in geometries], losses, isrs, ests)


def run_mimo_diag(cfg: ExperimentConfig, seed: int) -> SeedResult:
    # rebuilt per layer count so that "auto" port standoffs follow the layer spacing
    geos = [cfg.with_overrides(**{"geometry.layers": int(L)}).geometry()
            for L in cfg["mimo.layer_counts"]]
    H = mimo_channel(geos[0], cfg["channel.model"], seed)
    rep = mimo_diag(geos, H, seed, **_optim_kwargs(cfg))
    traces = {f"L{L}": est.loss_trace_ for L, est in zip(rep.layer_counts, rep.end_to_end)}
    matrices = {}
    for L, est in zip(rep.layer_counts, rep.end_to_end):
        G = np.abs(est.end_to_end_)
        matrices[f"abs_G_L{L}"] = G / G.max()
    metrics = {
        "layer_counts": [int(L) for L in rep.layer_counts],
        "terminal_loss": [float(v) for v in rep.terminal_loss],
        "isr_db": rep.isr_db(),
        "iterations": [len(est.loss_trace_) for est in rep.end_to_end],
    }
    return SeedResult(seed, metrics, traces, matrices)


# -- PAPR ------------------------------------------------------------------------------


def compute_papr(samples, percentile=None, per_antenna=False):
    """PAPR in dB of per-antenna sample streams (rows are antennas).

    The peak is the maximum instantaneous power, or the given percentile of it.
    The worst antenna is returned unless ``per_antenna``; antennas that never
    radiate are skipped.
    """
    x = np.atleast_2d(np.asarray(samples))
    if x.size == 0:
        raise ValueError("no samples")
    p = np.abs(x) ** 2
    mean = p.mean(axis=1)
    if not np.any(mean > 0):
        raise ValueError("all samples are zero")
    p = p[mean > 0]
    mean = mean[mean > 0]
    peak = p.max(axis=1) if percentile is None else np.percentile(p, percentile, axis=1)
    ratio = peak / mean
    if per_antenna:
        return _db(ratio)
    return float(_db(ratio.max()))


def bpsk_ensemble(streams, rng, max_enumerate=16, count=65536):
    """All BPSK symbol vectors (as columns) when feasible, else ``count`` random ones."""
    if streams <= max_enumerate:
        return np.array(list(itertools.product((1.0, -1.0), repeat=streams))).T
    return rng.choice((1.0, -1.0), size=(streams, count))


def conventional_papr(streams, antennas, realizations, rng, percentile=99.9,
                      max_enumerate=16, count=65536):
    """Mean worst-antenna PAPR of maximum-ratio precoded BPSK over Rayleigh draws."""
    out = []
    for _ in range(realizations):
        H = complex_gaussian(rng, (streams, antennas))
        V = H.conj().T
        V = V / np.linalg.norm(V, axis=0, keepdims=True)
        B = bpsk_ensemble(streams, rng, max_enumerate, count)
        out.append(compute_papr(V @ B, percentile))
    return float(np.mean(out))


def run_papr_sweep(cfg: ExperimentConfig, seed: int) -> SeedResult:
    counts = [int(s) for s in cfg["papr.stream_counts"]]
    rng = np.random.default_rng([seed, 2])
    conv, sim = [], []
    for S in counts:
        conv.append(conventional_papr(S, cfg["channel.antennas"], cfg["channel.realizations"], rng,
                                      cfg["papr.percentile"], cfg["papr.max_enumerate"],
                                      cfg["papr.symbols"]))
        # one constant-envelope stream per SIM port
        B = bpsk_ensemble(S, rng, cfg["papr.max_enumerate"], cfg["papr.symbols"])
        sim.append(compute_papr(B, cfg["papr.percentile"]))
    metrics = {"stream_counts": counts, "conventional_papr_db": conv, "sim_papr_db": sim}
    curve = np.array([counts, conv, sim], dtype=float).T
    return SeedResult(seed, metrics, {}, {"papr_curve": curve})


# -- DOA ---------------------------------------------------------------------------------


@dataclass
class DoaEstimate:
    true_bin: tuple
    estimated_bin: tuple
    true_direction: tuple
    estimated_direction: tuple
    angular_error_deg: float
    nmse_db: float


def angular_error_deg(a, b):
    """Angle between two ``(azimuth, elevation)`` directions, in degrees."""
    u, v = direction_vector(*a), direction_vector(*b)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), u @ v)))


def doa_estimates(est: SimDoaEstimator, geometry: SimGeometry):
    bins, dirs = on_grid_directions(geometry)
    X = np.array([steering_field(d, geometry.atom_positions(1), geometry.wavelength) for d in dirs])
    got = est.predict_bins(X)
    got_dirs = bins_to_directions(got, geometry)
    nmse_db = float(_db(est.nmse_)) if est.nmse_ > 0 else float("-inf")
    return [DoaEstimate(tuple(map(int, b)), tuple(map(int, g)), tuple(d), tuple(e),
                        angular_error_deg(d, e), nmse_db)
            for b, g, d, e in zip(bins, got, dirs, got_dirs)]


def run_doa(cfg: ExperimentConfig, seed: int) -> SeedResult:
    geo = cfg.geometry()
    snr = cfg["doa.snr_db"]
    ideal = SimDoaEstimator(geo, ideal=True, snr_db=snr, random_state=seed).fit()
    results = {"ideal": doa_estimates(ideal, geo)}
    traces = {}
    if cfg["doa.train"]:
        trained = SimDoaEstimator(geo, ideal=False, snr_db=snr, random_state=seed,
                                  **_optim_kwargs(cfg)).fit()
        results["trained"] = doa_estimates(trained, geo)
        traces["fit"] = trained.loss_trace_
    metrics = {}
    matrices = {}
    for name, ests in results.items():
        exact = [e.true_bin == e.estimated_bin for e in ests]
        metrics[f"{name}_exact_fraction"] = float(np.mean(exact))
        metrics[f"{name}_mean_error_deg"] = float(np.mean([e.angular_error_deg for e in ests]))
        metrics[f"{name}_nmse_db"] = ests[0].nmse_db
        matrices[f"doa_{name}"] = np.array([[*e.true_bin, *e.estimated_bin, *e.true_direction,
                                             *e.estimated_direction, e.angular_error_deg]
                                            for e in ests])
    if not np.isfinite(metrics["ideal_nmse_db"]):
        metrics.pop("ideal_nmse_db")
    return SeedResult(seed, metrics, traces, matrices)


# -- semantic encoding ------------------------------------------------------------------


@dataclass
class ClassificationReport:
    train_accuracy: float
    test_accuracy: float
    confusion: np.ndarray
    energy_maps: np.ndarray
    loss_curve: list


def confusion_matrix(true, pred, n):
    M = np.zeros((n, n), dtype=int)
    np.add.at(M, (np.asarray(true), np.asarray(pred)), 1)
    return M


def semantic_classifier(cfg: ExperimentConfig, seed: int) -> SimClassifier:
    geo = cfg.geometry()
    return SimClassifier(
        geometry=geo, rx_shape=(cfg["semantic.rx_nx"], cfg["semantic.rx_ny"]),
        rx_spacing_wl=cfg["semantic.rx_spacing_wl"], rx_distance_wl=cfg["semantic.rx_distance_wl"],
        epochs=cfg["semantic.epochs"], batch_size=cfg["semantic.batch_size"],
        rate=cfg["optimizer.rate"], rate_decay=cfg["optimizer.decay"],
        decay_every=cfg["optimizer.decay_interval"], temperature=cfg["semantic.temperature"],
        tx_power_dbm=cfg["semantic.tx_power_dbm"], noise_dbm=cfg["semantic.noise_dbm"],
        random_state=seed)


def evaluate_classifier(clf: SimClassifier, train, test) -> ClassificationReport:
    (Xtr, ytr), (Xte, yte) = train, test
    n = len(clf.classes_)
    to_idx = {c: i for i, c in enumerate(clf.classes_)}
    pred_tr = clf.predict(Xtr)
    pred_te = clf.predict(Xte)
    conf = confusion_matrix([to_idx[c] for c in yte], [to_idx[c] for c in pred_te], n)
    E = np.abs(clf.received(Xte, noisy=False)) ** 2
    rnx, rny = clf.rx_shape
    maps = np.array([E[np.asarray(yte) == c].mean(axis=0) if np.any(np.asarray(yte) == c)
                     else np.zeros(E.shape[1]) for c in clf.classes_]).reshape(n, rny, rnx)
    return ClassificationReport(float(np.mean(pred_tr == ytr)), float(np.mean(pred_te == yte)),
                                conf, maps, clf.loss_curve_)


def run_semantic(cfg: ExperimentConfig, seed: int, dataset=None) -> SeedResult:
    if dataset is None:
        if not cfg["semantic.images"] or not cfg["semantic.labels"]:
            raise ValueError("semantic.images and semantic.labels must point to IDX files")
        dataset = ingest_emnist(cfg["semantic.images"], cfg["semantic.labels"],
                                cfg["semantic.classes"], seed, cfg["semantic.test_fraction"],
                                cfg["semantic.label_mapping"], cfg["semantic.transpose"],
                                cfg["semantic.per_class"])
    flat = lambda a: a.reshape(len(a), -1)  # noqa: E731
    clf = semantic_classifier(cfg, seed).fit(flat(dataset.train_images), dataset.train_labels)
    rep = evaluate_classifier(clf, (flat(dataset.train_images), dataset.train_labels),
                              (flat(dataset.test_images), dataset.test_labels))
    trace = LossTrace()
    for loss in rep.loss_curve:
        trace.append(loss, min(trace.loss + [loss]), float("nan"), 0.0)
    metrics = {"train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy,
               "train_size": int(len(dataset.train_labels)),
               "test_size": int(len(dataset.test_labels))}
    matrices = {"confusion": rep.confusion}
    for c, m in zip(dataset.classes, rep.energy_maps):
        matrices[f"energy_{c}"] = m
    return SeedResult(seed, metrics, {"epoch_loss": trace}, matrices)


# -- FIM ---------------------------------------------------------------------------------


def run_fim_diversity(cfg: ExperimentConfig, seed: int) -> SeedResult:
    ranges = [float(r) for r in cfg["fim.ranges_wl"]]
    gains = diversity_gain_curve(ranges, 1.0, cfg["fim.trials"], seed, cfg["fim.step_wl"])
    metrics = {"ranges_wl": ranges, "gain_db": [float(g) for g in gains]}
    return SeedResult(seed, metrics, {}, {"diversity_gain": np.array([ranges, gains]).T})


def capacity_setup(cfg: ExperimentConfig, seed: int):
    """Scatterers, rigid tx/rx arrays and the noise power implied by the SNR."""
    hw = cfg["channel.box_halfwidth_wl"]
    low = (-hw, -hw, cfg["channel.box_zmin_wl"])
    high = (hw, hw, cfg["channel.box_zmax_wl"])
    scat = sample_scatterers(cfg["channel.scatterers"], seed, low, high)
    nx, ny, sp = cfg["fim.nx"], cfg["fim.ny"], cfg["fim.spacing_wl"]
    tx = FimArray.square(nx, ny, 1.0, spacing_wl=sp)
    rx = FimArray.square(nx, ny, 1.0, center=(0.0, 0.0, cfg["channel.distance_wl"]), spacing_wl=sp,
                         normal=(0.0, 0.0, -1.0))
    H = scatterer_matrix(tx.base_positions, rx.base_positions, scat, 1.0)
    noise = cfg["fim.power"] * np.mean(np.abs(H) ** 2) / 10 ** (cfg["channel.snr_db"] / 10)
    return scat, tx, rx, float(noise)


def run_fim_capacity(cfg: ExperimentConfig, seed: int) -> SeedResult:
    scat, tx, rx, noise = capacity_setup(cfg, seed)
    ranges = [float(r) for r in cfg["fim.ranges_wl"]]
    results = [fim_capacity_bcd(scat, tx, rx, cfg["fim.power"], noise, R, cfg["fim.step_wl"],
                                cfg["fim.tol"], cfg["fim.max_sweeps"]) for R in ranges]
    rigid = results[0].rigid
    tol_rank = rigid.singular_values[0] * max(tx.base_positions.shape[0], 1) * np.finfo(float).eps
    metrics = {
        "ranges_wl": ranges,
        "rigid_capacity": float(rigid.capacity),
        "capacity": [float(r.morphed.capacity) for r in results],
        "sweeps": [int(r.sweeps) for r in results],
        "rank": int(np.sum(rigid.singular_values > tol_rank)),
        "weak_gain_improvement_db": [float(_eig_improvement(rigid, r.morphed, len(scat)))
                                     for r in results],
    }
    traces = {}
    for R, r in zip(ranges, results):
        t = LossTrace()
        for c in r.capacity_trace:
            t.append(c, max(t.best + [c]), float("nan"), 0.0)
        traces[f"capacity_R{R:g}"] = t
    spectra = [rigid.gains_db] + [r.morphed.gains_db for r in results]
    matrices = {"eigen_gains_db": np.array(spectra)}
    for R, r in zip(ranges, results):
        matrices[f"displacement_tx_R{R:g}"] = r.tx.displacement.reshape(cfg["fim.ny"], cfg["fim.nx"])
        matrices[f"displacement_rx_R{R:g}"] = r.rx.displacement.reshape(cfg["fim.ny"], cfg["fim.nx"])
    return SeedResult(seed, metrics, traces, matrices)


def _eig_improvement(rigid, morphed, rank):
    """Gain change (dB) of the weakest of the first ``rank`` eigenchannels."""
    k = min(rank, len(rigid.singular_values)) - 1
    return morphed.gains_db[k] - rigid.gains_db[k]


EXPERIMENTS = {
    "mimo-diag": run_mimo_diag,
    "papr": run_papr_sweep,
    "doa": run_doa,
    "semantic": run_semantic,
    "fim-diversity": run_fim_diversity,
    "fim-capacity": run_fim_capacity,
}
