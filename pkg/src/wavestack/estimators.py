"""scikit-learn style estimators wrapping SIM training.

The estimators follow the usual contract: hyperparameters are stored
verbatim in ``__init__``, learned state gets a trailing underscore, and
``fit`` returns ``self`` so they compose with ``clone`` and pipelines.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .em import PhaseConfig, SimGeometry, SimStack, end_to_end_channel, wrap_phase
from .optim import (OptimizerState, PhaseChain, assign_theta, energy_crossentropy_loss,
                    fit_scale, matrix_fit_loss, mimo_chain, stack_theta, train_chain,
                    transfer_chain)


def _optimizer(est) -> OptimizerState:
    return OptimizerState(rate=est.rate, decay=est.decay, decay_interval=est.decay_interval,
                          max_iters=est.max_iters, tol=est.tol, patience=est.patience)


def check_complex_array(X, name="X"):
    """2D finite complex array (sklearn's validators reject complex input)."""
    X = np.asarray(X, dtype=complex)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {X.shape}")
    if X.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def _generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(random_state)
    return np.random.default_rng(check_random_state(random_state).randint(2**31 - 1))


# -- matrix fitting --------------------------------------------------------------


class SimMatrixFitter(TransformerMixin, BaseEstimator):
    """Fit the transfer matrix S of one SIM to a target matrix.

    After fitting, ``transform`` propagates fields (rows of X) through the SIM.
    """

    def __init__(self, geometry=None, scaling="free", rate=0.1, decay=0.5,
                 decay_interval=50, max_iters=2000, tol=0.0, patience=500,
                 random_state=None):
        self.geometry = geometry
        self.scaling = scaling
        self.rate = rate
        self.decay = decay
        self.decay_interval = decay_interval
        self.max_iters = max_iters
        self.tol = tol
        self.patience = patience
        self.random_state = random_state

    def _geometry(self):
        return self.geometry if self.geometry is not None else SimGeometry()

    def fit(self, target, y=None):
        geo = self._geometry()
        T = check_complex_array(target, "target")
        N = geo.num_atoms
        if T.shape != (N, N):
            raise ValueError(f"target must be {N}x{N}, got {T.shape}")
        rng = _generator(self.random_state)
        stack = SimStack(geo, PhaseConfig.random(geo.num_layers, N, rng))
        chain = transfer_chain(stack)
        theta, trace = train_chain(chain, lambda G: matrix_fit_loss(G, T, self.scaling),
                                   stack_theta(stack), _optimizer(self))
        assign_theta(theta, stack)
        self.stack_ = stack
        self.loss_trace_ = trace
        self.loss_ = trace.metrics["best_loss"]
        self.transfer_ = stack.transfer()
        self.scale_ = fit_scale(self.transfer_, T)
        self.n_features_in_ = N
        return self

    def transform(self, X):
        check_is_fitted(self, "transfer_")
        X = check_complex_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} field samples per row")
        return X @ self.transfer_.T


def dft_matrix_2d(nx, ny):
    """Unitary 2D DFT acting on row-major grids (index ``iy * nx + ix``)."""
    Fx = np.fft.fft(np.eye(nx)) / np.sqrt(nx)
    Fy = np.fft.fft(np.eye(ny)) / np.sqrt(ny)
    return np.kron(Fy, Fx)


def _signed(k, n):
    k = np.asarray(k)
    return np.where(k <= n // 2, k, k - n)


class SimDoaEstimator(BaseEstimator):
    """Direction-of-arrival by probing the energy peak behind a DFT-trained SIM.

    ``fit`` trains the stack toward the 2D DFT (or, with ``ideal=True``,
    uses the exact DFT). ``predict`` maps incident fields over the input
    layer (rows of X) to ``(azimuth, elevation)`` estimates in radians.
    """

    def __init__(self, geometry=None, ideal=False, snr_db=None, rate=0.1, decay=0.5,
                 decay_interval=50, max_iters=2000, tol=0.0, patience=500,
                 random_state=None):
        self.geometry = geometry
        self.ideal = ideal
        self.snr_db = snr_db
        self.rate = rate
        self.decay = decay
        self.decay_interval = decay_interval
        self.max_iters = max_iters
        self.tol = tol
        self.patience = patience
        self.random_state = random_state

    def fit(self, X=None, y=None):
        geo = self.geometry if self.geometry is not None else SimGeometry()
        T = dft_matrix_2d(geo.nx, geo.ny)
        self.target_ = T
        if self.ideal:
            self.transfer_ = T
            self.nmse_ = 0.0
            self.loss_trace_ = None
        else:
            fitter = SimMatrixFitter(geo, "free", self.rate, self.decay, self.decay_interval,
                                     self.max_iters, self.tol, self.patience,
                                     self.random_state).fit(T)
            self.transfer_ = fitter.transfer_
            self.nmse_ = fitter.loss_
            self.loss_trace_ = fitter.loss_trace_
            self.stack_ = fitter.stack_
        self.geometry_ = geo
        self.n_features_in_ = geo.num_atoms
        return self

    def energies(self, X, rng=None):
        check_is_fitted(self, "transfer_")
        X = check_complex_array(X)
        Y = X @ self.transfer_.T
        if self.snr_db is not None:
            rng = rng if rng is not None else _generator(self.random_state)
            p = np.mean(np.abs(Y) ** 2, axis=1, keepdims=True) / 10 ** (self.snr_db / 10)
            Y = Y + np.sqrt(p / 2) * (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
        return np.abs(Y) ** 2

    def predict_bins(self, X):
        """Peak output index for each row of X, as ``(ku, kv)`` DFT bins."""
        E = self.energies(X)
        nx = self.geometry_.nx
        idx = np.argmax(E, axis=1)
        return np.stack([idx % nx, idx // nx], axis=1)

    def predict(self, X):
        bins = self.predict_bins(X)
        return bins_to_directions(bins, self.geometry_)


def bins_to_directions(bins, geometry: SimGeometry):
    """``(azimuth, elevation)`` of plane waves that peak at the given DFT bins."""
    bins = np.atleast_2d(bins)
    ratio = geometry.wavelength / geometry.atom_spacing
    cx = -_signed(bins[:, 0], geometry.nx) / geometry.nx * ratio
    cy = -_signed(bins[:, 1], geometry.ny) / geometry.ny * ratio
    rho = np.hypot(cx, cy)
    if np.any(rho > 1 + 1e-12):
        raise ValueError("bin corresponds to an evanescent (non-physical) direction")
    az = np.where(rho > 0, np.arctan2(cy, cx), 0.0)
    el = np.arccos(np.clip(rho, 0.0, 1.0))
    return np.stack([az, el], axis=1)


def on_grid_directions(geometry: SimGeometry):
    """All DFT bins and their plane-wave directions, in output-index order."""
    ku, kv = np.meshgrid(np.arange(geometry.nx), np.arange(geometry.ny), indexing="xy")
    bins = np.stack([ku.ravel(), kv.ravel()], axis=1)
    return bins, bins_to_directions(bins, geometry)


# -- MIMO precoding / combining -----------------------------------------------------


class SimPairPrecoder(BaseEstimator):
    """Transmit and receive SIMs trained jointly to diagonalize a MIMO channel.

    ``fit(H)`` takes the channel between the two SIMs' facing layers
    (rx atoms x tx atoms) and fits the port-to-port matrix to a scaled identity.
    """

    def __init__(self, geometry=None, rate=0.1, decay=0.5, decay_interval=50,
                 max_iters=1000, tol=0.0, patience=500, random_state=None):
        self.geometry = geometry
        self.rate = rate
        self.decay = decay
        self.decay_interval = decay_interval
        self.max_iters = max_iters
        self.tol = tol
        self.patience = patience
        self.random_state = random_state

    def fit(self, H, y=None):
        geo = self.geometry if self.geometry is not None else SimGeometry(
            num_input_ports=4, num_output_ports=4)
        H = check_complex_array(H, "H")
        if geo.num_input_ports != geo.num_output_ports:
            raise ValueError("diagonalization needs as many receive as transmit ports")
        rng = _generator(self.random_state)
        L, N = geo.num_layers, geo.num_atoms
        tx = SimStack(geo, PhaseConfig.random(L, N, rng))
        rx = SimStack(geo, PhaseConfig.random(L, N, rng))
        T = np.eye(geo.num_input_ports)
        chain = mimo_chain(tx, H, rx)
        theta, trace = train_chain(chain, lambda G: matrix_fit_loss(G, T, "free"),
                                   stack_theta(tx, rx), _optimizer(self))
        assign_theta(theta, tx, rx)
        self.stack_tx_, self.stack_rx_ = tx, rx
        self.channel_ = H
        self.loss_trace_ = trace
        self.loss_ = trace.metrics["best_loss"]
        self.end_to_end_ = end_to_end_channel(tx, H, rx)
        return self

    def end_to_end(self, H=None):
        check_is_fitted(self, "end_to_end_")
        if H is None:
            return self.end_to_end_
        return end_to_end_channel(self.stack_tx_, np.asarray(H), self.stack_rx_)

    def transform(self, symbols):
        """Received port samples for transmit symbols (rows are time samples)."""
        S = check_complex_array(symbols, "symbols")
        return S @ self.end_to_end_.T


def interference_to_signal(G):
    """Per-stream ISR: off-diagonal row energy over diagonal energy."""
    P = np.abs(np.asarray(G)) ** 2
    d = np.diagonal(P)
    return (P.sum(axis=1) - d) / d


# -- semantic classification ------------------------------------------------------


def area_resize_matrix(n_in, n_out):
    """Row-stochastic matrix averaging ``n_in`` cells onto ``n_out`` by overlap area."""
    edges_out = np.linspace(0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    M = np.clip(hi - lo, 0, None)
    return M / M.sum(axis=1, keepdims=True)


def encode_images(images, nx, ny):
    """Area-average square images onto an ``ny x nx`` grid; returns ``(n, nx*ny)``."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        if side * side != images.shape[1]:
            raise ValueError("flattened images must be square")
        images = images.reshape(len(images), side, side)
    Ay = area_resize_matrix(images.shape[1], ny)
    Ax = area_resize_matrix(images.shape[2], nx)
    out = np.einsum("ij,njk,lk->nil", Ay, images, Ax)
    return out.reshape(len(images), -1)


def dbm_to_watts(dbm):
    return 10 ** ((dbm - 30) / 10)


class SimClassifier(ClassifierMixin, BaseEstimator):
    """Transmit-side SIM that steers each image class to its own receive antenna.

    Images (rows of X, flattened square intensities in [0, 1]) are encoded as
    input-layer amplitudes; layers 2..L are trained by mini-batch projected
    gradient descent on energy-softmax cross-entropy. Prediction reads the
    strongest class antenna under receiver noise at the configured link budget.
    """

    def __init__(self, geometry=None, rx_shape=(3, 2), rx_spacing_wl=2.0,
                 rx_distance_wl=10.0, class_antennas=None, epochs=30, batch_size=64,
                 rate=0.05, rate_decay=0.7, decay_every=5, temperature=1.0,
                 tx_power_dbm=40.0, noise_dbm=-104.0, noisy_predict=True,
                 random_state=None):
        self.geometry = geometry
        self.rx_shape = rx_shape
        self.rx_spacing_wl = rx_spacing_wl
        self.rx_distance_wl = rx_distance_wl
        self.class_antennas = class_antennas
        self.epochs = epochs
        self.batch_size = batch_size
        self.rate = rate
        self.rate_decay = rate_decay
        self.decay_every = decay_every
        self.temperature = temperature
        self.tx_power_dbm = tx_power_dbm
        self.noise_dbm = noise_dbm
        self.noisy_predict = noisy_predict
        self.random_state = random_state

    def _build(self, n_classes):
        base = self.geometry if self.geometry is not None else SimGeometry(nx=21, ny=21)
        if base.num_layers < 2:
            raise ValueError("semantic encoding needs an input layer plus trainable layers")
        lam = base.wavelength
        rnx, rny = self.rx_shape
        xs = (np.arange(rnx) - (rnx - 1) / 2) * self.rx_spacing_wl * lam
        ys = (np.arange(rny) - (rny - 1) / 2) * self.rx_spacing_wl * lam
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        z = base.layer_z(base.num_layers) + self.rx_distance_wl * lam
        rx = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
        antennas = (np.arange(n_classes) if self.class_antennas is None
                    else np.asarray(self.class_antennas, dtype=int))
        if n_classes > len(rx):
            raise ValueError(f"{n_classes} classes exceed {len(rx)} receive antennas")
        if len(antennas) != n_classes or len(set(antennas.tolist())) != n_classes:
            raise ValueError("class_antennas must assign one distinct antenna per class")
        geo = SimGeometry(wavelength=lam, num_layers=base.num_layers, nx=base.nx, ny=base.ny,
                          atom_spacing=base.atom_spacing, thickness=base.thickness,
                          atom_area=base.atom_area, output_port_positions=rx)
        return geo, antennas

    def _chain(self, Z):
        st = self.stack_
        mats = st.inner_matrices()
        fixed = [mats[0] @ Z.T, *mats[1:], st.output_matrix]
        return PhaseChain(fixed, [st.geometry.num_atoms] * (st.geometry.num_layers - 1))

    def _amplitude(self):
        return np.sqrt(dbm_to_watts(self.tx_power_dbm) / self.stack_.geometry.num_atoms)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        C = len(self.classes_)
        geo, antennas = self._build(C)
        self.antennas_ = antennas
        rng = _generator(self.random_state)
        L, N = geo.num_layers, geo.num_atoms
        self.stack_ = SimStack(geo, PhaseConfig(np.vstack(
            [np.zeros((1, N)), rng.uniform(0, 2 * np.pi, (L - 1, N))])))
        Z = encode_images(X, geo.nx, geo.ny) * self._amplitude()
        theta = self.stack_.phases.theta[1:].ravel()
        rate = self.rate
        history = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(Z))
            losses = []
            for a in range(0, len(order), self.batch_size):
                b = order[a:a + self.batch_size]
                loss_fn = self._loss_fn(y_idx[b])
                loss, _, grad = self._chain(Z[b]).gradient(theta, loss_fn)
                gmax = np.abs(grad).max()
                if gmax > 0:
                    theta = wrap_phase(theta - rate * grad / gmax)
                losses.append(loss)
            history.append(float(np.mean(losses)))
            if (epoch + 1) % self.decay_every == 0:
                rate *= self.rate_decay
        self.stack_.phases.theta[1:] = theta.reshape(L - 1, N)
        self.loss_curve_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def _loss_fn(self, labels):
        antennas = self.antennas_

        def loss_fn(Y):
            sub = Y[antennas]
            loss, gamma_sub = energy_crossentropy_loss(sub, labels, self.temperature)
            gamma = np.zeros_like(Y)
            gamma[antennas] = gamma_sub
            return loss, gamma

        return loss_fn

    def received(self, X, noisy=None):
        """Complex samples at every receive antenna, shape ``(n_samples, n_rx)``."""
        check_is_fitted(self, "stack_")
        X = check_array(X)
        geo = self.stack_.geometry
        Z = encode_images(X, geo.nx, geo.ny) * self._amplitude()
        Y = self._chain(Z).forward(self.stack_.phases.theta[1:].ravel()).T
        noisy = self.noisy_predict if noisy is None else noisy
        if noisy:
            rng = _generator(self.random_state)
            sigma2 = dbm_to_watts(self.noise_dbm)
            Y = Y + np.sqrt(sigma2 / 2) * (rng.standard_normal(Y.shape)
                                           + 1j * rng.standard_normal(Y.shape))
        return Y

    def decision_function(self, X):
        """Received energy at each class antenna."""
        return np.abs(self.received(X)[:, self.antennas_]) ** 2

    def predict_proba(self, X):
        E = self.decision_function(X)
        s = E / (E.mean() * self.temperature) if E.mean() > 0 else E
        s = s - s.max(axis=1, keepdims=True)
        P = np.exp(s)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
