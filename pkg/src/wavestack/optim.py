"""Phase-only training through chains of fixed matrices and diagonal phase screens.

Every model here has the form ``G = F_K D_K F_{K-1} ... F_1 D_1 F_0`` with
fixed complex matrices ``F_k`` (``None`` meaning identity) and diagonal
``D_k = diag(exp(j theta_k))``. Gradients are accumulated in reverse through
this chain.

Loss functions take the output ``G`` and return ``(loss, dloss/dconj(G))``; the
conjugate Wirtinger derivative is what the chain backpropagates.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .em import SimStack, wrap_phase

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class PhaseChain:
    """``G = F_K D_K ... D_1 F_0`` with ``len(fixed) == len(phase_shapes) + 1``."""

    def __init__(self, fixed, sizes):
        if len(fixed) != len(sizes) + 1:
            raise ValueError("need exactly one more fixed matrix than phase screens")
        self.fixed = list(fixed)
        self.sizes = [int(s) for s in sizes]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def num_phases(self) -> int:
        return int(self.offsets[-1])

    def split(self, theta):
        return [theta[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def forward(self, theta, keep=False):
        """Return G, and the right partial products if ``keep``."""
        blocks = self.split(np.asarray(theta, dtype=float))
        F0 = self.fixed[0]
        X = F0 if F0 is not None else None
        partials = []
        for d_theta, F in zip(blocks, self.fixed[1:]):
            d = np.exp(1j * d_theta)
            if X is None:
                X = np.diag(d)
                partials.append(None)
            else:
                partials.append(X)
                X = d[:, None] * X
            if F is not None:
                X = F @ X
        return (X, partials) if keep else X

    def gradient(self, theta, loss_fn):
        """Return ``(loss, G, grad)`` for ``loss_fn(G) -> (loss, dL/dconj(G))``."""
        theta = np.asarray(theta, dtype=float)
        G, partials = self.forward(theta, keep=True)
        loss, gamma = loss_fn(G)
        blocks = self.split(theta)
        grad = np.empty_like(theta)
        back = gamma
        for k in range(len(blocks) - 1, -1, -1):
            F = self.fixed[k + 1]
            lam = F.conj().T @ back if F is not None else back
            d = np.exp(1j * blocks[k])
            R = partials[k]
            if R is None:
                # identity on the right: (B Gamma^H A)_nn reduces to the diagonal of Lambda^H
                inner = np.conj(np.diagonal(lam))
            else:
                inner = np.einsum("ni,ni->n", R, np.conj(lam))
            a, b = self.offsets[k], self.offsets[k + 1]
            grad[a:b] = -2.0 * np.imag(d * inner)
            back = np.conj(d)[:, None] * lam
        return loss, G, grad


# -- losses ----------------------------------------------------------------------


def matrix_fit_loss(G, target, scaling="free"):
    """Normalized Frobenius misfit between ``G`` and a (scaled) target.

    ``fixed``: ``||G - T||^2 / ||T||^2``.
    ``free``: ``||G - a T||^2 / ||G||^2`` with the least-squares scale
    ``a = <T, G> / ||T||^2``. This equals ``1 - cos^2`` of the angle between
    ``G`` and ``T`` and is therefore invariant to the overall magnitude of G.
    """
    G = np.asarray(G)
    T = np.asarray(target)
    if G.shape != T.shape:
        raise ValueError(f"end-to-end matrix {G.shape} does not conform to target {T.shape}")
    t2 = np.vdot(T, T).real
    if scaling == "fixed":
        if t2 == 0:
            raise ValueError("target matrix is zero")
        diff = G - T
        return np.vdot(diff, diff).real / t2, diff / t2
    if scaling != "free":
        raise ValueError(f"unknown scaling mode {scaling!r}")
    if t2 == 0:
        raise ValueError("free-scalar fitting needs a nonzero target")
    g2 = np.vdot(G, G).real
    if g2 == 0:
        raise ValueError("end-to-end matrix is zero")
    c = np.vdot(T, G)
    c2 = abs(c) ** 2
    # residual form avoids the cancellation in 1 - cos^2 near a perfect fit
    resid = G - (c / t2) * T
    loss = np.vdot(resid, resid).real / g2
    gamma = -(c * T) / (t2 * g2) + c2 * G / (t2 * g2**2)
    return loss, gamma


def fit_scale(G, target):
    T = np.asarray(target)
    return np.vdot(T, G) / np.vdot(T, T).real


def softmax_crossentropy(scores, labels):
    """Mean cross-entropy of ``softmax(scores)`` along axis 0 (classes x batch)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    shifted = scores - scores.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    B = scores.shape[1]
    log_p = shifted[labels, np.arange(B)] - log_z
    return float(-log_p.mean())


def energy_crossentropy_loss(Y, labels, temperature=1.0, normalize="batch"):
    """Cross-entropy with class scores ``|y_c|^2`` (rows of Y are class antennas).

    With ``normalize='batch'`` energies are divided by their mean over the
    whole batch before the temperature is applied.
    """
    Y = np.asarray(Y)
    labels = np.asarray(labels, dtype=int)
    C, B = Y.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    E = np.abs(Y) ** 2
    if normalize == "batch":
        m = E.mean()
        if m == 0:
            raise ValueError("received field is identically zero")
        scale = 1.0 / (m * temperature)
    elif normalize is None:
        m = None
        scale = 1.0 / temperature
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    s = E * scale
    shifted = s - s.max(axis=0, keepdims=True)
    P = np.exp(shifted)
    P /= P.sum(axis=0, keepdims=True)
    loss = float(-np.log(P[labels, np.arange(B)]).mean())
    onehot = np.zeros_like(P)
    onehot[labels, np.arange(B)] = 1.0
    dL_ds = (P - onehot) / B
    dL_dE = dL_ds * scale
    if m is not None:
        # s = E / (m T) with m = mean(E): account for dm/dE = 1 / (C B)
        dL_dE = dL_dE - np.sum(dL_ds * E) * scale / (m * C * B)
    # dE/dconj(y) = y
    return loss, dL_dE * Y


# -- training --------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Projected gradient descent settings and progress.

    ``normalize_step`` divides the gradient by its largest magnitude so that
    ``rate`` is the largest per-atom phase step in radians.
    """

    rate: float = 0.1
    decay: float = 0.5
    decay_interval: int = 50
    max_iters: int = 10_000
    tol: float = 0.0
    patience: int = 500
    normalize_step: bool = True
    min_rate: float = 1e-9
    iteration: int = 0
    best_loss: float = np.inf
    best_theta: np.ndarray | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("learning rate must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


@dataclass
class LossTrace:
    loss: list = field(default_factory=list)
    best: list = field(default_factory=list)
    rate: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.loss)

    def append(self, loss, best, rate, seconds):
        self.loss.append(float(loss))
        self.best.append(float(best))
        self.rate.append(float(rate))
        self.seconds.append(float(seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "best_loss", "rate"])
            for i, (l, b, r) in enumerate(zip(self.loss, self.best, self.rate)):
                w.writerow([i, repr(l), repr(b), repr(r)])


def train_chain(chain: PhaseChain, loss_fn, theta0, optimizer: OptimizerState | None = None,
                trainable=None):
    """Minimise ``loss_fn(chain.forward(theta))`` by projected gradient descent.

    ``trainable`` is an optional boolean mask over phases; frozen phases keep
    their initial value. Returns ``(best_theta, LossTrace)``.
    """
    opt = optimizer if optimizer is not None else OptimizerState()
    theta = wrap_phase(np.array(theta0, dtype=float))
    mask = None if trainable is None else np.asarray(trainable, dtype=bool)
    trace = LossTrace()
    rate = opt.rate
    initial = None
    since_best = 0
    since_decay = 0
    while True:
        t0 = time.perf_counter()
        loss, _, grad = chain.gradient(theta, loss_fn)
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or (initial > 0 and loss > 1e6 * initial):
            raise TrainingDivergedError(
                f"loss {loss!r} at iteration {opt.iteration} (initial {initial!r}, rate {rate!r})")
        # strict improvement keeps the earlier iterate on ties
        if loss < opt.best_loss:
            opt.best_loss = float(loss)
            opt.best_theta = theta.copy()
            since_best = 0
            since_decay = 0
        else:
            since_best += 1
            since_decay += 1
        trace.append(loss, opt.best_loss, rate, time.perf_counter() - t0)
        gmax = np.max(np.abs(grad)) if grad.size else 0.0
        if (gmax == 0.0 or opt.best_loss <= opt.tol or opt.iteration + 1 >= opt.max_iters
                or since_best >= opt.patience or rate < opt.min_rate):
            break
        if since_decay >= opt.decay_interval:
            rate *= opt.decay
            since_decay = 0
            theta = opt.best_theta.copy()
        step = grad / gmax if opt.normalize_step else grad
        theta = wrap_phase(theta - rate * step)
        opt.iteration += 1
    trace.metrics["best_loss"] = opt.best_loss
    trace.metrics["iterations"] = len(trace)
    return opt.best_theta.copy(), trace


# -- SIM-level wrappers ------------------------------------------------------------


def mimo_chain(stack_tx: SimStack, channel, stack_rx: SimStack | None = None) -> PhaseChain:
    """Chain for ``[P_rx S_rx] H S_tx P_tx`` with all phases of both stacks."""
    H = np.asarray(channel)
    fixed = [stack_tx.input_matrix, *stack_tx.inner_matrices()]
    sizes = [stack_tx.geometry.num_atoms] * stack_tx.geometry.num_layers
    if stack_rx is None:
        fixed.append(H)
    else:
        fixed.extend([H, *stack_rx.inner_matrices(), stack_rx.output_matrix])
        sizes += [stack_rx.geometry.num_atoms] * stack_rx.geometry.num_layers
    return PhaseChain(fixed, sizes)


def transfer_chain(stack: SimStack) -> PhaseChain:
    """Chain whose output is the bare transfer matrix S of ``stack``."""
    g = stack.geometry
    return PhaseChain([None, *stack.inner_matrices(), None], [g.num_atoms] * g.num_layers)


def stack_theta(*stacks) -> np.ndarray:
    return np.concatenate([s.phases.theta.ravel() for s in stacks if s is not None])


def assign_theta(theta, *stacks):
    offset = 0
    for s in stacks:
        if s is None:
            continue
        n = s.phases.theta.size
        s.phases.update(theta[offset:offset + n].reshape(s.phases.theta.shape))
        offset += n


def _chain_for(stacks, channel):
    stacks = [s for s in stacks if s is not None]
    if channel is None:
        if len(stacks) != 1:
            raise ValueError("without a channel exactly one stack is fitted")
        return transfer_chain(stacks[0])
    return mimo_chain(stacks[0], channel, stacks[1] if len(stacks) > 1 else None)


def loss_matrix_fit(stacks, channel, target, scaling="free") -> float:
    """Fitting loss of the end-to-end matrix (or bare S when ``channel`` is None)."""
    stacks = stacks if isinstance(stacks, (list, tuple)) else [stacks]
    chain = _chain_for(stacks, channel)
    G = chain.forward(stack_theta(*stacks))
    return matrix_fit_loss(G, target, scaling)[0]


def grad_phases(stacks, channel, target, scaling="free") -> np.ndarray:
    stacks = stacks if isinstance(stacks, (list, tuple)) else [stacks]
    chain = _chain_for(stacks, channel)
    _, _, grad = chain.gradient(stack_theta(*stacks), lambda G: matrix_fit_loss(G, target, scaling))
    return grad


def train(stacks, channel, target, optimizer: OptimizerState | None = None, scaling="free"):
    """Fit the stacks' phases in place; returns ``(theta, LossTrace)``."""
    stacks = stacks if isinstance(stacks, (list, tuple)) else [stacks]
    chain = _chain_for(stacks, channel)
    theta, trace = train_chain(chain, lambda G: matrix_fit_loss(G, target, scaling),
                               stack_theta(*stacks), optimizer)
    assign_theta(theta, *stacks)
    return theta, trace


def phases_to_text(stack: SimStack) -> str:
    """Portable text form of a stack's phases, tagged with a geometry hash."""
    lines = [f"# geometry {geometry_hash(stack.geometry)}",
             f"# shape {stack.phases.theta.shape[0]} {stack.phases.theta.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in stack.phases.theta]
    return "\n".join(lines) + "\n"


def phases_from_text(text: str, stack: SimStack):
    lines = text.strip().splitlines()
    tag = lines[0].split()[-1]
    if tag != geometry_hash(stack.geometry):
        raise ValueError("phase file was produced for a different geometry")
    theta = np.array([[float(v) for v in ln.split()] for ln in lines[2:]])
    stack.phases.update(theta)
    return stack


def geometry_hash(geometry) -> str:
    items = sorted(geometry.to_config().items())
    blob = ";".join(f"{k}={v!r}" for k, v in items)
    blob += f";in={geometry.input_ports().tolist()!r};out={geometry.output_ports().tolist()!r}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
