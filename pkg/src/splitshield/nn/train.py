"""Training: Adam with the step-drop schedule, the two feature regularizers,
and the robustness loop that randomly removes signal content during training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .. import linalg
from ..errors import InsufficientBatch
from .model import SplitModel, split_basis

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Fractions of the signal content kept when robustness removal is on.
KEEP_FRACTIONS = (1.0, 0.75, 0.5, 0.25, 0.1)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    lr_drop_epochs: tuple = (20, 40)
    lr_drop_factor: float = 10.0
    batch_size: int = 32
    seed: int = 0
    decov_weight: float = 0.0
    gauss_prior_weight: float = 0.0
    robustness_removal: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Effective learning rate for a 1-based epoch number."""
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch > d)
    return cfg.lr / (cfg.lr_drop_factor**drops)


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1t = 1.0 - ADAM_BETA1**state.t
    b2t = 1.0 - ADAM_BETA2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the probabilities."""
    n = probs.shape[0]
    clipped = np.maximum(probs, 1e-12)
    idx = (np.arange(n), labels)
    loss = -float(np.mean(np.log(clipped[idx])))
    gprobs = np.zeros_like(probs)
    gprobs[idx] = -1.0 / (clipped[idx] * n)
    return loss, gprobs


def decov_penalty(acts):
    """Off-diagonal covariance penalty over a batch of activations.

    C is the batch covariance (mean-centered, divided by batch size);
    penalty = .5 * (||C||_F^2 - ||diag C||^2). Returns (value, grad wrt acts).
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2:
        acts = acts.reshape(acts.shape[0], -1)
    n = acts.shape[0]
    if n < 2:
        raise InsufficientBatch("decov needs a batch of >= 2 examples")
    centered = acts - acts.mean(axis=0)
    cov = centered.T @ centered / n
    off = cov - np.diag(np.diag(cov))
    value = 0.5 * float(np.sum(off * off))
    grad = (2.0 / n) * centered @ off
    return value, grad


def gauss_prior_penalty(z_batch, sigma2=1.0):
    """KL(batch Gaussian fit || N(0, sigma2 I)), summed over units.

    Uses the batch mean and population variance per unit; zero exactly when
    the batch is standardized to the prior. Returns (value, grad wrt batch).
    """
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim != 2:
        z = z.reshape(z.shape[0], -1)
    n = z.shape[0]
    if n < 2:
        raise InsufficientBatch("gaussian prior needs a batch of >= 2 examples")
    mu = z.mean(axis=0)
    var = np.maximum(z.var(axis=0), 1e-12)
    value = 0.5 * float(np.sum(var / sigma2 + mu * mu / sigma2 - 1.0 - np.log(var / sigma2)))
    grad = mu / (n * sigma2) + (1.0 / sigma2 - 1.0 / var) * (z - mu) / n
    return value, grad


@dataclass
class TrainResult:
    loss_history: list
    aux_history: list


def _boundary_penalties(model, boundaries, cfg):
    """Regularizer value and per-boundary gradients over split layers >= 2."""
    total = 0.0
    grads = {}
    if cfg.decov_weight == 0.0 and cfg.gauss_prior_weight == 0.0:
        return total, grads
    for si in range(2, model.n_splits + 1):
        act = boundaries[si]
        flat = act.reshape(act.shape[0], -1)
        g = np.zeros_like(flat)
        if cfg.decov_weight > 0.0:
            val, gd = decov_penalty(flat)
            total += cfg.decov_weight * val
            g += cfg.decov_weight * gd
        if cfg.gauss_prior_weight > 0.0:
            val, gg = gauss_prior_penalty(flat)
            total += cfg.gauss_prior_weight * val
            g += cfg.gauss_prior_weight * gg
        grads[si] = g
    return total, grads


def _removal_bases(model):
    """Per-split kept-direction bases, recomputed from the current weights."""
    bases = {}
    for si in range(1, model.n_splits + 1):
        basis = split_basis(model, si)
        bases[si] = (basis.v, min(basis.m, basis.n))
    return bases


def train(model: SplitModel, x, y, cfg: TrainConfig, train_indices=None) -> TrainResult:
    """Train on (x, y) with cross-entropy plus the configured regularizers.

    With robustness_removal on, each batch picks one split layer and a keep
    fraction, projects that boundary's activation onto its top ceil(f*m)
    signal directions, and blocks gradients through the discarded ones.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = np.arange(x.shape[0]) if train_indices is None else np.asarray(train_indices)
    rng = np.random.default_rng(cfg.seed)
    params = [p for _, _, p in model.parameters()]
    state = AdamState.for_params(params)
    need_boundaries = cfg.decov_weight > 0.0 or cfg.gauss_prior_weight > 0.0
    loss_history = []
    aux_history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        bases = _removal_bases(model) if cfg.robustness_removal else None
        order = rng.permutation(idx)
        epoch_loss = 0.0
        epoch_aux = 0.0
        n_batches = 0
        for lo in range(0, order.shape[0], cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            removal = None
            if cfg.robustness_removal:
                si = int(rng.integers(1, model.n_splits + 1))
                frac = KEEP_FRACTIONS[int(rng.integers(len(KEEP_FRACTIONS)))]
                v, m_eff = bases[si]
                keep = math.ceil(frac * m_eff)
                removal = (si, v[:, :keep])
            probs, boundaries = model.forward(
                x[batch], train=True, collect_boundaries=True, removal=removal
            )
            loss, gprobs = cross_entropy(probs, y[batch])
            aux = 0.0
            bgrads = {}
            if need_boundaries:
                aux, bgrads = _boundary_penalties(model, boundaries, cfg)
            model.backward(gprobs, boundary_grads=bgrads)
            adam_step(params, model.gradients(), state, lr)
            epoch_loss += loss
            epoch_aux += aux
            n_batches += 1
        loss_history.append(epoch_loss / n_batches)
        aux_history.append(epoch_aux / n_batches)
    return TrainResult(loss_history=loss_history, aux_history=aux_history)


def train_on_features(layers_model: SplitModel, feats, labels, epochs, lr, batch_size, seed,
                      lr_drop_epochs=()):
    """Plain cross-entropy training used for server fine-tuning and adversaries."""
    cfg = TrainConfig(
        epochs=epochs,
        lr=lr,
        lr_drop_epochs=tuple(lr_drop_epochs),
        batch_size=batch_size,
        seed=seed,
    )
    return train(layers_model, feats, labels, cfg)
