"""Comparison methods: L1-column feature pruning with server fine-tuning, and
supervised adversarial training of the client encoder.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidM, MaskError, MissingHiddenLabels
from .nn.layers import kaiming_uniform
from .nn.model import SplitModel, layer_from_descriptor, run_layers
from .nn.train import AdamState, TrainConfig, adam_step, cross_entropy, train


@dataclass
class PruneConfig:
    m_prime: int
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0


@dataclass
class ATConfig:
    gamma_at: float = 0.5
    inner_adversary_steps: int = 5
    outer_epochs: int = 20
    seed: int = 0
    lr: float = 0.001
    batch_size: int = 32
    adversary_reinit_epochs: int = 10
    attribute: str | None = None

    def __post_init__(self):
        # 0 is admitted as the degenerate "plain target training" setting.
        if self.gamma_at < 0:
            raise ValueError("gamma_at must be >= 0")


def prune_mask(w_next, m_prime) -> np.ndarray:
    """Indices of the m' columns of the next layer's weights with largest L1
    norm (ties to the lower index), sorted ascending."""
    w_next = np.asarray(w_next, dtype=np.float64)
    if not 0 <= m_prime <= w_next.shape[1]:
        raise InvalidM(f"m_prime={m_prime} outside [0, {w_next.shape[1]}]")
    norms = np.abs(w_next).sum(axis=0)
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:m_prime])


def apply_prune(z, mask) -> np.ndarray:
    """Zero every feature position outside the mask. Works on (n,) or (N, n)."""
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.int64)
    n = z.shape[-1]
    if mask.size and (mask.min() < 0 or mask.max() >= n):
        raise MaskError(f"mask indices outside [0, {n})")
    out = np.zeros_like(z)
    out[..., mask] = z[..., mask]
    return out


def finetune_server(ms_layers, feats, labels, cfg: PruneConfig):
    """Fine-tune the server stack on pruned features; returns the loss history.

    Layers are updated in place; pass a cloned stack to keep the original.
    """
    if cfg.finetune_epochs == 0:
        return []
    model = SplitModel(
        list(ms_layers),
        [0],
        tuple(np.asarray(feats).shape[1:]),
    )
    tc = TrainConfig(
        epochs=cfg.finetune_epochs,
        lr=cfg.finetune_lr,
        lr_drop_epochs=(),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    return train(model, feats, labels, tc).loss_history


def mirror_stack(layers, n_out, rng):
    """Fresh stack with the same structure, final FC resized to n_out classes."""
    descs = [layer.descriptor() for layer in layers]
    for d in reversed(descs):
        if d["kind"] == "fc":
            d["out_features"] = n_out
            break
    fresh = [layer_from_descriptor(d) for d in descs]
    for layer in fresh:
        if hasattr(layer, "w"):
            fan_in = layer.w.shape[1] if layer.kind == "fc" else layer.in_channels * 9
            layer.w = kaiming_uniform(rng, layer.w.shape, fan_in)
    return fresh


def adversarial_train(model: SplitModel, dataset, cfg: ATConfig):
    """Min-max training: the adversary minimizes its hidden-label loss on the
    frozen client features, then the main model takes one step minimizing
    (target loss - gamma * adversary loss). Returns (model, adversary_layers,
    log) with per-step losses; the adversary is re-initialized every
    ``adversary_reinit_epochs`` outer epochs.
    """
    if not dataset.hidden:
        raise MissingHiddenLabels("adversarial training needs hidden labels")
    attribute = cfg.attribute
    if attribute is None:
        if len(dataset.hidden) != 1:
            raise MissingHiddenLabels("several hidden attributes; set ATConfig.attribute")
        attribute = next(iter(dataset.hidden))
    if attribute not in dataset.hidden:
        raise MissingHiddenLabels(f"no hidden attribute {attribute!r}")

    rng = np.random.default_rng(cfg.seed)
    cut = model.block_starts[model.split_index - 1]
    mc, ms = model.layers[:cut], model.layers[cut:]
    n_hid = dataset.hidden_classes[attribute]

    x = np.asarray(dataset.x, dtype=np.float64)
    y_tar = dataset.y_tar
    y_hid = dataset.hidden[attribute]
    idx = dataset.splits["train"]

    main_params = [p for layer in mc + ms for _, p in layer.params()]
    main_state = AdamState.for_params(main_params)

    adversary = mirror_stack(ms, n_hid, rng)
    adv_params = [p for layer in adversary for _, p in layer.params()]
    adv_state = AdamState.for_params(adv_params)

    log = {"target_loss": [], "adversary_loss": []}
    for epoch in range(cfg.outer_epochs):
        if epoch > 0 and epoch % cfg.adversary_reinit_epochs == 0:
            adversary = mirror_stack(ms, n_hid, rng)
            adv_params = [p for layer in adversary for _, p in layer.params()]
            adv_state = AdamState.for_params(adv_params)
        order = rng.permutation(idx)
        for lo in range(0, order.shape[0], cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            xb, ytb, yhb = x[batch], y_tar[batch], y_hid[batch]

            # Adversary phase: fit the hidden head on frozen features.
            z = run_layers(mc, xb, train=False)
            for _ in range(cfg.inner_adversary_steps):
                probs = run_layers(adversary, z, train=True)
                adv_loss, gprobs = cross_entropy(probs, yhb)
                grad = gprobs
                for layer in reversed(adversary):
                    grad = layer.backward(grad)
                adam_step(
                    adv_params, [g for l in adversary for g in l.grads()], adv_state, cfg.lr
                )

            # Main phase: one step on target loss minus gamma * adversary loss.
            z = run_layers(mc, xb, train=True)
            probs_t = run_layers(ms, z, train=True)
            t_loss, gt = cross_entropy(probs_t, ytb)
            grad = gt
            for layer in reversed(ms):
                grad = layer.backward(grad)
            gz = grad

            probs_a = run_layers(adversary, z, train=True)
            a_loss, ga = cross_entropy(probs_a, yhb)
            grad = ga
            for layer in reversed(adversary):
                grad = layer.backward(grad)
            gz = gz - cfg.gamma_at * grad

            for layer in reversed(mc):
                gz = layer.backward(gz)
            adam_step(
                main_params,
                [g for l in mc + ms for g in l.grads()],
                main_state,
                cfg.lr,
            )
            log["target_loss"].append(t_loss)
            log["adversary_loss"].append(a_loss)
    return model, adversary, log
