"""Post-hoc adversary evaluation, tradeoff sweeps, and the accuracy profile.

The adversary is always trained after the fact on exactly the obfuscated
features the server would see; it never influences the main model.
"""

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import obfuscator
from .baselines import PruneConfig, apply_prune, finetune_server, mirror_stack, prune_mask
from .errors import EmptySplit, InvalidM, UnknownAttribute
from .nn.model import SplitModel, clone_layers, run_layers, split, split_basis
from .nn.train import TrainConfig, train

MODE_NONE = "none"
MODE_FREE = obfuscator.MODE_FREE
MODE_TOPM = obfuscator.MODE_TOPM
MODE_BUDGET = obfuscator.MODE_BUDGET
MODE_PRUNE = "prune"

CSV_FIELDS = ["split_index", "mode", "param", "target_err", "attr", "attack_err",
              "comm_floats", "seed"]


@dataclass
class AdversaryConfig:
    """Adversary optimizer settings; defaults follow the step-drop schedule."""

    epochs: int = 50
    lr: float = 0.001
    lr_drop_epochs: tuple = (20, 40)
    batch_size: int = 32
    seeds: tuple = (0, 1, 2)


@dataclass
class TradeoffPoint:
    split_index: int
    mode: str
    param: float
    target_err: float
    attack_err: dict
    attack_err_runs: dict
    comm_floats: float

    def as_rows(self):
        rows = []
        for attr, runs in sorted(self.attack_err_runs.items()):
            for seed, err in runs:
                rows.append(
                    {
                        "split_index": self.split_index,
                        "mode": self.mode,
                        "param": self.param,
                        "target_err": f"{self.target_err:.6f}",
                        "attr": attr,
                        "attack_err": f"{err:.6f}",
                        "comm_floats": f"{self.comm_floats:.2f}",
                        "seed": seed,
                    }
                )
        return rows


@dataclass
class ProfileRow:
    split_index: int
    keep_fraction: float
    drop: float


@dataclass
class AccuracyProfile:
    rows: list = field(default_factory=list)


def accuracy(probs_or_pred, labels) -> float:
    """Top-1 accuracy from class probabilities or predicted indices."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySplit("no examples to score")
    arr = np.asarray(probs_or_pred)
    pred = arr.argmax(axis=1) if arr.ndim == 2 else arr
    return float(np.mean(pred == labels))


def boundary_features(model: SplitModel, split_index: int, xs) -> np.ndarray:
    """Client-side features entering the given split, original shape."""
    mc, _, _ = split(model, split_index)
    return run_layers(mc, xs, train=False)


def obfuscated_features(model, split_index, xs, mode, param=None, basis=None):
    """Features after client-side obfuscation, plus transmitted-float count.

    Returns (features in boundary shape, comm_floats per query). ``none``
    ships the raw boundary activation (n floats); the other modes ship
    coefficients.
    """
    feats = boundary_features(model, split_index, xs)
    shape = feats.shape
    flat = feats.reshape(shape[0], -1)
    n = flat.shape[1]
    if mode == MODE_NONE:
        return feats, float(n)
    if basis is None:
        basis = split_basis(model, split_index)
    alpha = flat @ basis.v
    m_eff = min(basis.m, basis.n)
    if mode == MODE_FREE:
        kept = m_eff
        alpha[:, kept:] = 0.0
        comm = float(kept)
    elif mode == MODE_TOPM:
        kept = int(param)
        if not 0 <= kept <= basis.m:
            raise InvalidM(f"m_prime={kept} outside [0, {basis.m}]")
        kept = min(kept, basis.n)
        alpha[:, kept:] = 0.0
        comm = float(kept)
    elif mode == MODE_BUDGET:
        m_primes = []
        for i in range(flat.shape[0]):
            res = obfuscator.obfuscate_budget(flat[i], basis, float(param))
            alpha[i] = res.alpha_prime
            m_primes.append(res.m_prime)
        comm = float(np.mean(m_primes))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    zprime = alpha @ basis.v.T
    return zprime.reshape(shape), comm


def train_adversary(model, dataset, attribute, split_index, mode, param=None,
                    cfg: AdversaryConfig | None = None, seed=0, feats=None):
    """Train a fresh adversary (server-architecture mirror) on obfuscated
    features and return (adversary model, test attack accuracy).
    """
    if attribute not in dataset.hidden:
        raise UnknownAttribute(f"no hidden attribute {attribute!r}")
    cfg = cfg or AdversaryConfig()
    if feats is None:
        feats, _ = obfuscated_features(model, split_index, dataset.x, mode, param)
    _, ms, _ = split(model, split_index)
    rng = np.random.default_rng(seed)
    ma_layers = mirror_stack(ms, dataset.hidden_classes[attribute], rng)
    ma = SplitModel(ma_layers, [0], feats.shape[1:])
    tc = TrainConfig(
        epochs=cfg.epochs,
        lr=cfg.lr,
        lr_drop_epochs=cfg.lr_drop_epochs,
        batch_size=cfg.batch_size,
        seed=seed,
    )
    labels = dataset.hidden[attribute]
    train(ma, feats, labels, tc, train_indices=dataset.splits["train"])
    te = dataset.splits["test"]
    acc = accuracy(ma.forward(feats[te]), labels[te])
    return ma, acc


def _target_error(ms_layers, feats, labels, test_idx):
    probs = run_layers(ms_layers, feats[test_idx], train=False)
    return 1.0 - accuracy(probs, labels[test_idx])


def evaluate_point(model, dataset, split_index, mode, param, adv_cfg, point_seed,
                   finetune: PruneConfig | None = None):
    """One sweep point: obfuscate, (optionally) fine-tune, score target and
    adversaries. Deterministic given point_seed.
    """
    adv_cfg = adv_cfg or AdversaryConfig()
    basis = None if mode == MODE_PRUNE else split_basis(model, split_index)
    _, ms, w = split(model, split_index)

    if mode == MODE_PRUNE:
        feats = boundary_features(model, split_index, dataset.x)
        shape = feats.shape
        flat = feats.reshape(shape[0], -1)
        mask = prune_mask(w, int(param))
        feats = apply_prune(flat, mask).reshape(shape)
        comm = float(len(mask))
        server = clone_layers(ms)
        ft = finetune or PruneConfig(m_prime=int(param))
        finetune_server(
            server,
            feats[dataset.splits["train"]],
            dataset.y_tar[dataset.splits["train"]],
            ft,
        )
    else:
        feats, comm = obfuscated_features(model, split_index, dataset.x, mode, param, basis)
        server = ms

    target_err = _target_error(server, feats, dataset.y_tar, dataset.splits["test"])

    attack_err_runs = {}
    for attr in sorted(dataset.hidden):
        runs = []
        for adv_seed in adv_cfg.seeds:
            seed = int(np.random.SeedSequence([point_seed, adv_seed]).generate_state(1)[0])
            _, acc = train_adversary(
                model, dataset, attr, split_index, mode, param,
                cfg=adv_cfg, seed=seed, feats=feats,
            )
            runs.append((adv_seed, 1.0 - acc))
        attack_err_runs[attr] = runs
    attack_err = {a: float(np.mean([e for _, e in r])) for a, r in attack_err_runs.items()}
    return TradeoffPoint(
        split_index=split_index,
        mode=mode,
        param=float(param),
        target_err=target_err,
        attack_err=attack_err,
        attack_err_runs=attack_err_runs,
        comm_floats=comm,
    )


def _point_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _run_point(args):
    model, dataset, si, mode, param, adv_cfg, seed, finetune = args
    return evaluate_point(model, dataset, si, mode, param, adv_cfg, seed, finetune)


def sweep(model, dataset, split_indices, params, mode=MODE_TOPM, adv_cfg=None,
          master_seed=0, jobs=1, finetune=None):
    """Tradeoff points over the (split, parameter) grid.

    ``params`` is an m' grid for topm/prune or an epsilon grid for budget.
    Each point owns an RNG stream derived from (master_seed, point index),
    so serial and parallel runs produce identical results.
    """
    tasks = []
    for idx, (si, param) in enumerate(
        [(si, p) for si in split_indices for p in params]
    ):
        tasks.append(
            (model, dataset, si, mode, param, adv_cfg, _point_seed(master_seed, idx), finetune)
        )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_point, tasks))
    return [_run_point(t) for t in tasks]


def build_profile(model, dataset, split_indices, fractions) -> AccuracyProfile:
    """Mean target-accuracy drop on the validation split per (split, kept
    signal fraction), measured against the unobfuscated validation accuracy.
    """
    if not fractions:
        raise ValueError("empty fraction list")
    val = dataset.splits["val"]
    if val.size == 0:
        raise EmptySplit("empty validation split")
    rows = []
    for si in split_indices:
        basis = split_basis(model, si)
        m_eff = min(basis.m, basis.n)
        feats, _ = obfuscated_features(model, si, dataset.x, MODE_NONE)
        _, ms, _ = split(model, si)
        base_acc = accuracy(run_layers(ms, feats[val]), dataset.y_tar[val])
        for f in fractions:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"keep fraction {f} outside (0, 1]")
            kept = math.ceil(f * m_eff)
            obf, _ = obfuscated_features(model, si, dataset.x, MODE_TOPM, kept, basis)
            acc = accuracy(run_layers(ms, obf[val]), dataset.y_tar[val])
            rows.append(ProfileRow(split_index=si, keep_fraction=f, drop=base_acc - acc))
    return AccuracyProfile(rows=rows)


def write_csv(points, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for point in points:
            for row in point.as_rows():
                writer.writerow(row)


def write_json(points, path):
    payload = []
    for point in points:
        payload.extend(point.as_rows())
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
