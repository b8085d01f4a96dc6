"""Synthetic datasets with controllable target/hidden structure, plus a small
binary container format for shipping real image subsets.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MagicMismatch, SpecError

SPLT_MAGIC = 0x53504C54  # "SPLT"

COUPLING_ORTHOGONAL = "orthogonal"
COUPLING_CORRELATED = "correlated"
COUPLING_NULLSPACE = "nullspace"

# Sample counts for the writer-id image-subset protocol.
EMNIST_SUBSET = {
    "hidden_classes": 100,
    "per_class": 130,
    "train": 10000,
    "val": 1500,
    "test": 1500,
}


@dataclass
class HiddenSpec:
    classes: int
    coupling: str = COUPLING_ORTHOGONAL
    rho: float = 0.0

    def __post_init__(self):
        if self.classes < 2:
            raise SpecError("hidden attribute needs >= 2 classes")
        if self.coupling not in (COUPLING_ORTHOGONAL, COUPLING_CORRELATED, COUPLING_NULLSPACE):
            raise SpecError(f"unknown coupling {self.coupling!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise SpecError("rho must be in [0, 1]")


@dataclass
class SynthSpec:
    n_examples: int
    input_dim: int
    target_classes: int
    hidden: dict
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.target_classes < 2:
            raise SpecError("target needs >= 2 classes")
        if self.noise_std < 0:
            raise SpecError("noise_std must be >= 0")


@dataclass
class LabeledDataset:
    x: np.ndarray
    y_tar: np.ndarray
    n_target_classes: int
    hidden: dict
    hidden_classes: dict
    splits: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y_tar.shape[0] != n:
            raise LengthMismatch("target labels do not match example count")
        if self.y_tar.min(initial=0) < 0 or self.y_tar.max(initial=0) >= self.n_target_classes:
            raise SpecError("target label out of range")
        for name, labels in self.hidden.items():
            if labels.shape[0] != n:
                raise LengthMismatch(f"hidden labels {name!r} do not match example count")
            if labels.max(initial=0) >= self.hidden_classes[name]:
                raise SpecError(f"hidden label {name!r} out of range")
        seen = set()
        for name, idx in self.splits.items():
            s = set(int(i) for i in idx)
            if seen & s:
                raise SpecError(f"split {name!r} overlaps another split")
            seen |= s

    def subset_x(self, split):
        return self.x[self.splits[split]]

    def subset_y(self, split):
        return self.y_tar[self.splits[split]]

    def subset_hidden(self, name, split):
        return self.hidden[name][self.splits[split]]


def _default_splits(n, rng):
    order = rng.permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def gen_synthetic(spec: SynthSpec) -> LabeledDataset:
    """x = B_tar e(y_tar) + sum_attr B_attr e(y_attr) + noise.

    All direction frames come from one orthonormal basis so attribute
    subspaces never overlap. Couplings: orthogonal (independent labels),
    correlated (hidden equals target with prob rho, else uniform), and
    nullspace (a planted matrix W* is returned whose row space carries the
    target directions and whose null space carries the hidden directions
    exactly).
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    dims_needed = spec.target_classes + sum(h.classes for h in spec.hidden.values())
    if dims_needed > d:
        raise SpecError(f"input_dim {d} too small for {dims_needed} attribute directions")

    frame, _ = np.linalg.qr(rng.normal(size=(d, dims_needed)))
    b_tar = frame[:, : spec.target_classes]
    offset = spec.target_classes
    b_hid = {}
    for name, h in spec.hidden.items():
        b_hid[name] = frame[:, offset : offset + h.classes]
        offset += h.classes

    n = spec.n_examples
    y_tar = rng.integers(0, spec.target_classes, n)
    hidden = {}
    for name, h in spec.hidden.items():
        if h.coupling == COUPLING_CORRELATED:
            labels = rng.integers(0, h.classes, n)
            copy_mask = rng.random(n) < h.rho
            labels[copy_mask] = np.mod(y_tar[copy_mask], h.classes)
            hidden[name] = labels
        else:
            hidden[name] = rng.integers(0, h.classes, n)

    x = b_tar[:, y_tar].T.copy()
    for name in spec.hidden:
        x += b_hid[name][:, hidden[name]].T
    if spec.noise_std > 0:
        x += spec.noise_std * rng.normal(size=x.shape)

    meta = {"b_tar": b_tar, "b_hid": b_hid}
    null_names = [name for name, h in spec.hidden.items() if h.coupling == COUPLING_NULLSPACE]
    if null_names:
        null_cols = np.concatenate([b_hid[name] for name in null_names], axis=1)
        # Row space of W* = orthogonal complement of the planted null columns;
        # it contains the target (and non-null hidden) directions by design.
        q_signal = _orthogonal_complement(null_cols, d)
        mix = rng.normal(size=(q_signal.shape[1], q_signal.shape[1]))
        w_star = mix @ q_signal.T
        meta["w_star"] = w_star
        meta["signal_frame"] = q_signal

    return LabeledDataset(
        x=x,
        y_tar=y_tar,
        n_target_classes=spec.target_classes,
        hidden=hidden,
        hidden_classes={name: h.classes for name, h in spec.hidden.items()},
        splits=_default_splits(n, rng),
        meta=meta,
    )


def _orthogonal_complement(cols, dim):
    """Orthonormal basis of the complement of span(cols) in R^dim."""
    u, _, _ = np.linalg.svd(cols, full_matrices=True)
    return u[:, cols.shape[1] :]


def _write_splt(path, arr):
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", SPLT_MAGIC))
        fh.write(struct.pack("<B", arr.ndim))
        for s in arr.shape:
            fh.write(struct.pack("<I", s))
        fh.write(arr.tobytes())


def _read_splt(path, dtype):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5 or struct.unpack("<I", data[:4])[0] != SPLT_MAGIC:
        raise MagicMismatch(f"{path}: bad magic")
    ndim = data[4]
    off = 5
    shape = []
    for _ in range(ndim):
        if off + 4 > len(data):
            raise LengthMismatch(f"{path}: truncated shape header")
        shape.append(struct.unpack("<I", data[off : off + 4])[0])
        off += 4
    dt = np.dtype(dtype)
    expected = int(np.prod(shape)) * dt.itemsize
    if len(data) - off != expected:
        raise LengthMismatch(f"{path}: payload {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data[off:], dtype=dt).reshape(shape).copy()


def save_idx(dataset: LabeledDataset, directory):
    """Write the dataset as SPLT tensor files plus a metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if dataset.x.size == 0:
        raise SpecError("refusing to save an empty dataset")
    x = dataset.x
    x_dtype = "uint8" if x.dtype == np.uint8 else "<f8"
    _write_splt(directory / "x.splt", x.astype(x_dtype, copy=False))
    _write_splt(directory / "y_tar.splt", dataset.y_tar.astype("<u4"))
    for name, labels in dataset.hidden.items():
        _write_splt(directory / f"hidden_{name}.splt", labels.astype("<u4"))
    meta = {
        "n_target_classes": dataset.n_target_classes,
        "hidden_classes": dataset.hidden_classes,
        "attributes": sorted(dataset.hidden),
        "x_dtype": x_dtype,
        "splits": {k: [int(i) for i in v] for k, v in dataset.splits.items()},
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_idx(directory) -> LabeledDataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    x = _read_splt(directory / "x.splt", meta["x_dtype"])
    y_tar = _read_splt(directory / "y_tar.splt", "<u4").astype(np.int64)
    if x.shape[0] == 0:
        raise SpecError("empty dataset")
    hidden = {}
    for name in meta["attributes"]:
        labels = _read_splt(directory / f"hidden_{name}.splt", "<u4").astype(np.int64)
        if labels.shape[0] != x.shape[0]:
            raise LengthMismatch(f"hidden {name!r}: {labels.shape[0]} records vs {x.shape[0]}")
        hidden[name] = labels
    if y_tar.shape[0] != x.shape[0]:
        raise LengthMismatch(f"target labels: {y_tar.shape[0]} records vs {x.shape[0]}")
    return LabeledDataset(
        x=x if x.dtype == np.uint8 else x.astype(np.float64),
        y_tar=y_tar,
        n_target_classes=meta["n_target_classes"],
        hidden=hidden,
        hidden_classes={k: int(v) for k, v in meta["hidden_classes"].items()},
        splits={k: np.asarray(v, dtype=np.int64) for k, v in meta["splits"].items()},
    )
