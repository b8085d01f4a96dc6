"""Split model: an ordered layer stack partitioned into client/server parts.

A model is a flat layer list plus block starts; split index i (1-based) cuts
the stack at the start of block i, so split 1 makes the client an identity
and ships the raw input. Every block starts with a parameterized layer
(Conv2D or FullyConnected) whose weights define the obfuscation matrix W.
"""

import io
import json
import struct

import numpy as np

from .. import linalg
from ..errors import Incompatible, InvalidSplit, MagicMismatch, ShapeError
from .layers import (
    BatchNorm,
    Conv2D,
    FullyConnected,
    MaxPool2,
    ReLU,
    Softmax,
    conv_as_matrix,
    layer_from_descriptor,
)

CHECKPOINT_MAGIC = b"SOBF"
CHECKPOINT_VERSION = 1


class SplitModel:
    def __init__(self, layers, block_starts, input_shape, split_index=1):
        if not layers:
            raise InvalidSplit("model needs at least one layer")
        if not block_starts or block_starts[0] != 0 or list(block_starts) != sorted(
            set(block_starts)
        ):
            raise InvalidSplit(f"bad block starts {block_starts}")
        for start in block_starts:
            if not isinstance(layers[start], (Conv2D, FullyConnected)):
                raise InvalidSplit("every block must start with a Conv2D or FullyConnected")
        self.layers = list(layers)
        self.block_starts = list(block_starts)
        self.input_shape = tuple(input_shape)
        if not 1 <= split_index <= len(block_starts):
            raise InvalidSplit(f"split_index {split_index} outside 1..{len(block_starts)}")
        self.split_index = split_index

    @property
    def n_splits(self):
        return len(self.block_starts)

    def boundary_positions(self):
        """Map split index -> layer position where that block begins."""
        return {i + 1: start for i, start in enumerate(self.block_starts)}

    def shape_at_boundary(self, split_index):
        """Activation shape (without batch dim) entering the given block."""
        self._check_split(split_index)
        shape = self.input_shape
        for layer in self.layers[: self.block_starts[split_index - 1]]:
            shape = layer.out_shape(shape)
        return shape

    def _check_split(self, split_index):
        if not 1 <= split_index <= self.n_splits:
            raise InvalidSplit(f"split_index {split_index} outside 1..{self.n_splits}")

    def forward(self, x, train=False, collect_boundaries=False, removal=None):
        """Run the stack. ``removal=(split_index, kept_basis)`` projects the
        flattened activation at that boundary onto span(kept_basis), an
        (n, K) column-orthonormal matrix; the gradient is projected the same
        way on the way back. Returns probs, or (probs, boundaries) when
        collecting; boundary activations are pre-projection.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != {self.input_shape}")
        positions = {start: i + 1 for i, start in enumerate(self.block_starts)}
        boundaries = {}
        self._removal = removal if train else None
        for pos, layer in enumerate(self.layers):
            if pos in positions:
                si = positions[pos]
                if collect_boundaries:
                    boundaries[si] = x
                if removal is not None and removal[0] == si:
                    flat = x.reshape(x.shape[0], -1)
                    x = ((flat @ removal[1]) @ removal[1].T).reshape(x.shape)
            x = layer.forward(x, train=train)
        if collect_boundaries:
            return x, boundaries
        return x

    def backward(self, gprobs, boundary_grads=None):
        """Backpropagate; boundary_grads maps split index -> extra gradient
        (flattened) added where that boundary's activation was read.
        """
        boundary_grads = boundary_grads or {}
        removal = getattr(self, "_removal", None)
        positions = {start: i + 1 for i, start in enumerate(self.block_starts)}
        grad = gprobs
        for pos in range(len(self.layers) - 1, -1, -1):
            grad = self.layers[pos].backward(grad)
            if pos in positions:
                si = positions[pos]
                if removal is not None and removal[0] == si:
                    flat = grad.reshape(grad.shape[0], -1)
                    grad = ((flat @ removal[1]) @ removal[1].T).reshape(grad.shape)
                if si in boundary_grads:
                    grad = grad + boundary_grads[si].reshape(grad.shape)
        return grad

    def predict(self, x):
        return np.argmax(self.forward(x, train=False), axis=1)

    def parameters(self):
        """(layer, name, array) triples over trainable layers, declaration order."""
        out = []
        for layer in self.layers:
            if not layer.trainable:
                continue
            for name, arr in layer.params():
                out.append((layer, name, arr))
        return out

    def gradients(self):
        out = []
        for layer in self.layers:
            if not layer.trainable:
                continue
            out.extend(layer.grads())
        return out

    def descriptors(self):
        return [layer.descriptor() for layer in self.layers]

    def clone(self):
        """Deep structural copy with identical parameter values."""
        model = SplitModel(
            [layer_from_descriptor(d) for d in self.descriptors()],
            self.block_starts,
            self.input_shape,
            self.split_index,
        )
        for src, dst in zip(self.layers, model.layers):
            _copy_layer_state(src, dst)
        return model


def _copy_layer_state(src, dst):
    for attr in ("w", "b", "gamma", "beta", "running_mean", "running_var"):
        if hasattr(src, attr):
            setattr(dst, attr, getattr(src, attr).copy())
    dst.trainable = src.trainable


def clone_layers(layers):
    """Structural copies of a layer stack with identical parameter values."""
    fresh = [layer_from_descriptor(layer.descriptor()) for layer in layers]
    for src, dst in zip(layers, fresh):
        _copy_layer_state(src, dst)
    return fresh


def split(model: SplitModel, split_index: int):
    """(client layers, server layers, W) at the given split.

    W is the first server layer's weight matrix: the FC weight directly, or
    the convolution lowered to its flattened linear map.
    """
    model._check_split(split_index)
    cut = model.block_starts[split_index - 1]
    mc = model.layers[:cut]
    ms = model.layers[cut:]
    first = ms[0]
    if isinstance(first, FullyConnected):
        w = first.w.copy()
    else:
        w = conv_as_matrix(first, model.shape_at_boundary(split_index))
    return mc, ms, w


def split_basis(model: SplitModel, split_index: int) -> linalg.SvdBasis:
    """SVD basis of the first server layer's weight matrix at a split."""
    _, _, w = split(model, split_index)
    return linalg.svd(w)


def run_layers(layers, x, train=False):
    x = np.asarray(x, dtype=np.float64)
    for layer in layers:
        x = layer.forward(x, train=train)
    return x


def table_model(input_shape, n_classes, rng, conv_channels=(16, 32, 64), fc_widths=(128, 64)):
    """The six-block convolutional architecture: three conv blocks
    (conv-relu-pool-batchnorm), two dense blocks (fc-relu-batchnorm), and the
    classifier head (fc-softmax). Defaults follow the reference stack;
    smaller widths keep unit tests fast.
    """
    c, h, w = input_shape
    layers = []
    block_starts = []
    shape = (c, h, w)
    for out_ch in conv_channels:
        block_starts.append(len(layers))
        layers.append(Conv2D(shape[0], out_ch, rng))
        layers.append(ReLU())
        layers.append(MaxPool2())
        layers.append(BatchNorm(out_ch))
        shape = (out_ch, shape[1] // 2, shape[2] // 2)
    flat = int(np.prod(shape))
    for width in fc_widths:
        block_starts.append(len(layers))
        layers.append(FullyConnected(flat, width, rng))
        layers.append(ReLU())
        layers.append(BatchNorm(width))
        flat = width
    block_starts.append(len(layers))
    layers.append(FullyConnected(flat, n_classes, rng))
    layers.append(Softmax())
    return SplitModel(layers, block_starts, input_shape)


def mlp_model(input_dim, widths, n_classes, rng):
    """Dense analogue of the table stack: (fc-relu-batchnorm)* + fc-softmax.
    One split point per block, same as the convolutional variant.
    """
    layers = []
    block_starts = []
    flat = input_dim
    for width in widths:
        block_starts.append(len(layers))
        layers.append(FullyConnected(flat, width, rng))
        layers.append(ReLU())
        layers.append(BatchNorm(width))
        flat = width
    block_starts.append(len(layers))
    layers.append(FullyConnected(flat, n_classes, rng))
    layers.append(Softmax())
    return SplitModel(layers, block_starts, (input_dim,))


def _param_arrays(model):
    """All persisted arrays in declaration order (params + BN statistics)."""
    out = []
    for layer in model.layers:
        for _, arr in layer.params():
            out.append(arr)
        if isinstance(layer, BatchNorm):
            out.append(layer.running_mean)
            out.append(layer.running_var)
    return out


def save_checkpoint(model: SplitModel, path, seed=None, extra=None):
    header = {
        "layers": model.descriptors(),
        "block_starts": model.block_starts,
        "input_shape": list(model.input_shape),
        "split_index": model.split_index,
        "trainable": [layer.trainable for layer in model.layers],
        "shapes": [list(a.shape) for a in _param_arrays(model)],
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in _param_arrays(model):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatch(f"not a checkpoint: magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != CHECKPOINT_VERSION:
        raise Incompatible(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<I", data[6:10])
    header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    model = SplitModel(
        [layer_from_descriptor(d) for d in header["layers"]],
        header["block_starts"],
        tuple(header["input_shape"]),
        header["split_index"],
    )
    for layer, flag in zip(model.layers, header["trainable"]):
        layer.trainable = flag
    arrays = _param_arrays(model)
    if len(arrays) != len(header["shapes"]):
        raise Incompatible("checkpoint parameter count mismatch")
    off = 10 + hlen
    for arr, shape in zip(arrays, header["shapes"]):
        if list(arr.shape) != shape:
            raise Incompatible(f"checkpoint shape {shape} != model {list(arr.shape)}")
        nbytes = arr.size * 8
        if off + nbytes > len(data):
            raise Incompatible("checkpoint truncated")
        arr[...] = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(arr.shape)
        off += nbytes
    if off != len(data):
        raise Incompatible("trailing bytes in checkpoint")
    return model, header
