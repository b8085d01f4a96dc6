"""Layer kinds for the split network: Conv 3x3, ReLU, MaxPool 2x2, BatchNorm,
FullyConnected, Softmax. Forward caches what backward needs (train mode only);
eval-mode forward is pure.
"""

import numpy as np

from ..errors import BackwardBeforeForward, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: no parameters, identity shape."""

    kind = "base"
    trainable = True

    def __init__(self):
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{self.kind}: no train-mode forward cached")
        cache = self._cache
        self._cache = None
        return cache

    def params(self):
        """List of (name, array) learnable parameters, declaration order."""
        return []

    def grads(self):
        """Gradient arrays aligned with params()."""
        return []

    def out_shape(self, in_shape):
        return in_shape

    def descriptor(self):
        return {"kind": self.kind}


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        if rng is None:
            rng = np.random.default_rng(0)
        self.w = kaiming_uniform(rng, (out_channels, in_channels, 3, 3), in_channels * 9)
        self.b = np.zeros(out_channels)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects (N,{self.in_channels},H,W), got {x.shape}")
        n, _, h, w = x.shape
        xp = np.zeros((n, self.in_channels, h + 2, w + 2))
        xp[:, :, 1 : h + 1, 1 : w + 1] = x
        y = np.zeros((n, self.out_channels, h, w))
        for ky in range(3):
            for kx in range(3):
                y += np.einsum(
                    "nchw,oc->nohw", xp[:, :, ky : ky + h, kx : kx + w], self.w[:, :, ky, kx]
                )
        y += self.b[None, :, None, None]
        if train:
            self._cache = xp
        return y

    def backward(self, gy):
        xp = self._take_cache()
        n, _, hp, wp = xp.shape
        h, w = hp - 2, wp - 2
        self.gb = gy.sum(axis=(0, 2, 3))
        self.gw = np.zeros_like(self.w)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                patch = xp[:, :, ky : ky + h, kx : kx + w]
                self.gw[:, :, ky, kx] = np.einsum("nohw,nchw->oc", gy, patch)
                gxp[:, :, ky : ky + h, kx : kx + w] += np.einsum(
                    "nohw,oc->nchw", gy, self.w[:, :, ky, kx]
                )
        return gxp[:, :, 1 : h + 1, 1 : w + 1]

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return [self.gw, self.gb]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv built for {self.in_channels} channels, got {c}")
        return (self.out_channels, h, w)

    def descriptor(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, gy):
        mask = self._take_cache()
        return gy * mask


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; requires even spatial dims."""

    kind = "maxpool"

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"maxpool expects (N,C,H,W), got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = windows.reshape(n, c, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (arg, x.shape)
        return y

    def backward(self, gy):
        arg, shape = self._take_cache()
        n, c, h, w = shape
        gflat = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gflat, arg[..., None], gy[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return gx.reshape(n, c, h, w)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)


class BatchNorm(Layer):
    """Batch normalization over (N,) or (N,H,W) per feature/channel."""

    kind = "batchnorm"

    def __init__(self, num_features):
        super().__init__()
        self.num_features = num_features
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train=False):
        axes, bshape = self._axes_and_shape(x)
        if x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm built for {self.num_features} features, got {x.shape}")
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        if train:
            self._cache = (xhat, inv_std, axes, bshape, x.shape)
        return self.gamma.reshape(bshape) * xhat + self.beta.reshape(bshape)

    def backward(self, gy):
        xhat, inv_std, axes, bshape, _ = self._take_cache()
        self.ggamma = (gy * xhat).sum(axis=axes)
        self.gbeta = gy.sum(axis=axes)
        gxhat = gy * self.gamma.reshape(bshape)
        return (
            gxhat
            - gxhat.mean(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).mean(axis=axes).reshape(bshape)
        ) * inv_std.reshape(bshape)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def grads(self):
        return [self.ggamma, self.gbeta]

    def descriptor(self):
        return {"kind": self.kind, "num_features": self.num_features}


class FullyConnected(Layer):
    """Dense layer; flattens non-batch dims of its input."""

    kind = "fc"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            rng = np.random.default_rng(0)
        self.w = kaiming_uniform(rng, (out_features, in_features), in_features)
        self.b = np.zeros(out_features)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x, train=False):
        orig_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"fc expects {self.in_features} features, got {flat.shape[1]}")
        if train:
            self._cache = (flat, orig_shape)
        return flat @ self.w.T + self.b

    def backward(self, gy):
        flat, orig_shape = self._take_cache()
        self.gw = gy.T @ flat
        self.gb = gy.sum(axis=0)
        return (gy @ self.w).reshape(orig_shape)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return [self.gw, self.gb]

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.in_features:
            raise ShapeError(f"fc built for {self.in_features} inputs, got {flat}")
        return (self.out_features,)

    def descriptor(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
        }


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        if train:
            self._cache = y
        return y

    def backward(self, gy):
        y = self._take_cache()
        return y * (gy - (gy * y).sum(axis=1, keepdims=True))


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2, BatchNorm, FullyConnected, Softmax)
}


def layer_from_descriptor(desc):
    kind = desc["kind"]
    if kind == "conv":
        return Conv2D(desc["in_channels"], desc["out_channels"])
    if kind == "batchnorm":
        return BatchNorm(desc["num_features"])
    if kind == "fc":
        return FullyConnected(desc["in_features"], desc["out_features"])
    if kind in ("relu", "maxpool", "softmax"):
        return LAYER_KINDS[kind]()
    raise ShapeError(f"unknown layer kind {kind!r}")


def conv_as_matrix(conv: Conv2D, in_shape) -> np.ndarray:
    """Lower a 3x3/s1/p1 convolution to the explicit linear map between
    flattened input (c_in*H*W) and flattened output (c_out*H*W).

    Bias is excluded: it cancels in output-distortion differences.
    """
    c, h, w = in_shape
    if c != conv.in_channels:
        raise ShapeError(f"conv expects {conv.in_channels} channels, got {c}")
    o = conv.out_channels
    mat = np.zeros((o * h * w, c * h * w))
    for ky in range(3):
        dy = ky - 1
        for kx in range(3):
            dx = kx - 1
            for oy in range(h):
                iy = oy + dy
                if not 0 <= iy < h:
                    continue
                xs_lo = max(0, -dx)
                xs_hi = min(w, w - dx)
                if xs_lo >= xs_hi:
                    continue
                ox = np.arange(xs_lo, xs_hi)
                ix = ox + dx
                for oc in range(o):
                    rows = oc * h * w + oy * w + ox
                    for ic in range(c):
                        cols = ic * h * w + iy * w + ix
                        mat[rows, cols] = conv.w[oc, ic, ky, kx]
    return mat
