"""Layer primitives with explicit forward and backward passes.

Every layer is stateless: ``forward(params, x)`` returns ``(out, cache)`` and
``backward(params, cache, dout)`` returns ``(dx, grads)``. Activations use
the ``(batch, channels, height, width)`` layout.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    kind = ""

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape):
        return in_shape

    def fan_in(self):
        return None

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dout):
        raise NotImplementedError


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero 'same' padding."""

    kind = "conv"
    k = 3

    def __init__(self, in_channels, out_channels):
        self.in_channels = in_channels
        self.out_channels = out_channels

    def param_shapes(self):
        return {"weight": (self.out_channels, self.in_channels, self.k, self.k),
                "bias": (self.out_channels,)}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        return (self.out_channels, h, w)

    def fan_in(self):
        return self.in_channels * self.k * self.k

    def forward(self, params, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * self.k * self.k)
        wmat = params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + params["bias"]
        out = out.reshape(b, h, w, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols)

    def backward(self, params, cache, dout):
        (b, c, h, w), cols = cache
        k = self.k
        d2 = dout.transpose(0, 2, 3, 1).reshape(b * h * w, self.out_channels)
        wmat = params["weight"].reshape(self.out_channels, -1)
        grads = {"weight": (d2.T @ cols).reshape(params["weight"].shape),
                 "bias": d2.sum(axis=0)}
        dcols = (d2 @ wmat).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], grads


class MaxPool2(Layer):
    kind = "pool"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"2x2 pooling needs even spatial size, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, params, x):
        b, c, h, w = x.shape
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // 2, w // 2, 4)
        # ties go to the first maximum, which keeps the gradient well defined
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, params, cache, dout):
        (b, c, h, w), idx = cache
        dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(b, c, h, w), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dout):
        return dout * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), {}


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features),
                "bias": (self.out_features,)}

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"fully-connected layer expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def fan_in(self):
        return self.in_features

    def forward(self, params, x):
        return x @ params["weight"].T + params["bias"], x

    def backward(self, params, cache, dout):
        x = cache
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ params["weight"], grads


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, params, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        # keep the output strictly inside (0, 1) even when exp saturates
        lo = np.finfo(x.dtype).tiny
        hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        out = np.clip(out, lo, hi)
        return out, out

    def backward(self, params, cache, dout):
        s = cache
        return dout * s * (1.0 - s), {}


LAYER_TYPES = {
    "conv": Conv2D,
    "pool": MaxPool2,
    "relu": ReLU,
    "flatten": Flatten,
    "fc": Dense,
    "sigmoid": Sigmoid,
}
