"""Stateful layers with explicit forward/backward passes.

Each layer owns a ``params`` dict and a parallel ``grads`` dict. ``forward``
caches what ``backward`` needs; ``backward`` accumulates parameter gradients
and returns the gradient w.r.t. the layer input. All inputs carry a leading
batch axis.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DimensionError
from .tensor import (
    DEFAULT_DTYPE,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    glorot_uniform,
    sigmoid,
    softmax_axis,
    softmax_backward,
)

ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax", "none")


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        return softmax_axis(x, -1)
    if kind == "none":
        return x
    raise ArgumentError(f"unknown activation {kind!r}")


def activation_backward(y: np.ndarray, upstream: np.ndarray, kind: str) -> np.ndarray:
    """Backward pass expressed through the activation *output* ``y``."""
    if kind == "relu":
        return upstream * (y > 0)
    if kind == "sigmoid":
        return upstream * y * (1 - y)
    if kind == "tanh":
        return upstream * (1 - y * y)
    if kind == "softmax":
        return softmax_backward(y, upstream, -1)
    if kind == "none":
        return upstream
    raise ArgumentError(f"unknown activation {kind!r}")


class Layer:
    """Base layer: no parameters, identity shape."""

    kind = "Layer"
    spatial = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, key: str, value: np.ndarray) -> None:
        if key in self.params:
            raise ArgumentError(f"duplicate parameter {key!r} in layer {self.name}")
        self.params[key] = value
        self.grads[key] = np.zeros_like(value)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def cast(self, dtype) -> None:
        for key in self.params:
            self.params[key] = self.params[key].astype(dtype)
            self.grads[key] = np.zeros_like(self.params[key])

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


class Activation(Layer):
    kind = "Activation"

    def __init__(self, name: str, fn: str):
        super().__init__(name)
        if fn not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        y = activation(x, self.fn)
        self._cache = y
        return y

    def backward(self, upstream):
        return activation_backward(self._cache, upstream, self.fn)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, name: str, din: int, dout: int, activation: str = "none",
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        if activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {activation!r}")
        self.din, self.dout, self.activation = din, dout, activation
        if rng is None:
            w = np.zeros((din, dout), dtype=dtype)
        else:
            w = glorot_uniform(rng, (din, dout), din, dout, dtype)
        self._add_param("kernel", w)
        self._add_param("bias", np.zeros(dout, dtype=dtype))

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.din,):
            raise DimensionError(f"{self.name}: expected input ({self.din},), got {tuple(input_shape)}")
        return (self.dout,)

    def pre_activation(self, x):
        if x.shape[-1] != self.din:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != {self.din}")
        return x @ self.params["kernel"] + self.params["bias"]

    def forward(self, x):
        y = activation(self.pre_activation(x), self.activation)
        self._cache = (x, y)
        return y

    def backward(self, upstream):
        x, y = self._cache
        gz = activation_backward(y, upstream, self.activation)
        return self.backward_pre_activation(gz)

    def backward_pre_activation(self, gz):
        """Backward pass starting from the gradient w.r.t. ``xW + b``."""
        x, _ = self._cache
        self.grads["kernel"] += x.T @ gz
        self.grads["bias"] += gz.sum(axis=0)
        return gz @ self.params["kernel"].T


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, activation_kind: str = "none") -> np.ndarray:
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense shapes disagree: x {x.shape}, W {weights.shape}, b {bias.shape}")
    return activation(x @ weights + bias, activation_kind)


class Conv2D(Layer):
    kind = "Conv2D"
    spatial = True

    def __init__(self, name: str, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: str = "valid", activation: str = "none",
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        if stride < 1:
            raise ArgumentError(f"stride must be positive, got {stride}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.activation = stride, padding, activation
        shape = (kernel, kernel, cin, cout)
        if rng is None:
            k = np.zeros(shape, dtype=dtype)
        else:
            k = glorot_uniform(rng, shape, kernel * kernel * cin, kernel * kernel * cout, dtype)
        self._add_param("kernel", k)
        self._add_param("bias", np.zeros(cout, dtype=dtype))

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[2] != self.cin:
            raise DimensionError(f"{self.name}: expected (H, W, {self.cin}), got {tuple(input_shape)}")
        h, w, _ = input_shape
        return (conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding), self.cout)

    def forward(self, x):
        z = conv2d_forward(x, self.params["kernel"], self.params["bias"], self.stride, self.padding)
        y = activation(z, self.activation)
        self._cache = (x, y)
        return y

    def backward(self, upstream):
        x, y = self._cache
        gz = activation_backward(y, upstream, self.activation)
        gx, gk, gb = conv2d_backward(x, self.params["kernel"], gz, self.stride, self.padding)
        self.grads["kernel"] += gk
        self.grads["bias"] += gb
        return gx


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, name: str, target: tuple):
        super().__init__(name)
        self.target = tuple(target)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.target)):
            raise DimensionError(f"{self.name}: cannot reshape {tuple(input_shape)} to {self.target}")
        return self.target

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, upstream):
        return upstream.reshape(self._cache)


class GlobalAveragePool2D(Layer):
    kind = "GlobalAveragePooling2D"

    def output_shape(self, input_shape):
        return (input_shape[-1],)

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, upstream):
        b, h, w, c = self._cache
        return np.broadcast_to(upstream[:, None, None, :] / (h * w), (b, h, w, c)).copy()


def _gates(z: np.ndarray, units: int):
    # gate order along the last axis: input, forget, candidate, output
    i = sigmoid(z[..., :units])
    f = sigmoid(z[..., units:2 * units])
    g = np.tanh(z[..., 2 * units:3 * units])
    o = sigmoid(z[..., 3 * units:])
    return i, f, g, o


def _gate_grads(gh, gc, i, f, g, o, c_prev, tanh_c):
    """Gradients of one LSTM cell step w.r.t. pre-activations and previous cell."""
    go = gh * tanh_c
    gc = gc + gh * o * (1 - tanh_c * tanh_c)
    gi = gc * g
    gf = gc * c_prev
    gg = gc * i
    gz = np.concatenate([gi * i * (1 - i), gf * f * (1 - f), gg * (1 - g * g), go * o * (1 - o)], axis=-1)
    return gz, gc * f


class LSTM(Layer):
    """Sequence-to-vector LSTM returning the final hidden state."""

    kind = "LSTM"

    def __init__(self, name: str, din: int, units: int, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.din, self.units = din, units
        if rng is None:
            k = np.zeros((din, 4 * units), dtype=dtype)
            r = np.zeros((units, 4 * units), dtype=dtype)
            b = np.zeros(4 * units, dtype=dtype)
        else:
            k = glorot_uniform(rng, (din, 4 * units), din, 4 * units, dtype)
            r = glorot_uniform(rng, (units, 4 * units), units, 4 * units, dtype)
            b = np.zeros(4 * units, dtype=dtype)
            b[units:2 * units] = 1.0
        self._add_param("kernel", k)
        self._add_param("recurrent_kernel", r)
        self._add_param("bias", b)

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.din:
            raise DimensionError(f"{self.name}: expected (T, {self.din}), got {tuple(input_shape)}")
        return (self.units,)

    def forward(self, seq):
        if seq.ndim != 3 or seq.shape[2] != self.din:
            raise DimensionError(f"{self.name}: expected [B, T, {self.din}], got {seq.shape}")
        if seq.shape[1] < 1:
            raise ArgumentError("LSTM needs at least one timestep")
        bsz, steps, _ = seq.shape
        u = self.units
        h = np.zeros((bsz, u), dtype=seq.dtype)
        c = np.zeros((bsz, u), dtype=seq.dtype)
        k, r, b = self.params["kernel"], self.params["recurrent_kernel"], self.params["bias"]
        cache = []
        for t in range(steps):
            z = seq[:, t] @ k + h @ r + b
            i, f, g, o = _gates(z, u)
            c_new = f * c + i * g
            tanh_c = np.tanh(c_new)
            cache.append((h, c, i, f, g, o, tanh_c))
            h = o * tanh_c
            c = c_new
        self._cache = (seq, cache)
        return h

    def backward(self, upstream):
        seq, cache = self._cache
        k, r = self.params["kernel"], self.params["recurrent_kernel"]
        gseq = np.zeros_like(seq)
        gh = upstream
        gc = np.zeros_like(upstream)
        for t in reversed(range(seq.shape[1])):
            h_prev, c_prev, i, f, g, o, tanh_c = cache[t]
            gz, gc = _gate_grads(gh, gc, i, f, g, o, c_prev, tanh_c)
            self.grads["kernel"] += seq[:, t].T @ gz
            self.grads["recurrent_kernel"] += h_prev.T @ gz
            self.grads["bias"] += gz.sum(axis=0)
            gseq[:, t] = gz @ k.T
            gh = gz @ r.T
        return gseq


def lstm_forward(sequence: np.ndarray, layer: LSTM) -> np.ndarray:
    """Unbatched convenience wrapper: ``[T, Din] -> [units]``."""
    if sequence.ndim != 2 or sequence.shape[0] == 0:
        raise ArgumentError(f"sequence must be [T>=1, Din], got {sequence.shape}")
    return layer.forward(sequence[None])[0]


class ConvLSTM2D(Layer):
    """Convolutional LSTM over ``[B, T, H, W, Cin]`` returning the last hidden map.

    All four gates come from one same-padded convolution over the channel
    concatenation of the current frame and the previous hidden state.
    """

    kind = "ConvLSTM2D"
    spatial = True

    def __init__(self, name: str, cin: int, filters: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.cin, self.filters, self.kernel = cin, filters, kernel
        shape = (kernel, kernel, cin + filters, 4 * filters)
        if rng is None:
            k = np.zeros(shape, dtype=dtype)
            b = np.zeros(4 * filters, dtype=dtype)
        else:
            k = glorot_uniform(rng, shape, kernel * kernel * (cin + filters), kernel * kernel * 4 * filters, dtype)
            b = np.zeros(4 * filters, dtype=dtype)
            b[filters:2 * filters] = 1.0
        self._add_param("kernel", k)
        self._add_param("bias", b)

    def output_shape(self, input_shape):
        if len(input_shape) != 4 or input_shape[3] != self.cin:
            raise DimensionError(f"{self.name}: expected (T, H, W, {self.cin}), got {tuple(input_shape)}")
        _, h, w, _ = input_shape
        return (h, w, self.filters)

    def forward(self, seq):
        if seq.ndim != 5 or seq.shape[4] != self.cin:
            raise DimensionError(f"{self.name}: expected [B, T, H, W, {self.cin}], got {seq.shape}")
        bsz, steps, hgt, wid, _ = seq.shape
        if steps < 1:
            raise ArgumentError("ConvLSTM2D needs at least one timestep")
        nf = self.filters
        h = np.zeros((bsz, hgt, wid, nf), dtype=seq.dtype)
        c = np.zeros_like(h)
        cache = []
        for t in range(steps):
            inp = np.concatenate([seq[:, t], h], axis=-1)
            z = conv2d_forward(inp, self.params["kernel"], self.params["bias"], 1, "same")
            i, f, g, o = _gates(z, nf)
            c_new = f * c + i * g
            tanh_c = np.tanh(c_new)
            cache.append((inp, c, i, f, g, o, tanh_c))
            h = o * tanh_c
            c = c_new
        self._cache = (seq.shape, cache)
        return h

    def backward(self, upstream):
        shape, cache = self._cache
        gseq = np.zeros(shape, dtype=upstream.dtype)
        gh = upstream
        gc = np.zeros_like(upstream)
        cin = self.cin
        for t in reversed(range(shape[1])):
            inp, c_prev, i, f, g, o, tanh_c = cache[t]
            gz, gc = _gate_grads(gh, gc, i, f, g, o, c_prev, tanh_c)
            ginp, gk, gb = conv2d_backward(inp, self.params["kernel"], gz, 1, "same")
            self.grads["kernel"] += gk
            self.grads["bias"] += gb
            gseq[:, t] = ginp[..., :cin]
            gh = ginp[..., cin:]
        return gseq
