"""Primary capsules, squash, and the routing-by-agreement capsule layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError
from .layers import Conv2D, Layer, Reshape
from .tensor import DEFAULT_DTYPE, glorot_uniform, softmax_axis, softmax_backward

SQUASH_EPS = 1e-7


def squash(s: np.ndarray, eps: float = SQUASH_EPS) -> np.ndarray:
    """Shrink each vector along the last axis to a length in [0, 1), keeping its direction."""
    sq = np.sum(s * s, axis=-1, keepdims=True)
    norm = np.sqrt(sq)
    return (sq / (1.0 + sq)) * (s / (norm + eps))


def squash_backward(s: np.ndarray, upstream: np.ndarray, eps: float = SQUASH_EPS) -> np.ndarray:
    # v = f(n) s with f(n) = n^2 / ((1+n^2)(n+eps)); J = f I + (f'(n)/n) s s^T.
    # f'(n)/n is finite at n = 0, so no special case is needed.
    sq = np.sum(s * s, axis=-1, keepdims=True)
    n = np.sqrt(sq)
    f = sq / ((1.0 + sq) * (n + eps))
    fprime_over_n = 2.0 / ((1.0 + sq) ** 2 * (n + eps)) - n / ((1.0 + sq) * (n + eps) ** 2)
    return f * upstream + fprime_over_n * np.sum(s * upstream, axis=-1, keepdims=True) * s


class Squash(Layer):
    kind = "Lambda"

    def forward(self, x):
        self._cache = x
        return squash(x)

    def backward(self, upstream):
        return squash_backward(self._cache, upstream)


@dataclass
class RoutingState:
    """Per-iteration routing logits and coupling coefficients.

    ``logits[t]`` and ``couplings[t]`` are the values used in iteration ``t``;
    both have shape ``[B, Nin, Nout]`` (or ``[Nin, Nout]`` for unbatched calls).
    """

    logits: list = field(default_factory=list)
    couplings: list = field(default_factory=list)
    iteration: int = 0


def _routing_forward(u_hat: np.ndarray, iterations: int):
    bsz, nin, nout, _ = u_hat.shape
    b = np.zeros((bsz, nin, nout), dtype=u_hat.dtype)
    state = RoutingState()
    s_list, v_list = [], []
    v = None
    for t in range(iterations):
        c = softmax_axis(b, axis=2)
        s = np.einsum("bij,bijd->bjd", c, u_hat)
        v = squash(s)
        state.logits.append(b)
        state.couplings.append(c)
        state.iteration = t + 1
        s_list.append(s)
        v_list.append(v)
        if t < iterations - 1:
            b = b + np.einsum("bijd,bjd->bij", u_hat, v)
    return v, state, s_list, v_list


def routing_by_agreement(u_hat: np.ndarray, iterations: int = 3):
    """Dynamic routing over predictions ``u_hat[..., Nin, Nout, Dout]``.

    Returns ``(v, state)`` where ``v`` has shape ``[..., Nout, Dout]``.
    """
    if iterations < 1:
        raise ArgumentError(f"routing needs at least one iteration, got {iterations}")
    if u_hat.ndim not in (3, 4):
        raise DimensionError(f"predictions must be [Nin,Nout,D] or [B,Nin,Nout,D], got {u_hat.shape}")
    batched = u_hat.ndim == 4
    v, state, _, _ = _routing_forward(u_hat if batched else u_hat[None], iterations)
    if not batched:
        state.logits = [x[0] for x in state.logits]
        state.couplings = [x[0] for x in state.couplings]
        v = v[0]
    return v, state


def routing_backward(u_hat: np.ndarray, state: RoutingState, s_list, v_list, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``u_hat`` through every unrolled routing iteration."""
    iterations = len(v_list)
    g_u = np.zeros_like(u_hat)
    g_b_next = None  # gradient w.r.t. logits entering iteration t+1
    for t in reversed(range(iterations)):
        c = state.couplings[t]
        g_v = upstream if t == iterations - 1 else np.zeros_like(v_list[t])
        if g_b_next is not None:
            # b_{t+1} = b_t + <u_hat_ij, v_j>
            g_v = g_v + np.einsum("bij,bijd->bjd", g_b_next, u_hat)
            g_u += g_b_next[..., None] * v_list[t][:, None, :, :]
        g_s = squash_backward(s_list[t], g_v)
        g_u += c[..., None] * g_s[:, None, :, :]
        g_c = np.einsum("bjd,bijd->bij", g_s, u_hat)
        g_b = softmax_backward(c, g_c, axis=2)
        if g_b_next is not None:
            g_b = g_b + g_b_next
        g_b_next = g_b
    return g_u


class CapsuleLayer(Layer):
    """Fully connected capsule layer: per-pair linear predictions followed by routing."""

    kind = "CapsuleLayer"

    def __init__(self, name: str, nin: int, din: int, nout: int, dout: int, iterations: int = 3,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        if iterations < 1:
            raise ArgumentError(f"routing needs at least one iteration, got {iterations}")
        self.nin, self.din, self.nout, self.dout = nin, din, nout, dout
        self.iterations = iterations
        shape = (nin, nout, dout, din)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            # fans of the per-pair transform W_ij: Din -> Dout
            w = glorot_uniform(rng, shape, din, dout, dtype)
        self._add_param("W", w)
        self.last_state: RoutingState | None = None

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.nin, self.din):
            raise DimensionError(f"{self.name}: expected ({self.nin}, {self.din}), got {tuple(input_shape)}")
        return (self.nout, self.dout)

    def predictions(self, u: np.ndarray) -> np.ndarray:
        if u.ndim != 3 or u.shape[1:] != (self.nin, self.din):
            raise DimensionError(f"{self.name}: expected [B, {self.nin}, {self.din}], got {u.shape}")
        w = self.params["W"].reshape(self.nin, self.nout * self.dout, self.din)
        u_hat = np.matmul(w, u[..., None])[..., 0]
        return u_hat.reshape(u.shape[0], self.nin, self.nout, self.dout)

    def forward(self, u):
        u_hat = self.predictions(u)
        v, state, s_list, v_list = _routing_forward(u_hat, self.iterations)
        self.last_state = state
        self._cache = (u, u_hat, state, s_list, v_list)
        return v

    def backward(self, upstream):
        u, u_hat, state, s_list, v_list = self._cache
        g_u_hat = routing_backward(u_hat, state, s_list, v_list, upstream)
        g_flat = g_u_hat.reshape(u.shape[0], self.nin, self.nout * self.dout)
        self.grads["W"] += np.einsum("bin,bik->ink", g_flat, u).reshape(self.params["W"].shape)
        w = self.params["W"].reshape(self.nin, self.nout * self.dout, self.din)
        return np.einsum("ink,bin->bik", w, g_flat)


def capsule_layer_forward(u: np.ndarray, W: np.ndarray, iterations: int = 3):
    """Unbatched functional form: ``u[Nin, Din]``, ``W[Nin, Nout, Dout, Din]`` -> ``[Nout, Dout]``."""
    if W.ndim != 4 or u.ndim != 2 or W.shape[0] != u.shape[0] or W.shape[3] != u.shape[1]:
        raise DimensionError(f"capsule shapes disagree: u {u.shape}, W {W.shape}")
    u_hat = np.einsum("ijdk,ik->ijd", W, u)
    return routing_by_agreement(u_hat, iterations)


def primary_capsule_layers(prefix: str, cin: int, channels: int, caps_dim: int, kernel: int, stride: int,
                           in_hw: tuple[int, int], rng=None, dtype=DEFAULT_DTYPE) -> list[Layer]:
    """Conv -> reshape -> squash, named the way the layer summary reports them."""
    if channels % caps_dim:
        raise ArgumentError(f"{channels} channels not divisible by capsule dimension {caps_dim}")
    conv = Conv2D(f"{prefix}_conv2d", cin, channels, kernel, stride, "valid", "none", rng=rng, dtype=dtype)
    ho, wo, co = conv.output_shape((in_hw[0], in_hw[1], cin))
    reshape = Reshape(f"{prefix}_reshape", (ho * wo * co // caps_dim, caps_dim))
    return [conv, reshape, Squash(f"{prefix}_squash")]


def primary_caps_forward(features: np.ndarray, caps_dim: int, conv: Conv2D | None = None) -> np.ndarray:
    """Turn a feature map ``[H, W, C]`` (or batch) into squashed capsule poses.

    With ``conv`` the primary convolution runs first; without it ``features``
    are taken as the already-convolved map.
    """
    if features.shape[-1] % caps_dim:
        raise ArgumentError(f"{features.shape[-1]} channels not divisible by capsule dimension {caps_dim}")
    x = conv.forward(features) if conv is not None else features
    if x.shape[-1] % caps_dim:
        raise ArgumentError(f"{x.shape[-1]} channels not divisible by capsule dimension {caps_dim}")
    lead = x.shape[:-3]
    return squash(x.reshape(lead + (-1, caps_dim)))
