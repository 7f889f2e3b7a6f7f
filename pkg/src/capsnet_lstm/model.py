"""The ConvLSTM -> capsule -> LSTM -> dense detector as an ordered layer stack."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .capsule import CapsuleLayer, primary_capsule_layers
from .errors import ConfigError, DimensionError, WeightsFormatError
from .layers import LSTM, Conv2D, ConvLSTM2D, Dense, GlobalAveragePool2D, Layer
from .tensor import DEFAULT_DTYPE, seeded_rng, softmax_axis
from .training import categorical_cross_entropy


@dataclass
class ModelConfig:
    """Architecture hyper-parameters. Defaults give the full-size detector."""

    frames: int = 5
    height: int = 128
    width: int = 128
    channels: int = 3
    convlstm_filters: int = 128
    convlstm_kernel: int = 3
    conv1_channels: int = 256
    conv1_kernel: int = 9
    conv1_stride: int = 1
    primary_channels: int = 256
    primary_kernel: int = 9
    primary_stride: int = 2
    caps_dim: int = 8
    secondary_caps: int = 2
    secondary_dim: int = 16
    routing_iterations: int = 3
    lstm_units: int = 1024
    dense_units: tuple = (1024, 512, 256, 64)
    num_classes: int = 2
    seed: int = 0
    # reserved for precomputed backbone features, e.g. (8, 8, 2048); not wired in
    feature_import: tuple | None = None

    def __post_init__(self):
        self.dense_units = tuple(int(u) for u in self.dense_units)
        if self.feature_import is not None:
            self.feature_import = tuple(self.feature_import)

    @property
    def input_shape(self) -> tuple:
        return (self.frames, self.height, self.width, self.channels)

    @classmethod
    def from_dict(cls, data: dict, path: str = "architecture") -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{path}.{key}: unknown key")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_units"] = list(self.dense_units)
        if self.feature_import is not None:
            d["feature_import"] = list(self.feature_import)
        return d


PRESETS = {
    "paper-default": ModelConfig(),
    "scaled-down": ModelConfig(
        height=32, width=32, convlstm_filters=8, conv1_channels=16, primary_channels=16,
        caps_dim=4, secondary_dim=8, lstm_units=32, dense_units=(32, 16, 16, 8),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name].to_dict()
    base.update(overrides)
    return ModelConfig.from_dict(base)


@dataclass
class SummaryRow:
    name: str
    kind: str
    output_shape: tuple
    params: int


class ModelGraph:
    """Sequential stack whose last layer is a dense classification head.

    ``input_shape`` is per sample; the batch extent is whatever the caller passes.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple, config: ModelConfig | None = None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.config = config
        self.shapes = self._propagate_shapes()

    def _propagate_shapes(self) -> list[tuple]:
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(tuple(shape))
        return shapes

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}/{key}", value

    def named_gradients(self):
        for layer in self.layers:
            for key, value in layer.grads.items():
                yield f"{layer.name}/{key}", value

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def cast(self, dtype) -> "ModelGraph":
        for layer in self.layers:
            layer.cast(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            for key, value in layer.params.items():
                incoming = state[f"{layer.name}/{key}"]
                if incoming.shape != value.shape:
                    raise DimensionError(f"{layer.name}/{key}: shape {incoming.shape} != {value.shape}")
                layer.params[key] = incoming.astype(value.dtype, copy=True)

    # -- computation ----------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != len(self.input_shape) + 1 or tuple(batch.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"expected batch of shape (B, {', '.join(map(str, self.input_shape))}), got {batch.shape}"
            )

    def forward_logits(self, batch: np.ndarray) -> np.ndarray:
        """Forward pass up to the pre-softmax scores of the head."""
        self._check_batch(batch)
        x = batch
        for layer in self.layers[:-1]:
            x = layer.forward(x)
        head = self.head
        z = head.pre_activation(x)
        head._cache = (x, None)
        return z

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return softmax_axis(self.forward_logits(batch), -1)

    def backward_from_logits(self, grad_logits: np.ndarray, stop_at: str | None = None) -> np.ndarray:
        """Backpropagate a gradient on the head scores, accumulating parameter grads.

        With ``stop_at`` the pass halts once it has the gradient w.r.t. that
        layer's output and returns it (no gradients accumulate below it).
        """
        g = self.head.backward_pre_activation(grad_logits)
        for layer in reversed(self.layers[:-1]):
            if layer.name == stop_at:
                return g
            g = layer.backward(g)
        return g

    def backward(self, batch: np.ndarray, labels_onehot: np.ndarray) -> float:
        """Forward, categorical cross-entropy, and backward. Returns the mean loss."""
        if labels_onehot.shape != (batch.shape[0], self.head.dout):
            raise DimensionError(
                f"labels must be ({batch.shape[0]}, {self.head.dout}), got {labels_onehot.shape}"
            )
        probs = self.forward(batch)
        loss, grad_logits = categorical_cross_entropy(probs, labels_onehot)
        self.backward_from_logits(grad_logits)
        return loss

    # -- reporting ------------------------------------------------------------

    def summary_rows(self) -> list[SummaryRow]:
        return [SummaryRow(layer.name, layer.kind, shape, layer.param_count())
                for layer, shape in zip(self.layers, self.shapes)]


def build_model(config: ModelConfig | None = None, dtype=DEFAULT_DTYPE, init: bool = True) -> ModelGraph:
    """Assemble the detector; ``init=False`` leaves every parameter at zero."""
    cfg = config or ModelConfig()
    if cfg.feature_import is not None:
        raise ConfigError("feature_import: precomputed backbone features are reserved but not supported")
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, int) and f.name != "seed" and v < 1:
            raise ConfigError(f"architecture.{f.name}: must be positive, got {v}")
    if cfg.primary_channels % cfg.caps_dim:
        raise ConfigError(
            f"architecture.caps_dim: {cfg.primary_channels} primary channels not divisible by {cfg.caps_dim}"
        )
    rng = seeded_rng(cfg.seed) if init else None
    layers: list[Layer] = []
    layers.append(ConvLSTM2D("conv_lst_m2d", cfg.channels, cfg.convlstm_filters, cfg.convlstm_kernel, rng, dtype))
    conv1 = Conv2D("conv1", cfg.convlstm_filters, cfg.conv1_channels, cfg.conv1_kernel, cfg.conv1_stride,
                   "valid", "relu", rng, dtype)
    layers.append(conv1)
    try:
        h1, w1, _ = conv1.output_shape((cfg.height, cfg.width, cfg.convlstm_filters))
        primary = primary_capsule_layers("primarycap", cfg.conv1_channels, cfg.primary_channels, cfg.caps_dim,
                                         cfg.primary_kernel, cfg.primary_stride, (h1, w1), rng, dtype)
        n_caps = primary[1].target[0]
    except DimensionError as exc:
        raise ConfigError(f"architecture: input too small for the convolution stack ({exc})") from exc
    layers.extend(primary)
    layers.append(CapsuleLayer("secondarycap", n_caps, cfg.caps_dim, cfg.secondary_caps, cfg.secondary_dim,
                               cfg.routing_iterations, rng, dtype))
    # the secondary capsules are read as a short sequence of pose vectors
    layers.append(LSTM("lstm_1", cfg.secondary_dim, cfg.lstm_units, rng, dtype))
    width = cfg.lstm_units
    for k, units in enumerate(cfg.dense_units, start=1):
        layers.append(Dense(f"dense_{k}", width, units, "relu", rng, dtype))
        width = units
    layers.append(Dense(f"dense_{len(cfg.dense_units) + 1}", width, cfg.num_classes, "softmax", rng, dtype))
    return ModelGraph(layers, cfg.input_shape, cfg)


def _fmt_shape(shape: tuple) -> str:
    return "(None, " + ", ".join(str(s) for s in shape) + ")"


def model_summary(model: ModelGraph) -> str:
    rows = [("input_1 (InputLayer)", _fmt_shape(model.input_shape), "0")]
    for row in model.summary_rows():
        label = f"{row.name} ({row.kind})"
        if row.name == model.layers[-1].name:
            label += " (Output)"
        rows.append((label, _fmt_shape(row.output_shape), f"{row.params}"))
    total = model.param_count()
    w0 = max(len(r[0]) for r in rows + [("Layer (type)", "", "")])
    w1 = max(len(r[1]) for r in rows + [("", "Output Shape", "")])
    lines = [f"{'Layer (type)':<{w0}}  {'Output Shape':<{w1}}  Param #", "=" * (w0 + w1 + 12)]
    lines += [f"{a:<{w0}}  {b:<{w1}}  {c}" for a, b, c in rows]
    lines += ["=" * (w0 + w1 + 12),
              f"Total params {total:,}",
              f"Trainable params {total:,}",
              "Non-trainable params 0"]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# weights file: "CAPW", u32 version, u32 count, then per tensor
#   u32 name length, UTF-8 name, u32 rank, u32 extents..., u8 dtype tag, f32 LE payload

MAGIC = b"CAPW"
VERSION = 1
DTYPE_F32 = 1


def save_weights(model: ModelGraph, path) -> None:
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(struct.pack("<B", DTYPE_F32))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def read_weights(path) -> list[tuple[str, np.ndarray]]:
    """Parse a weights file into ``(name, array)`` pairs in file order."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError(f"truncated weights file while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise WeightsFormatError("bad magic: not a CAPW weights file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    out = []
    for k in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor #{k}"))
        try:
            name = bytes(take(nlen, f"name of tensor #{k}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"tensor #{k}: name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        (tag,) = struct.unpack("<B", take(1, f"dtype of {name}"))
        if tag != DTYPE_F32:
            raise WeightsFormatError(f"{name}: unsupported dtype tag {tag}")
        size = int(np.prod(shape)) if rank else 1
        payload = take(4 * size, f"payload of {name}")
        out.append((name, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)))
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def load_weights_into(model: ModelGraph, path) -> ModelGraph:
    tensors = read_weights(path)
    expected = list(model.named_parameters())
    for (name, value), (want_name, want) in zip(tensors, expected):
        if name != want_name:
            raise WeightsFormatError(f"tensor name mismatch: file has {name!r}, model expects {want_name!r}")
        if value.shape != want.shape:
            raise WeightsFormatError(f"shape mismatch for {name}: file {value.shape}, model {want.shape}")
    if len(tensors) != len(expected):
        missing = expected[len(tensors)][0] if len(tensors) < len(expected) else tensors[len(expected)][0]
        raise WeightsFormatError(f"tensor count mismatch ({len(tensors)} vs {len(expected)}) at {missing!r}")
    model.load_state_dict(dict(tensors))
    return model


def load_weights(path, config: ModelConfig | None = None) -> ModelGraph:
    """Build the configured architecture and fill it from ``path``."""
    model = build_model(config, init=False)
    return load_weights_into(model, path)


def build_localisation_model(size: int = 32, frames: int = 5, filters: int = 4, channels: int = 8,
                             seed: int = 0, dtype=DEFAULT_DTYPE) -> ModelGraph:
    """Small spatially aligned classifier for Grad-CAM sanity runs.

    ConvLSTM -> same-padded ``conv1`` (ReLU) -> global average pool -> softmax,
    so ``conv1`` cells line up one-to-one with input pixels.
    """
    rng = seeded_rng(seed)
    layers = [
        ConvLSTM2D("conv_lst_m2d", 3, filters, 3, rng, dtype),
        Conv2D("conv1", filters, channels, 3, 1, "same", "relu", rng, dtype),
        GlobalAveragePool2D("global_pool"),
        Dense("dense_out", channels, 2, "softmax", rng, dtype),
    ]
    return ModelGraph(layers, (frames, size, size, 3))
