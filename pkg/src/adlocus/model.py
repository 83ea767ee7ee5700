"""Encoder-decoder segmentation network built from the primitives in ``layers``.

Encoder stage k: conv3x3 -> ReLU -> maxpool2.
Decoder stage k: upsample2 -> conv3x3 -> ReLU (sigmoid on the last stage).
No skip connections.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"ADLW"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (200, 200)
    input_channels: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    # last entry is the output channel count and must be 1
    decoder_channels: tuple[int, ...] = (32, 16, 1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))

    def validate(self) -> None:
        stages = len(self.encoder_channels)
        if stages == 0:
            raise ConfigError("encoder_channels must not be empty")
        if len(self.decoder_channels) != stages:
            raise ConfigError(
                f"decoder has {len(self.decoder_channels)} stages, encoder has {stages}"
            )
        if self.decoder_channels[-1] != 1:
            raise ConfigError("last decoder stage must output exactly 1 channel")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("channel counts must be positive")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        factor = 2 ** stages
        for dim in self.input_size:
            if dim <= 0 or dim % factor:
                raise ConfigError(
                    f"input size {self.input_size} not divisible by 2^{stages}={factor}"
                )
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def conv_shapes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        """(layer_id, weight shape) for every conv, in execution order."""
        shapes = []
        c_in = self.input_channels
        for k, c_out in enumerate(self.encoder_channels, 1):
            shapes.append((f"enc{k}", (c_out, c_in, 3, 3)))
            c_in = c_out
        for k, c_out in enumerate(self.decoder_channels, 1):
            shapes.append((f"dec{k}", (c_out, c_in, 3, 3)))
            c_in = c_out
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) + s[0] for _, s in self.conv_shapes())


class ConvParams(NamedTuple):
    layer_id: str
    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    layers: tuple[ConvParams, ...] = field(default_factory=tuple)

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list: weights, bias, weights, bias, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "ModelParams":
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        new = []
        for k, layer in enumerate(self.layers):
            w, b = arrays[2 * k], arrays[2 * k + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"shape mismatch for layer {layer.layer_id}")
            new.append(ConvParams(layer.layer_id, np.asarray(w, np.float64), np.asarray(b, np.float64)))
        return ModelParams(self.config, tuple(new))

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


def build_model(config: ModelConfig | None = None) -> ModelParams:
    """Fresh parameters: He-normal weights from a seeded generator, zero biases."""
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    built = []
    for layer_id, shape in config.conv_shapes():
        fan_in = shape[1] * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        built.append(ConvParams(layer_id, w, np.zeros(shape[0])))
    return ModelParams(config, tuple(built))


def _check_input(params: ModelParams, image: np.ndarray) -> None:
    cfg = params.config
    expected = (cfg.input_channels, *cfg.input_size)
    if image.ndim not in (3, 4) or image.shape[-3:] != expected:
        raise ShapeError(f"model expects input {expected} (optionally batched), got {image.shape}")


def forward(params: ModelParams, image) -> np.ndarray:
    """Probability mask ``(1, H, W)`` for one image (or ``(N, 1, H, W)`` for a batch)."""
    prob, _ = forward_with_cache(params, image, keep_cache=False)
    return prob


def forward_with_cache(params: ModelParams, image, keep_cache: bool = True):
    """Forward pass returning the output and the activations needed by :func:`backward`."""
    x = L.as_tensor(image)
    _check_input(params, x)
    stages = len(params.config.encoder_channels)
    cache = []
    for k, layer in enumerate(params.layers):
        encoder = k < stages
        last = k == len(params.layers) - 1
        entry = {}
        if not encoder:
            x = L.upsample2_forward(x)
        if keep_cache:
            entry["conv_in"] = x
        z = L.conv2d_forward(x, layer.weights, layer.bias)
        if last:
            x = L.sigmoid_forward(z)
            entry["out"] = x
        else:
            x = L.relu_forward(z)
            if keep_cache:
                entry["pre_act"] = z
        if encoder:
            x, argmax = L.maxpool2_forward(x)
            entry["argmax"] = argmax
        if keep_cache:
            cache.append(entry)
    return x, cache


def backward(params: ModelParams, cache: list[dict], upstream) -> list[np.ndarray]:
    """Parameter gradients in :meth:`ModelParams.arrays` order."""
    stages = len(params.config.encoder_channels)
    g = L.as_tensor(upstream)
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))
    for k in range(len(params.layers) - 1, -1, -1):
        layer, entry = params.layers[k], cache[k]
        if k < stages:
            g = L.maxpool2_backward(entry["argmax"], g).input_grad
        if k == len(params.layers) - 1:
            g = L.sigmoid_backward(entry["out"], g).input_grad
        else:
            g = L.relu_backward(entry["pre_act"], g).input_grad
        conv = L.conv2d_backward(entry["conv_in"], layer.weights, g)
        grads[2 * k], grads[2 * k + 1] = conv.param_grads
        g = conv.input_grad
        if k >= stages:
            g = L.upsample2_backward(g).input_grad
    return grads


def loss_and_grads(params: ModelParams, images, masks) -> tuple[float, list[np.ndarray]]:
    """Mean BCE over every pixel of the batch and its parameter gradients."""
    prob, cache = forward_with_cache(params, images)
    loss, dprob = L.bce_loss(prob, masks)
    return loss, backward(params, cache, dprob)


def layer_trace(params: ModelParams) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape after every layer for a single default-sized input."""
    cfg = params.config
    c, (h, w) = cfg.input_channels, cfg.input_size
    trace = [("input", (c, h, w))]
    stages = len(cfg.encoder_channels)
    for k, layer in enumerate(params.layers):
        c = layer.weights.shape[0]
        if k >= stages:
            h, w = 2 * h, 2 * w
            trace.append((f"{layer.layer_id}.upsample", (layer.weights.shape[1], h, w)))
        trace.append((f"{layer.layer_id}.conv", (c, h, w)))
        if k < stages:
            h, w = h // 2, w // 2
            trace.append((f"{layer.layer_id}.pool", (c, h, w)))
    return trace


def save_weights(params: ModelParams, path) -> None:
    """Write parameters as little-endian float32 records (magic ``ADLW``)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params.layers))]
    for layer in params.layers:
        ident = layer.layer_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(ident)) + ident)
        for arr in (layer.weights, layer.bias):
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_array(reader: _Reader, what: str) -> np.ndarray:
    (ndim,) = reader.unpack("<B", f"{what} ndim")
    if ndim == 0:
        raise FormatError(f"{what} has ndim 0")
    dims = reader.unpack(f"<{ndim}I", f"{what} dims")
    count = int(np.prod(dims))
    raw = reader.take(4 * count, f"{what} values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)


def load_weights(path, config: ModelConfig | None = None) -> ModelParams:
    """Read a weights file.

    Without ``config`` the channel plan is inferred from the stored shapes
    (input size defaults to 200x200). With ``config`` every layer id and shape
    must match it exactly.
    """
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an ADLW weights file")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (count,) = reader.unpack("<I", "layer_count")
    loaded = []
    for k in range(count):
        (id_len,) = reader.unpack("<I", f"layer {k} id_len")
        try:
            layer_id = reader.take(id_len, f"layer {k} id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"layer {k} id is not valid UTF-8") from exc
        w = _read_array(reader, f"layer {layer_id} weights")
        b = _read_array(reader, f"layer {layer_id} bias")
        if w.ndim != 4 or w.shape[2:] != (3, 3) or b.shape != (w.shape[0],):
            raise FormatError(f"layer {layer_id} has bad shape table {w.shape} / {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise FormatError(f"layer {layer_id} holds non-finite values")
        loaded.append(ConvParams(layer_id, w, b))
    if reader.pos != len(reader.data):
        raise FormatError(f"{len(reader.data) - reader.pos} trailing bytes after last layer")
    if config is None:
        config = _infer_config(loaded)
    expected = config.conv_shapes()
    if len(expected) != len(loaded):
        raise FormatError(f"layer_count {len(loaded)} does not match config ({len(expected)} layers)")
    for (exp_id, exp_shape), layer in zip(expected, loaded):
        if layer.layer_id != exp_id or layer.weights.shape != exp_shape:
            raise FormatError(
                f"layer {layer.layer_id} {layer.weights.shape} does not match config {exp_id} {exp_shape}"
            )
    return ModelParams(config, tuple(loaded))


def _infer_config(loaded: list[ConvParams]) -> ModelConfig:
    if not loaded or len(loaded) % 2:
        raise FormatError(f"layer_count {len(loaded)} cannot form a symmetric encoder-decoder")
    stages = len(loaded) // 2
    channels = [layer.weights.shape[0] for layer in loaded]
    config = ModelConfig(
        input_channels=loaded[0].weights.shape[1],
        encoder_channels=tuple(channels[:stages]),
        decoder_channels=tuple(channels[stages:]),
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise FormatError(f"shape table does not describe a valid model: {exc}") from exc
    return config
