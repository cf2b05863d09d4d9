"""Configurable U-Net built from the ops in :mod:`vertseg.tensor`.

Encoder level l holds two 3x3 conv + ReLU blocks with ``base * 2**l``
channels followed by a 2x2 max pool; the bottom level skips the pool. Each
decoder level upsamples with a 2x2 up-convolution, concatenates the matching
encoder output, and applies two more conv + ReLU blocks. A 1x1 conv and a
sigmoid produce the foreground probability.

Checkpoint layout (little-endian)::

    8s   magic  b"VSUNET\\x00\\x01"
    u32  format version (1)
    u32  depth, base_channels, in_channels, out_channels, kernel
    u32  parameter count P
    P x { u32 ndim, ndim x u32 dims, float32 data }   # build order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (DimensionError, Tensor, concat_channels, conv2d, maxpool2x2, relu,
                     sigmoid, upconv2x2)

MAGIC = b"VSUNET\x00\x01"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 64
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel input and output are supported")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, height: int, width: int) -> None:
        m = 2 ** self.depth
        if height % m or width % m:
            raise DimensionError(f"input {height}x{width} not divisible by 2**depth = {m}")


def layer_specs(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) of every parameter tensor in build order."""
    k = config.kernel
    specs = []

    def conv(name, cin, cout, ksize=k):
        specs.append((f"{name}.w", (cout, cin, ksize, ksize)))
        specs.append((f"{name}.b", (cout,)))

    cin = config.in_channels
    for lvl in range(config.depth + 1):
        c = config.channels(lvl)
        conv(f"enc{lvl}.conv1", cin, c)
        conv(f"enc{lvl}.conv2", c, c)
        cin = c
    for lvl in reversed(range(config.depth)):
        c = config.channels(lvl)
        specs.append((f"dec{lvl}.up.w", (2 * c, c, 2, 2)))
        specs.append((f"dec{lvl}.up.b", (c,)))
        conv(f"dec{lvl}.conv1", 2 * c, c)
        conv(f"dec{lvl}.conv2", c, c)
    conv("head", config.channels(0), config.out_channels, ksize=1)
    return specs


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for _, s in layer_specs(config))


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "UNetModel":
        return UNetModel(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                       for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-uniform weights scaled by fan-in, zero biases, drawn in build order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_specs(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            # conv: Cout,Cin,k,k -> fan_in Cin*k*k; upconv: Cin,Cout,2,2 -> each output sums Cin taps
            fan_in = shape[1] * shape[2] * shape[3] if ".up." not in name else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return UNetModel(config, params)


def forward(model: UNetModel, x: Tensor) -> Tensor:
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected input [N,{cfg.in_channels},H,W], got {x.shape}")
    cfg.check_input(x.shape[2], x.shape[3])
    p = model.params

    def block(h, name):
        h = relu(conv2d(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"]))
        return relu(conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))

    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = block(h, f"enc{lvl}")
        skips.append(h)
        h = maxpool2x2(h)
    h = block(h, f"enc{cfg.depth}")
    for lvl in reversed(range(cfg.depth)):
        h = upconv2x2(h, p[f"dec{lvl}.up.w"], p[f"dec{lvl}.up.b"])
        h = concat_channels(skips[lvl], h)
        h = block(h, f"dec{lvl}")
    return sigmoid(conv2d(h, p["head.w"], p["head.b"]))


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: UNetModel, path: str | Path) -> None:
    cfg = model.config
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<5I", cfg.depth, cfg.base_channels, cfg.in_channels, cfg.out_channels, cfg.kernel)
    buf += struct.pack("<I", len(model.params))
    for t in model.params.values():
        buf += struct.pack("<I", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += t.data.astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> UNetModel:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a U-Net checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    cfg = UNetConfig(*take("<5I"))
    (count,) = take("<I")
    specs = layer_specs(cfg)
    if count != len(specs):
        raise CheckpointError(f"{path}: expected {len(specs)} tensors, found {count}")
    params = {}
    for name, shape in specs:
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I")
        if tuple(dims) != shape:
            raise CheckpointError(f"{path}: {name} has shape {dims}, expected {shape}")
        n = int(np.prod(dims))
        if off + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated")
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
        params[name] = Tensor(data, requires_grad=True, name=name)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return UNetModel(cfg, params)
