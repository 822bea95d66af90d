"""Classifier presets, seeded initialization and the checkpoint container."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._io import atomic_write_bytes, sha256_bytes
from .errors import ArtifactCorruption, ConfigError, DimensionError, FormatError
from .tensor import Tensor

PRESETS = ("mlp", "lenet-small")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Named preset plus overrides.

    ``mlp`` uses ``widths`` as the full layer-size list (input, hidden...,
    classes). ``lenet-small`` uses ``input_shape`` (C, H, W), ``channels``,
    ``kernel``, ``hidden`` and ``num_classes``.
    """

    preset: str = "mlp"
    widths: tuple = (2, 16, 2)
    input_shape: tuple | None = None
    num_classes: int | None = None
    channels: tuple = (6, 16)
    kernel: int = 5
    hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


def resolve_layers(config: ArchitectureConfig) -> tuple[list[dict], tuple, int]:
    """Expand a preset into (layer descriptors, input shape, class count)."""
    if config.preset == "mlp":
        widths = config.widths
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"mlp widths need >= 2 positive entries, got {widths}")
        input_shape = config.input_shape or (widths[0],)
        if int(np.prod(input_shape)) != widths[0]:
            raise ConfigError(f"input_shape {input_shape} does not flatten to {widths[0]}")
        if config.num_classes is not None and config.num_classes != widths[-1]:
            raise ConfigError("num_classes disagrees with the last mlp width")
        layers: list[dict] = []
        if len(input_shape) > 1:
            layers.append({"kind": "flatten"})
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append({"kind": "dense", "in": a, "out": b})
            if i < len(widths) - 2:
                layers.append({"kind": "relu"})
        return layers, tuple(input_shape), widths[-1]

    if config.preset == "lenet-small":
        input_shape = config.input_shape or (1, 28, 28)
        if len(input_shape) != 3:
            raise ConfigError(f"lenet-small needs a (C, H, W) input shape, got {input_shape}")
        k = config.kernel
        num_classes = config.num_classes or 10
        if len(config.channels) != 2:
            raise ConfigError("lenet-small needs exactly two conv channel counts")
        c, h, w = input_shape
        layers = []
        for cout in config.channels:
            if k > h or k > w:
                raise ConfigError(f"kernel {k} does not fit a {h}x{w} feature map")
            layers += [
                {"kind": "conv", "in": c, "out": cout, "kernel": k},
                {"kind": "relu"},
                {"kind": "maxpool", "kernel": 2},
            ]
            c, h, w = cout, (h - k + 1) // 2, (w - k + 1) // 2
            if h < 1 or w < 1:
                raise ConfigError(f"input {input_shape} too small for lenet-small")
        layers += [
            {"kind": "flatten"},
            {"kind": "dense", "in": c * h * w, "out": config.hidden},
            {"kind": "relu"},
            {"kind": "dense", "in": config.hidden, "out": num_classes},
        ]
        return layers, tuple(input_shape), num_classes

    raise ConfigError(f"unknown preset {config.preset!r}; expected one of {PRESETS}")


@dataclass
class Model:
    config: ArchitectureConfig
    layers: list
    params: dict = field(default_factory=dict)
    input_shape: tuple = ()
    num_classes: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            kind = layer["kind"]
            if kind == "dense":
                h = h @ self.params[f"{i}.weight"].T + self.params[f"{i}.bias"]
            elif kind == "conv":
                h = T.conv2d(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
            elif kind == "relu":
                h = h.relu()
            elif kind == "maxpool":
                h = T.max_pool2d(h, layer["kernel"])
            elif kind == "flatten":
                h = h.reshape(h.shape[0], -1)
        return h

    __call__ = forward

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.params.items()}
        return dataclasses.replace(self, params=params, layers=[dict(l) for l in self.layers])

    def astype(self, mode: str) -> "Model":
        """A copy with parameters cast to ``"high"`` or ``"standard"`` precision."""
        dtype = T.PRECISIONS[mode]
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()}
        return dataclasses.replace(self, params=params)

    def checksum(self) -> str:
        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        for name, p in self.params.items():
            blob += name.encode() + np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes()
        return sha256_bytes(blob)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: ArchitectureConfig | str, seed: int = 0, precision: str | None = None) -> Model:
    """Instantiate a preset with He-uniform weights and zero biases."""
    if isinstance(config, str):
        config = ArchitectureConfig(preset=config)
    layers, input_shape, num_classes = resolve_layers(config)
    dtype = T.PRECISIONS[precision] if precision else T.get_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        if layer["kind"] == "dense":
            shape = (layer["out"], layer["in"])
            fan_in = layer["in"]
        elif layer["kind"] == "conv":
            k = layer["kernel"]
            shape = (layer["out"], layer["in"], k, k)
            fan_in = layer["in"] * k * k
        else:
            continue
        params[f"{i}.weight"] = Tensor(_he_uniform(rng, shape, fan_in, dtype), requires_grad=True, dtype=dtype)
        params[f"{i}.bias"] = Tensor(np.zeros(layer["out"], dtype=dtype), requires_grad=True, dtype=dtype)
    return Model(config, layers, params, input_shape, num_classes)


def forward_logits(model, batch) -> Tensor:
    """Logits for a batch shaped (B, *input_shape)."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"batch shape {batch.shape} does not match input shape {model.input_shape}")
    return model.forward(batch)


# -- checkpoint container ------------------------------------------------------
#
# magic(8) | version u32 LE | header length u32 LE | sha256(header) (32) |
# header JSON | parameter payload (little-endian raw buffers)

MAGIC = b"LLCKPT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sII32s")


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    payload = bytearray()
    manifest = []
    for name, p in model.params.items():
        buf = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes()
        manifest.append({
            "name": name,
            "shape": list(p.shape),
            "dtype": p.dtype.newbyteorder("<").str,
            "offset": len(payload),
            "nbytes": len(buf),
            "sha256": sha256_bytes(buf),
        })
        payload += buf
    header = {
        "format": "likeland-checkpoint",
        "version": VERSION,
        "architecture": model.config.to_dict(),
        "params": manifest,
        "payload_nbytes": len(payload),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    prefix = _PREFIX.pack(MAGIC, VERSION, len(hbytes), bytes.fromhex(sha256_bytes(hbytes)))
    return prefix + hbytes + bytes(payload)


def save_checkpoint(model: Model, path, extra: dict | None = None):
    return atomic_write_bytes(path, checkpoint_bytes(model, extra))


def parse_checkpoint(blob: bytes) -> tuple[Model, dict]:
    if len(blob) < _PREFIX.size:
        raise ArtifactCorruption("checkpoint truncated")
    magic, version, hlen, hsum = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ArtifactCorruption("not a checkpoint (bad magic)")
    if version != VERSION:
        raise ArtifactCorruption(f"unsupported checkpoint version {version}")
    hbytes = blob[_PREFIX.size:_PREFIX.size + hlen]
    if len(hbytes) != hlen or sha256_bytes(hbytes) != hsum.hex():
        raise ArtifactCorruption("checkpoint header checksum mismatch")
    header = json.loads(hbytes)
    payload = blob[_PREFIX.size + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise ArtifactCorruption("checkpoint payload length mismatch")
    try:
        config = ArchitectureConfig.from_dict(header["architecture"])
        layers, input_shape, num_classes = resolve_layers(config)
    except ConfigError as exc:
        raise FormatError(f"checkpoint architecture invalid: {exc}") from exc
    params = {}
    for entry in header["params"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if sha256_bytes(buf) != entry["sha256"]:
            raise ArtifactCorruption(f"checksum mismatch for parameter {entry['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        params[entry["name"]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return Model(config, layers, params, input_shape, num_classes), header.get("extra", {})


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        model, _ = parse_checkpoint(fh.read())
    return model
