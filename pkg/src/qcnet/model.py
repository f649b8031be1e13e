"""The volumetric DenseNet classifier: topology, init and checkpoints.

Topology: stem conv (3x3x3, pad 1) -> [dense block -> transition] repeated ->
dense block -> BN -> ReLU -> global average pool -> dense head -> softmax.
Each dense-block layer is BN -> ReLU -> conv3d(3x3x3, growth_rate outputs,
pad 1) whose output is concatenated after its input. Transitions compress
channels with a 1x1x1 conv (ceil(compression * C)) and halve the spatial
extents with 2x2x2 average pooling.

Checkpoints are a little-endian binary: magic "QC3D" | u32 version |
u32 config-JSON length | config JSON | u32 tensor count | per tensor
(u32 name length | name UTF-8 | u32 ndim | u32 dims... | f32 data) |
f32 decision threshold.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .tensor import ShapeMismatch, Tensor

CHECKPOINT_MAGIC = b"QC3D"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptTensor(CheckpointError):
    pass


class SpatialUnderflow(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple  # (tx, ty, tz)
    growth_rate: int = 12
    stem_channels: int = 24
    stem_stride: int = 2
    num_dense_blocks: int = 3
    layers_per_block: int = 2
    compression: float = 0.5
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must lie in (0, 1]")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")
        if min(self.growth_rate, self.stem_channels, self.num_dense_blocks, self.layers_per_block) < 1:
            raise ValueError("growth_rate, stem_channels and block counts must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        obj = json.loads(text)
        obj["input_dims"] = tuple(obj["input_dims"])
        return cls(**obj)


PRESETS = {
    # acceptance-scale preset; trains in minutes on one CPU core
    "desk-32": dict(input_dims=(32, 32, 24)),
    # full-resolution preset matching clinical volume sizes
    "paper-96": dict(input_dims=(96, 96, 70)),
}


def preset_config(name: str, seed: int = 0) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return ModelConfig(seed=seed, **PRESETS[name])


def channel_trace(config: ModelConfig):
    """Channel count after the stem, each block and each transition."""
    trace = [config.stem_channels]
    c = config.stem_channels
    for i in range(config.num_dense_blocks):
        c = c + config.layers_per_block * config.growth_rate
        trace.append(c)
        if i < config.num_dense_blocks - 1:
            c = math.ceil(config.compression * c)
            trace.append(c)
    return trace


def spatial_trace(config: ModelConfig):
    """(D, H, W) after the stem and after each transition pool."""
    tx, ty, tz = config.input_dims
    dims = tuple((d + 2 - 3) // config.stem_stride + 1 for d in (tz, ty, tx))
    out = [dims]
    for _ in range(config.num_dense_blocks - 1):
        dims = tuple(d // 2 for d in dims)
        out.append(dims)
    return out


class Model:
    """A built classifier: config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, tensors):
        self.config = config
        self.tensors = dict(tensors)  # name -> Tensor, stable creation order

    def parameters(self):
        """Learnable tensors in creation order (running stats excluded)."""
        return [t for t in self.tensors.values() if t.requires_grad]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy(self) -> "Model":
        clones = {}
        for name, t in self.tensors.items():
            clones[name] = Tensor(
                t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype, name=name
            )
        return Model(self.config, clones)

    # -- forward ----------------------------------------------------------

    def _bn_relu(self, x, prefix, mode):
        t = self.tensors
        h = ops.batchnorm3d(
            x,
            t[f"{prefix}.gamma"],
            t[f"{prefix}.beta"],
            t[f"{prefix}.running_mean"],
            t[f"{prefix}.running_var"],
            mode=mode,
        )
        return ops.relu(h)

    def forward(self, batch, mode: str = "eval") -> Tensor:
        """Class probabilities [N, num_classes]; index 1 is Artifact."""
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        tx, ty, tz = self.config.input_dims
        if batch.data.ndim != 5 or batch.shape[1] != 1 or batch.shape[2:] != (tz, ty, tx):
            raise ShapeMismatch(
                f"expected batch [N,1,{tz},{ty},{tx}], got {batch.shape}"
            )
        t = self.tensors
        cfg = self.config
        x = ops.conv3d(
            batch, t["stem.conv.weight"], t["stem.conv.bias"],
            stride=cfg.stem_stride, zero_padding=1,
        )
        for i in range(cfg.num_dense_blocks):
            for j in range(cfg.layers_per_block):
                h = self._bn_relu(x, f"block{i}.layer{j}.bn", mode)
                h = ops.conv3d(
                    h,
                    t[f"block{i}.layer{j}.conv.weight"],
                    t[f"block{i}.layer{j}.conv.bias"],
                    stride=1, zero_padding=1,
                )
                x = ops.concat_channels(x, h)
            if i < cfg.num_dense_blocks - 1:
                h = self._bn_relu(x, f"trans{i}.bn", mode)
                h = ops.conv3d(
                    h,
                    t[f"trans{i}.conv.weight"],
                    t[f"trans{i}.conv.bias"],
                    stride=1, zero_padding=0,
                )
                x = ops.avgpool3d(h, window=2, stride=2)
        x = self._bn_relu(x, "head.bn", mode)
        x = ops.global_avg_pool(x)
        logits = ops.dense(x, t["head.fc.weight"], t["head.fc.bias"])
        return ops.softmax(logits)


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Deterministically initialized model; same seed gives identical bits.

    Conv and dense weights are He-normal (fan-in); biases and BN beta start at
    zero, BN gamma and running variance at one. Draw order equals parameter
    creation order, so the layout below is part of the checkpoint contract.
    """
    for dims in spatial_trace(config):
        if min(dims) < 1:
            raise SpatialUnderflow(
                f"input {config.input_dims} collapses to {dims} before the head"
            )

    rng = np.random.default_rng(config.seed)
    tensors = {}

    def he_conv(name, k_out, c_in, ksize):
        fan_in = c_in * ksize**3
        std = math.sqrt(2.0 / fan_in)
        w = rng.standard_normal((k_out, c_in, ksize, ksize, ksize)) * std
        tensors[name + ".weight"] = Tensor(w, requires_grad=True, dtype=dtype, name=name + ".weight")
        tensors[name + ".bias"] = Tensor(
            np.zeros(k_out), requires_grad=True, dtype=dtype, name=name + ".bias"
        )

    def bn(name, c):
        tensors[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype, name=name + ".gamma")
        tensors[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype, name=name + ".beta")
        tensors[name + ".running_mean"] = Tensor(np.zeros(c), dtype=dtype, name=name + ".running_mean")
        tensors[name + ".running_var"] = Tensor(np.ones(c), dtype=dtype, name=name + ".running_var")

    he_conv("stem.conv", config.stem_channels, 1, 3)
    c = config.stem_channels
    for i in range(config.num_dense_blocks):
        for j in range(config.layers_per_block):
            bn(f"block{i}.layer{j}.bn", c)
            he_conv(f"block{i}.layer{j}.conv", config.growth_rate, c, 3)
            c += config.growth_rate
        if i < config.num_dense_blocks - 1:
            bn(f"trans{i}.bn", c)
            c_out = math.ceil(config.compression * c)
            he_conv(f"trans{i}.conv", c_out, c, 1)
            c = c_out
    bn("head.bn", c)
    fc_std = math.sqrt(2.0 / c)
    tensors["head.fc.weight"] = Tensor(
        rng.standard_normal((c, config.num_classes)) * fc_std,
        requires_grad=True, dtype=dtype, name="head.fc.weight",
    )
    tensors["head.fc.bias"] = Tensor(
        np.zeros(config.num_classes), requires_grad=True, dtype=dtype, name="head.fc.bias"
    )
    return Model(config, tensors)


def save_checkpoint(model: Model, path, threshold: float = 0.5) -> None:
    cfg_json = model.config.to_json().encode()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg_json)),
        cfg_json,
        struct.pack("<I", len(model.tensors)),
    ]
    for name, t in model.tensors.items():
        nm = name.encode()
        dims = t.shape
        chunks.append(struct.pack("<I", len(nm)))
        chunks.append(nm)
        chunks.append(struct.pack("<I", len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    chunks.append(struct.pack("<f", float(threshold)))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Rebuild (Model, threshold) from a checkpoint, bit-exact."""
    raw = open(path, "rb").read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptTensor(f"{path}: truncated while reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    cfg_len = struct.unpack("<I", take(4, "config length"))[0]
    config = ModelConfig.from_json(take(cfg_len, "config").decode())
    count = struct.unpack("<I", take(4, "tensor count"))[0]

    model = build_model(config)
    if count != len(model.tensors):
        raise CorruptTensor(f"{path}: {count} tensors, model defines {len(model.tensors)}")
    for _ in range(count):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "name").decode()
        if name not in model.tensors:
            raise CorruptTensor(f"{path}: unknown tensor {name!r}")
        ndim = struct.unpack("<I", take(4, "ndim"))[0]
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        target = model.tensors[name]
        if dims != target.shape:
            raise CorruptTensor(f"{path}: {name} has dims {dims}, expected {target.shape}")
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        data = np.frombuffer(take(n_bytes, name), dtype="<f4").reshape(dims)
        target.data = data.astype(np.float32).copy()
    threshold = struct.unpack("<f", take(4, "threshold"))[0]
    return model, float(threshold)
