"""Residual multi-kernel-length 1-D CNN built on the nn layers.

Each block computes::

    y = maxpool(relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x)), factor)

with one kernel length shared by both convolutions of the block. The
shortcut is the identity when channel counts match and a kernel-1
convolution otherwise. After the last block: global average pool,
dropout and a dense layer producing class logits.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import State
from .errors import ChecksumMismatch, InvalidConfig, IoFailure, ShapeMismatch, VersionMismatch
from .nn import functional as F
from .nn.layers import BatchNorm1d, Conv1d, Dense, Dropout, GlobalAvgPool, MaxPool1d, ReLU

DEFAULT_KERNELS = (65, 33, 17, 9, 5, 3)
DEFAULT_WIDTHS = (16, 16, 32, 32, 64, 64)


@dataclass(frozen=True)
class BlockConfig:
    kernel_len: int
    channels: int
    downsample_factor: int = 2

    def to_dict(self):
        return {"kernel_len": self.kernel_len, "channels": self.channels,
                "downsample_factor": self.downsample_factor}


def _default_blocks():
    return tuple(BlockConfig(k, c, 2) for k, c in zip(DEFAULT_KERNELS, DEFAULT_WIDTHS))


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 14
    input_len: int = 1920
    blocks: tuple = field(default_factory=_default_blocks)
    dropout_keep: float = 0.5
    n_classes: int = 3

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_lists(cls, kernels, channels, downsample=2, **kw):
        if len(kernels) != len(channels):
            raise InvalidConfig("kernel and channel lists differ in length")
        return cls(blocks=tuple(BlockConfig(k, c, downsample) for k, c in zip(kernels, channels)), **kw)

    def validate(self) -> None:
        if not self.blocks:
            raise InvalidConfig("at least one block is required")
        if self.input_channels < 1 or self.input_len < 1 or self.n_classes < 2:
            raise InvalidConfig("input_channels, input_len must be >= 1 and n_classes >= 2")
        if not 0 < self.dropout_keep <= 1:
            raise InvalidConfig(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")
        total = 1
        for i, b in enumerate(self.blocks):
            if b.kernel_len < 1 or b.kernel_len % 2 == 0:
                raise InvalidConfig(f"block {i}: kernel_len must be odd, got {b.kernel_len}")
            if b.channels < 1 or b.downsample_factor < 1:
                raise InvalidConfig(f"block {i}: channels and downsample_factor must be >= 1")
            total *= b.downsample_factor
        if self.input_len % total:
            raise InvalidConfig(
                f"input_len {self.input_len} not divisible by total downsampling {total}"
            )

    def lengths(self) -> list[int]:
        """Sequence length after each block."""
        out, n = [], self.input_len
        for b in self.blocks:
            n //= b.downsample_factor
            out.append(n)
        return out

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_len": self.input_len,
            "blocks": [b.to_dict() for b in self.blocks],
            "dropout_keep": self.dropout_keep,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(BlockConfig(**b) for b in d["blocks"])
        elif "kernel_lens" in d or "channels" in d:
            kernels = d.pop("kernel_lens", DEFAULT_KERNELS)
            channels = d.pop("channels", DEFAULT_WIDTHS)
            factor = d.pop("downsample_factor", 2)
            return cls.from_lists(kernels, channels, factor, **d)
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    """Trainable parameters: conv weights+biases, BN gamma+beta, dense."""
    cfg.validate()
    total, c_in = 0, cfg.input_channels
    for b in cfg.blocks:
        c, k = b.channels, b.kernel_len
        total += c_in * c * k + c + 2 * c  # conv1, bn1
        total += c * c * k + c + 2 * c  # conv2, bn2
        if c_in != c:
            total += c_in * c + c  # projection shortcut
        c_in = c
    return total + c_in * cfg.n_classes + cfg.n_classes


class ResidualBlock:
    def __init__(self, c_in, cfg: BlockConfig, rng, dtype=np.float32):
        c, k = cfg.channels, cfg.kernel_len
        self.conv1 = Conv1d(c_in, c, k, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(c, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv1d(c, c, k, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(c, dtype=dtype)
        self.shortcut = Conv1d(c_in, c, 1, rng=rng, dtype=dtype) if c_in != c else None
        self.relu2 = ReLU()
        self.pool = MaxPool1d(cfg.downsample_factor)

    def layers(self):
        named = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            named.append(("shortcut", self.shortcut))
        return named

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.pool.forward(self.relu2.forward(h + s))

    def backward(self, grad, input_grad=True):
        self.conv1.needs_input_grad = input_grad
        if self.shortcut is not None:
            self.shortcut.needs_input_grad = input_grad
        g = self.relu2.backward(self.pool.backward(grad))
        gs = g if self.shortcut is None else self.shortcut.backward(g)
        gh = self.conv2.backward(self.bn2.backward(g))
        gh = self.conv1.backward(self.bn1.backward(self.relu1.backward(gh)))
        if not input_grad:
            return None
        return gh + gs


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.blocks = []
        c_in = config.input_channels
        for b in config.blocks:
            self.blocks.append(ResidualBlock(c_in, b, rng, dtype))
            c_in = b.channels
        self.gap = GlobalAvgPool()
        self.dropout = Dropout(config.dropout_keep)
        self.dense = Dense(c_in, config.n_classes, rng=rng, dtype=dtype)

    # -- parameter traversal (fixed order; also the checkpoint order)

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"block{i}.{name}", layer
        yield "dense", self.dense

    def named_parameters(self):
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                yield f"{prefix}.{k}", v

    def named_buffers(self):
        for prefix, layer in self.named_layers():
            for k, v in layer.buffers.items():
                yield f"{prefix}.{k}", v

    def named_gradients(self):
        for prefix, layer in self.named_layers():
            for k in layer.params:
                yield f"{prefix}.{k}", layer.grads[k]

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def gradients(self):
        return [v for _, v in self.named_gradients()]

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters())

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.dense.params["weight"].dtype

    # -- passes

    def features(self, x, train=False):
        if x.ndim != 3 or x.shape[1:] != (self.config.input_channels, self.config.input_len):
            raise ShapeMismatch(
                f"input {x.shape} does not match model input "
                f"[B, {self.config.input_channels}, {self.config.input_len}]"
            )
        h = x
        for block in self.blocks:
            h = block.forward(h, train)
        return h

    def forward(self, x, train=False, dropout_seed=None):
        h = self.gap.forward(self.features(x, train))
        self.dropout.seed = dropout_seed
        h = self.dropout.forward(h, train)
        return self.dense.forward(h)

    def backward(self, grad_logits, input_grad=True):
        """Backpropagate logit gradients; returns the input gradient unless
        ``input_grad`` is False (training skips it)."""
        g = self.gap.backward(self.dropout.backward(self.dense.backward(grad_logits)))
        for i in range(len(self.blocks) - 1, -1, -1):
            g = self.blocks[i].backward(g, input_grad=input_grad or i > 0)
        return g

    def predict_proba(self, x, batch_size=256):
        x = np.asarray(x, dtype=self.dtype)
        out = [F.softmax(self.forward(x[i:i + batch_size], train=False).astype(np.float64))
               for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


@dataclass
class Prediction:
    label: State
    probabilities: np.ndarray


def predict(model: Model, clips) -> list[Prediction]:
    """Eval-mode predictions for normalized clips (Clip objects or a stacked array)."""
    if isinstance(clips, np.ndarray):
        x = clips
    else:
        clips = list(clips)
        if not clips:
            return []
        x = np.stack([c.data for c in clips])
    probs = model.predict_proba(x)
    return [Prediction(State(int(np.argmax(p))), p) for p in probs]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ND1D"
FORMAT_VERSION = 1


def _checkpoint_arrays(model: Model):
    return [v for _, v in model.named_parameters()] + [v for _, v in model.named_buffers()]


def save_model(model: Model, path) -> None:
    """Write magic, version byte, config JSON, float32 tensors, CRC32."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    values = np.concatenate([a.astype("<f4").ravel() for a in _checkpoint_arrays(model)])
    body = b"".join([
        MAGIC, bytes([FORMAT_VERSION]),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<I", values.size), values.tobytes(),
    ])
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 5 or data[:4] != MAGIC:
        raise ChecksumMismatch(f"{path}: not a checkpoint (bad magic or truncated)")
    if data[4] != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {data[4]}, expected {FORMAT_VERSION}")
    if len(data) < 4 + 5:
        raise ChecksumMismatch(f"{path}: truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: checksum mismatch (truncated or corrupted)")
    (n_cfg,) = struct.unpack_from("<I", body, 5)
    cfg = ModelConfig.from_dict(json.loads(body[9:9 + n_cfg].decode("utf-8")))
    offset = 9 + n_cfg
    (n_vals,) = struct.unpack_from("<I", body, offset)
    values = np.frombuffer(body, dtype="<f4", count=n_vals, offset=offset + 4)
    model = Model(cfg, seed=0)
    arrays = _checkpoint_arrays(model)
    if sum(a.size for a in arrays) != n_vals:
        raise ChecksumMismatch(f"{path}: parameter count does not match its config")
    pos = 0
    for a in arrays:
        a[...] = values[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return model
