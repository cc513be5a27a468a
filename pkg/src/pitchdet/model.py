"""Detector network assembly, forward pass, and weight serialization.

Topology: five bottom-up convolutional blocks (each a run of 3x3 conv+BN+ReLU
layers closed by a 2x2 max pool), a top-down pyramid path (nearest x2
upsampling, added to 1x1-reduced lower maps), and three prediction heads. The
ball head reads the stride-4 pyramid map; the player and box heads read the
stride-16 map. Classification heads end in a single 3x3 conv + sigmoid, the
box head in a 4-channel linear 3x3 conv.

With ``topdown_enabled=False`` the heads read the 1x1-reduced bottom-up maps
directly; the fifth block and the stride-8 lateral would be dead weight in
that wiring and are omitted entirely.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    batchnorm,
    conv2d,
    maxpool2x2,
    nearest_upsample2x,
    relu,
    sigmoid,
)

BALL_STRIDE = 4
PLAYER_STRIDE = 16
PAD_MULTIPLE = 32

WEIGHT_MAGIC = b"FNBW"
WEIGHT_VERSION = 1

# backbone 3x3 conv widths per block; the final width is overridden by the
# lateral channel count so the top-down addition is channel-compatible
_BACKBONE_WIDTHS = ((16,), (32, 32), (32, 32), (64, 64), (64, None))


class WeightFormatError(ValueError):
    """Raised when a weight file fails structural validation."""


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    lateral_channels: int = 32
    head_hidden_channels: int = 32
    topdown_enabled: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_channels <= 0 or self.lateral_channels <= 0 or self.head_hidden_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def canonical_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise WeightFormatError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class ConvSpec:
    """One conv layer of the plan; batchnorm layers carry 4 extra tensors."""

    name: str
    in_channels: int
    out_channels: int
    kernel: int
    has_bn: bool


def layer_plan(config: ModelConfig) -> list[ConvSpec]:
    """Every conv layer in deterministic topological order."""
    plan: list[ConvSpec] = []
    in_c = config.input_channels
    n_blocks = 5 if config.topdown_enabled else 4
    for bi, widths in enumerate(_BACKBONE_WIDTHS[:n_blocks], start=1):
        for li, width in enumerate(widths, start=1):
            out_c = config.lateral_channels if width is None else width
            plan.append(ConvSpec(f"conv{bi}_{li}", in_c, out_c, 3, True))
            in_c = out_c
    lat = config.lateral_channels
    plan.append(ConvSpec("lateral_s4", 32, lat, 1, False))
    if config.topdown_enabled:
        plan.append(ConvSpec("lateral_s8", 32, lat, 1, False))
    plan.append(ConvSpec("lateral_s16", 64, lat, 1, False))
    hid = config.head_hidden_channels
    for head, out_c in (("ball", 1), ("player", 1), ("bbox", 4)):
        plan.append(ConvSpec(f"{head}_hidden", lat, hid, 3, True))
        plan.append(ConvSpec(f"{head}_out", hid, out_c, 3, False))
    return plan


def _tensor_names(spec: ConvSpec) -> list[str]:
    names = [f"{spec.name}/weight", f"{spec.name}/bias"]
    if spec.has_bn:
        names += [
            f"{spec.name}/gamma",
            f"{spec.name}/beta",
            f"{spec.name}/running_mean",
            f"{spec.name}/running_var",
        ]
    return names


def _expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    out: list[tuple[str, tuple[int, ...]]] = []
    for spec in layer_plan(config):
        out.append((f"{spec.name}/weight", (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)))
        out.append((f"{spec.name}/bias", (spec.out_channels,)))
        if spec.has_bn:
            for field in ("gamma", "beta", "running_mean", "running_var"):
                out.append((f"{spec.name}/{field}", (spec.out_channels,)))
    return out


class NetworkWeights:
    """Ordered, named tensors for one network instance, plus its config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = dict(tensors)
        expected = [name for name, _ in _expected_shapes(config)]
        if list(self._tensors) != expected:
            raise WeightFormatError("tensor names do not match the layout implied by the config")

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    @staticmethod
    def is_trainable(name: str) -> bool:
        return not name.endswith(("running_mean", "running_var"))

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self.is_trainable(n)]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.trainable_items())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "NetworkWeights":
        copied = {
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self._tensors.items()
        }
        return NetworkWeights(self.config, copied)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable-scalar count implied by a config."""
    total = 0
    for spec in layer_plan(config):
        total += spec.out_channels * spec.in_channels * spec.kernel * spec.kernel + spec.out_channels
        if spec.has_bn:
            total += 2 * spec.out_channels  # gamma + beta; running stats are not trained
    return total


def build_network(config: ModelConfig, seed: int) -> NetworkWeights:
    """Fresh weights: He-normal convs, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    tensors: dict[str, Tensor] = {}
    for spec in layer_plan(config):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        tensors[f"{spec.name}/weight"] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)
        tensors[f"{spec.name}/bias"] = Tensor(np.zeros(spec.out_channels, dtype=dt), requires_grad=True)
        if spec.has_bn:
            tensors[f"{spec.name}/gamma"] = Tensor(np.ones(spec.out_channels, dtype=dt), requires_grad=True)
            tensors[f"{spec.name}/beta"] = Tensor(np.zeros(spec.out_channels, dtype=dt), requires_grad=True)
            tensors[f"{spec.name}/running_mean"] = Tensor(np.zeros(spec.out_channels, dtype=dt))
            tensors[f"{spec.name}/running_var"] = Tensor(np.ones(spec.out_channels, dtype=dt))
    return NetworkWeights(config, tensors)


@dataclass
class NetworkOutputs:
    """Per-frame prediction maps; logits kept alongside for the training loss."""

    ball_map: Tensor  # (n, 1, H/4, W/4), values in [0, 1]
    player_map: Tensor  # (n, 1, H/16, W/16), values in [0, 1]
    bbox_tensor: Tensor  # (n, 4, H/16, W/16)
    ball_logits: Tensor
    player_logits: Tensor


def forward(weights: NetworkWeights, x: Tensor, mode: str = "eval") -> NetworkOutputs:
    """Run the detector on a batch of images.

    ``x`` is (n, input_channels, H, W) with H and W divisible by 32; callers
    pad with zeros on the bottom/right to reach that (see the pipeline
    helpers). ``mode`` selects batchnorm behavior.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"forward input must be rank-4 NCHW, got shape {x.shape}")
    cfg = weights.config
    n, c, h, w = x.shape
    if c != cfg.input_channels:
        raise ShapeError(f"input has {c} channels, network expects {cfg.input_channels}")
    if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
        raise ShapeError(
            f"input spatial dims {h}x{w} must be divisible by {PAD_MULTIPLE}: pad the image first"
        )

    def cbr(name: str, t: Tensor) -> Tensor:
        t = conv2d(t, weights[f"{name}/weight"], weights[f"{name}/bias"])
        t = batchnorm(
            t,
            weights[f"{name}/gamma"],
            weights[f"{name}/beta"],
            weights[f"{name}/running_mean"],
            weights[f"{name}/running_var"],
            mode,
        )
        return relu(t)

    def lateral(name: str, t: Tensor) -> Tensor:
        return conv2d(t, weights[f"{name}/weight"], weights[f"{name}/bias"])

    def head(name: str, t: Tensor) -> Tensor:
        return conv2d(cbr(f"{name}_hidden", t), weights[f"{name}_out/weight"], weights[f"{name}_out/bias"])

    t = maxpool2x2(cbr("conv1_1", x))
    c2 = maxpool2x2(cbr("conv2_2", cbr("conv2_1", t)))
    c3 = maxpool2x2(cbr("conv3_2", cbr("conv3_1", c2)))
    c4 = maxpool2x2(cbr("conv4_2", cbr("conv4_1", c3)))
    if cfg.topdown_enabled:
        c5 = maxpool2x2(cbr("conv5_2", cbr("conv5_1", c4)))
        x16 = add(lateral("lateral_s16", c4), nearest_upsample2x(c5))
        x8 = add(lateral("lateral_s8", c3), nearest_upsample2x(x16))
        x4 = add(lateral("lateral_s4", c2), nearest_upsample2x(x8))
    else:
        x16 = lateral("lateral_s16", c4)
        x4 = lateral("lateral_s4", c2)

    ball_logits = head("ball", x4)
    player_logits = head("player", x16)
    bbox_tensor = head("bbox", x16)
    return NetworkOutputs(
        ball_map=sigmoid(ball_logits),
        player_map=sigmoid(player_logits),
        bbox_tensor=bbox_tensor,
        ball_logits=ball_logits,
        player_logits=player_logits,
    )


# ---------------------------------------------------------------------------
# weight file format
#
# magic "FNBW" | u32 version | 32-byte sha256 of the config JSON | u32 config
# length | config JSON | u32 tensor count | per tensor: u32 name length, UTF-8
# name, u32 rank, u32 dims..., raw little-endian float32 data in C order.
# All integers little-endian. Round trip is bit-exact for float32 weights;
# float64 weights are truncated to float32 on save.
# ---------------------------------------------------------------------------


def save_weights(weights: NetworkWeights, destination) -> int:
    """Serialize to the FNBW format; returns bytes written."""
    cfg_bytes = weights.config.canonical_json()
    chunks = [
        WEIGHT_MAGIC,
        struct.pack("<I", WEIGHT_VERSION),
        hashlib.sha256(cfg_bytes).digest(),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(weights.names())),
    ]
    for name, tensor in weights.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    if hasattr(destination, "write"):
        destination.write(blob)
    else:
        Path(destination).write_bytes(blob)
    return len(blob)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise WeightFormatError(f"truncated file while reading {what}")
    return buf


def load_weights(source) -> NetworkWeights:
    """Parse an FNBW file, validating layout against its embedded config."""
    if hasattr(source, "read"):
        return _load_from(source)
    with open(source, "rb") as f:
        return _load_from(f)


def _load_from(f: BinaryIO) -> NetworkWeights:
    magic = _read_exact(f, 4, "magic")
    if magic != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    digest = _read_exact(f, 32, "config digest")
    (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
    cfg_bytes = _read_exact(f, cfg_len, "config JSON")
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise WeightFormatError("config digest mismatch")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_bytes))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, WeightFormatError):
            raise
        raise WeightFormatError(f"invalid config JSON: {exc}") from exc
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    expected = _expected_shapes(config)
    if count != len(expected):
        raise WeightFormatError(f"tensor count {count} does not match config layout ({len(expected)})")
    dt = config.np_dtype
    tensors: dict[str, Tensor] = {}
    for exp_name, exp_shape in expected:
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))
        name = _read_exact(f, name_len, "tensor name").decode("utf-8")
        if name != exp_name:
            raise WeightFormatError(f"tensor name mismatch: expected {exp_name!r}, found {name!r}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}"))
        if dims != exp_shape:
            raise WeightFormatError(f"tensor {name!r}: dims {dims} do not match expected {exp_shape}")
        n_elem = int(np.prod(dims)) if dims else 1
        raw = _read_exact(f, 4 * n_elem, f"data of {name}")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(dt)
        tensors[name] = Tensor(data, requires_grad=NetworkWeights.is_trainable(name))
    trailing = f.read(1)
    if trailing:
        raise WeightFormatError("trailing bytes after final tensor")
    return NetworkWeights(config, tensors)
