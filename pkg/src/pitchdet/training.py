"""Adam training loop with seeded augmentation and exact-resume checkpoints.

One run is fully determined by (seed, dataset, config): shuffling,
augmentation draws, and optimizer state all flow from a single seeded
generator, and the training-state sidecar saved next to each checkpoint
captures enough (moments, step count, generator state) to continue a run
bit-exactly. The loss log has one tab-separated line per epoch: epoch number
(1-based), learning rate, total loss, and the ball/player/box components.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import Dataset, GroundTruthFrame, pad_to_stride
from .loss import LossWeights, build_targets, total_loss
from .model import (
    BALL_STRIDE,
    PAD_MULTIPLE,
    PLAYER_STRIDE,
    ModelConfig,
    NetworkWeights,
    build_network,
    forward,
    load_weights,
    save_weights,
)
from .tensor import Tape, Tensor

STATE_MAGIC = b"FNBS"
STATE_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when training hits non-finite losses or gradients."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    """Geometric and photometric jitter applied per frame, in this order:
    uniform scale, random crop (re-rolled so at least one annotation
    survives when any existed), horizontal flip, photometric jitter.
    ``crop_size`` of None disables cropping."""

    scale_range: tuple[float, float] = (0.8, 1.2)
    crop_size: Optional[tuple[int, int]] = None  # (width, height)
    crop_attempts: int = 16
    hflip_prob: float = 0.5
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.05
    photometric_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"scale_range must be 0 < lo <= hi, got {self.scale_range}")
        for name in ("hflip_prob", "photometric_prob"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ValueError("photometric ranges must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue shift range must be <= 0.5 (half a hue revolution)")
        if self.crop_attempts < 1:
            raise ValueError("crop_attempts must be >= 1")
        if self.crop_size is not None and min(self.crop_size) < 1:
            raise ValueError("crop_size must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_drop_epoch: int = 75
    lr_drop_factor: float = 10.0
    epochs: int = 100
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 25
    loss_weights: LossWeights = LossWeights()
    augmentation: Optional[AugmentationSpec] = AugmentationSpec()

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if not (0 < self.lr_drop_epoch <= self.epochs):
            raise ValueError("lr_drop_epoch must satisfy 0 < lr_drop_epoch <= epochs")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size, and checkpoint_every must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("adam parameters out of range")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss_weights"] = asdict(self.loss_weights)
        out["augmentation"] = None if self.augmentation is None else asdict(self.augmentation)
        return out

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        data = dict(data)
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        if data.get("loss_weights") is not None and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = _nested_from_dict(LossWeights, data["loss_weights"])
        if data.get("augmentation") is not None and isinstance(data["augmentation"], dict):
            data["augmentation"] = _nested_from_dict(AugmentationSpec, data["augmentation"])
        return TrainConfig(**data)


def _nested_from_dict(cls, data: dict):
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    data = dict(data)
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = tuple(value)
    return cls(**data)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index: lr0 before the drop epoch,
    lr0 / drop_factor from it onward."""
    if not (0 <= epoch < cfg.epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 if epoch < cfg.lr_drop_epoch else cfg.lr0 / cfg.lr_drop_factor


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample of a (c, h, w) array."""
    c, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yf = np.floor(ys)
    xf = np.floor(xs)
    wy = (ys - yf)[None, :, None]
    wx = (xs - xf)[None, None, :]
    y0 = np.clip(yf, 0, h - 1).astype(int)
    y1 = np.clip(yf + 1, 0, h - 1).astype(int)
    x0 = np.clip(xf, 0, w - 1).astype(int)
    x1 = np.clip(xf + 1, 0, w - 1).astype(int)
    top = (1.0 - wx) * image[:, y0[:, None], x0[None, :]] + wx * image[:, y0[:, None], x1[None, :]]
    bot = (1.0 - wx) * image[:, y1[:, None], x0[None, :]] + wx * image[:, y1[:, None], x1[None, :]]
    out = (1.0 - wy) * top + wy * bot
    return out.astype(image.dtype, copy=False)


def _photometric(image: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Brightness/contrast scaling plus saturation/hue jitter in HSV space.

    Each transform applies independently with ``photometric_prob``; the coin
    flips are always drawn so the random stream stays aligned."""
    do_bright = rng.random() < spec.photometric_prob
    do_contrast = rng.random() < spec.photometric_prob
    do_sat = rng.random() < spec.photometric_prob
    do_hue = rng.random() < spec.photometric_prob
    out = image
    if do_bright and spec.brightness > 0:
        out = out * (1.0 + rng.uniform(-spec.brightness, spec.brightness))
    if do_contrast and spec.contrast > 0:
        mean = out.mean()
        out = (out - mean) * (1.0 + rng.uniform(-spec.contrast, spec.contrast)) + mean
    if out is not image:
        out = np.clip(out, 0.0, 1.0)
    if (do_sat and spec.saturation > 0) or (do_hue and spec.hue > 0):
        from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

        hsv = rgb_to_hsv(np.moveaxis(out, 0, -1))
        if do_sat and spec.saturation > 0:
            hsv[..., 1] = np.clip(
                hsv[..., 1] * (1.0 + rng.uniform(-spec.saturation, spec.saturation)), 0.0, 1.0
            )
        if do_hue and spec.hue > 0:
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-spec.hue, spec.hue)) % 1.0
        out = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
    return np.ascontiguousarray(out, dtype=image.dtype)


def augment(
    image: np.ndarray,
    gt: GroundTruthFrame,
    spec: AugmentationSpec,
    rng,
) -> tuple[np.ndarray, GroundTruthFrame]:
    """Jitter one (c, h, w) frame and transform its annotations to match.

    Draw order per frame: scale factor; crop offsets (one x/y pair per
    attempt); flip coin; four photometric coins, each followed by its factor
    when it lands. Annotations whose centers leave the crop are dropped.
    """
    c, h, w = image.shape
    s = rng.uniform(*spec.scale_range)
    new_h, new_w = max(1, round(h * s)), max(1, round(w * s))
    sx, sy = new_w / w, new_h / h
    image = bilinear_resize(image, new_h, new_w)
    balls = [(x * sx, y * sy) for x, y in gt.ball_points]
    players = [(cx * sx, cy * sy, bw * sx, bh * sy) for cx, cy, bw, bh in gt.player_boxes]

    if spec.crop_size is not None:
        cw, ch = spec.crop_size
        if cw > new_w or ch > new_h:
            raise ValueError(
                f"crop {spec.crop_size} larger than scaled image ({new_w}, {new_h})"
            )
        had_annotations = bool(balls or players)
        for _ in range(spec.crop_attempts):
            ox = int(rng.integers(0, new_w - cw + 1))
            oy = int(rng.integers(0, new_h - ch + 1))
            kept_balls = [
                (x - ox, y - oy) for x, y in balls if ox <= x < ox + cw and oy <= y < oy + ch
            ]
            kept_players = [
                (cx - ox, cy - oy, bw, bh)
                for cx, cy, bw, bh in players
                if ox <= cx < ox + cw and oy <= cy < oy + ch
            ]
            if not had_annotations or kept_balls or kept_players:
                break
        image = np.ascontiguousarray(image[:, oy : oy + ch, ox : ox + cw])
        balls, players = kept_balls, kept_players
        new_w, new_h = cw, ch

    if rng.random() < spec.hflip_prob:
        image = np.ascontiguousarray(image[:, :, ::-1])
        # mirror as x <- W-1-x; fractional centers within the last pixel
        # would land just below 0, so clamp to stay inside the frame
        balls = [(max(0.0, new_w - 1 - x), y) for x, y in balls]
        players = [(max(0.0, new_w - 1 - cx), cy, bw, bh) for cx, cy, bw, bh in players]

    image = _photometric(image, spec, rng)
    return image, GroundTruthFrame(ball_points=tuple(balls), player_boxes=tuple(players))


def derived_crop_size(spec: AugmentationSpec, width: int, height: int) -> tuple[int, int]:
    """Largest stride-aligned crop guaranteed to fit any scaled version of a
    width-by-height frame (used when cropping is wanted but no size given)."""
    lo = spec.scale_range[0]
    cw = max(PAD_MULTIPLE, int(lo * width) // PAD_MULTIPLE * PAD_MULTIPLE)
    ch = max(PAD_MULTIPLE, int(lo * height) // PAD_MULTIPLE * PAD_MULTIPLE)
    return cw, ch


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment per trainable parameter plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def initialize(named_params: Iterable[tuple[str, Tensor]]) -> "AdamState":
        params = list(named_params)
        return AdamState(
            m={name: np.zeros_like(p.data) for name, p in params},
            v={name: np.zeros_like(p.data) for name, p in params},
        )


def adam_step(
    state: AdamState,
    named_params: Iterable[tuple[str, Tensor]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, param in named_params:
        g = param.grad
        if g is None:
            raise NumericalError(f"parameter {name} received no gradient")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        param.data -= update.astype(param.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# training-state sidecar (exact resume)
# ---------------------------------------------------------------------------


def save_training_state(
    path,
    state: AdamState,
    epochs_completed: int,
    rng: np.random.Generator,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> None:
    """Serialize optimizer moments, step count, and generator state so a run
    can continue exactly where it stopped."""
    header = {
        "epochs_completed": int(epochs_completed),
        "step": int(state.t),
        "rng_state": rng.bit_generator.state,
        "model_config": json.loads(model_config.canonical_json()),
        "train_config": train_config.to_dict(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    names = sorted(state.m)
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<I", STATE_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", 2 * len(names)))
        for prefix, bank in (("m", state.m), ("v", state.v)):
            for name in names:
                arr = bank[name]
                tag = f"{prefix}/{name}".encode("utf-8")
                f.write(struct.pack("<I", len(tag)))
                f.write(tag)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(struct.pack("<I", arr.dtype.itemsize))
                f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exactly(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"training state file truncated while reading {what}")
    return data


def load_training_state(path) -> tuple[AdamState, dict]:
    """Read a training-state sidecar; returns the optimizer state and the
    header (epochs_completed, step, rng_state, model/train config dicts)."""
    with open(path, "rb") as f:
        if _read_exactly(f, 4, "magic") != STATE_MAGIC:
            raise ValueError("not a training state file (bad magic)")
        (version,) = struct.unpack("<I", _read_exactly(f, 4, "version"))
        if version != STATE_VERSION:
            raise ValueError(f"unsupported training state version {version}")
        (blob_len,) = struct.unpack("<I", _read_exactly(f, 4, "header length"))
        header = json.loads(_read_exactly(f, blob_len, "header"))
        (count,) = struct.unpack("<I", _read_exactly(f, 4, "tensor count"))
        banks: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exactly(f, 4, "name length"))
            tag = _read_exactly(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exactly(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exactly(f, 4 * rank, "dims"))
            (itemsize,) = struct.unpack("<I", _read_exactly(f, 4, "item size"))
            dtype = np.dtype(f"<f{itemsize}")
            n_bytes = int(np.prod(shape, dtype=np.int64)) * itemsize if rank else itemsize
            raw = _read_exactly(f, n_bytes, f"data for {tag}")
            prefix, _, name = tag.partition("/")
            if prefix not in banks:
                raise ValueError(f"unexpected tensor tag {tag!r}")
            banks[prefix][name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing bytes after training state payload")
    if set(banks["m"]) != set(banks["v"]):
        raise ValueError("moment banks are inconsistent")
    state = AdamState(m=banks["m"], v=banks["v"], t=int(header["step"]))
    return state, header


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossLogRow:
    epoch: int  # 1-based
    lr: float
    total: float
    ball: float
    player: float
    bbox: float

    def format(self) -> str:
        return (
            f"{self.epoch}\t{self.lr:.8g}\t{self.total:.8f}"
            f"\t{self.ball:.8f}\t{self.player:.8f}\t{self.bbox:.8f}"
        )


LOG_HEADER = "epoch\tlr\ttotal\tball\tplayer\tbbox"


@dataclass
class TrainResult:
    weights: NetworkWeights
    log_rows: list[LossLogRow]
    log_path: Path
    final_weights_path: Path
    final_state_path: Path
    checkpoint_paths: list[Path]


def _batch_indices(order: np.ndarray, batch_size: int) -> list[list[int]]:
    return [
        [int(i) for i in order[k : k + batch_size]] for k in range(0, len(order), batch_size)
    ]


def _prepare_frame(dataset, idx, aug_spec, rng):
    image = dataset.load_array(idx)
    gt = dataset[idx].gt
    if aug_spec is not None:
        image, gt = augment(image, gt, aug_spec, rng)
    padded, _ = pad_to_stride(image, PAD_MULTIPLE)
    return padded, gt


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    resume_from=None,
) -> TrainResult:
    """Run the full training loop, writing checkpoints and a loss log.

    ``resume_from`` names a checkpoint weight file; its training-state
    sidecar (same path plus ``.state``) restores optimizer moments, step
    count, and the random stream, so the continued run is bit-identical to
    one that never stopped. Checkpoints land every ``checkpoint_every``
    epochs and at the end, each as weights plus sidecar.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train_config

    rng = np.random.default_rng(cfg.seed)
    aug_spec = cfg.augmentation
    if aug_spec is not None and aug_spec.crop_size is None and (
        aug_spec.scale_range != (1.0, 1.0) or cfg.batch_size > 1
    ):
        probe = dataset.load_array(0)
        aug_spec = replace(
            aug_spec, crop_size=derived_crop_size(aug_spec, probe.shape[2], probe.shape[1])
        )

    start_epoch = 0
    if resume_from is not None:
        weights = load_weights(resume_from)
        if weights.config != model_config:
            raise ValueError("checkpoint model config does not match the requested one")
        state, header = load_training_state(str(resume_from) + ".state")
        # compare through a JSON round trip so tuples and lists unify
        if header["train_config"] != json.loads(json.dumps(cfg.to_dict())):
            raise ValueError("checkpoint train config does not match the requested one")
        start_epoch = int(header["epochs_completed"])
        rng.bit_generator.state = header["rng_state"]
    else:
        weights = build_network(model_config, seed=cfg.seed)
        state = AdamState.initialize(weights.trainable_items())

    log_path = out_dir / "loss_log.tsv"
    log_rows: list[LossLogRow] = []
    checkpoint_paths: list[Path] = []
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    np_dtype = model_config.np_dtype

    def checkpoint(epoch_1based: int) -> Path:
        wpath = out_dir / f"checkpoint_{epoch_1based:04d}.fnbw"
        save_weights(weights, wpath)
        save_training_state(
            str(wpath) + ".state", state, epoch_1based, rng, model_config, cfg
        )
        checkpoint_paths.append(wpath)
        return wpath

    with open(log_path, mode, encoding="utf-8") as log_f:
        if mode == "w":
            log_f.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = rng.permutation(len(dataset))
            sums = np.zeros(4)
            n_images = 0
            for batch in _batch_indices(order, cfg.batch_size):
                frames = [_prepare_frame(dataset, i, aug_spec, rng) for i in batch]
                shapes = {f[0].shape for f in frames}
                if len(shapes) != 1:
                    raise ValueError(
                        f"frames in one batch have different shapes {sorted(shapes)}; "
                        "enable cropping or preprocess the dataset to one size"
                    )
                x = Tensor(np.stack([f[0] for f in frames]).astype(np_dtype, copy=False))
                _, _, fh, fw = x.shape
                ball_grid = (fh // BALL_STRIDE, fw // BALL_STRIDE)
                player_grid = (fh // PLAYER_STRIDE, fw // PLAYER_STRIDE)
                assignments = [
                    build_targets(f[1], ball_grid, player_grid) for f in frames
                ]
                weights.zero_grads()
                with Tape() as tape:
                    outputs = forward(weights, x, mode="train")
                    loss_t, breakdown = total_loss(outputs, assignments, cfg.loss_weights)
                    if not np.isfinite(breakdown.total):
                        raise NumericalError(
                            f"non-finite loss at epoch {epoch + 1} on frames {batch}"
                        )
                    tape.backward(loss_t)
                adam_step(
                    state, weights.trainable_items(), lr, cfg.beta1, cfg.beta2, cfg.eps
                )
                k = len(batch)
                sums += k * np.array(
                    [breakdown.total, breakdown.ball, breakdown.player, breakdown.bbox]
                )
                n_images += k
            row = LossLogRow(
                epoch + 1, lr, *(float(v) for v in sums / n_images)
            )
            log_rows.append(row)
            log_f.write(row.format() + "\n")
            log_f.flush()
            if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 != cfg.epochs:
                checkpoint(epoch + 1)
        final_path = checkpoint(cfg.epochs)

    return TrainResult(
        weights=weights,
        log_rows=log_rows,
        log_path=log_path,
        final_weights_path=final_path,
        final_state_path=Path(str(final_path) + ".state"),
        checkpoint_paths=checkpoint_paths,
    )
