"""Dataset I/O: annotations, bit-exact PPM images, synthetic scenes, splits.

Annotations are line-delimited JSON, one frame per line, with exact field
names ``"frame"`` (image path relative to the dataset root), ``"balls"``
(list of ``[x, y]`` pixel points) and ``"players"`` (list of
``[cx, cy, bw, bh]`` center+size pixel boxes), origin top-left. An optional
``"sequence"`` string groups frames for by-sequence splitting. Unknown fields
are ignored with a warning; malformed lines raise with their line number.

Images: binary PPM (P6, 8-bit) is always supported and bit-exact; PNG is
available when Pillow is installed (the ``png`` extra).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tensor import Tensor


class AnnotationError(ValueError):
    """Raised for malformed annotation files; messages carry line numbers."""


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


ANNOTATION_FIELDS = {"frame", "balls", "players", "sequence"}


@dataclass(frozen=True)
class GroundTruthFrame:
    """Per-frame ground truth: ball center points and player center+size boxes."""

    ball_points: tuple[tuple[float, float], ...] = ()
    player_boxes: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        for box in self.player_boxes:
            if box[2] <= 0 or box[3] <= 0:
                raise AnnotationError(f"player box {box} must have positive width and height")


@dataclass(frozen=True)
class FrameRecord:
    frame: str  # image path, relative to the dataset root
    gt: GroundTruthFrame
    sequence: str = ""


class Dataset:
    """An ordered list of frame records rooted at a directory."""

    def __init__(self, root, records: Sequence[FrameRecord]):
        self.root = Path(root)
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> FrameRecord:
        return self.records[idx]

    def frame_path(self, idx: int) -> Path:
        return self.root / self.records[idx].frame

    def load_array(self, idx: int) -> np.ndarray:
        """Image as float32 (3, h, w) scaled to [0, 1]."""
        arr = read_image(self.frame_path(idx))
        return arr.astype(np.float32).transpose(2, 0, 1) / 255.0

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.root, [self.records[i] for i in indices])


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def _parse_points(raw, lineno: int, field: str, arity: int):
    if not isinstance(raw, list):
        raise AnnotationError(f"line {lineno}: {field!r} must be a list")
    out = []
    for entry in raw:
        if not isinstance(entry, list) or len(entry) != arity or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry
        ):
            raise AnnotationError(f"line {lineno}: {field!r} entries must be length-{arity} numbers, got {entry!r}")
        out.append(tuple(float(v) for v in entry))
    return tuple(out)


def parse_annotation_line(line: str, lineno: int) -> FrameRecord:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"line {lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise AnnotationError(f"line {lineno}: expected a JSON object")
    unknown = set(raw) - ANNOTATION_FIELDS
    if unknown:
        warnings.warn(f"annotation line {lineno}: ignoring unknown field(s) {sorted(unknown)}")
    if "frame" not in raw or not isinstance(raw["frame"], str):
        raise AnnotationError(f"line {lineno}: missing or non-string 'frame' field")
    balls = _parse_points(raw.get("balls", []), lineno, "balls", 2)
    players = _parse_points(raw.get("players", []), lineno, "players", 4)
    try:
        gt = GroundTruthFrame(ball_points=balls, player_boxes=players)
    except AnnotationError as exc:
        raise AnnotationError(f"line {lineno}: {exc}") from exc
    sequence = raw.get("sequence", "")
    if not isinstance(sequence, str):
        raise AnnotationError(f"line {lineno}: 'sequence' must be a string")
    return FrameRecord(frame=raw["frame"], gt=gt, sequence=sequence)


def load_annotations(path) -> list[FrameRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                records.append(parse_annotation_line(line, lineno))
    return records


def save_annotations(path, records: Iterable[FrameRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "frame": rec.frame,
                "balls": [list(p) for p in rec.gt.ball_points],
                "players": [list(b) for b in rec.gt.player_boxes],
            }
            if rec.sequence:
                obj["sequence"] = rec.sequence
            f.write(json.dumps(obj) + "\n")


def _clip_frame(rec: FrameRecord, width: int, height: int, policy: str, path: str) -> FrameRecord:
    """Apply the out-of-bounds policy ('clip' or 'drop') to one record."""
    balls, players = [], []
    dirty = False
    for x, y in rec.gt.ball_points:
        if 0 <= x < width and 0 <= y < height:
            balls.append((x, y))
            continue
        dirty = True
        if policy == "clip":
            balls.append((min(max(x, 0.0), width - 1.0), min(max(y, 0.0), height - 1.0)))
    for cx, cy, bw, bh in rec.gt.player_boxes:
        if 0 <= cx < width and 0 <= cy < height:
            players.append((cx, cy, bw, bh))
            continue
        dirty = True
        if policy == "clip":
            players.append(
                (min(max(cx, 0.0), width - 1.0), min(max(cy, 0.0), height - 1.0), bw, bh)
            )
    if not dirty:
        return rec
    warnings.warn(f"{path}: out-of-bounds annotation ({policy}ped) in frame {rec.frame!r}")
    return replace(rec, gt=GroundTruthFrame(tuple(balls), tuple(players)))


def load_dataset(annotations_path, root=None, oob_policy: str = "clip", check_images: bool = True) -> Dataset:
    """Build a dataset from an annotation file, validating referenced images.

    Image existence is always checked when ``check_images``; PPM frames also
    get a header-based bounds check of their annotations, applying
    ``oob_policy`` ('clip' or 'drop') with a warning.
    """
    if oob_policy not in ("clip", "drop"):
        raise ValueError(f"oob_policy must be 'clip' or 'drop', got {oob_policy!r}")
    annotations_path = Path(annotations_path)
    root = Path(root) if root is not None else annotations_path.parent
    records = load_annotations(annotations_path)
    if check_images:
        checked = []
        for rec in records:
            img_path = root / rec.frame
            if not img_path.is_file():
                raise AnnotationError(f"missing image file: {img_path}")
            if img_path.suffix.lower() == ".ppm":
                w, h = ppm_size(img_path)
                rec = _clip_frame(rec, w, h, oob_policy, str(annotations_path))
            checked.append(rec)
        records = checked
    return Dataset(root, records)


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit) codec
# ---------------------------------------------------------------------------


def _ppm_token(f: BinaryIO) -> bytes:
    """Next header token, skipping whitespace and # comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ImageFormatError("truncated PPM header")
        if ch == b"#" and not tok:
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def _ppm_header(f: BinaryIO) -> tuple[int, int]:
    magic = _ppm_token(f)
    if magic != b"P6":
        raise ImageFormatError(f"not a binary PPM (P6) file: magic {magic!r}")
    try:
        width, height, maxval = (int(_ppm_token(f)) for _ in range(3))
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric PPM header field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM supported (maxval 255), got {maxval}")
    return width, height


def ppm_size(path) -> tuple[int, int]:
    """(width, height) from a PPM header without reading pixel data."""
    with open(path, "rb") as f:
        return _ppm_header(f)


def read_ppm(path) -> np.ndarray:
    """Decode to a (h, w, 3) uint8 RGB array, bit-exactly."""
    with open(path, "rb") as f:
        width, height = _ppm_header(f)
        raw = f.read(3 * width * height)
    if len(raw) != 3 * width * height:
        raise ImageFormatError(f"truncated PPM pixel data: got {len(raw)} of {3 * width * height} bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, array: np.ndarray) -> None:
    if array.ndim != 3 or array.shape[2] != 3 or array.dtype != np.uint8:
        raise ImageFormatError(f"write_ppm needs a (h, w, 3) uint8 array, got {array.shape} {array.dtype}")
    height, width = array.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode())
        f.write(np.ascontiguousarray(array).tobytes())


def _supported_formats() -> str:
    try:
        import PIL  # noqa: F401

        return "PPM (P6), PNG"
    except ImportError:
        return "PPM (P6); PNG with the optional Pillow dependency"


def read_image(path) -> np.ndarray:
    """(h, w, 3) uint8 RGB from PPM always, PNG when Pillow is available."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"P6":
        return read_ppm(path)
    if head == b"\x89P":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageFormatError(
                f"PNG support requires the optional Pillow dependency; supported formats: {_supported_formats()}"
            ) from exc
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    raise ImageFormatError(f"unsupported image format for {path.name!r}; supported formats: {_supported_formats()}")


def write_image(path, array: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, array)
        return
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageFormatError("writing PNG requires the optional Pillow dependency") from exc
        Image.fromarray(array, mode="RGB").save(path)
        return
    raise ImageFormatError(f"unsupported output format {path.suffix!r}; use .ppm or .png")


def load_image(path) -> Tensor:
    """Image as a Tensor(1, 3, h, w) with values v/255 in [0, 1]."""
    arr = read_image(path)
    return Tensor(arr.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)


def pad_to_stride(image: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad a (c, h, w) image on the bottom/right to a stride multiple.

    Returns the padded array and the original (width, height).
    """
    c, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    return image, (w, h)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Deterministic desk-scale scenes: textured green field, white-circle
    balls, colored rectangle players with limb-like noise."""

    width: int = 256
    height: int = 256
    ball_radius: tuple[int, int] = (4, 10)
    balls_per_frame: int = 1
    players_per_frame: tuple[int, int] = (2, 4)
    player_width: tuple[int, int] = (12, 22)
    player_height: tuple[int, int] = (26, 46)
    occlusion_prob: float = 0.15
    # keep player centers at least this far apart so every object occupies
    # its own neighborhood on the stride-16 grid
    min_center_distance: int = 48
    n_sequences: int = 1

    def __post_init__(self):
        margin = 2 * (self.ball_radius[1] + 1)
        if self.width < max(64, margin) or self.height < max(64, margin):
            raise ValueError("scene too small for the configured objects")
        if not (0.0 <= self.occlusion_prob <= 1.0):
            raise ValueError("occlusion_prob must lie in [0, 1]")
        if self.balls_per_frame < 0 or self.n_sequences < 1:
            raise ValueError("object counts must be non-negative, n_sequences >= 1")


_FIELD_BASE = np.array([0.13, 0.42, 0.15])
_FIELD_ALT = np.array([0.16, 0.50, 0.18])


def _draw_rect(img: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    h, w = img.shape[:2]
    xa, ya = max(0, int(round(x0))), max(0, int(round(y0)))
    xb, yb = min(w, int(round(x1))), min(h, int(round(y1)))
    if xa < xb and ya < yb:
        img[ya:yb, xa:xb] = color


def _render_player(img, rng, cx, cy, bw, bh):
    jersey = rng.uniform(0.45, 0.95, size=3)
    jersey[1] *= 0.5  # keep it distinguishable from the green field
    shorts = jersey * rng.uniform(0.4, 0.8)
    skin = np.array([0.75, 0.6, 0.5]) * rng.uniform(0.85, 1.1)
    x0, y0 = cx - bw / 2, cy - bh / 2
    # torso, head, legs; proportions jittered for limb-like raggedness
    _draw_rect(img, cx - 0.36 * bw, y0 + 0.22 * bh, cx + 0.36 * bw, y0 + 0.58 * bh, jersey)
    head_r = 0.14 * bh
    _draw_rect(img, cx - head_r / 2, y0 + 0.05 * bh, cx + head_r / 2, y0 + 0.22 * bh, skin)
    for side in (-1, 1):
        lx = cx + side * rng.uniform(0.08, 0.22) * bw
        _draw_rect(img, lx - 0.08 * bw, y0 + 0.58 * bh, lx + 0.08 * bw, y0 + rng.uniform(0.85, 1.0) * bh, shorts)
        ax = cx + side * rng.uniform(0.3, 0.46) * bw
        _draw_rect(img, ax - 0.06 * bw, y0 + rng.uniform(0.24, 0.3) * bh, ax + 0.06 * bw, y0 + 0.5 * bh, skin)


def _render_frame(spec: SyntheticSceneSpec, rng) -> tuple[np.ndarray, GroundTruthFrame]:
    h, w = spec.height, spec.width
    stripe = int(rng.integers(16, 33))
    phase = int(rng.integers(0, stripe))
    stripes = (((np.arange(w) + phase) // stripe) % 2).astype(bool)
    img = np.where(stripes[None, :, None], _FIELD_ALT, _FIELD_BASE).astype(np.float64)
    img = img * rng.uniform(0.9, 1.1) + rng.normal(0.0, 0.02, size=(h, w, 3))
    if rng.uniform() < 0.5:  # faint pitch line, deliberately not full white
        lx = int(rng.integers(0, w))
        img[:, max(0, lx - 1) : lx + 1] = 0.8

    # balls first so players are rejected away from them
    r_lo, r_hi = spec.ball_radius
    balls = []
    for _ in range(spec.balls_per_frame):
        r = float(rng.uniform(r_lo, r_hi))
        bx = float(rng.uniform(r + 2, w - r - 3))
        by = float(rng.uniform(r + 2, h - r - 3))
        balls.append((bx, by, r))

    boxes = []
    n_players = int(rng.integers(spec.players_per_frame[0], spec.players_per_frame[1] + 1))
    for _ in range(n_players):
        for _attempt in range(100):
            bw = float(rng.integers(spec.player_width[0], spec.player_width[1] + 1))
            bh = float(rng.integers(spec.player_height[0], spec.player_height[1] + 1))
            cx = float(rng.uniform(bw / 2 + 1, w - bw / 2 - 2))
            cy = float(rng.uniform(bh / 2 + 1, h - bh / 2 - 2))
            far_from_players = all(
                (cx - ox) ** 2 + (cy - oy) ** 2 >= spec.min_center_distance**2 for ox, oy, _, _ in boxes
            )
            far_from_balls = all(
                abs(cx - bx) > bw / 2 + br + 6 or abs(cy - by) > bh / 2 + br + 6 for bx, by, br in balls
            )
            if far_from_players and far_from_balls:
                break
        boxes.append((cx, cy, bw, bh))

    for cx, cy, bw, bh in boxes:
        _render_player(img, rng, cx, cy, bw, bh)
        if rng.uniform() < spec.occlusion_prob:
            # field-colored strip over part of the body: partial occlusion
            ox = cx + rng.uniform(-0.3, 0.3) * bw
            _draw_rect(img, ox - 0.15 * bw, cy - bh / 2, ox + 0.15 * bw, cy + bh / 2, _FIELD_BASE)

    yy, xx = np.mgrid[0:h, 0:w]
    for bx, by, r in balls:
        mask = (xx - bx) ** 2 + (yy - by) ** 2 <= r * r
        img[mask] = 0.98
        inner = (xx - bx) ** 2 + (yy - by) ** 2 <= (0.4 * r) ** 2
        img[inner] = 1.0

    pixels = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    gt = GroundTruthFrame(
        ball_points=tuple((round(bx), round(by)) for bx, by, _ in balls),
        player_boxes=tuple((round(cx), round(cy), bw, bh) for cx, cy, bw, bh in boxes),
    )
    return pixels, gt


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n: int, seed: int, out_dir) -> Dataset:
    """Render ``n`` frames plus their exact annotations under ``out_dir``.

    Byte-identical across runs for a fixed (spec, n, seed). Returns the
    loaded dataset (annotations at ``out_dir/annotations.jsonl``).
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    per_seq = max(1, -(-n // spec.n_sequences))  # ceil
    records = []
    for idx in range(n):
        pixels, gt = _render_frame(spec, rng)
        name = f"frames/frame_{idx:05d}.ppm"
        write_ppm(out_dir / name, pixels)
        records.append(FrameRecord(frame=name, gt=gt, sequence=f"seq{idx // per_seq:03d}"))
    save_annotations(out_dir / "annotations.jsonl", records)
    return Dataset(out_dir, records)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(dataset: Dataset, fraction: float, mode: str = "random", seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive train/eval split.

    'random' shuffles frames with the seed; 'by-sequence' keeps whole
    sequences together (frames need sequence ids). ``fraction`` is the train
    share in (0, 1).
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if mode == "random":
        if n < 2:
            raise ValueError("need at least 2 frames to split")
        order = rng.permutation(n)
        n_train = min(max(int(round(fraction * n)), 1), n - 1)
        train_idx = sorted(int(i) for i in order[:n_train])
        eval_idx = sorted(int(i) for i in order[n_train:])
        return dataset.subset(train_idx), dataset.subset(eval_idx)
    if mode == "by-sequence":
        seq_order: list[str] = []
        by_seq: dict[str, list[int]] = {}
        for i, rec in enumerate(dataset.records):
            if rec.sequence not in by_seq:
                seq_order.append(rec.sequence)
                by_seq[rec.sequence] = []
            by_seq[rec.sequence].append(i)
        if len(seq_order) < 2:
            raise ValueError("by-sequence split needs at least 2 distinct sequences")
        shuffled = [seq_order[int(i)] for i in rng.permutation(len(seq_order))]
        target = fraction * n
        train_seqs: list[str] = []
        taken = 0
        for seq in shuffled:
            if taken >= target:
                break
            train_seqs.append(seq)
            taken += len(by_seq[seq])
        # both sides keep at least one whole sequence
        if not train_seqs:
            train_seqs = [shuffled[0]]
        if len(train_seqs) == len(shuffled):
            train_seqs = train_seqs[:-1]
        chosen = set(train_seqs)
        train_idx = [i for i, rec in enumerate(dataset.records) if rec.sequence in chosen]
        eval_idx = [i for i, rec in enumerate(dataset.records) if rec.sequence not in chosen]
        return dataset.subset(train_idx), dataset.subset(eval_idx)
    raise ValueError(f"unknown split mode {mode!r}")
