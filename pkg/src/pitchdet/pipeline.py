"""Frame-level detection pipeline: pad, run the network, decode, report.

Images of arbitrary size are zero-padded (bottom/right) to the next multiple
of 32 before inference, and detections are reported in the original image's
coordinates: any detection whose center falls inside the padding margin is
discarded, so padding stays invisible to downstream consumers. Detection
files are line-delimited JSON, one frame per line, with stable key names.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import load_image, pad_to_stride
from .decode import BallDetection, DecoderConfig, PlayerDetection, decode_outputs
from .model import PAD_MULTIPLE, NetworkOutputs, NetworkWeights, forward
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class FrameDetections:
    """Decoded detections for one frame, in original image coordinates."""

    frame: str
    balls: tuple[BallDetection, ...]
    players: tuple[PlayerDetection, ...]


def detect_array(
    weights: NetworkWeights,
    image: np.ndarray,
    cfg: DecoderConfig = DecoderConfig(),
) -> tuple[list[BallDetection], list[PlayerDetection], NetworkOutputs]:
    """Detect on one ``(channels, h, w)`` array with values scaled to [0, 1].

    Returns ball and player detections plus the raw network outputs (for
    confidence-map dumps). Coordinates refer to the unpadded image; centers
    that land in the stride-alignment padding are dropped.
    """
    if image.ndim != 3 or image.shape[0] != weights.config.input_channels:
        raise ShapeError(
            f"expected a ({weights.config.input_channels}, h, w) image, got {image.shape}"
        )
    padded, (w, h) = pad_to_stride(image, PAD_MULTIPLE)
    x = Tensor(np.ascontiguousarray(padded[None], dtype=weights.config.np_dtype))
    outputs = forward(weights, x, mode="eval")
    balls, players = decode_outputs(outputs, cfg)
    balls = [b for b in balls if b.x < w and b.y < h]
    players = [p for p in players if p.cx < w and p.cy < h]
    return balls, players, outputs


def detect_image(
    weights: NetworkWeights,
    path,
    cfg: DecoderConfig = DecoderConfig(),
    frame_id: str | None = None,
) -> tuple[FrameDetections, NetworkOutputs]:
    """Detect on an image file; ``frame_id`` defaults to the file name."""
    image = load_image(path).data[0]
    balls, players, outputs = detect_array(weights, image, cfg)
    name = frame_id if frame_id is not None else Path(path).name
    return FrameDetections(name, tuple(balls), tuple(players)), outputs


def detections_to_record(fd: FrameDetections) -> dict:
    return {
        "frame": fd.frame,
        "balls": [{"x": b.x, "y": b.y, "score": float(b.score)} for b in fd.balls],
        "players": [
            {"cx": p.cx, "cy": p.cy, "bw": p.bw, "bh": p.bh, "score": float(p.score)}
            for p in fd.players
        ],
    }


def record_to_detections(rec: dict) -> FrameDetections:
    balls = tuple(BallDetection(int(b["x"]), int(b["y"]), float(b["score"])) for b in rec["balls"])
    players = tuple(
        PlayerDetection(int(p["cx"]), int(p["cy"]), int(p["bw"]), int(p["bh"]), float(p["score"]))
        for p in rec["players"]
    )
    return FrameDetections(str(rec["frame"]), balls, players)


def write_detections(path, frames: Iterable[FrameDetections]) -> None:
    """One JSON object per line; key order and float formatting are stable,
    so identical detections always serialize to identical bytes."""
    with open(path, "w", encoding="utf-8") as f:
        for fd in frames:
            f.write(json.dumps(detections_to_record(fd), sort_keys=True) + "\n")


def read_detections(path) -> list[FrameDetections]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(record_to_detections(json.loads(line)))
    return out


def dump_confidence_maps(path, outputs: NetworkOutputs) -> None:
    """Save the raw ball/player confidence maps and box tensor for debugging."""
    np.savez(
        path,
        ball_map=outputs.ball_map.data[0, 0],
        player_map=outputs.player_map.data[0, 0],
        bbox_tensor=outputs.bbox_tensor.data[0],
    )


@dataclass(frozen=True)
class BenchReport:
    """Forward+decode timings at one input size, warmup iterations excluded."""

    width: int
    height: int
    iterations: int
    warmup: int
    parameter_count: int
    latencies: tuple[float, ...]  # seconds per frame, one per timed iteration

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies))

    @property
    def median_latency(self) -> float:
        return float(np.median(self.latencies))

    @property
    def p95_latency(self) -> float:
        return float(np.percentile(self.latencies, 95))

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_latency

    def format(self) -> str:
        lines = [
            f"input_size\t{self.width}x{self.height}",
            f"iterations\t{self.iterations}",
            f"warmup\t{self.warmup}",
            f"parameter_count\t{self.parameter_count}",
            f"mean_latency_ms\t{self.mean_latency * 1e3:.3f}",
            f"median_latency_ms\t{self.median_latency * 1e3:.3f}",
            f"p95_latency_ms\t{self.p95_latency * 1e3:.3f}",
            f"fps\t{self.fps:.3f}",
        ]
        return "\n".join(lines) + "\n"


def run_benchmark(
    weights: NetworkWeights,
    width: int,
    height: int,
    iterations: int = 20,
    warmup: int = 3,
    cfg: DecoderConfig = DecoderConfig(),
    seed: int = 0,
) -> BenchReport:
    """Time padding + forward + decode on a fixed random frame.

    Image loading is excluded (the frame is synthesized in memory once);
    decoding is included, since downstream consumers always pay for it.
    At least 3 warmup iterations run first and are not timed.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    warmup = max(3, warmup)
    rng = np.random.default_rng(seed)
    image = rng.random((weights.config.input_channels, height, width), dtype=np.float32)
    for _ in range(warmup):
        detect_array(weights, image, cfg)
    latencies = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        detect_array(weights, image, cfg)
        latencies.append(time.perf_counter() - t0)
    return BenchReport(
        width=width,
        height=height,
        iterations=iterations,
        warmup=warmup,
        parameter_count=weights.parameter_count(),
        latencies=tuple(latencies),
    )
