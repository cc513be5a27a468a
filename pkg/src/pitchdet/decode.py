"""Turn raw confidence/regression maps into pixel-space detections.

Cell coordinates are ``(i, j) = (column, row)`` throughout, with 0-based
indices; a cell maps to the pixel at the center of its k-by-k receptive
block, ``(x, y) = (floor(k*(i+0.5)), floor(k*(j+0.5)))``. Non-maximum
suppression runs on the confidence grid (not on boxes): a cell survives iff
it clears the threshold and no in-window neighbor beats it, with exact ties
keeping only the row-major-first cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import BALL_STRIDE, PLAYER_STRIDE, NetworkOutputs


@dataclass(frozen=True)
class DecoderConfig:
    theta_ball: float = 0.5
    theta_player: float = 0.5
    k_ball: int = BALL_STRIDE
    k_player: int = PLAYER_STRIDE
    nms_window: int = 3
    ball_mode: str = "single-best"  # or "all-candidates"

    def __post_init__(self):
        if not (0.0 <= self.theta_ball <= 1.0 and 0.0 <= self.theta_player <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.nms_window < 3 or self.nms_window % 2 == 0:
            raise ValueError(f"nms_window must be odd and >= 3, got {self.nms_window}")
        if self.ball_mode not in ("single-best", "all-candidates"):
            raise ValueError(f"unknown ball_mode {self.ball_mode!r}")


@dataclass(frozen=True)
class BallDetection:
    x: int
    y: int
    score: float


@dataclass(frozen=True)
class PlayerDetection:
    cx: int
    cy: int
    bw: int
    bh: int
    score: float


def cell_to_pixel(i: int, j: int, k: int) -> tuple[int, int]:
    """Center pixel of 0-based cell (i, j) = (col, row) at stride k."""
    return int(np.floor(k * (i + 0.5))), int(np.floor(k * (j + 0.5)))


def nms(map2d: np.ndarray, window: int, threshold: float) -> list[tuple[int, int, float]]:
    """Local maxima of a 2-D map as (i, j, score) in row-major scan order.

    A cell is kept iff its value >= threshold, strictly exceeds every
    earlier (row-major) neighbor in the window, and is >= every later one:
    on a tie inside one window only the first cell survives, while equal
    peaks farther apart than the window both survive.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    rows, cols = map2d.shape
    r = window // 2
    keep = map2d >= threshold
    neg_inf = -np.inf
    for dj in range(-r, r + 1):
        for di in range(-r, r + 1):
            if di == 0 and dj == 0:
                continue
            shifted = np.full_like(map2d, neg_inf)
            src_j = slice(max(0, dj), rows + min(0, dj))
            src_i = slice(max(0, di), cols + min(0, di))
            dst_j = slice(max(0, -dj), rows + min(0, -dj))
            dst_i = slice(max(0, -di), cols + min(0, -di))
            shifted[dst_j, dst_i] = map2d[src_j, src_i]
            earlier = dj < 0 or (dj == 0 and di < 0)
            if earlier:
                keep &= map2d > shifted
            else:
                keep &= map2d >= shifted
    out = []
    for j, i in np.argwhere(keep):
        out.append((int(i), int(j), float(map2d[j, i])))
    return out


def _by_score_then_row_major(det_cells):
    return sorted(det_cells, key=lambda t: (-t[2], t[1], t[0]))


def decode_ball(ball_map: np.ndarray, cfg: DecoderConfig) -> list[BallDetection]:
    """Ball detections from a 2-D confidence map.

    single-best mode: the global argmax cell (row-major first on ties) if it
    clears theta_ball, else nothing. all-candidates mode: every in-window
    local maximum clearing theta_ball, sorted by descending score (row-major
    on ties), for ranked evaluation.
    """
    if cfg.ball_mode == "single-best":
        flat = int(np.argmax(ball_map))
        j, i = divmod(flat, ball_map.shape[1])
        score = float(ball_map[j, i])
        if score < cfg.theta_ball:
            return []
        x, y = cell_to_pixel(i, j, cfg.k_ball)
        return [BallDetection(x, y, score)]
    cells = _by_score_then_row_major(nms(ball_map, cfg.nms_window, cfg.theta_ball))
    out = []
    for i, j, score in cells:
        x, y = cell_to_pixel(i, j, cfg.k_ball)
        out.append(BallDetection(x, y, score))
    return out


def decode_players(
    player_map: np.ndarray,
    bbox_tensor: np.ndarray,
    cfg: DecoderConfig,
    image_size: Optional[tuple[int, int]] = None,
) -> list[PlayerDetection]:
    """Player boxes from a 2-D confidence map and a (4, rows, cols) tensor.

    Each surviving cell's 4-vector (x_off, y_off, w_rel, h_rel) is read as
    center offset from the cell center (fractions of image width/height) and
    relative size. ``image_size`` is the (W, H) the maps were produced from;
    defaults to cols*k, rows*k.
    """
    rows, cols = player_map.shape
    if bbox_tensor.shape != (4, rows, cols):
        raise ValueError(f"bbox tensor shape {bbox_tensor.shape} does not match map {player_map.shape}")
    if image_size is None:
        image_size = (cols * cfg.k_player, rows * cfg.k_player)
    width, height = image_size
    out = []
    for i, j, score in _by_score_then_row_major(nms(player_map, cfg.nms_window, cfg.theta_player)):
        x_off, y_off, w_rel, h_rel = (float(v) for v in bbox_tensor[:, j, i])
        cx = int(np.floor(cfg.k_player * (i + 0.5) + x_off * width))
        cy = int(np.floor(cfg.k_player * (j + 0.5) + y_off * height))
        # sizes floor to whole pixels; a degenerate zero is bumped to 1 px
        bw = max(1, int(np.floor(w_rel * width)))
        bh = max(1, int(np.floor(h_rel * height)))
        out.append(PlayerDetection(cx, cy, bw, bh, score))
    return out


def decode_outputs(
    outputs: NetworkOutputs,
    cfg: DecoderConfig,
    frame_index: int = 0,
    image_size: Optional[tuple[int, int]] = None,
) -> tuple[list[BallDetection], list[PlayerDetection]]:
    """Decode one frame of a batched forward pass."""
    ball_map = outputs.ball_map.data[frame_index, 0]
    player_map = outputs.player_map.data[frame_index, 0]
    bbox = outputs.bbox_tensor.data[frame_index]
    balls = decode_ball(ball_map, cfg)
    players = decode_players(player_map, bbox, cfg, image_size=image_size)
    return balls, players
