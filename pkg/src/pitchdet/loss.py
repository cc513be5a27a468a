"""Ground-truth target assignment and the three-part training loss.

Targets live on the prediction grids, with cells addressed as ``(i, j) =
(column, row)``. A ball marks its center cell plus the full 3x3 neighborhood
(clipped at borders) as positive; a player marks exactly one cell, which also
carries a normalized box target ``(x_off, y_off, w_rel, h_rel)``: center
offset from the cell center divided by image width/height, and size divided
by image width/height. Classification losses are binary cross-entropy
evaluated in log-space from logits; box regression is smooth L1 over positive
player cells; negatives are mined per frame at a 3:1 ratio to positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import GroundTruthFrame
from .decode import cell_to_pixel
from .model import BALL_STRIDE, PLAYER_STRIDE, NetworkOutputs
from .tensor import ShapeError, Tensor, _accumulate, _active_tape, add, scale, sigmoid_values

Cell = tuple[int, int]


@dataclass
class TargetAssignment:
    """Positive/negative cell sets and box targets for one frame."""

    ball_grid: tuple[int, int]  # (rows, cols)
    player_grid: tuple[int, int]
    ball_pos: frozenset[Cell]
    ball_neg: frozenset[Cell]
    player_pos: frozenset[Cell]
    player_neg: frozenset[Cell]
    bbox_targets: Mapping[Cell, tuple[float, float, float, float]]
    _masks: dict = field(default_factory=dict, repr=False, compare=False)

    def _mask(self, key: str, grid: tuple[int, int], cells: Iterable[Cell]) -> np.ndarray:
        cached = self._masks.get(key)
        if cached is None:
            cached = np.zeros(grid)
            for i, j in cells:
                cached[j, i] = 1.0
            self._masks[key] = cached
        return cached

    @property
    def ball_pos_mask(self) -> np.ndarray:
        return self._mask("bp", self.ball_grid, self.ball_pos)

    @property
    def ball_neg_mask(self) -> np.ndarray:
        return self._mask("bn", self.ball_grid, self.ball_neg)

    @property
    def player_pos_mask(self) -> np.ndarray:
        return self._mask("pp", self.player_grid, self.player_pos)

    @property
    def player_neg_mask(self) -> np.ndarray:
        return self._mask("pn", self.player_grid, self.player_neg)

    @property
    def bbox_target_array(self) -> np.ndarray:
        cached = self._masks.get("bt")
        if cached is None:
            cached = np.zeros((4,) + self.player_grid)
            for (i, j), tgt in self.bbox_targets.items():
                cached[:, j, i] = tgt
            self._masks["bt"] = cached
        return cached


def build_targets(
    gt: GroundTruthFrame,
    ball_grid: tuple[int, int],
    player_grid: tuple[int, int],
    k_ball: int = BALL_STRIDE,
    k_player: int = PLAYER_STRIDE,
) -> TargetAssignment:
    """Assign ground truth to grid cells.

    Grids are (rows, cols); the image is assumed pre-padded so its size is
    exactly ``cols * stride`` by ``rows * stride``, which is what normalizes
    the box targets. Two players landing in one cell keep the box of the one
    whose center is nearest the cell center.
    """
    brows, bcols = ball_grid
    prows, pcols = player_grid
    width, height = pcols * k_player, prows * k_player

    ball_pos: set[Cell] = set()
    for x, y in gt.ball_points:
        ci, cj = int(x // k_ball), int(y // k_ball)
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                i, j = ci + di, cj + dj
                if 0 <= i < bcols and 0 <= j < brows:
                    ball_pos.add((i, j))

    # per player cell: keep the nearest-to-center box target
    best: dict[Cell, tuple[float, tuple[float, float, float, float]]] = {}
    for cx, cy, bw, bh in gt.player_boxes:
        i, j = int(cx // k_player), int(cy // k_player)
        if not (0 <= i < pcols and 0 <= j < prows):
            continue
        ccx, ccy = cell_to_pixel(i, j, k_player)
        d2 = (cx - ccx) ** 2 + (cy - ccy) ** 2
        target = ((cx - ccx) / width, (cy - ccy) / height, bw / width, bh / height)
        if (i, j) not in best or d2 < best[(i, j)][0]:
            best[(i, j)] = (d2, target)

    player_pos = frozenset(best)
    all_ball = {(i, j) for j in range(brows) for i in range(bcols)}
    all_player = {(i, j) for j in range(prows) for i in range(pcols)}
    return TargetAssignment(
        ball_grid=ball_grid,
        player_grid=player_grid,
        ball_pos=frozenset(ball_pos),
        ball_neg=frozenset(all_ball - ball_pos),
        player_pos=player_pos,
        player_neg=frozenset(all_player - player_pos),
        bbox_targets={cell: tgt for cell, (_, tgt) in best.items()},
    )


# ---------------------------------------------------------------------------
# taped loss ops
# ---------------------------------------------------------------------------


def _as_mask(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(mask, dtype=like.dtype), like.shape)


def bce_loss(logits: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray) -> Tensor:
    """Masked binary cross-entropy from logits:
    ``sum(pos * -log c) + sum(neg * -log(1 - c))`` with ``c = sigmoid(z)``,
    computed as softplus terms so saturated cells stay finite-exact.
    """
    z = logits.data
    pos = _as_mask(pos_mask, z)
    neg = _as_mask(neg_mask, z)
    value = (pos * np.logaddexp(0.0, -z)).sum() + (neg * np.logaddexp(0.0, z)).sum()
    out = Tensor(np.asarray(value), requires_grad=logits.requires_grad)
    tape = _active_tape()
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            if logits.requires_grad:
                sig = sigmoid_values(z)
                _accumulate(logits, float(go.reshape(())) * (pos * (sig - 1.0) + neg * sig))

        tape.record(out, backward)
    return out


def smooth_l1_loss(pred: Tensor, target: np.ndarray, cell_mask: np.ndarray) -> Tensor:
    """Smooth L1 over masked cells, summed over coordinates and cells:
    per coordinate ``0.5 d^2`` if ``|d| < 1`` else ``|d| - 0.5``.
    """
    if pred.shape != np.shape(target):
        raise ShapeError(f"smooth_l1 target shape {np.shape(target)} != prediction {pred.shape}")
    mask = _as_mask(cell_mask, pred.data)
    d = (pred.data - np.asarray(target, dtype=pred.data.dtype)) * mask
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5) * mask
    out = Tensor(np.asarray(per.sum()), requires_grad=pred.requires_grad)
    tape = _active_tape()
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            if pred.requires_grad:
                _accumulate(pred, float(go.reshape(())) * np.clip(d, -1.0, 1.0) * mask)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# hard negative mining and the combined loss
# ---------------------------------------------------------------------------


def hard_negative_mining(
    neg_losses: np.ndarray,
    candidate_mask: np.ndarray,
    n_pos: int,
    ratio: int = 3,
    empty_frame_floor: int = 8,
) -> frozenset[Cell]:
    """Select the highest-loss candidate negative cells.

    Keeps ``min(ratio * n_pos, available)`` cells, or ``min(floor,
    available)`` when the frame has no positives so background still trains.
    Loss ties break row-major-first.
    """
    jj, ii = np.nonzero(np.asarray(candidate_mask) > 0)
    if ii.size == 0:
        return frozenset()
    quota = ratio * n_pos if n_pos > 0 else empty_frame_floor
    quota = min(quota, ii.size)
    if quota <= 0:
        return frozenset()
    losses = np.asarray(neg_losses)[jj, ii]
    order = np.lexsort((ii, jj, -losses))[:quota]
    return frozenset((int(ii[k]), int(jj[k])) for k in order)


@dataclass(frozen=True)
class LossWeights:
    alpha_ball: float = 1.0
    alpha_player: float = 1.0
    normalize: str = "images"  # or "positives"
    mining_ratio: int = 3
    mining_floor: int = 8

    def __post_init__(self):
        if self.alpha_ball < 0 or self.alpha_player < 0:
            raise ValueError("loss weights must be >= 0")
        if self.normalize not in ("images", "positives"):
            raise ValueError(f"normalize must be 'images' or 'positives', got {self.normalize!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Components after weighting and normalization; total is their sum."""

    total: float
    ball: float
    player: float
    bbox: float
    n_ball_pos: int
    n_player_pos: int


def total_loss(
    outputs: NetworkOutputs,
    assignments: Sequence[TargetAssignment],
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, LossBreakdown]:
    """Combined loss over a batch:
    ``(alpha_ball * L_ball + alpha_player * L_player + L_bbox) / N`` with N
    the number of images (or total positives, per ``weights.normalize``).
    """
    n = outputs.ball_logits.shape[0]
    if len(assignments) != n:
        raise ShapeError(f"{len(assignments)} assignments for a batch of {n} images")
    bz = outputs.ball_logits.data
    pz = outputs.player_logits.data
    ball_shape = bz.shape[2:]
    player_shape = pz.shape[2:]

    ball_pos = np.zeros_like(bz)
    ball_neg = np.zeros_like(bz)
    player_pos = np.zeros_like(pz)
    player_neg = np.zeros_like(pz)
    bbox_tgt = np.zeros_like(outputs.bbox_tensor.data)
    n_ball_pos = n_player_pos = 0
    for f, asg in enumerate(assignments):
        if asg.ball_grid != ball_shape or asg.player_grid != player_shape:
            raise ShapeError(
                f"assignment grids {asg.ball_grid}/{asg.player_grid} do not match "
                f"outputs {ball_shape}/{player_shape}"
            )
        # per-cell negative BCE is softplus(z); mined per frame from logits
        mined_ball = hard_negative_mining(
            np.logaddexp(0.0, bz[f, 0]), asg.ball_neg_mask, len(asg.ball_pos),
            weights.mining_ratio, weights.mining_floor,
        )
        mined_player = hard_negative_mining(
            np.logaddexp(0.0, pz[f, 0]), asg.player_neg_mask, len(asg.player_pos),
            weights.mining_ratio, weights.mining_floor,
        )
        ball_pos[f, 0] = asg.ball_pos_mask
        player_pos[f, 0] = asg.player_pos_mask
        for i, j in mined_ball:
            ball_neg[f, 0, j, i] = 1.0
        for i, j in mined_player:
            player_neg[f, 0, j, i] = 1.0
        bbox_tgt[f] = asg.bbox_target_array
        n_ball_pos += len(asg.ball_pos)
        n_player_pos += len(asg.player_pos)

    l_ball = bce_loss(outputs.ball_logits, ball_pos, ball_neg)
    l_player = bce_loss(outputs.player_logits, player_pos, player_neg)
    l_bbox = smooth_l1_loss(outputs.bbox_tensor, bbox_tgt, player_pos)

    if weights.normalize == "images":
        norm = float(n)
    else:
        norm = float(max(1, n_ball_pos + n_player_pos))
    total = scale(
        add(add(scale(l_ball, weights.alpha_ball), scale(l_player, weights.alpha_player)), l_bbox),
        1.0 / norm,
    )
    breakdown = LossBreakdown(
        total=total.item(),
        ball=weights.alpha_ball * l_ball.item() / norm,
        player=weights.alpha_player * l_player.item() / norm,
        bbox=l_bbox.item() / norm,
        n_ball_pos=n_ball_pos,
        n_player_pos=n_player_pos,
    )
    return total, breakdown
