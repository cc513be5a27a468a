"""Detection-to-ground-truth matching and 11-point average precision.

Detections are pooled across all frames into one ranking per class, matched
greedily in descending score order (each ground-truth object matches at most
one detection), and scored with interpolated 11-point AP: p(r) is the best
precision over every ranking prefix whose recall reaches r, averaged over
r in {0, 0.1, ..., 1}. A player detection is correct when its box overlaps
an unmatched ground-truth box with IoU strictly above the threshold; a ball
detection when its center lies within a pixel tolerance of an unmatched
ground-truth ball point. Classes with no ground truth report an absent AP
rather than zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .data import Dataset, GroundTruthFrame
from .decode import DecoderConfig
from .model import NetworkWeights
from .pipeline import detect_array


class EvaluationError(RuntimeError):
    """Raised when an evaluation cannot produce a meaningful report."""


@dataclass(frozen=True)
class MatchConfig:
    player_iou_threshold: float = 0.5
    ball_distance_tolerance: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.player_iou_threshold <= 1.0):
            raise ValueError("player_iou_threshold must lie in (0, 1]")
        if self.ball_distance_tolerance <= 0:
            raise ValueError("ball_distance_tolerance must be > 0")


def corner_box(cx: float, cy: float, bw: float, bh: float) -> tuple[float, float, float, float]:
    """Center+size box to corner+size (x, y, w, h)."""
    return (cx - bw / 2.0, cy - bh / 2.0, float(bw), float(bh))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner+size boxes (x, y, w, h)."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("iou needs positive-area boxes")
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def match_frame(
    dets: Sequence,
    gt: GroundTruthFrame,
    cfg: MatchConfig,
    klass: str,
) -> tuple[list[tuple[float, bool]], int]:
    """Greedy score-order matching for one frame and one class.

    Returns ``(labels, n_unmatched_gt)`` where labels are ``(score, is_tp)``
    in descending score order (ties keep input order). Players match the
    highest-IoU unmatched box when IoU > threshold; balls match the nearest
    unmatched point within the distance tolerance. Index order breaks exact
    candidate ties.
    """
    if klass == "ball":
        targets = [(float(x), float(y)) for x, y in gt.ball_points]
    elif klass == "player":
        targets = [corner_box(*box) for box in gt.player_boxes]
    else:
        raise ValueError(f"unknown class {klass!r}")

    ranked = sorted(dets, key=lambda d: -d.score)
    matched: set[int] = set()
    labels: list[tuple[float, bool]] = []
    tol_sq = cfg.ball_distance_tolerance**2
    for det in ranked:
        best: Optional[int] = None
        if klass == "ball":
            best_d = None
            for g, (gx, gy) in enumerate(targets):
                if g in matched:
                    continue
                d_sq = (det.x - gx) ** 2 + (det.y - gy) ** 2
                if d_sq <= tol_sq and (best_d is None or d_sq < best_d):
                    best, best_d = g, d_sq
        else:
            box = corner_box(det.cx, det.cy, det.bw, det.bh)
            best_iou = cfg.player_iou_threshold
            for g, gbox in enumerate(targets):
                if g in matched:
                    continue
                overlap = iou(box, gbox)
                if overlap > best_iou:
                    best, best_iou = g, overlap
        if best is not None:
            matched.add(best)
            labels.append((float(det.score), True))
        else:
            labels.append((float(det.score), False))
    return labels, len(targets) - len(matched)


RECALL_LEVELS = tuple(level / 10.0 for level in range(11))


@dataclass(frozen=True)
class PRCurve:
    """A ranked (score, is_true_positive) list against a ground-truth count."""

    labels: tuple[tuple[float, bool], ...]
    n_gt: int

    @staticmethod
    def from_frames(per_frame_labels: Sequence[Sequence[tuple[float, bool]]], n_gt: int) -> "PRCurve":
        pooled = [lab for frame in per_frame_labels for lab in frame]
        pooled.sort(key=lambda sl: -sl[0])  # stable: equal scores keep frame order
        return PRCurve(tuple(pooled), int(n_gt))

    def precision_recall(self) -> tuple[list[float], list[float]]:
        """Precision and recall after each ranking prefix."""
        precision, recall = [], []
        tp = 0
        for k, (_, is_tp) in enumerate(self.labels, start=1):
            tp += bool(is_tp)
            precision.append(tp / k)
            recall.append(tp / self.n_gt if self.n_gt else 0.0)
        return precision, recall

    def interpolated_precisions(self) -> list[float]:
        """max precision over prefixes with recall >= r, at the 11 levels."""
        precision, recall = self.precision_recall()
        out = []
        for r in RECALL_LEVELS:
            best = 0.0
            for p, rec in zip(precision, recall):
                if rec >= r and p > best:
                    best = p
            out.append(best)
        return out


def average_precision(curve: PRCurve) -> Optional[float]:
    """Mean interpolated precision over the 11 recall levels; absent (None)
    when there is no ground truth to recall."""
    if curve.n_gt == 0:
        return None
    return sum(curve.interpolated_precisions()) / 11.0


@dataclass(frozen=True)
class APReport:
    ball_ap: Optional[float]
    player_ap: Optional[float]
    mean_ap: Optional[float]
    ball_curve: PRCurve
    player_curve: PRCurve
    n_frames: int
    n_ball_detections: int
    n_player_detections: int
    match_config: MatchConfig


def evaluate(
    dataset: Dataset,
    weights: NetworkWeights,
    decoder_cfg: DecoderConfig = DecoderConfig(),
    match_cfg: MatchConfig = MatchConfig(),
) -> APReport:
    """Run inference over a dataset and score both classes.

    Decoding runs with thresholds at 0 and the ball head in all-candidates
    mode so the full ranking enters the AP computation; cells with exactly
    zero confidence are not detections. mAP is reported only when both
    classes have ground truth.
    """
    if len(dataset) == 0:
        raise EvaluationError("evaluation dataset is empty")
    eval_cfg = replace(decoder_cfg, theta_ball=0.0, theta_player=0.0, ball_mode="all-candidates")

    ball_labels, player_labels = [], []
    n_ball_gt = n_player_gt = n_ball_dets = n_player_dets = 0
    for idx in range(len(dataset)):
        record = dataset[idx]
        balls, players, _ = detect_array(weights, dataset.load_array(idx), eval_cfg)
        balls = [b for b in balls if b.score > 0.0]
        players = [p for p in players if p.score > 0.0]
        n_ball_dets += len(balls)
        n_player_dets += len(players)
        n_ball_gt += len(record.gt.ball_points)
        n_player_gt += len(record.gt.player_boxes)
        ball_labels.append(match_frame(balls, record.gt, match_cfg, "ball")[0])
        player_labels.append(match_frame(players, record.gt, match_cfg, "player")[0])

    ball_curve = PRCurve.from_frames(ball_labels, n_ball_gt)
    player_curve = PRCurve.from_frames(player_labels, n_player_gt)
    ball_ap = average_precision(ball_curve)
    player_ap = average_precision(player_curve)
    mean_ap = None if ball_ap is None or player_ap is None else (ball_ap + player_ap) / 2.0
    return APReport(
        ball_ap=ball_ap,
        player_ap=player_ap,
        mean_ap=mean_ap,
        ball_curve=ball_curve,
        player_curve=player_curve,
        n_frames=len(dataset),
        n_ball_detections=n_ball_dets,
        n_player_detections=n_player_dets,
        match_config=match_cfg,
    )


def _fmt_ap(value: Optional[float]) -> str:
    return "absent" if value is None else f"{value:.6f}"


def write_eval_report(report: APReport, path) -> None:
    """Key-value evaluation summary, one tab-separated pair per line."""
    lines = [
        ("ball_ap", _fmt_ap(report.ball_ap)),
        ("player_ap", _fmt_ap(report.player_ap)),
        ("mean_ap", _fmt_ap(report.mean_ap)),
        ("frames", str(report.n_frames)),
        ("ball_ground_truth", str(report.ball_curve.n_gt)),
        ("player_ground_truth", str(report.player_curve.n_gt)),
        ("ball_detections", str(report.n_ball_detections)),
        ("player_detections", str(report.n_player_detections)),
        ("player_iou_threshold", f"{report.match_config.player_iou_threshold:g}"),
        ("ball_distance_tolerance", f"{report.match_config.ball_distance_tolerance:g}"),
    ]
    with open(path, "w", encoding="utf-8") as f:
        for key, value in lines:
            f.write(f"{key}\t{value}\n")


def write_pr_points(report: APReport, path) -> None:
    """Per-prefix precision/recall points for both classes, as TSV."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("class\trank\tscore\tis_tp\tprecision\trecall\n")
        for klass, curve in (("ball", report.ball_curve), ("player", report.player_curve)):
            precision, recall = curve.precision_recall()
            for k, ((score, is_tp), p, r) in enumerate(
                zip(curve.labels, precision, recall), start=1
            ):
                f.write(f"{klass}\t{k}\t{score:.9g}\t{int(is_tp)}\t{p:.9f}\t{r:.9f}\n")
