"""Independent brute-force reference implementations used as test oracles.

Everything here is written for clarity, not speed: direct loop summations
and exhaustive scans that mirror the definitions, kept deliberately separate
from the package's vectorized kernels.
"""

import numpy as np


def naive_conv2d(x, w, b):
    """Direct 6-nested-loop 'same'-padding stride-1 convolution."""
    n, c, h, ww = x.shape
    o, ci, k, _ = w.shape
    assert ci == c
    p = (k - 1) // 2
    out = np.zeros((n, o, h, ww), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(ww):
                    acc = float(b[oi])
                    for ic in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                sy, sx = y + dy - p, xx + dx - p
                                if 0 <= sy < h and 0 <= sx < ww:
                                    acc += float(w[oi, ic, dy, dx]) * float(x[ni, ic, sy, sx])
                    out[ni, oi, y, xx] = acc
    return out


def naive_maxpool2x2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[ni, ci, y, xx] = x[ni, ci, 2 * y : 2 * y + 2, 2 * xx : 2 * xx + 2].max()
    return out


def naive_local_maxima(map2d, window, threshold):
    """Exhaustive NMS scan: keep (i, j) = (col, row) iff the cell clears the
    threshold, beats every earlier (row-major) in-window neighbor strictly,
    and is >= every later one."""
    rows, cols = map2d.shape
    r = window // 2
    kept = []
    for j in range(rows):
        for i in range(cols):
            v = map2d[j, i]
            if v < threshold:
                continue
            ok = True
            for dj in range(-r, r + 1):
                for di in range(-r, r + 1):
                    if di == 0 and dj == 0:
                        continue
                    nj, ni = j + dj, i + di
                    if not (0 <= nj < rows and 0 <= ni < cols):
                        continue
                    nv = map2d[nj, ni]
                    earlier = dj < 0 or (dj == 0 and di < 0)
                    if earlier:
                        if not v > nv:
                            ok = False
                    else:
                        if not v >= nv:
                            ok = False
            if ok:
                kept.append((i, j, float(v)))
    return kept


def prefix_ap_oracle(labels, n_gt):
    """11-point interpolated AP from a score-ordered TP/FP label list.

    Walks every prefix to build the raw PR set, then for each recall level
    r in {0, 0.1, ..., 1} takes the max precision among prefixes whose
    recall is >= r (0 if none). labels: sequence of 1 (TP) / 0 (FP).
    """
    points = []
    tp = fp = 0
    for lab in labels:
        tp += lab
        fp += 1 - lab
        prec = tp / (tp + fp)
        rec = tp / n_gt if n_gt else 0.0
        points.append((rec, prec))
    total = 0.0
    for level in range(11):
        r = level / 10.0
        best = 0.0
        for rec, prec in points:
            if rec >= r - 1e-12 and prec > best:
                best = prec
        total += best
    return total / 11.0


def scalar_adam_trace(grad_fn, x0, lr, beta1, beta2, eps, steps):
    """Plain-float Adam on a 1-D parameter, for cross-checking the optimizer."""
    x, m, v = float(x0), 0.0, 0.0
    history = [x]
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x -= lr * mhat / (vhat**0.5 + eps)
        history.append(x)
    return history


def _softplus(t):
    """log(1 + e^t), stable for any magnitude."""
    import math

    return math.log1p(math.exp(-abs(t))) + max(t, 0.0)


def _mined_negatives(logits2d, candidates, n_pos, ratio, floor):
    """Highest-loss negatives by explicit sort; ties row-major-first."""
    scored = sorted(
        ((_softplus(float(logits2d[j, i])), i, j) for (i, j) in candidates),
        key=lambda t: (-t[0], t[2], t[1]),
    )
    quota = ratio * n_pos if n_pos > 0 else floor
    return [(i, j) for _, i, j in scored[:quota]]


def direct_loss_oracle(
    ball_logits,
    player_logits,
    bbox,
    assignments,
    alpha_ball=1.0,
    alpha_player=1.0,
    ratio=3,
    floor=8,
    normalize="images",
):
    """Recompute the combined detection loss with pure-python loops.

    Binary cross-entropy from logits per cell (positives: -log sigmoid(z),
    negatives: -log(1 - sigmoid(z))), 3:1-mined negatives, smooth L1 on box
    targets at positive player cells, normalized by images or positives.
    """
    n = ball_logits.shape[0]
    total_b = total_p = total_box = 0.0
    n_positives = 0
    for f in range(n):
        asg = assignments[f]
        n_positives += len(asg.ball_pos) + len(asg.player_pos)

        lb = sum(_softplus(-float(ball_logits[f, 0, j, i])) for (i, j) in asg.ball_pos)
        for i, j in _mined_negatives(ball_logits[f, 0], asg.ball_neg, len(asg.ball_pos), ratio, floor):
            lb += _softplus(float(ball_logits[f, 0, j, i]))

        lp = sum(_softplus(-float(player_logits[f, 0, j, i])) for (i, j) in asg.player_pos)
        for i, j in _mined_negatives(player_logits[f, 0], asg.player_neg, len(asg.player_pos), ratio, floor):
            lp += _softplus(float(player_logits[f, 0, j, i]))

        lbox = 0.0
        for (i, j), tgt in asg.bbox_targets.items():
            for c in range(4):
                d = float(bbox[f, c, j, i]) - float(tgt[c])
                lbox += 0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5

        total_b += lb
        total_p += lp
        total_box += lbox

    norm = n if normalize == "images" else max(1, n_positives)
    return (alpha_ball * total_b + alpha_player * total_p + total_box) / norm


def fraction_iou(a, b):
    """Exact-rational IoU of two corner+size boxes."""
    from fractions import Fraction

    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return Fraction(0)
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def greedy_player_match_oracle(dets, gt_boxes, iou_threshold):
    """Score-ordered greedy matching with exact-rational IoU.

    dets: (cx, cy, bw, bh, score) with distinct scores; gt_boxes: center+size.
    Returns (labels, n_unmatched) like the production matcher.
    """
    from fractions import Fraction

    def corner(box):
        cx, cy, bw, bh = (Fraction(v) for v in box)
        return (cx - bw / 2, cy - bh / 2, bw, bh)

    corners = [corner(b) for b in gt_boxes]
    thr = Fraction(iou_threshold)
    matched = set()
    labels = []
    for det in sorted(dets, key=lambda d: -d[4]):
        best, best_iou = None, thr
        for g, gbox in enumerate(corners):
            if g in matched:
                continue
            overlap = fraction_iou(corner(det[:4]), gbox)
            if overlap > best_iou:
                best, best_iou = g, overlap
        if best is not None:
            matched.add(best)
            labels.append((det[4], True))
        else:
            labels.append((det[4], False))
    return labels, len(gt_boxes) - len(matched)


def greedy_ball_match_oracle(dets, gt_points, tolerance):
    """Score-ordered nearest-within-tolerance matching with exact arithmetic.

    dets: (x, y, score) with distinct scores; integer-valued coordinates keep
    the squared distances exact.
    """
    from fractions import Fraction

    tol_sq = Fraction(tolerance) ** 2
    matched = set()
    labels = []
    for det in sorted(dets, key=lambda d: -d[2]):
        best, best_d = None, None
        for g, (gx, gy) in enumerate(gt_points):
            if g in matched:
                continue
            d_sq = Fraction(det[0] - gx) ** 2 + Fraction(det[1] - gy) ** 2
            if d_sq <= tol_sq and (best_d is None or d_sq < best_d):
                best, best_d = g, d_sq
        if best is not None:
            matched.add(best)
            labels.append((det[2], True))
        else:
            labels.append((det[2], False))
    return labels, len(gt_points) - len(matched)
