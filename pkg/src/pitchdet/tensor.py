"""NCHW tensor engine with reverse-mode differentiation on a dynamic tape.

Feature maps are rank-4 ``(batch, channels, rows, cols)`` float arrays;
learnable parameters may also be rank-1 (biases, batchnorm terms). Ops never
mutate their inputs, with one documented exception: ``batchnorm`` in train
mode updates the running statistics in place.

Gradients accumulate into ``Tensor.grad`` when ``Tape.backward`` replays the
recorded ops in reverse execution order. Tapes are per-thread; ops executed
outside any active tape run forward-only and record nothing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes do not line up."""


class TapeError(RuntimeError):
    """Raised on tape misuse (backward without records, non-scalar loss...)."""


_TLS = threading.local()

# im2col patch matrices larger than this many bytes are built in row chunks so
# the 1920x1088 bench sizes stay well under a ~6 GB budget.
_PATCH_BYTES_BUDGET = 256 * 2**20


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus a gradient slot.

    ``data`` is float32 or float64; everything else is cast to float64 on
    construction. ``grad`` stays ``None`` until backward reaches this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Context manager that records ops for reverse-mode differentiation.

    Entering pushes this tape on the current thread's stack; ops record an
    ``(output, backward_fn)`` pair. ``backward(loss)`` seeds d(loss)/d(loss)=1
    and replays the records last-to-first, so every recorded op is visited
    exactly once and multi-consumer gradients sum correctly.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._entered = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        self._entered = True
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not on top")
        stack.pop()

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((output, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if not self._records:
            raise TapeError("backward on an empty tape: no ops were recorded")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            fn(g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Backward closures hand over freshly allocated arrays, so the first
    # write may take ownership without copying.
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _rg(*tensors: Tensor) -> bool:
    # an op output needs a grad slot iff any input feeds gradient through it
    return any(t.requires_grad for t in tensors)


def _require_rank(t: Tensor, rank: int, what: str) -> None:
    if t.ndim != rank:
        raise ShapeError(f"{what} must be rank-{rank}, got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (im2col + GEMM)
# ---------------------------------------------------------------------------


def _conv3_chunks(n: int, h: int, w: int, c: int, itemsize: int):
    """Yield (image, row_lo, row_hi) chunks keeping patch matrices bounded."""
    rows_budget = max(1, _PATCH_BYTES_BUDGET // max(1, c * 9 * w * itemsize))
    for ni in range(n):
        for y0 in range(0, h, rows_budget):
            yield ni, y0, min(h, y0 + rows_budget)


def _im2col3(xp_block: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    # xp_block: (c, out_rows + 2, out_cols + 2) padded slice.
    win = np.lib.stride_tricks.sliding_window_view(xp_block, (3, 3), axis=(1, 2))
    # (c, out_rows, out_cols, 3, 3) -> (out_rows*out_cols, c*9), row-major cells
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(
        out_rows * out_cols, xp_block.shape[0] * 9
    )


def _conv3_gemm(x: np.ndarray, wmat: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    """3x3 same-padding stride-1 conv. wmat is (c*9, out_c), rows keyed (c,ky,kx)."""
    n, c, h, w = x.shape
    out_c = wmat.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((n, out_c, h, w), dtype=x.dtype)
    for ni, y0, y1 in _conv3_chunks(n, h, w, c, x.itemsize):
        cols = _im2col3(xp[ni, :, y0 : y1 + 2, :], y1 - y0, w)
        res = cols @ wmat
        if bias is not None:
            res += bias
        out[ni, :, y0:y1, :] = res.reshape(y1 - y0, w, out_c).transpose(2, 0, 1)
    return out


def _conv3_grad_weights(go: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out_c = go.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gw_flat = np.zeros((c * 9, out_c), dtype=x.dtype)
    for ni, y0, y1 in _conv3_chunks(n, h, w, c, x.itemsize):
        cols = _im2col3(xp[ni, :, y0 : y1 + 2, :], y1 - y0, w)
        gblock = np.ascontiguousarray(go[ni, :, y0:y1, :].transpose(1, 2, 0)).reshape(
            (y1 - y0) * w, out_c
        )
        gw_flat += cols.T @ gblock
    return gw_flat.T.reshape(out_c, c, 3, 3)


def _conv1_gemm(x: np.ndarray, w2: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    """1x1 conv as a batched channel matmul. w2 is (out_c, in_c)."""
    n, c, h, w = x.shape
    res = np.matmul(w2[None, :, :], x.reshape(n, c, h * w))
    out = res.reshape(n, w2.shape[0], h, w)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Array-level conv: 'same' padding, stride 1, square kernel of size 1 or 3."""
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weights.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if in_c != c:
        raise ShapeError(f"conv weights expect {in_c} input channels, input has {c}")
    if bias.shape != (out_c,):
        raise ShapeError(f"bias shape {bias.shape} does not match {out_c} output channels")
    if kh == 1:
        return _conv1_gemm(x, weights.reshape(out_c, in_c), bias)
    wmat = weights.reshape(out_c, in_c * 9).T
    return _conv3_gemm(x, np.ascontiguousarray(wmat), bias)


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weights: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. (input, weights, bias).

    The input gradient of a stride-1 'same' conv is itself such a conv of
    grad_out with the kernel flipped spatially and in/out channels swapped.
    """
    out_c, in_c, kh, _ = weights.shape
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    if kh == 1:
        grad_w = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3])).reshape(
            out_c, in_c, 1, 1
        )
        grad_x = None
        if need_input_grad:
            grad_x = _conv1_gemm(grad_out, np.ascontiguousarray(weights.reshape(out_c, in_c).T), None)
        return grad_x, grad_w, grad_bias
    grad_w = _conv3_grad_weights(grad_out, x)
    grad_x = None
    if need_input_grad:
        wf = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (in_c, out_c, 3, 3)
        wmat = np.ascontiguousarray(wf.reshape(in_c, out_c * 9).T)
        grad_x = _conv3_gemm(grad_out, wmat, None)
    return grad_x, grad_w, grad_bias


def conv2d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Same-padding stride-1 convolution with bias; kernel size 1 or 3."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(weights, 4, "conv2d weights")
    _require_rank(bias, 1, "conv2d bias")
    out = Tensor(conv2d_forward(x.data, weights.data, bias.data), requires_grad=_rg(x, weights, bias))
    tape = _active_tape()
    if tape is not None:
        xd, wd = x.data, weights.data

        def backward(go: np.ndarray) -> None:
            gx, gw, gb = conv2d_backward(go, xd, wd, need_input_grad=x.requires_grad)
            if x.requires_grad and gx is not None:
                _accumulate(x, gx)
            if weights.requires_grad:
                _accumulate(weights, gw)
            if bias.requires_grad:
                _accumulate(bias, gb)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# pooling / normalization / activations / structural ops
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties pick the first element in row-major order."""
    _require_rank(x, 4, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, which in this layout is the row-major
    # first cell of the 2x2 window
    idx = np.argmax(flat, axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            if not x.requires_grad:
                return
            gflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=go.dtype)
            np.put_along_axis(gflat, idx[..., None], go[..., None], axis=-1)
            gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            _accumulate(x, np.ascontiguousarray(gx).reshape(n, c, h, w))

        tape.record(out, backward)
    return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with biased batch statistics over (batch, rows,
    cols) and updates the running buffers in place:
    ``running <- (1 - momentum) * running + momentum * batch_stat``.
    Eval mode normalizes with the running buffers and touches nothing.
    """
    _require_rank(x, 4, "batchnorm input")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {t.shape} does not match {c} channels")
    xd = x.data
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased, matching the normalization
        running_mean.data = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = Tensor(
        gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1),
        requires_grad=_rg(x, gamma, beta),
    )
    tape = _active_tape()
    if tape is not None:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def backward(go: np.ndarray) -> None:
            if gamma.requires_grad:
                _accumulate(gamma, (go * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accumulate(beta, go.sum(axis=(0, 2, 3)))
            if not x.requires_grad:
                return
            gsc = gamma.data.reshape(1, c, 1, 1) * inv_std.reshape(1, c, 1, 1)
            if mode == "eval":
                _accumulate(x, go * gsc)
                return
            # d/dx of train-mode BN: batch mean and variance depend on x
            gxhat = go * gamma.data.reshape(1, c, 1, 1)
            sum_g = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - sum_g - xhat * sum_gx)
            _accumulate(x, gx)

        tape.record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:
        mask = x.data > 0

        def backward(go: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, go * mask)

        tape.record(out, backward)
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: no overflow for |x| up to float max."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(sigmoid_values(x.data), requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:
        y = out.data

        def backward(go: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, go * (y * (1.0 - y)))

        tape.record(out, backward)
    return out


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Repeat every cell into a 2x2 block (nearest-neighbor x2 upsampling)."""
    _require_rank(x, 4, "nearest_upsample2x input")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:
        n, c, h, w = x.shape

        def backward(go: np.ndarray) -> None:
            if x.requires_grad:
                g = go.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
                _accumulate(x, g)

        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors with identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_rg(a, b))
    tape = _active_tape()
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            # copies: both consumers must own their accumulation buffers
            if a.requires_grad:
                _accumulate(a, go.copy())
            if b.requires_grad:
                _accumulate(b, go.copy())

        tape.record(out, backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. the scalar)."""
    out = Tensor(x.data * factor, requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, go * factor)

        tape.record(out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()), requires_grad=_rg(x))
    tape = _active_tape()
    if tape is not None:
        shape, dtype = x.data.shape, x.data.dtype

        def backward(go: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, np.full(shape, go.reshape(()), dtype=dtype))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    tolerance: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` against central differences.

    ``f`` must be deterministic in ``x``. The error metric is
    ``max|analytic - numeric|`` over checked coordinates, divided by
    ``max(inf-norm(analytic), inf-norm(numeric), 1e-8)``. Use float64 inputs;
    with ``max_coords`` set, a seeded subsample of coordinates is checked.
    ``x.requires_grad`` is forced on for the duration of the check.
    """
    x.zero_grad()
    saved_rg = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
            tape.backward(y)
    finally:
        x.requires_grad = saved_rg
    if x.grad is None:
        raise TapeError("grad_check: f(x) produced no gradient for x")
    analytic = x.grad.copy()

    total = x.data.size
    if max_coords is not None and max_coords < total:
        rng = np.random.default_rng(seed)
        coords = rng.choice(total, size=max_coords, replace=False)
        coords.sort()
    else:
        coords = np.arange(total)

    flat = x.data.reshape(-1)
    numeric = np.empty(coords.shape[0], dtype=np.float64)
    for pos, ci in enumerate(coords):
        orig = flat[ci]
        flat[ci] = orig + step
        f_plus = f(x).item()
        flat[ci] = orig - step
        f_minus = f(x).item()
        flat[ci] = orig
        numeric[pos] = (f_plus - f_minus) / (2.0 * step)

    a_sel = analytic.reshape(-1)[coords]
    if not (np.all(np.isfinite(a_sel)) and np.all(np.isfinite(numeric))):
        return GradCheckReport(float("inf"), tolerance, int(coords.shape[0]))
    diff = float(np.max(np.abs(a_sel - numeric))) if coords.size else 0.0
    denom = max(
        float(np.max(np.abs(analytic))) if analytic.size else 0.0,
        float(np.max(np.abs(numeric))) if numeric.size else 0.0,
        1e-8,
    )
    return GradCheckReport(diff / denom, tolerance, int(coords.shape[0]))
