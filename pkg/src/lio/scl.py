"""Spatial context learning: polar-coordinate targets and weighted losses.

Each cell of an N x N grid gets ground-truth polar coordinates relative to
a reference cell (the argmax of the predicted mask):

    gamma[i, j] = sqrt((x - i)^2 + (y - j)^2) / (sqrt(2) * N)
    theta[i, j] = (atan2(y - j, x - i) + pi) / (2 * pi)

with atan2 in (-pi, pi], and atan2(0, 0) defined as 0 so the reference
cell carries (gamma, theta) = (0, 0.5).  A shared dense layer predicts
both coordinates per cell from the cell's projected features concatenated
with the reference cell's.  The two losses are a mask-weighted RMS of the
distance error and a mask-weighted standard deviation of the wrapped
angle gaps; predicted-mask weights enter as stop-gradient constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ShapeError
from .rng import Rng

DEGENERATE_MASK_EPS = 1e-8


@dataclass
class PolarField:
    """Ground-truth polar coordinates; arrays (N, N) or (B, N, N)."""
    gamma: np.ndarray
    theta: np.ndarray
    reference: tuple | list


@dataclass
class PredictedPolarField:
    gamma: T.Value
    theta: T.Value


@dataclass
class SclStats:
    """Per-call diagnostics for the epoch CSV."""
    degenerate_masks: int = 0
    theta_cells_out_of_range: int = 0
    theta_cells_total: int = 0

    def merge(self, other: "SclStats") -> None:
        self.degenerate_masks += other.degenerate_masks
        self.theta_cells_out_of_range += other.theta_cells_out_of_range
        self.theta_cells_total += other.theta_cells_total

    @property
    def theta_out_of_range_frac(self) -> float:
        if self.theta_cells_total == 0:
            return 0.0
        return self.theta_cells_out_of_range / self.theta_cells_total


def ground_truth_polar(N: int, reference: tuple[int, int]) -> PolarField:
    """Polar field of an N x N grid around one reference cell (0-based)."""
    x, y = reference
    if not (0 <= x < N and 0 <= y < N):
        raise ContractViolation(f"reference {reference} outside {N}x{N} grid")
    i, j = np.meshgrid(np.arange(N, dtype=np.float64), np.arange(N, dtype=np.float64),
                       indexing="ij")
    dx = x - i
    dy = y - j
    gamma = np.sqrt(dx * dx + dy * dy) / (np.sqrt(2.0) * N)
    ang = np.arctan2(dy, dx)           # (-pi, pi]; atan2(0, 0) = 0 at the reference
    theta = (ang + np.pi) / (2.0 * np.pi)
    theta[x, y] = 0.5
    return PolarField(gamma, theta, (x, y))


def ground_truth_polar_batch(N: int, references) -> PolarField:
    fields = [ground_truth_polar(N, tuple(r)) for r in references]
    return PolarField(np.stack([f.gamma for f in fields]),
                      np.stack([f.theta for f in fields]),
                      [f.reference for f in fields])


def select_reference(m_pred: T.Value | np.ndarray):
    """Argmax cell of the predicted mask; ties to the lowest row-major index.

    (N, N) -> (row, col); (B, N, N) -> list of (row, col).  An index
    choice, not a graph node.
    """
    m = m_pred.data if isinstance(m_pred, T.Value) else np.asarray(m_pred)
    if m.ndim == 2:
        r, c = np.unravel_index(int(np.argmax(m)), m.shape)
        return (int(r), int(c))
    if m.ndim == 3:
        flat = m.reshape(m.shape[0], -1)
        args = np.argmax(flat, axis=1)
        return [(int(a) // m.shape[2], int(a) % m.shape[2]) for a in args]
    raise ShapeError(f"mask must be (N, N) or (B, N, N), got {m.shape}")


def init_params(channels: int, proj_channels: int, rng: Rng) -> dict[str, T.Value]:
    limit = np.sqrt(3.0 / channels)
    params = {
        "scl.proj.w": T.param(rng.uniform(-limit, limit, (1, 1, channels, proj_channels))),
        "scl.proj.b": T.param(np.zeros(proj_channels)),
    }
    limit = np.sqrt(3.0 / (2 * proj_channels))
    params["scl.fc.w"] = T.param(rng.uniform(-limit, limit, (2 * proj_channels, 2)))
    params["scl.fc.b"] = T.param(np.zeros(2))
    return params


def project(f: T.Value, weight: T.Value, bias: T.Value) -> T.Value:
    """1x1 conv plus ReLU: C -> C1 spatial descriptor grid h."""
    return T.relu(T.add(T.conv2d(f, weight, stride=1, padding="same"), bias))


def scl_head(h: T.Value, reference, weight: T.Value, bias: T.Value) -> PredictedPolarField:
    """Predict (gamma', theta') per cell from concat(h[i,j], h[ref]).

    One dense layer (2*C1 -> 2) with ReLU, shared across cells.  ``h`` is
    (N, N, C1) with reference (row, col), or (B, N, N, C1) with one
    reference per batch item.
    """
    squeeze = h.ndim == 3
    hb = T.reshape(h, (1,) + h.shape) if squeeze else h
    refs = [reference] if squeeze else list(reference)
    if len(refs) != hb.shape[0]:
        raise ShapeError(f"{len(refs)} references for batch of {hb.shape[0]}")
    B, N, _, C1 = hb.shape
    for r, c in refs:
        if not (0 <= r < N and 0 <= c < N):
            raise ContractViolation(f"reference ({r}, {c}) outside {N}x{N} grid")
    rows = [r for r, _ in refs]
    cols = [c for _, c in refs]
    ref_vec = T.gather_cells(hb, rows, cols)                     # (B, C1)
    tiled = T.mul(T.const(np.ones((B, N, N, 1))), T.reshape(ref_vec, (B, 1, 1, C1)))
    cat = T.concat(hb, tiled, axis=-1)                           # (B, N, N, 2*C1)
    pred = T.relu(T.dense(cat, weight, bias))                    # (B, N, N, 2)
    gamma = T.take(pred, 0, axis=-1)
    theta = T.take(pred, 1, axis=-1)
    if squeeze:
        gamma = T.reshape(gamma, (N, N))
        theta = T.reshape(theta, (N, N))
    return PredictedPolarField(gamma, theta)


def angle_gap(theta_pred: T.Value, theta_true: np.ndarray) -> T.Value:
    """Wrapped gap: theta' - theta if >= 0 else 1 + theta' - theta.

    Both branches have slope 1 in theta', so the gradient is the identity;
    the value jumps at the branch point, which gradient checks must avoid.
    """
    d = theta_pred.data - theta_true
    if d.size:
        T._trace("angle_gap", float(np.min(np.abs(d))))
    out = np.where(d < 0, 1.0 + d, d)
    return T.Value(out, (theta_pred,), "angle_gap",
                   _backward=lambda g: ((theta_pred, g),))


def _as_batch(v: T.Value) -> tuple[T.Value, bool]:
    if v.ndim == 2:
        return T.reshape(v, (1,) + v.shape), True
    return v, False


def _mask_weights(m_pred) -> np.ndarray:
    m = m_pred.data if isinstance(m_pred, T.Value) else np.asarray(m_pred, dtype=np.float64)
    return m[None] if m.ndim == 2 else m


def _weighted_rms(sq_err: T.Value, weights: np.ndarray) -> tuple[T.Value, SclStats]:
    """Batch mean over valid images of sqrt(sum(w * err^2) / sum(w)).

    Images whose mask weight sum is <= DEGENERATE_MASK_EPS are skipped and
    counted; with no valid image the loss is the constant 0.
    """
    B = weights.shape[0]
    sums = weights.reshape(B, -1).sum(axis=1)
    valid = sums > DEGENERATE_MASK_EPS
    stats = SclStats(degenerate_masks=int(B - valid.sum()))
    inv = np.where(valid, 1.0 / np.where(valid, sums, 1.0), 0.0)
    num = T.reduce_sum(T.mul(sq_err, T.const(weights)), axes=(1, 2))     # (B,)
    per_image = T.sqrt(T.mul(num, T.const(inv)))
    n_valid = int(valid.sum())
    if n_valid == 0:
        return T.const(0.0), stats
    sel = np.where(valid, 1.0 / n_valid, 0.0)
    return T.reduce_sum(T.mul(per_image, T.const(sel))), stats


def distance_loss(pred: PredictedPolarField, truth: PolarField, m_pred) -> T.Value:
    loss, _ = distance_loss_with_stats(pred, truth, m_pred)
    return loss


def distance_loss_with_stats(pred: PredictedPolarField, truth: PolarField,
                             m_pred) -> tuple[T.Value, SclStats]:
    """Mask-weighted RMS of gamma' - gamma, averaged over the batch."""
    gp, _ = _as_batch(pred.gamma)
    gt = truth.gamma[None] if truth.gamma.ndim == 2 else truth.gamma
    if gp.shape != gt.shape:
        raise ShapeError(f"gamma shapes differ: {gp.shape} vs {gt.shape}")
    w = _mask_weights(m_pred)
    err2 = T.square(T.sub(gp, T.const(gt)))
    return _weighted_rms(err2, w)


def angle_loss(pred: PredictedPolarField, truth: PolarField, m_pred) -> T.Value:
    loss, _ = angle_loss_with_stats(pred, truth, m_pred)
    return loss


def angle_loss_with_stats(pred: PredictedPolarField, truth: PolarField,
                          m_pred) -> tuple[T.Value, SclStats]:
    """Mask-weighted standard deviation of the wrapped angle gaps."""
    tp, _ = _as_batch(pred.theta)
    tt = truth.theta[None] if truth.theta.ndim == 2 else truth.theta
    if tp.shape != tt.shape:
        raise ShapeError(f"theta shapes differ: {tp.shape} vs {tt.shape}")
    w = _mask_weights(m_pred)
    B = w.shape[0]
    sums = w.reshape(B, -1).sum(axis=1)
    valid = sums > DEGENERATE_MASK_EPS
    inv = np.where(valid, 1.0 / np.where(valid, sums, 1.0), 0.0)

    gaps = angle_gap(tp, tt)                                             # (B, N, N)
    mean_gap = T.mul(T.reduce_sum(T.mul(gaps, T.const(w)), axes=(1, 2)), T.const(inv))
    dev2 = T.square(T.sub(gaps, T.reshape(mean_gap, (B, 1, 1))))
    loss, stats = _weighted_rms(dev2, w)
    stats.theta_cells_total = int(tp.data.size)
    stats.theta_cells_out_of_range = int(((tp.data < 0) | (tp.data >= 1)).sum())
    return loss, stats


def scl_loss(pred: PredictedPolarField, truth: PolarField, m_pred) -> T.Value:
    loss, _ = scl_loss_with_stats(pred, truth, m_pred)
    return loss


def scl_loss_with_stats(pred: PredictedPolarField, truth: PolarField,
                        m_pred) -> tuple[T.Value, SclStats]:
    """Sum of the distance and angle losses.

    Both sub-losses skip the same degenerate images, so the combined stats
    count each skipped image once.
    """
    l_dis, _ = distance_loss_with_stats(pred, truth, m_pred)
    l_ang, stats = angle_loss_with_stats(pred, truth, m_pred)
    return T.add(l_dis, l_ang), stats
