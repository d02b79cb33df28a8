"""Object-extent learning: correlation pseudo-masks and the mask head.

For an anchor feature grid f and a positive grid f', the correlation mask is

    phi[i, j] = (1/C) * max over (i', j') of <f[i, j], f'[i', j']>

and the pseudo mask M is the mean of phi over P positives.  M is a
stop-gradient regression target for a 1x1-conv mask head; the head is
trained with mean-square error.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ShapeError
from .rng import Rng


def region_correlation(f: T.Value, f_pos: T.Value) -> T.Value:
    """Per-cell max channel dot product against all positive cells, / C.

    Accepts (N, N, C) or (B, N, N, C); both operands must match in rank,
    channel count and batch extent.  Differentiable; the max routes its
    gradient to the first maximal positive cell in row-major order.
    """
    if f.ndim != f_pos.ndim or f.ndim not in (3, 4):
        raise ShapeError(f"rank mismatch: {f.shape} vs {f_pos.shape}")
    if f.shape[-1] != f_pos.shape[-1]:
        raise ShapeError(f"channel mismatch: {f.shape} vs {f_pos.shape}")
    squeeze = f.ndim == 3
    a = f.data[None] if squeeze else f.data
    p = f_pos.data[None] if squeeze else f_pos.data
    if a.shape[0] != p.shape[0]:
        raise ShapeError(f"batch mismatch: {f.shape} vs {f_pos.shape}")
    B, N, _, C = a.shape
    Np = p.shape[1]
    a2 = a.reshape(B, N * N, C)
    p2 = p.reshape(B, Np * Np, C)
    dots = np.matmul(a2, p2.transpose(0, 2, 1)) / C      # (B, N^2, Np^2)
    arg = np.argmax(dots, axis=2)                        # first max, row-major
    phi = np.take_along_axis(dots, arg[..., None], axis=2)[..., 0]
    if dots.shape[2] > 1:
        part = np.partition(dots, -2, axis=2)
        T._trace("region_correlation_max", float(np.min(part[..., -1] - part[..., -2])))
    out = phi.reshape((N, N) if squeeze else (B, N, N))

    bidx = np.arange(B)[:, None]

    def backward(g):
        g2 = g.reshape(B, N * N)
        best = p2[bidx, arg]                             # (B, N^2, C)
        gf = (g2[..., None] * best / C).reshape(a.shape)
        gp2 = np.zeros_like(p2)
        np.add.at(gp2, (bidx, arg), g2[..., None] * a2 / C)
        gp = gp2.reshape(p.shape)
        if squeeze:
            gf, gp = gf[0], gp[0]
        return ((f, gf), (f_pos, gp))

    return T.Value(out, (f, f_pos), "region_correlation", _backward=backward)


def mean_correlation(masks: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of correlation masks, in fixed list order."""
    if not masks:
        raise ContractViolation("positive set must be nonempty")
    out = np.zeros_like(masks[0])
    for m in masks:
        out += m
    return out / len(masks)


def pseudo_mask(f: T.Value, positives, P: int | None = None) -> T.Value:
    """Mean correlation mask over the positive set, as a constant target.

    ``positives`` is a list of feature grids shaped like f.  No gradient
    flows into f or the positives: the result is a detached leaf.
    """
    positives = list(positives)
    if P is None:
        P = len(positives)
    if P != len(positives) or P < 1:
        raise ContractViolation(f"need P >= 1 positives, got P={P}, len={len(positives)}")
    f_const = T.detach(f)
    masks = [region_correlation(f_const, T.detach(p)).data for p in positives]
    return T.const(mean_correlation(masks))


def init_params(channels: int, rng: Rng) -> dict[str, T.Value]:
    limit = np.sqrt(3.0 / channels)
    return {
        "oel.w": T.param(rng.uniform(-limit, limit, (1, 1, channels, 1))),
        "oel.b": T.param(np.zeros(1)),
    }


def mask_head(f: T.Value, weight: T.Value, bias: T.Value) -> T.Value:
    """1x1 conv C -> 1 plus ReLU; output (N, N) or (B, N, N), nonnegative."""
    y = T.conv2d(f, weight, stride=1, padding="same")
    y = T.relu(T.add(y, bias))
    return T.reshape(y, y.shape[:-1])


def oel_loss(m_pred: T.Value, m_target: T.Value) -> T.Value:
    """Mean squared error over all cells (and the batch, when present)."""
    if m_pred.shape != m_target.shape:
        raise ShapeError(f"mask shapes differ: {m_pred.shape} vs {m_target.shape}")
    return T.reduce_mean(T.square(T.sub(m_pred, m_target)))
