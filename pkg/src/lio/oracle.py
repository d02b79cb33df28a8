"""Independent scalar-loop reference implementations for tests.

Review rule: this module must not import the optimized modules (tensor,
backbone, oel, scl, trainer) or call any vectorized kernel on their
behalf; every formula is transcribed as plain Python loops over floats.
A source-level test enforces the import ban.  These paths trade speed for
unmistakable semantics.
"""

from __future__ import annotations

import math

import numpy as np


def oracle_conv2d(x, kernel, stride: int = 1, padding: str = "same"):
    """Quadruple-loop convolution; x (H, W, Cin), kernel (k, k, Cin, Cout)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    H, W, Cin = x.shape
    k = kernel.shape[0]
    Cout = kernel.shape[3]
    if padding == "valid":
        Ho = (H - k) // stride + 1
        Wo = (W - k) // stride + 1
        pt = pl = 0
    else:
        Ho = (H - 1) // stride + 1
        Wo = (W - 1) // stride + 1
        pt = max((Ho - 1) * stride + k - H, 0) // 2
        pl = max((Wo - 1) * stride + k - W, 0) // 2
    out = np.zeros((Ho, Wo, Cout))
    for oy in range(Ho):
        for ox in range(Wo):
            for oc in range(Cout):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        iy = oy * stride + ky - pt
                        ix = ox * stride + kx - pl
                        if 0 <= iy < H and 0 <= ix < W:
                            for c in range(Cin):
                                acc += float(x[iy, ix, c]) * float(kernel[ky, kx, c, oc])
                out[oy, ox, oc] = acc
    return out


def oracle_dense(x, weight, bias):
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d, m = weight.shape
    out = np.zeros(m)
    for j in range(m):
        acc = float(bias[j])
        for i in range(d):
            acc += float(x[i]) * float(weight[i, j])
        out[j] = acc
    return out


def oracle_correlation(f, f_pos):
    """phi[i, j] = max over (i', j') of <f[i,j], f_pos[i',j']> / C."""
    f = np.asarray(f, dtype=np.float64)
    f_pos = np.asarray(f_pos, dtype=np.float64)
    N = f.shape[0]
    Np = f_pos.shape[0]
    C = f.shape[2]
    phi = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            best = None
            for ii in range(Np):
                for jj in range(Np):
                    dot = 0.0
                    for c in range(C):
                        dot += float(f[i, j, c]) * float(f_pos[ii, jj, c])
                    if best is None or dot > best:
                        best = dot
            phi[i, j] = best / C
    return phi


def oracle_pseudo_mask(f, positives):
    masks = [oracle_correlation(f, p) for p in positives]
    N = masks[0].shape[0]
    out = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            acc = 0.0
            for m in masks:
                acc += float(m[i, j])
            out[i, j] = acc / len(masks)
    return out


def oracle_mask_head(f, weight, bias):
    """Per-cell dot with a (1, 1, C, 1) kernel, plus bias, then ReLU."""
    f = np.asarray(f, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    N = f.shape[0]
    C = f.shape[2]
    out = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            acc = float(bias[0])
            for c in range(C):
                acc += float(f[i, j, c]) * float(weight[0, 0, c, 0])
            out[i, j] = acc if acc > 0 else 0.0
    return out


def oracle_scl_head(h, reference, weight, bias):
    """Per-cell concat(h[i,j], h[ref]) through one dense layer plus ReLU."""
    h = np.asarray(h, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    N = h.shape[0]
    C1 = h.shape[2]
    rx, ry = reference
    gamma = np.zeros((N, N))
    theta = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            cat = [float(h[i, j, c]) for c in range(C1)] + \
                  [float(h[rx, ry, c]) for c in range(C1)]
            for k, sink in ((0, gamma), (1, theta)):
                acc = float(bias[k])
                for c in range(2 * C1):
                    acc += cat[c] * float(weight[c, k])
                sink[i, j] = acc if acc > 0 else 0.0
    return gamma, theta


def oracle_polar(N: int, reference):
    x, y = reference
    gamma = np.zeros((N, N))
    theta = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            dx = x - i
            dy = y - j
            gamma[i, j] = math.sqrt(dx * dx + dy * dy) / (math.sqrt(2.0) * N)
            ang = math.atan2(dy, dx) if (dx, dy) != (0, 0) else 0.0
            theta[i, j] = (ang + math.pi) / (2.0 * math.pi)
    return gamma, theta


def oracle_oel_loss(m_pred, m_target):
    m_pred = np.asarray(m_pred, dtype=np.float64)
    N = m_pred.shape[0]
    acc = 0.0
    for i in range(N):
        for j in range(m_pred.shape[1]):
            d = float(m_pred[i, j]) - float(m_target[i, j])
            acc += d * d
    return acc / (N * m_pred.shape[1])


def oracle_distance_loss(gamma_pred, gamma_true, weights):
    """sqrt(sum(w * (g' - g)^2) / sum(w)) for one image."""
    w = np.asarray(weights, dtype=np.float64)
    num = 0.0
    den = 0.0
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            d = float(gamma_pred[i, j]) - float(gamma_true[i, j])
            num += float(w[i, j]) * d * d
            den += float(w[i, j])
    return math.sqrt(num / den)


def oracle_angle_loss(theta_pred, theta_true, weights):
    """Weighted standard deviation of the wrapped gaps, one image."""
    w = np.asarray(weights, dtype=np.float64)
    N, M = w.shape
    gaps = [[0.0] * M for _ in range(N)]
    den = 0.0
    mean = 0.0
    for i in range(N):
        for j in range(M):
            d = float(theta_pred[i, j]) - float(theta_true[i, j])
            gaps[i][j] = d if d >= 0 else 1.0 + d
            mean += float(w[i, j]) * gaps[i][j]
            den += float(w[i, j])
    mean /= den
    var = 0.0
    for i in range(N):
        for j in range(M):
            dev = gaps[i][j] - mean
            var += float(w[i, j]) * dev * dev
    return math.sqrt(var / den)


def oracle_losses(gamma_pred, theta_pred, gamma_true, theta_true, weights,
                  m_pred, m_target):
    """(L_dis, L_angle, L_oel) for one image, straight off the formulas."""
    return (oracle_distance_loss(gamma_pred, gamma_true, weights),
            oracle_angle_loss(theta_pred, theta_true, weights),
            oracle_oel_loss(m_pred, m_target))


def finite_difference_grad(loss_fn, params: dict, step: float = 1e-6) -> dict:
    """Central differences, one parameter element at a time.

    ``params`` maps names to objects with a mutable ``.data`` ndarray;
    ``loss_fn()`` re-evaluates the loss from their current contents.
    """
    grads = {}
    for name, p in params.items():
        data = p.data
        g = np.zeros_like(data)
        flat = data.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + step
            up = loss_fn()
            flat[idx] = keep - step
            down = loss_fn()
            flat[idx] = keep
            gflat[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads
