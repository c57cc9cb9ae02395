"""Pure numpy implementations of the compiled kernels."""

import numpy as np


def ray_integrals(mu_total, mu_excess, apex_x, apex_y, step):
    mu_total = np.ascontiguousarray(mu_total, dtype=np.float64)
    mu_excess = np.ascontiguousarray(mu_excess, dtype=np.float64)
    h, w = mu_total.shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    px += 0.5
    py += 0.5
    dx = px - apex_x
    dy = py - apex_y
    t0 = -apex_y / dy if apex_y < 0.0 else np.zeros_like(dy)
    seg = np.sqrt(dx * dx + dy * dy) * (1.0 - t0)
    n = np.maximum(np.ceil(seg / step), 1).astype(np.int64)
    dl = seg / n
    acc_t = np.zeros((h, w))
    acc_e = np.zeros((h, w))
    for k in range(int(n.max())):
        live = k < n
        t = t0 + (k + 0.5) / n * (1.0 - t0)
        sj = np.clip(np.floor(apex_x + t * dx).astype(np.int64), 0, w - 1)
        si = np.clip(np.floor(apex_y + t * dy).astype(np.int64), 0, h - 1)
        acc_t = np.where(live, acc_t + mu_total[si, sj] * dl, acc_t)
        acc_e = np.where(live, acc_e + mu_excess[si, sj] * dl, acc_e)
    return acc_t, acc_e


def rw_edge_weights(g, beta, gamma, eps):
    g = np.asarray(g, dtype=np.float64)
    right = gamma * np.exp(-beta * np.abs(g[:, :-1] - g[:, 1:])) + eps
    down = np.exp(-beta * np.abs(g[:-1, :] - g[1:, :])) + eps
    dr = np.exp(-beta * np.abs(g[:-1, :-1] - g[1:, 1:])) + eps
    dlf = np.exp(-beta * np.abs(g[:-1, 1:] - g[1:, :-1])) + eps
    return right, down, dr, dlf
