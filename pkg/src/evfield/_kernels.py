"""Compiled inner loops for batched volume rendering over a vertex grid.

Forward rays are independent.  The adjoint scatters into one gradient buffer
in ray order, so results do not depend on scheduling.
"""

import math

import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; workqueue is always available
config.THREADING_LAYER = "workqueue"


@njit(cache=True, inline="always")
def _locate(px, py, pz, lo, hi, res, clip):
    """Trilinear base vertex and fractions; inside=False when density is clipped to zero."""
    if clip[0] > 0.0:
        if px * px + py * py > clip[1] or pz < clip[2] or pz > clip[3]:
            return False, 0, 0, 0, 0.0, 0.0, 0.0
    if px < lo[0] or py < lo[1] or pz < lo[2] or px > hi[0] or py > hi[1] or pz > hi[2]:
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    gx = (px - lo[0]) / (hi[0] - lo[0]) * (res[0] - 1)
    gy = (py - lo[1]) / (hi[1] - lo[1]) * (res[1] - 1)
    gz = (pz - lo[2]) / (hi[2] - lo[2]) * (res[2] - 1)
    i = min(int(math.floor(gx)), res[0] - 2)
    j = min(int(math.floor(gy)), res[1] - 2)
    k = min(int(math.floor(gz)), res[2] - 2)
    return True, i, j, k, gx - i, gy - j, gz - k


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True, parallel=True)
def render_forward(params, lo, hi, clip, origins, dirs, q, tfar, bg,
                   rgb, depth, opacity, sigma, col, dsig, w, T):
    """Fill rgb (R,3), depth (R,), opacity (R,) and per-sample state.

    T has S+1 columns: T[:, i] is transmittance before sample i, T[:, S] the residual.
    """
    R, S = q.shape
    res = np.array(params.shape[:3])
    for r in prange(R):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        trans = 1.0
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        acc_d = 0.0
        acc_w = 0.0
        for s in range(S):
            qs = q[r, s]
            inside, i, j, k, fx, fy, fz = _locate(ox + qs * dx, oy + qs * dy, oz + qs * dz,
                                                  lo, hi, res, clip)
            if inside:
                v0 = 0.0
                v1 = 0.0
                v2 = 0.0
                v3 = 0.0
                for di in range(2):
                    wx = fx if di else 1.0 - fx
                    for dj in range(2):
                        wy = fy if dj else 1.0 - fy
                        for dk in range(2):
                            wz = fz if dk else 1.0 - fz
                            cw = wx * wy * wz
                            v0 += cw * params[i + di, j + dj, k + dk, 0]
                            v1 += cw * params[i + di, j + dj, k + dk, 1]
                            v2 += cw * params[i + di, j + dj, k + dk, 2]
                            v3 += cw * params[i + di, j + dj, k + dk, 3]
                sg = _softplus(v0)
                dsig[r, s] = _sigmoid(v0)
                c0 = _sigmoid(v1)
                c1 = _sigmoid(v2)
                c2 = _sigmoid(v3)
            else:
                sg = 0.0
                dsig[r, s] = 0.0
                c0 = 0.5
                c1 = 0.5
                c2 = 0.5
            sigma[r, s] = sg
            col[r, s, 0] = c0
            col[r, s, 1] = c1
            col[r, s, 2] = c2
            kappa = (q[r, s + 1] if s + 1 < S else tfar[r]) - qs
            a = math.exp(-sg * kappa)
            ws = trans * (1.0 - a)
            T[r, s] = trans
            w[r, s] = ws
            acc_r += ws * c0
            acc_g += ws * c1
            acc_b += ws * c2
            acc_d += ws * qs
            acc_w += ws
            trans *= a
        T[r, S] = trans
        rgb[r, 0] = acc_r + trans * bg[0]
        rgb[r, 1] = acc_g + trans * bg[1]
        rgb[r, 2] = acc_b + trans * bg[2]
        opacity[r] = 1.0 - trans
        depth[r] = acc_d / max(acc_w, 1e-8)


@njit(cache=True)
def render_adjoint(params, lo, hi, clip, origins, dirs, q, tfar, bg,
                   sigma, col, dsig, w, T, grad_rgb, grad):
    """Accumulate d loss / d params into ``grad`` given d loss / d rgb per ray."""
    R, S = q.shape
    res = np.array(params.shape[:3])
    for r in range(R):
        g0, g1, g2 = grad_rgb[r, 0], grad_rgb[r, 1], grad_rgb[r, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        # g . (colour arriving from behind sample s), starting with the background term
        behind = T[r, S] * (g0 * bg[0] + g1 * bg[1] + g2 * bg[2])
        for s in range(S - 1, -1, -1):
            c0, c1, c2 = col[r, s, 0], col[r, s, 1], col[r, s, 2]
            gc = g0 * c0 + g1 * c1 + g2 * c2
            ws = w[r, s]
            kappa = (q[r, s + 1] if s + 1 < S else tfar[r]) - q[r, s]
            t_next = T[r, s + 1]
            dl_dsigma = kappa * (t_next * gc - behind)
            behind += ws * gc
            if dsig[r, s] == 0.0:
                continue
            l0 = dl_dsigma * dsig[r, s]
            l1 = ws * g0 * c0 * (1.0 - c0)
            l2 = ws * g1 * c1 * (1.0 - c1)
            l3 = ws * g2 * c2 * (1.0 - c2)
            qs = q[r, s]
            inside, i, j, k, fx, fy, fz = _locate(ox + qs * dx, oy + qs * dy, oz + qs * dz,
                                                  lo, hi, res, clip)
            if not inside:
                continue
            for di in range(2):
                wx = fx if di else 1.0 - fx
                for dj in range(2):
                    wy = fy if dj else 1.0 - fy
                    for dk in range(2):
                        wz = fz if dk else 1.0 - fz
                        cw = wx * wy * wz
                        grad[i + di, j + dj, k + dk, 0] += cw * l0
                        grad[i + di, j + dj, k + dk, 1] += cw * l1
                        grad[i + di, j + dj, k + dk, 2] += cw * l2
                        grad[i + di, j + dj, k + dk, 3] += cw * l3


@njit(cache=True)
def adam_update(params, grads, m, v, lr, lr_scale, beta1, beta2, eps, bc1, bc2):
    """In-place bias-corrected Adam; ``lr_scale`` is per trailing channel."""
    nc = lr_scale.shape[0]
    p = params.reshape(-1, nc)
    g = grads.reshape(-1, nc)
    mm = m.reshape(-1, nc)
    vv = v.reshape(-1, nc)
    step = np.empty(nc)
    for c in range(nc):
        step[c] = lr * lr_scale[c] / bc1
    inv_bc2 = 1.0 / bc2
    for n in range(p.shape[0]):
        for c in range(nc):
            gn = g[n, c]
            if gn == 0.0 and mm[n, c] == 0.0 and vv[n, c] == 0.0:
                continue  # never-supervised entry: the update is exactly zero
            mn = beta1 * mm[n, c] + (1.0 - beta1) * gn
            vn = beta2 * vv[n, c] + (1.0 - beta2) * gn * gn
            mm[n, c] = mn
            vv[n, c] = vn
            p[n, c] -= step[c] * mn / (math.sqrt(vn * inv_bc2) + eps)
