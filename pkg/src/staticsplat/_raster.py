"""numba kernels behind :mod:`staticsplat.splat`.

Fragments are (gaussian, pixel) pairs. They are emitted per Gaussian in global
front-to-back order, then counting-sorted by pixel (stable), so every pixel's
list is already depth ordered. All kernels write disjoint slots, which keeps
parallel execution deterministic.
"""

import numba as nb
import numpy as np

ALPHA_MAX = 0.999
T_MIN = 1e-4
NGRAD = 10  # color(3), mean2d(2), conic(3), opacity, staticness


@nb.njit(parallel=True, cache=True)
def emit_fragments(x0, x1, y0, y1, offsets, width, frag_rank, frag_pix):
    for r in nb.prange(x0.shape[0]):
        k = offsets[r]
        for py in range(y0[r], y1[r] + 1):
            for px in range(x0[r], x1[r] + 1):
                frag_rank[k] = r
                frag_pix[k] = py * width + px
                k += 1


@nb.njit(cache=True)
def sort_by_pixel(frag_pix, frag_rank, order, num_pix):
    """Stable counting sort by pixel.

    Returns pixel offsets, each emitted fragment's sorted position, and for
    every sorted fragment the projection row of its Gaussian (``order`` maps
    depth rank to row).
    """
    start = np.zeros(num_pix + 1, dtype=np.int64)
    for k in range(frag_pix.shape[0]):
        start[frag_pix[k] + 1] += 1
    for p in range(num_pix):
        start[p + 1] += start[p]
    fill = start[:-1].copy()
    pos = np.empty(frag_pix.shape[0], dtype=np.int64)
    sorted_row = np.empty(frag_pix.shape[0], dtype=np.int64)
    for k in range(frag_pix.shape[0]):
        p = frag_pix[k]
        pos[k] = fill[p]
        sorted_row[fill[p]] = order[frag_rank[k]]
        fill[p] += 1
    return start, pos, sorted_row


@nb.njit(parallel=True, cache=True)
def forward(start, sorted_row, width, means, conics, opac, stat, colors,
            image, trans, count, frag_T, frag_G):
    num_pix = start.shape[0] - 1
    for p in nb.prange(num_pix):
        px = p % width
        py = p // width
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        n = 0
        for s in range(start[p], start[p + 1]):
            r = sorted_row[s]
            dx = px - means[r, 0]
            dy = py - means[r, 1]
            power = -0.5 * (conics[r, 0] * dx * dx + conics[r, 2] * dy * dy) - conics[r, 1] * dx * dy
            G = np.exp(power)
            a = min(opac[r] * G, ALPHA_MAX) * stat[r]
            frag_T[s] = T
            frag_G[s] = G
            w = a * T
            c0 += colors[r, 0] * w
            c1 += colors[r, 1] * w
            c2 += colors[r, 2] * w
            T = T * (1.0 - a)
            n += 1
            if T < T_MIN:
                break
        image[py, px, 0] = c0
        image[py, px, 1] = c1
        image[py, px, 2] = c2
        trans[py, px] = T
        count[p] = n


@nb.njit(parallel=True, cache=True)
def backward(start, sorted_row, width, means, conics, opac, stat, colors,
             trans, count, frag_T, frag_G, grad_img, grad_trans, frag_grad):
    num_pix = start.shape[0] - 1
    for p in nb.prange(num_pix):
        px = p % width
        py = p // width
        g0 = grad_img[py, px, 0]
        g1 = grad_img[py, px, 1]
        g2 = grad_img[py, px, 2]
        gT = grad_trans[py, px]
        Tf = trans[py, px]
        s0 = start[p]
        n = count[p]
        for s in range(s0 + n, start[p + 1]):
            for j in range(NGRAD):
                frag_grad[s, j] = 0.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for s in range(s0 + n - 1, s0 - 1, -1):
            k = s
            r = sorted_row[s]
            G = frag_G[s]
            T = frag_T[s]
            raw = opac[r] * G
            clipped = min(raw, ALPHA_MAX)
            a = clipped * stat[r]
            w = a * T
            inv = 1.0 / (1.0 - a)
            dA = (g0 * (colors[r, 0] * T - acc0 * inv)
                  + g1 * (colors[r, 1] * T - acc1 * inv)
                  + g2 * (colors[r, 2] * T - acc2 * inv)
                  - gT * Tf * inv)
            acc0 += colors[r, 0] * w
            acc1 += colors[r, 1] * w
            acc2 += colors[r, 2] * w
            frag_grad[k, 0] = g0 * w
            frag_grad[k, 1] = g1 * w
            frag_grad[k, 2] = g2 * w
            frag_grad[k, 9] = dA * clipped
            dclip = dA * stat[r]
            if raw < ALPHA_MAX:
                frag_grad[k, 8] = dclip * G
                dpow = dclip * opac[r] * G
            else:
                frag_grad[k, 8] = 0.0
                dpow = 0.0
            dx = px - means[r, 0]
            dy = py - means[r, 1]
            frag_grad[k, 3] = dpow * (conics[r, 0] * dx + conics[r, 1] * dy)
            frag_grad[k, 4] = dpow * (conics[r, 1] * dx + conics[r, 2] * dy)
            frag_grad[k, 5] = -0.5 * dpow * dx * dx
            frag_grad[k, 6] = -dpow * dx * dy
            frag_grad[k, 7] = -0.5 * dpow * dy * dy


@nb.njit(parallel=True, cache=True)
def reduce_per_row(offsets, pos, order, frag_grad, out):
    """Sum each Gaussian's fragment gradients (stored in pixel-sorted order) into ``out`` at its projection row."""
    for r in nb.prange(offsets.shape[0] - 1):
        row = order[r]
        for j in range(NGRAD):
            out[row, j] = 0.0
        for k in range(offsets[r], offsets[r + 1]):
            s = pos[k]
            for j in range(NGRAD):
                out[row, j] += frag_grad[s, j]


@nb.njit(parallel=True, cache=True)
def project(xc, cov_world, Rc, fx, fy, dilation, cov_cam, J, cov2d, conics):
    """EWA screen-space covariance per Gaussian: J Rc^T cov Rc J^T + dilation * I."""
    for k in nb.prange(xc.shape[0]):
        x = xc[k, 0]
        y = xc[k, 1]
        z = xc[k, 2]
        # cov_cam = Rc^T C Rc
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    for b in range(3):
                        acc += Rc[a, i] * cov_world[k, a, b] * Rc[b, j]
                cov_cam[k, i, j] = acc
        J[k, 0, 0] = fx / z
        J[k, 0, 1] = 0.0
        J[k, 0, 2] = -fx * x / (z * z)
        J[k, 1, 0] = 0.0
        J[k, 1, 1] = fy / z
        J[k, 1, 2] = -fy * y / (z * z)
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for a in range(3):
                    for b in range(3):
                        acc += J[k, i, a] * cov_cam[k, a, b] * J[k, j, b]
                cov2d[k, i, j] = acc
        cov2d[k, 0, 0] += dilation
        cov2d[k, 1, 1] += dilation
        A = cov2d[k, 0, 0]
        B = cov2d[k, 0, 1]
        C = cov2d[k, 1, 1]
        det = A * C - B * B
        conics[k, 0] = C / det
        conics[k, 1] = -B / det
        conics[k, 2] = A / det


@nb.njit(parallel=True, cache=True)
def backward_screen(xc, J, cov_cam, cov2d, cov_world, Rc, per_row, fx, fy, g_mu, g_cov, g_Rc, work):
    """Chain per-row screen-space gradients back to world-space means and covariances.

    ``g_Rc``
    holds each Gaussian's contribution to the camera rotation gradient, left
    for the caller to sum in a fixed order. ``work`` is (K, 9, 3) scratch.
    """
    for k in nb.prange(xc.shape[0]):
        r = k
        A = cov2d[k, 0, 0]
        B = cov2d[k, 0, 1]
        C = cov2d[k, 1, 1]
        det2 = (A * C - B * B) ** 2
        ga = per_row[r, 5]
        gb = per_row[r, 6]
        gc = per_row[r, 7]
        G00 = (-C * C * ga + B * C * gb - B * B * gc) / det2
        G11 = (-B * B * ga + A * B * gb - A * A * gc) / det2
        G01 = 0.5 * (2 * B * C * ga - (A * C + B * B) * gb + 2 * A * B * gc) / det2
        # GJ = G J (2x3)
        # per-Gaussian scratch rows avoid allocating inside the parallel loop
        GJ0 = work[r, 0]
        GJ1 = work[r, 1]
        gx = work[r, 2]
        gcc = work[r, 3:6]
        RG = work[r, 6:9]
        for b in range(3):
            GJ0[b] = G00 * J[k, 0, b] + G01 * J[k, 1, b]
            GJ1[b] = G01 * J[k, 0, b] + G11 * J[k, 1, b]
        # g_cov_cam = J^T G J
        for i in range(3):
            for j in range(3):
                gcc[i, j] = J[k, 0, i] * GJ0[j] + J[k, 1, i] * GJ1[j]
        # g_J = 2 G J cov_cam; only entries (0,0), (0,2), (1,1), (1,2) depend on the mean
        gJ00 = 0.0
        gJ02 = 0.0
        gJ11 = 0.0
        gJ12 = 0.0
        for b in range(3):
            gJ00 += 2.0 * GJ0[b] * cov_cam[k, b, 0]
            gJ02 += 2.0 * GJ0[b] * cov_cam[k, b, 2]
            gJ11 += 2.0 * GJ1[b] * cov_cam[k, b, 1]
            gJ12 += 2.0 * GJ1[b] * cov_cam[k, b, 2]
        x = xc[k, 0]
        y = xc[k, 1]
        z = xc[k, 2]
        du = per_row[r, 3]
        dv = per_row[r, 4]
        gx[0] = du * fx / z - gJ02 * fx / (z * z)
        gx[1] = dv * fy / z - gJ12 * fy / (z * z)
        gx[2] = (-du * fx * x / (z * z) - dv * fy * y / (z * z)
                      - gJ00 * fx / (z * z) + gJ02 * 2 * fx * x / (z * z * z)
                      - gJ11 * fy / (z * z) + gJ12 * 2 * fy * y / (z * z * z))
        # xc = Rc^T d with d = mu - t, cov_cam = Rc^T cov Rc
        for i in range(3):
            acc = 0.0
            for j in range(3):
                acc += Rc[i, j] * gx[j]
            g_mu[r, i] = acc
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    acc += Rc[i, a] * gcc[a, j]
                RG[i, j] = acc
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    acc += RG[i, a] * Rc[j, a]
                g_cov[r, i, j] = acc
        for i in range(3):
            di = Rc[i, 0] * x + Rc[i, 1] * y + Rc[i, 2] * z
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    acc += cov_world[k, i, a] * RG[a, j]
                g_Rc[r, i, j] = di * gx[j] + 2.0 * acc
