"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports from vesselseg; each function is written directly from
the mathematical definition.
"""

import itertools
import math

import numpy as np


def correlate3d_depthwise(x, kernel, bias):
    """x (B, C, D, H, W), kernel (C, kd, kh, kw): zero-padded per-channel correlation."""
    b, c, d, h, w = x.shape
    _, kd, kh, kw = kernel.shape
    rd, rh, rw = kd // 2, kh // 2, kw // 2
    out = np.zeros_like(x, dtype=np.float64)
    for n, ch, z, y, xx in itertools.product(range(b), range(c), range(d), range(h), range(w)):
        acc = bias[ch]
        for i, j, k in itertools.product(range(kd), range(kh), range(kw)):
            zz, yy, xk = z + i - rd, y + j - rh, xx + k - rw
            if 0 <= zz < d and 0 <= yy < h and 0 <= xk < w:
                acc += kernel[ch, i, j, k] * x[n, ch, zz, yy, xk]
        out[n, ch, z, y, xx] = acc
    return out


def correlate3d_dense(x, weight, bias, stride=(1, 1, 1)):
    """x (B, Cin, D, H, W), weight (Cout, Cin, kd, kh, kw), zero padding k//2, strided output."""
    b, cin, d, h, w = x.shape
    cout, _, kd, kh, kw = weight.shape
    rd, rh, rw = kd // 2, kh // 2, kw // 2
    od = (d + 2 * rd - kd) // stride[0] + 1
    oh = (h + 2 * rh - kh) // stride[1] + 1
    ow = (w + 2 * rw - kw) // stride[2] + 1
    out = np.zeros((b, cout, od, oh, ow))
    for n, o, z, y, xx in itertools.product(range(b), range(cout), range(od), range(oh), range(ow)):
        acc = bias[o]
        for ci, i, j, k in itertools.product(range(cin), range(kd), range(kh), range(kw)):
            zz = z * stride[0] + i - rd
            yy = y * stride[1] + j - rh
            xk = xx * stride[2] + k - rw
            if 0 <= zz < d and 0 <= yy < h and 0 <= xk < w:
                acc += weight[o, ci, i, j, k] * x[n, ci, zz, yy, xk]
        out[n, o, z, y, xx] = acc
    return out


def linear_resize_1d(values, n_out):
    """Align-corners linear interpolation of a 1D sequence."""
    n_in = len(values)
    out = np.empty(n_out)
    for i in range(n_out):
        pos = 0.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n_in - 1)
        t = pos - lo
        out[i] = (1 - t) * values[lo] + t * values[hi]
    return out


def resize_trilinear(x, size):
    """Separable align-corners resize of the trailing three axes of a rank-5 array."""
    out = x
    for axis, n in zip((2, 3, 4), size):
        out = np.apply_along_axis(linear_resize_1d, axis, out, n)
    return out


def softmax_naive(v):
    e = [math.exp(t) for t in v]
    s = sum(e)
    return [t / s for t in e]


def mhsa_naive(tokens, heads, wq, wk, wv, wo, positions=None, base=10000.0):
    """tokens (S, E); weights (E, E) applied as W @ t. Explicit loops over heads and pairs."""
    s, e = tokens.shape
    dh = e // heads
    q, k, v = tokens @ wq.T, tokens @ wk.T, tokens @ wv.T
    out = np.zeros((s, e))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        qh, kh, vh = q[:, sl].copy(), k[:, sl].copy(), v[:, sl]
        if positions is not None:
            for idx, pos in enumerate(positions):
                for j in range(dh // 2):
                    theta = pos * base ** (-2.0 * j / dh)
                    c, sn = math.cos(theta), math.sin(theta)
                    for arr in (qh, kh):
                        a, b = arr[idx, 2 * j], arr[idx, 2 * j + 1]
                        arr[idx, 2 * j], arr[idx, 2 * j + 1] = a * c - b * sn, a * sn + b * c
        for i in range(s):
            scores = [float(qh[i] @ kh[j]) / math.sqrt(dh) for j in range(s)]
            weights = softmax_naive(scores)
            out[i, sl] = sum(wgt * vh[j] for j, wgt in enumerate(weights))
    return out @ wo.T


def dice_count(p, g):
    p = [bool(t) for t in np.asarray(p).ravel()]
    g = [bool(t) for t in np.asarray(g).ravel()]
    inter = sum(a and b for a, b in zip(p, g))
    total = sum(p) + sum(g)
    return 1.0 if total == 0 else 2.0 * inter / total


def _pool(m, op):
    d, h, w = m.shape
    out = np.zeros_like(m)
    for z, y, x in itertools.product(range(d), range(h), range(w)):
        window = m[max(z - 1, 0):z + 2, max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]
        out[z, y, x] = op(window)
    return out


def skeleton_loop(m, iters):
    """Residues m - open(m) accumulated over erosion levels 0..iters."""
    m = np.asarray(m).astype(bool)
    skel = np.zeros_like(m)
    for level in range(iters + 1):
        if level:
            m = _pool(m, np.min)
        opened = _pool(_pool(m, np.min), np.max)
        skel = skel | (m & ~opened)
    return skel


def cldice_loop(p, g, iters):
    p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
    if not p.any() and not g.any():
        return 1.0
    sp, sg = skeleton_loop(p, iters), skeleton_loop(g, iters)
    if not sp.any() or not sg.any():
        return 0.0
    tprec = (sp & g).sum() / sp.sum()
    tsens = (sg & p).sum() / sg.sum()
    return 0.0 if tprec + tsens == 0 else 2 * tprec * tsens / (tprec + tsens)


def boundary_loop(m):
    m = np.asarray(m).astype(bool)
    d, h, w = m.shape
    out = np.zeros_like(m)
    for z, y, x in itertools.product(range(d), range(h), range(w)):
        if not m[z, y, x]:
            continue
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if not (0 <= zz < d and 0 <= yy < h and 0 <= xx < w) or not m[zz, yy, xx]:
                out[z, y, x] = True
                break
    return out


def percentile_linear(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def hd95_exhaustive(p, g, spacing):
    p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return None
    a = [np.array(i) * spacing for i in np.argwhere(boundary_loop(p))]
    b = [np.array(i) * spacing for i in np.argwhere(boundary_loop(g))]

    def directed(src, dst):
        return percentile_linear([min(math.sqrt(float(((s - t) ** 2).sum())) for t in dst) for s in src], 95)

    return max(directed(a, b), directed(b, a))
