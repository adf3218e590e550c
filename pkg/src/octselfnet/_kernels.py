"""Hot inner loops: col2im scatter, max-pool and bilinear sampling.

Each kernel has a loop implementation compiled with numba and a vectorised
numpy fallback. Set ``OCTSN_DISABLE_NUMBA=1`` (or run without numba
installed) to use the numpy path. Both paths accumulate in the same order,
so they agree bit for bit on the same inputs.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("OCTSN_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# col2im: scatter-add of patch gradients back onto the padded image.
# dcols has layout (N, Ho, Wo, C, K, K); out has layout (N, C, Hp, Wp).


def _col2im_loops(dcols, out, stride):
    n_img, ho, wo, n_ch, k, _ = dcols.shape
    for ki in range(k):
        for kj in range(k):
            for n in range(n_img):
                for c in range(n_ch):
                    for oh in range(ho):
                        for ow in range(wo):
                            out[n, c, oh * stride + ki, ow * stride + kj] += dcols[n, oh, ow, c, ki, kj]
    return out


def col2im_numpy(dcols, out, stride):
    _, ho, wo, _, k, _ = dcols.shape
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return out


# ---------------------------------------------------------------------------
# max pooling over a -inf padded input (N, C, Hp, Wp).


def _maxpool_fwd_loops(xp, k, stride, ho, wo):
    n_img, n_ch, _, wp = xp.shape
    out = np.empty((n_img, n_ch, ho, wo))
    arg = np.empty((n_img, n_ch, ho, wo), dtype=np.int64)
    for n in range(n_img):
        for c in range(n_ch):
            for oh in range(ho):
                for ow in range(wo):
                    best = -np.inf
                    best_i = 0
                    for ki in range(k):
                        for kj in range(k):
                            r = oh * stride + ki
                            q = ow * stride + kj
                            v = xp[n, c, r, q]
                            if v > best:
                                best = v
                                best_i = r * wp + q
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = best_i
    return out, arg


def maxpool_fwd_numpy(xp, k, stride, ho, wo):
    n_img, n_ch, _, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1:stride, : stride * (wo - 1) + 1:stride]
    flat = win.reshape(n_img, n_ch, ho, wo, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + ki
    cols = np.arange(wo)[None, :] * stride + kj
    return np.ascontiguousarray(out), (rows * wp + cols).astype(np.int64)


def _maxpool_bwd_loops(g, arg, gx):
    n_img, n_ch, ho, wo = g.shape
    wp = gx.shape[3]
    for n in range(n_img):
        for c in range(n_ch):
            for oh in range(ho):
                for ow in range(wo):
                    i = arg[n, c, oh, ow]
                    gx[n, c, i // wp, i % wp] += g[n, c, oh, ow]
    return gx


def maxpool_bwd_numpy(g, arg, gx):
    n_img, n_ch, hp, wp = gx.shape
    plane = hp * wp
    base = (np.arange(n_img)[:, None] * n_ch + np.arange(n_ch)[None, :]) * plane
    flat_idx = (arg + base[:, :, None, None]).ravel()
    flat = gx.reshape(-1)
    np.add.at(flat, flat_idx, g.ravel())
    return gx


# ---------------------------------------------------------------------------
# bilinear sampling of a single (H, W) plane at fractional coordinates.
# zero_pad=False clamps coordinates to the border; True reads 0 outside.


def _bilinear_loops(img, ys, xs, zero_pad):
    h, w = img.shape
    out = np.empty(ys.shape)
    yf = ys.ravel()
    xf = xs.ravel()
    of = out.ravel()
    for i in range(yf.size):
        y = yf[i]
        x = xf[i]
        if not zero_pad:
            y = min(max(y, 0.0), h - 1.0)
            x = min(max(x, 0.0), w - 1.0)
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        wy = y - y0
        wx = x - x0
        y1 = y0 + 1
        x1 = x0 + 1
        v00 = 0.0
        v01 = 0.0
        v10 = 0.0
        v11 = 0.0
        if not zero_pad:
            if y1 > h - 1:
                y1 = h - 1
            if x1 > w - 1:
                x1 = w - 1
            v00 = img[y0, x0]
            v01 = img[y0, x1]
            v10 = img[y1, x0]
            v11 = img[y1, x1]
        else:
            if 0 <= y0 < h and 0 <= x0 < w:
                v00 = img[y0, x0]
            if 0 <= y0 < h and 0 <= x1 < w:
                v01 = img[y0, x1]
            if 0 <= y1 < h and 0 <= x0 < w:
                v10 = img[y1, x0]
            if 0 <= y1 < h and 0 <= x1 < w:
                v11 = img[y1, x1]
        of[i] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)
    return out


def bilinear_numpy(img, ys, xs, zero_pad):
    h, w = img.shape
    if not zero_pad:
        ys = np.clip(ys, 0.0, h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = ys - y0f
    wx = xs - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    if not zero_pad:
        y1 = np.minimum(y1, h - 1)
        x1 = np.minimum(x1, w - 1)

        def at(r, c):
            return img[r, c]
    else:
        def at(r, c):
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            return np.where(ok, img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)
    v00, v01, v10, v11 = at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)
    return (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)


if numba is not None:
    col2im_numba = numba.njit(cache=True)(_col2im_loops)
    maxpool_fwd_numba = numba.njit(cache=True)(_maxpool_fwd_loops)
    maxpool_bwd_numba = numba.njit(cache=True)(_maxpool_bwd_loops)
    bilinear_numba = numba.njit(cache=True)(_bilinear_loops)
else:  # pragma: no cover
    col2im_numba = maxpool_fwd_numba = maxpool_bwd_numba = bilinear_numba = None


def col2im(dcols, out, stride):
    if USE_NUMBA:
        return col2im_numba(np.ascontiguousarray(dcols), out, stride)
    return col2im_numpy(dcols, out, stride)


def maxpool_fwd(xp, k, stride, ho, wo):
    if USE_NUMBA:
        return maxpool_fwd_numba(np.ascontiguousarray(xp), k, stride, ho, wo)
    return maxpool_fwd_numpy(xp, k, stride, ho, wo)


def maxpool_bwd(g, arg, gx):
    if USE_NUMBA:
        return maxpool_bwd_numba(np.ascontiguousarray(g), arg, gx)
    return maxpool_bwd_numpy(g, arg, gx)


def bilinear_sample(img, ys, xs, zero_pad=False):
    img = np.ascontiguousarray(img, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if USE_NUMBA:
        return bilinear_numba(img, ys, xs, zero_pad)
    return bilinear_numpy(img, ys, xs, zero_pad)
