"""Shared oracles for the test suite.

Everything here is deliberately independent of the library's internals:
finite differences only call the forward path, and the naive convolution /
interpolation oracles are straight loop transcriptions of the definitions.
"""

import numpy as np


def finite_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` wrt ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise relative error with an absolute floor on the scale.

    The floor keeps finite-difference roundoff from dominating entries whose
    true derivative is near zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def conv2d_loops(x, w, bias, stride, dilation, padding):
    """Direct nested-loop convolution over (n, h, w, c) input.

    Output size: ceil(in/stride) for "same" zero padding, standard shrink
    for "valid".  Out-of-image taps contribute zero.
    """
    n, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    sh, sw = stride
    dh, dw = dilation
    ekh = (kh - 1) * dh + 1
    ekw = (kw - 1) * dw + 1
    if padding == "same":
        out_h = -(-h // sh)
        out_w = -(-wd // sw)
        total_h = max((out_h - 1) * sh + ekh - h, 0)
        total_w = max((out_w - 1) * sw + ekw - wd, 0)
        ph0, pw0 = total_h // 2, total_w // 2
    else:
        out_h = (h - ekh) // sh + 1
        out_w = (wd - ekw) // sw + 1
        ph0 = pw0 = 0
    out = np.zeros((n, out_h, out_w, c_out), dtype=np.float64)
    for b in range(n):
        for oy in range(out_h):
            for ox in range(out_w):
                for co in range(c_out):
                    acc = 0.0
                    for iy in range(kh):
                        for ix in range(kw):
                            yy = oy * sh + iy * dh - ph0
                            xx = ox * sw + ix * dw - pw0
                            if 0 <= yy < h and 0 <= xx < wd:
                                for ci in range(c_in):
                                    acc += float(x[b, yy, xx, ci]) * float(w[iy, ix, ci, co])
                    out[b, oy, ox, co] = acc + (float(bias[co]) if bias is not None else 0.0)
    return out


def bilinear_loops(x, out_h, out_w):
    """Per-pixel align-corners-false bilinear interpolation."""
    n, h, w, c = x.shape
    out = np.zeros((n, out_h, out_w, c), dtype=np.float64)
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        y0 = min(max(int(np.floor(sy)), 0), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = min(max(sy - y0, 0.0), 1.0)
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            x0 = min(max(int(np.floor(sx)), 0), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = min(max(sx - x0, 0.0), 1.0)
            for b in range(n):
                for ch in range(c):
                    top = x[b, y0, x0, ch] * (1 - fx) + x[b, y0, x1, ch] * fx
                    bot = x[b, y1, x0, ch] * (1 - fx) + x[b, y1, x1, ch] * fx
                    out[b, oy, ox, b * 0 + ch] = top * (1 - fy) + bot * fy
    return out


def correlate2d_loops(img, kernel):
    """Zero-padded correlation anchored at kernel cell (k//2, k//2)."""
    h, w = img.shape
    kh, kw = kernel.shape
    ah, aw = kh // 2, kw // 2
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    yy = y + i - ah
                    xx = x + j - aw
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += kernel[i, j] * img[yy, xx]
            out[y, x] = acc
    return out
