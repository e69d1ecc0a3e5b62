"""Slow, loop-based reference metrics used to cross-check the vectorized ones."""
import math

import numpy as np


def window2d(size=11, sigma=1.5):
    r = (size - 1) / 2
    w = np.array([[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma ** 2)) for j in range(size)]
                  for i in range(size)])
    return w / w.sum()


def ssim_reference(x, y, size=11, sigma=1.5):
    """Per-pixel SSIM with an explicit zero-padded window, averaged over pixels and channels."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = window2d(size, sigma)
    r = size // 2
    h, wd, ch = x.shape
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    yp = np.pad(y, ((r, r), (r, r), (0, 0)))
    total = 0.0
    for c in range(ch):
        for i in range(h):
            for j in range(wd):
                px = xp[i:i + size, j:j + size, c]
                py = yp[i:i + size, j:j + size, c]
                mx = float(np.sum(w * px))
                my = float(np.sum(w * py))
                vx = float(np.sum(w * px * px)) - mx * mx
                vy = float(np.sum(w * py * py)) - my * my
                cxy = float(np.sum(w * px * py)) - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (h * wd * ch)


def psnr_reference(x, y):
    err = 0.0
    n = 0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        err += (float(a) - float(b)) ** 2
        n += 1
    m = err / n
    return 100.0 if m == 0 else min(100.0, 10 * math.log10(1 / m))
