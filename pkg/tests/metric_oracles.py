"""Pure-Python metric references, written without tensors or convolutions."""

import math


def y_plane(img):
    r, g, b = img.tolist()
    h, w = len(r), len(r[0])
    return [[(65.481 * r[i][j] + 128.553 * g[i][j] + 24.966 * b[i][j] + 16.0) / 255.0 for j in range(w)] for i in range(h)]


def _shave(p, s):
    if not s:
        return p
    return [row[s:-s] for row in p[s:-s]]


def psnr_loop(pred, gt, shave):
    a, b = _shave(y_plane(pred), shave), _shave(y_plane(gt), shave)
    total = 0.0
    n = 0
    for ra, rb in zip(a, b):
        for u, v in zip(ra, rb):
            total += (u - v) ** 2
            n += 1
    mse = total / n
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def ssim_loop(pred, gt, shave, size=11, sigma=1.5, k1=0.01, k2=0.03):
    a, b = _shave(y_plane(pred), shave), _shave(y_plane(gt), shave)
    c1, c2 = k1**2, k2**2
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma**2)) for i in range(size)]
    z = sum(g)
    g = [v / z for v in g]
    h, w = len(a), len(a[0])
    scores = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            mx = my = 0.0
            for di in range(size):
                for dj in range(size):
                    wt = g[di] * g[dj]
                    mx += wt * a[i + di][j + dj]
                    my += wt * b[i + di][j + dj]
            vx = vy = cxy = 0.0
            for di in range(size):
                for dj in range(size):
                    wt = g[di] * g[dj]
                    dx, dy = a[i + di][j + dj] - mx, b[i + di][j + dj] - my
                    vx += wt * dx * dx
                    vy += wt * dy * dy
                    cxy += wt * dx * dy
            scores.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(scores) / len(scores)
