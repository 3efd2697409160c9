"""Independent reference implementations used as test oracles.

Everything here is written as plain per-element Python loops (or a
different algorithm from the library), so agreement is evidence rather than
a restatement of the same vectorized code.
"""

from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction

import numpy as np

# ---------------------------------------------------------------- geometry


def _is_left(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (px - ax) * (by - ay)


def winding_number(points, px, py) -> int:
    """Winding number of a closed polygon around ``(px, py)`` (orientation-test formulation)."""
    wn = 0
    n = len(points)
    for i in range(n):
        ax, ay = points[i]
        bx, by = points[(i + 1) % n]
        if ay <= py:
            if by > py and _is_left(ax, ay, bx, by, px, py) > 0:
                wn += 1
        elif by <= py and _is_left(ax, ay, bx, by, px, py) < 0:
            wn -= 1
    return wn


def raster_oracle(points, rows: int, cols: int) -> np.ndarray:
    """Per-pixel-center point-in-polygon for simple polygons (nonzero winding = even-odd there)."""
    pts = [(float(x), float(y)) for x, y in points]
    out = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for c in range(cols):
            out[r, c] = winding_number(pts, c + 0.5, r + 0.5) != 0
    return out


def star_polygon(rng, rows: int, cols: int, n_vertices: int) -> np.ndarray:
    """Random simple polygon: vertices sorted by angle around a random center."""
    cx, cy = rng.uniform(0, cols), rng.uniform(0, rows)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = rng.uniform(0.3, 0.7, n_vertices) * max(rows, cols)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def bbox_oracle(mask, enlarge=1.2, min_area=10):
    """``("empty" | "small" | box)`` computed pixel by pixel."""
    rows, cols = len(mask), len(mask[0])
    area, x0, y0, x1, y1 = 0, None, None, None, None
    for r in range(rows):
        for c in range(cols):
            if mask[r][c]:
                area += 1
                x0 = c if x0 is None else min(x0, c)
                x1 = c if x1 is None else max(x1, c)
                y0 = r if y0 is None else min(y0, r)
                y1 = r if y1 is None else max(y1, r)
    if area == 0:
        return "empty", 0, None
    if area < min_area:
        return "small", area, None
    # tight box in corner coordinates covers pixels x0..x1 inclusive
    w, h = (x1 + 1 - x0), (y1 + 1 - y0)
    cx, cy = x0 + w / 2, y0 + h / 2
    box = [cx - w * enlarge / 2, cy - h * enlarge / 2, cx + w * enlarge / 2, cy + h * enlarge / 2]
    box = [min(max(box[0], 0), cols), min(max(box[1], 0), rows), min(max(box[2], 0), cols), min(max(box[3], 0), rows)]
    return "ok", area, tuple(box)


def iou_oracle(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- losses


def _softmax_pixel(logits, n, r, c):
    vals = [float(logits[n][k][r][c]) for k in range(len(logits[n]))]
    m = max(vals)
    exps = [math.exp(v - m) for v in vals]
    s = sum(exps)
    return [e / s for e in exps]


def dice_oracle(p, t, empty=1.0) -> float:
    p = np.asarray(p, bool).ravel().tolist()
    t = np.asarray(t, bool).ravel().tolist()
    inter = sum(1 for a, b in zip(p, t) if a and b)
    tot = sum(p) + sum(t)
    return empty if tot == 0 else 2.0 * inter / tot


def weighted_ce_oracle(logits, labels, weights) -> float:
    N, C, H, W = np.shape(logits)
    total = 0.0
    for n in range(N):
        for r in range(H):
            for c in range(W):
                y = int(labels[n][r][c])
                p = _softmax_pixel(logits, n, r, c)
                total += float(weights[y]) * -math.log(p[y])
    return total / (N * H * W)


def focal_oracle(logits, labels, gamma, weights) -> float:
    N, C, H, W = np.shape(logits)
    total = 0.0
    for n in range(N):
        for r in range(H):
            for c in range(W):
                y = int(labels[n][r][c])
                p = _softmax_pixel(logits, n, r, c)
                total += float(weights[y]) * (1 - p[y]) ** gamma * -math.log(p[y])
    return total / (N * H * W)


def gdl_oracle(probs, labels) -> float:
    N, C, H, W = np.shape(probs)
    num = den = 0.0
    for k in range(C):
        ref = sum(1 for n in range(N) for r in range(H) for c in range(W) if labels[n][r][c] == k)
        if ref == 0:
            continue
        w = 1.0 / ref**2
        inter = sum(float(probs[n][k][r][c]) for n in range(N) for r in range(H) for c in range(W) if labels[n][r][c] == k)
        psum = sum(float(probs[n][k][r][c]) for n in range(N) for r in range(H) for c in range(W))
        num += w * inter
        den += w * (psum + ref)
    return 1.0 - 2.0 * num / den


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs)


def gan_oracle(d_real, d_fake, form):
    """``(generator_loss, discriminator_loss)``."""
    real = [float(v) for v in np.ravel(d_real)]
    fake = [float(v) for v in np.ravel(d_fake)]
    if form == "log":
        clamp = lambda v: min(max(v, 1e-7), 1 - 1e-7)  # noqa: E731
        d = -_mean(math.log(clamp(v)) for v in real) - _mean(math.log(1 - clamp(v)) for v in fake)
        g = -_mean(math.log(clamp(v)) for v in fake)
        return g, d
    d = _mean((v - 1) ** 2 for v in real) + _mean(v**2 for v in fake)
    g = _mean((v - 1) ** 2 for v in fake)
    return g, d


def content_oracle(x_s, rec_s, x_t, rec_t, m) -> float:
    a = [abs(float(r) - float(x)) * (1 + float(k)) for r, x, k in zip(np.ravel(rec_s), np.ravel(x_s), np.ravel(m))]
    b = [abs(float(r) - float(x)) for r, x in zip(np.ravel(rec_t), np.ravel(x_t))]
    return _mean(a) + _mean(b)


def median_frequency_oracle(label_maps, num_classes):
    """Weights by plain counting with exact rationals and a hand-rolled median."""
    class_px = Counter()
    image_px = Counter()
    for lab in label_maps:
        flat = np.asarray(lab).ravel().tolist()
        counts = Counter(flat)
        for k, v in counts.items():
            class_px[k] += v
            image_px[k] += len(flat)
    freqs = {k: Fraction(class_px[k], image_px[k]) for k in class_px}
    s = sorted(freqs.values())
    n = len(s)
    med = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    return {k: med / f for k, f in freqs.items()}


# ---------------------------------------------------------------- gradients


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64) by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


# ---------------------------------------------------------------- dataset statistics


def stats_oracle(cases):
    """Naive recount: ``{class_id: (image_count, instance_count, median_rel_area_pct)}``."""
    images, inst, areas = {}, Counter(), {}
    for volume, ann in cases:
        rows, cols = ann.grid
        for rec in ann.instances:
            images.setdefault(rec.class_id, set()).add((volume.case_id, rec.slice_index))
            inst[rec.class_id] += 1
            areas.setdefault(rec.class_id, []).append(int(np.asarray(rec.mask).sum()) * 100.0 / (rows * cols))
    out = {}
    for cid in range(1, 11):
        if inst[cid] == 0:
            out[cid] = (0, 0, 0.0)
            continue
        s = sorted(areas[cid])
        n = len(s)
        med = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
        out[cid] = (len(images[cid]), inst[cid], med)
    return out
