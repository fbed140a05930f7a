"""Hand-rolled reference implementations shared by the test modules.

Everything here is written longhand (explicit loops, dense convolutions)
so the production code paths are checked against genuinely independent
recomputations.
"""

import numpy as np
import torch


def bilinear_oracle(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear interpolation with edge clamping."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * in_h / out_h - 0.5
            x = (j + 0.5) * in_w / out_w - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            wy, wx = y - y0, x - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, in_h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, in_w - 1)
            out[i, j] = (
                src[y0c, x0c] * (1 - wy) * (1 - wx)
                + src[y0c, x1c] * (1 - wy) * wx
                + src[y1c, x0c] * wy * (1 - wx)
                + src[y1c, x1c] * wy * wx
            )
    return out


def conv3x3_oracle(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Dense bias-free 3x3 convolution with zero padding, NCHW single image."""
    c_out, c_in, _, _ = weight.shape
    _, h, w = x.shape
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((c_out, h, w))
    for co in range(c_out):
        for i in range(h):
            for j in range(w):
                out[co, i, j] = np.sum(weight[co] * padded[:, i : i + 3, j : j + 3])
    return out


def instance_norm_oracle(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-channel spatial normalization of a (C, H, W) array."""
    out = np.zeros_like(x)
    for c in range(x.shape[0]):
        mu = x[c].mean()
        var = x[c].var()
        out[c] = (x[c] - mu) / np.sqrt(var + eps) * weight[c] + bias[c]
    return out


def batch_norm_eval_oracle(x, weight, bias, running_mean, running_var, eps=1e-5):
    out = np.zeros_like(x)
    for c in range(x.shape[0]):
        out[c] = (x[c] - running_mean[c]) / np.sqrt(running_var[c] + eps) * weight[c] + bias[c]
    return out


def silu_oracle(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def reflect_pad_oracle(x: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """Mirror padding about the edge pixel (no edge duplication)."""
    top, bottom, left, right = pad
    return np.pad(x, ((top, bottom), (left, right)), mode="reflect")


def gaussian_kernel_oracle(sigma: float) -> np.ndarray:
    radius = int(np.ceil(4 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * sigma**2))
    return k / k.sum()


def dense_gaussian_smooth_oracle(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Full 2-D dense convolution with the separable product kernel."""
    k1 = gaussian_kernel_oracle(sigma)
    k2 = np.outer(k1, k1)
    r = len(k1) // 2
    padded = reflect_pad_oracle(grid.astype(np.float64), (r, r, r, r))
    h, w = grid.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(padded[i : i + 2 * r + 1, j : j + 2 * r + 1] * k2)
    return out


def dense_mean_filter_oracle(grid: np.ndarray, kernel: int) -> np.ndarray:
    """One round of kernel x kernel stride-1 mean filtering, reflect padded."""
    top = (kernel - 1) // 2
    bottom = kernel - 1 - top
    padded = reflect_pad_oracle(grid.astype(np.float64), (top, bottom, top, bottom))
    h, w = grid.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = padded[i : i + kernel, j : j + kernel].mean()
    return out


def pooled_image_score_oracle(grid: np.ndarray, iterations: int, kernel: int) -> float:
    g = grid.astype(np.float64)
    for _ in range(iterations):
        g = dense_mean_filter_oracle(g, kernel)
    return float(g.max())


def cosine_anomaly_oracle(feat_a: np.ndarray, feat_b: np.ndarray) -> np.ndarray:
    """Per-location 1 - cosine similarity of channel vectors, with zero-vector rules."""
    c, h, w = feat_a.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            va = feat_a[:, i, j].astype(np.float64)
            vb = feat_b[:, i, j].astype(np.float64)
            na, nb = np.linalg.norm(va), np.linalg.norm(vb)
            if na == 0.0 and nb == 0.0:
                sim = 1.0
            elif na == 0.0 or nb == 0.0:
                sim = 0.0
            else:
                sim = float(va @ vb / (na * nb))
            out[i, j] = 1.0 - sim
    return out


# ------------------------------------------------------------ metric oracles


def auroc_pairwise_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def pr_sweep_oracle(scores, labels):
    """Precision/recall at every distinct threshold, descending."""
    n_pos = sum(labels)
    out = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        out.append((t, tp / (tp + fp), tp / n_pos, tp, fp))
    return out


def ap_oracle(scores, labels):
    prev_r = 0.0
    ap = 0.0
    for _, p, r, _, _ in pr_sweep_oracle(scores, labels):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def f1_sweep_oracle(scores, labels):
    n_pos = sum(labels)
    best = (-1.0, None)
    for t, _, _, tp, fp in pr_sweep_oracle(scores, labels):
        fn = n_pos - tp
        f1 = 2 * tp / (2 * tp + fp + fn)
        if f1 > best[0] or (f1 == best[0] and t < best[1]):
            best = (f1, t)
    return best


def flood_fill_regions(mask):
    """Exhaustive 8-connected component labeling by BFS."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    regions = []
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                stack = [(i, j)]
                seen[i, j] = True
                pixels = []
                while stack:
                    a, b = stack.pop()
                    pixels.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            na, nb = a + da, b + db
                            if 0 <= na < h and 0 <= nb < w and mask[na, nb] and not seen[na, nb]:
                                seen[na, nb] = True
                                stack.append((na, nb))
                regions.append(pixels)
    return regions


def pro_oracle(maps, masks, fpr_limit):
    regions = []
    for pm, gm in zip(maps, masks):
        for pixels in flood_fill_regions(gm):
            regions.append((pm, pixels))
    neg_vals = []
    for pm, gm in zip(maps, masks):
        neg_vals.extend(pm[~np.asarray(gm, dtype=bool)].tolist())
    all_vals = sorted({v for pm in maps for v in np.asarray(pm).ravel().tolist()}, reverse=True)
    points = [(0.0, 0.0)]
    for t in all_vals:
        overlaps = []
        for pm, pixels in regions:
            hit = sum(1 for (a, b) in pixels if pm[a, b] >= t)
            overlaps.append(hit / len(pixels))
        fp = sum(1 for v in neg_vals if v >= t)
        points.append((fp / len(neg_vals), sum(overlaps) / len(overlaps)))
    clipped = [points[0]]
    for (f0, o0), (f1, o1) in zip(points, points[1:]):
        if f1 <= fpr_limit:
            clipped.append((f1, o1))
        else:
            if f0 < fpr_limit:
                o_lim = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0)
                clipped.append((fpr_limit, o_lim))
            break
    area = 0.0
    for (f0, o0), (f1, o1) in zip(clipped, clipped[1:]):
        area += (f1 - f0) * (o0 + o1) / 2.0
    return area / fpr_limit
