"""Shared test oracles: brute-force references kept independent of the
library code paths they check."""

import numpy as np


def conv2d_loop(x, kernels, bias):
    """Quadruple-loop valid convolution, the reference for conv2d_forward."""
    c_out, c_in, kh, kw = kernels.shape
    oh = x.shape[1] - kh + 1
    ow = x.shape[2] - kw + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = bias[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += x[c, i + u, j + v] * kernels[o, c, u, v]
                out[o, i, j] = acc
    return out


def median_filter_loop(img, k):
    """Sort-based per-window median with reflect padding and the even-window
    anchor rule: ceil(k/2)-1 pixels above/left of center."""
    above = (k + 1) // 2 - 1
    below = k - 1 - above
    padded = np.pad(img, ((above, below), (above, below)), mode="reflect")
    out = np.empty_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            window = padded[i:i + k, j:j + k].ravel()
            out[i, j] = np.median(np.sort(window))
    return out


def finite_diff(f, x, eps=1e-4):
    """Central finite differences of scalar-valued f at array x."""
    grad = np.zeros_like(x, dtype=float)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, rel_err=1e-3, atol=1e-7):
    """Relative-error comparison used by every gradient check."""
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = denom > atol
    if not mask.any():
        return
    rel = np.abs(analytic - numeric)[mask] / denom[mask]
    assert rel.max() < rel_err, f"max rel err {rel.max():.3e}"


def greedy_match_loop(candidates, centroids, radius):
    """Independent greedy score-ordered matcher.

    candidates: list of (x, y, score); centroids: list of (x, y).
    Returns (tp, fp, fn).
    """
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i][2], candidates[i][1], candidates[i][0]))
    taken = [False] * len(centroids)
    tp = fp = 0
    for i in order:
        cx, cy, _ = candidates[i]
        best = None
        best_d = None
        for j, (gx, gy) in enumerate(centroids):
            if taken[j]:
                continue
            d = ((cx - gx) ** 2 + (cy - gy) ** 2) ** 0.5
            if d <= radius and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is None:
            fp += 1
        else:
            taken[best] = True
            tp += 1
    fn = taken.count(False)
    return tp, fp, fn


def froc_loop(per_image_candidates, per_image_truth, radius):
    """Re-threshold FROC oracle: independent matching at every threshold."""
    scores = sorted({s for cands in per_image_candidates.values()
                     for (_, _, s) in cands}, reverse=True)
    points = []
    n_images = len(per_image_truth)
    total_truth = sum(len(c) for c in per_image_truth.values())
    for theta in scores:
        tp = fp = 0
        for image_id, truth in per_image_truth.items():
            kept = [c for c in per_image_candidates.get(image_id, []) if c[2] >= theta]
            t, f, _ = greedy_match_loop(kept, truth, radius)
            tp += t
            fp += f
        points.append((theta, fp / n_images, tp / total_truth))
    if not scores:
        # no candidates: one point at a threshold above every possible score
        points.append((float("inf"), 0.0, 0.0))
    return points
