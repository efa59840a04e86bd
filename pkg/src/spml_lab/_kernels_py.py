"""Pure-numpy kernel backend.

These are the reference implementations of the hot inner loops: the
four-branch weighted loss (value + analytic gradient with the per-element
weights and the false-negative estimate held constant) and fractional-
coverage rectangle pooling over integral images. The optional compiled
backend in ``_ckern.pyx`` mirrors these bit-for-bit up to libm rounding.

Branch sums use ``math.fsum`` so that the reduction is exactly rounded and
order-independent noise cannot break tight equality tolerances.
"""

import math

import numpy as np

BACKEND_NAME = "pure"


def _branch_values(p, k_hat, mu, sigma, lam1, lam2, q1, q2, q3):
    """Per-element loss, derivative, and weight for all four label cases."""
    bell = np.exp(-((p - mu) ** 2) / (2.0 * sigma * sigma))

    l1 = -np.log(p)
    d1 = -1.0 / p

    one_m_p = 1.0 - p
    l2 = (1.0 - k_hat) * (1.0 - one_m_p**q1) / q1 + k_hat * (1.0 - p**q2) / q2
    d2 = (1.0 - k_hat) * one_m_p ** (q1 - 1.0) - k_hat * p ** (q2 - 1.0)

    l3 = -np.log(one_m_p)
    d3 = 1.0 / one_m_p

    l4 = -(1.0 - q3) * np.log(one_m_p) - q3 * np.log(p)
    d4 = (1.0 - q3) / one_m_p - q3 / p

    v4 = np.clip(1.0 - bell, lam1, lam2)
    return bell, (l1, l2, l3, l4), (d1, d2, d3, d4), v4


def gpr_elements(probs, ann, pseudo, k_hat, mu, sigma, lam1, lam2, q1, q2, q3):
    """Weighted four-branch loss sums and unnormalized gradient w.r.t. logits.

    Dispatch per element: confirmed positive (weight 1, -log p); otherwise by
    pseudo-label 0 / -1 / +1. Weights and k_hat are constants for the
    gradient; the sigmoid jacobian p(1-p) is applied here.

    Returns (branch_sums[4], grad) where grad excludes the 1/(N*C) factor.
    """
    p = probs
    bell, losses, derivs, v4 = _branch_values(p, k_hat, mu, sigma, lam1, lam2, q1, q2, q3)

    pos = ann == 1
    und = ~pos & (pseudo == 0)
    neg = ~pos & (pseudo == -1)
    ppl = ~pos & (pseudo == 1)
    masks = (pos, und, neg, ppl)
    weights = (np.ones_like(p), bell, bell, v4)

    dp = p * (1.0 - p)
    grad = np.zeros_like(p)
    sums = np.zeros(4)
    for b, (mask, w, lv, dv) in enumerate(zip(masks, weights, losses, derivs)):
        wl = w[mask] * lv[mask]
        sums[b] = math.fsum(wl.tolist())
        grad[mask] = w[mask] * dv[mask] * dp[mask]
    return sums, grad


def gr_elements(probs, ann, k_hat, mu, sigma, q1, q2):
    """Two-branch ancestor of :func:`gpr_elements` (no pseudo-labels)."""
    p = probs
    bell, losses, derivs, _ = _branch_values(p, k_hat, mu, sigma, 0.0, 1.0, q1, q2, 1.0)

    pos = ann == 1
    masks = (pos, ~pos)
    weights = (np.ones_like(p), bell)

    dp = p * (1.0 - p)
    grad = np.zeros_like(p)
    sums = np.zeros(2)
    for b, mask in enumerate(masks):
        w, lv, dv = weights[b], losses[b], derivs[b]
        wl = w[mask] * lv[mask]
        sums[b] = math.fsum(wl.tolist())
        grad[mask] = w[mask] * dv[mask] * dp[mask]
    return sums, grad


def pool_rects(integral, rects):
    """Exact fractional-coverage sums of a pixel field over real rectangles.

    ``integral`` has shape (H+1, W+1, C) with integral[y, x, c] equal to the
    sum of evidence over pixel block [0, y) x [0, x). The antiderivative of a
    piecewise-constant field is piecewise bilinear, so evaluating it at real
    coordinates via bilinear interpolation makes border pixels contribute
    exactly their covered fraction. ``rects`` is (R, 4) as [x0, y0, x1, y1]
    in pixel units.
    """
    integral = np.asarray(integral, dtype=np.float64)
    rects = np.asarray(rects, dtype=np.float64)
    h = integral.shape[0] - 1
    w = integral.shape[1] - 1

    def antiderivative(yy, xx):
        j = np.clip(yy.astype(np.int64), 0, h - 1)
        i = np.clip(xx.astype(np.int64), 0, w - 1)
        a = (yy - j)[:, None]
        b = (xx - i)[:, None]
        return (
            (1.0 - a) * (1.0 - b) * integral[j, i]
            + a * (1.0 - b) * integral[j + 1, i]
            + (1.0 - a) * b * integral[j, i + 1]
            + a * b * integral[j + 1, i + 1]
        )

    x0, y0, x1, y1 = rects.T
    sums = (
        antiderivative(y1, x1)
        - antiderivative(y0, x1)
        - antiderivative(y1, x0)
        + antiderivative(y0, x0)
    )
    return np.maximum(sums, 0.0)
