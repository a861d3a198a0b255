"""Image similarity metrics and the paired two-tailed t-test.

Conventions: the second argument is the reference. NMAE and PSNR normalize by
the reference's range (``max - min``), which is 2 for frames already scaled to
[-1, 1]. SSIM uses a uniform 7x7x7 window over valid positions only, biased
(population) local moments, and a fixed dynamic range ``L`` (default 2).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import betainc


def _pair(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _range(b: np.ndarray, name: str) -> float:
    r = float(b.max() - b.min())
    if r == 0:
        raise ValueError(f"{name}: reference volume is constant")
    return r


def mse(a, b) -> float:
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def nmae(a, b) -> float:
    a, b = _pair(a, b, "nmae")
    return float(np.mean(np.abs(a - b)) / _range(b, "nmae"))


def psnr(a, b) -> float:
    a, b = _pair(a, b, "psnr")
    peak = _range(b, "psnr")
    err = float(np.mean((a - b) ** 2))
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def ssim(a, b, data_range: float | None = 2.0, window: int = 7) -> float:
    """Mean SSIM over all fully-contained ``window``^3 neighbourhoods.

    ``data_range=None`` takes the range from the reference ``b``.
    """
    a, b = _pair(a, b, "ssim")
    if any(n < window for n in a.shape):
        raise ValueError(f"ssim: volume {a.shape} smaller than the {window}^{a.ndim} window")
    L = _range(b, "ssim") if data_range is None else float(data_range)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2

    def local(x):
        return uniform_filter(x, size=window, mode="constant")

    mu_a, mu_b = local(a), local(b)
    saa = local(a * a) - mu_a * mu_a
    sbb = local(b * b) - mu_b * mu_b
    sab = local(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    h = window // 2
    valid = tuple(slice(h, n - h) for n in a.shape)
    return float(np.mean((num / den)[valid]))


def student_t_sf2(t: float, df: int) -> float:
    """Two-tailed p-value ``P(|T| >= |t|)`` via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(x, y) -> tuple[float, float]:
    """Paired two-tailed t-test on ``d = x - y``; returns ``(t, p)``.

    Zero-variance differences: ``(0, 1)`` when the mean is zero, else
    ``(+/-inf, 0)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired_t_test: x and y must be 1-D with equal length")
    n = x.size
    if n < 2:
        raise ValueError("paired_t_test: need at least two pairs")
    d = x - y
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        if md == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, md), 0.0
    t = md / (sd / math.sqrt(n))
    return t, student_t_sf2(t, n - 1)


def image_metrics(a, b) -> dict[str, float]:
    return {"SSIM": ssim(a, b), "MSE": mse(a, b), "NMAE": nmae(a, b), "PSNR": psnr(a, b)}
