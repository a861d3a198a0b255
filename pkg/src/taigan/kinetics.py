"""TAC extraction, weighted 1-tissue compartment fitting and K1 <-> MBF conversion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion

from .phantom import ROI_NAMES, DynamicSeries, bin_frames, tissue_tac

log = logging.getLogger(__name__)


@dataclass
class KineticParams:
    K1: float
    k2: float
    mbf: float
    wss: float
    converged: bool = True


@dataclass
class KineticsConfig:
    # Renkin-Crone style extraction constants
    a: float = 0.77
    b: float = 0.63
    eps_frac: float = 0.05
    w_max: float = float("inf")
    grid_n: int = 33
    grid_max: float = 3.0
    max_iter: int = 200
    dt: float = 0.1
    lv_erode: int = 0


# ----------------------------------------------------------------- TACs


def extract_tac(series: DynamicSeries, labels: np.ndarray, roi, erode: int = 0) -> np.ndarray:
    """Per-frame mean activity inside ``roi`` (label value or name in ``ROI_NAMES``).

    ``erode`` shrinks the ROI by that many voxels first (6-connected), to keep
    blood-pool samples clear of PSF spill-in.
    """
    value = ROI_NAMES[roi] if isinstance(roi, str) else int(roi)
    mask = np.asarray(labels) == value
    if erode > 0:
        mask = binary_erosion(mask, iterations=erode)
    if not mask.any():
        raise ValueError(f"extract_tac: ROI {roi!r} is empty" + (f" after {erode} erosions" if erode else ""))
    return series.frames[:, mask].mean(axis=1)


# ----------------------------------------------------------------- model


def _fine_input(ca: np.ndarray, starts: np.ndarray, durations: np.ndarray, dt: float) -> np.ndarray:
    """Fine-grid input function: linear through frame mid-times, anchored at (0, 0)."""
    end = starts[-1] + durations[-1]
    t = np.arange(int(round(end / dt)) + 1) * dt
    return np.interp(t, np.concatenate([[0.0], starts + 0.5 * durations]), np.concatenate([[0.0], ca]))


class OneTissueModel:
    """Frame-averaged 1TCM response for a fixed input function; linear in K1."""

    def __init__(self, ca, starts, durations, dt: float = 0.1):
        self.starts = np.asarray(starts, dtype=np.float64)
        self.durations = np.asarray(durations, dtype=np.float64)
        self.dt = dt
        self.ca_fine = _fine_input(np.asarray(ca, dtype=np.float64), self.starts, self.durations, dt)

    def unit_response(self, k2: float) -> np.ndarray:
        return bin_frames(tissue_tac(self.ca_fine, 1.0, max(k2, 0.0), self.dt), self.dt, self.starts, self.durations)

    def __call__(self, K1: float, k2: float) -> np.ndarray:
        return K1 * self.unit_response(k2)


def fit_weights(ct: np.ndarray, durations: np.ndarray, cfg: KineticsConfig) -> np.ndarray:
    """``duration / max(ct, eps)`` capped at ``w_max``, with ``eps = eps_frac * max|ct|``."""
    scale = np.max(np.abs(ct))
    eps = cfg.eps_frac * scale if scale > 0 else 1.0
    return np.minimum(durations / np.maximum(ct, eps), cfg.w_max)


def fit_1tcm(ca, ct, starts, durations, cfg: KineticsConfig | None = None) -> KineticParams:
    """Weighted least-squares (K1, k2) fit: 33x33 grid search, then Levenberg-Marquardt.

    Refinement stays inside the search box ``[0, grid_max]^2``; a TAC pair whose
    optimum lies outside (e.g. blood activity smeared into the myocardium, where
    K1 and k2 diverge together) ends on the box boundary.

    If LM does not converge within ``cfg.max_iter`` iterations the best grid
    point is returned with ``converged=False``.
    """
    cfg = cfg or KineticsConfig()
    ca = np.asarray(ca, dtype=np.float64)
    ct = np.asarray(ct, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.float64)
    if ca.shape != ct.shape or ca.shape != durations.shape:
        raise ValueError("fit_1tcm: ca, ct and frame timing must have the same length")
    if not np.any(ca):
        raise ValueError("fit_1tcm: input function is identically zero")
    model = OneTissueModel(ca, starts, durations, cfg.dt)
    w = fit_weights(ct, durations, cfg)
    sw = np.sqrt(w)

    grid = np.linspace(0.0, cfg.grid_max, cfg.grid_n)
    best = (np.inf, 0.0, 0.0)
    for k2 in grid:
        h = model.unit_response(k2)
        res = ct[None, :] - grid[:, None] * h[None, :]
        wss = (w[None, :] * res * res).sum(axis=1)
        i = int(np.argmin(wss))
        if wss[i] < best[0]:
            best = (float(wss[i]), float(grid[i]), float(k2))
    wss0, K1, k2 = best

    def residual(p):
        return sw * (ct - p[0] * model.unit_response(p[1]))

    p = np.array([K1, k2])
    r = residual(p)
    cost = float(r @ r)
    lam = 1e-3
    converged = cost == 0.0
    for _ in range(cfg.max_iter):
        if converged:
            break
        hstep = 1e-6 * max(1.0, abs(p[1]))
        h = model.unit_response(p[1])
        dh = (model.unit_response(p[1] + hstep) - model.unit_response(max(p[1] - hstep, 0.0))) / (
            p[1] + hstep - max(p[1] - hstep, 0.0)
        )
        jac = -sw[:, None] * np.stack([h, p[0] * dh], axis=1)
        jtj = jac.T @ jac
        g = jac.T @ r
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-30), -g)
            cand = np.clip(p + step, 0.0, cfg.grid_max)
            rc = residual(cand)
            cc = float(rc @ rc)
            if cc < cost:
                rel = (cost - cc) / max(cost, 1e-300)
                moved = np.max(np.abs(cand - p)) / max(1e-12, np.max(np.abs(p)))
                p, r, cost = cand, rc, cc
                lam = max(lam / 10.0, 1e-12)
                improved = True
                if rel < 1e-12 or moved < 1e-10:
                    converged = True
                break
            lam *= 10.0
        if not improved:
            # no descent direction left: at a (boundary) minimum
            converged = True
    if not converged:
        log.warning("fit_1tcm: LM did not converge in %d iterations; returning grid optimum", cfg.max_iter)
        return KineticParams(K1, k2, k1_to_mbf(K1, cfg.a, cfg.b), wss0, converged=False)
    K1, k2 = float(p[0]), float(p[1])
    return KineticParams(K1, k2, k1_to_mbf(K1, cfg.a, cfg.b), cost)


def fit_series(series: DynamicSeries, labels: np.ndarray, cfg: KineticsConfig | None = None) -> KineticParams:
    """Extract LVBP/myocardium TACs from the images and fit them."""
    cfg = cfg or KineticsConfig()
    ca = extract_tac(series, labels, "lvbp", erode=cfg.lv_erode)
    ct = extract_tac(series, labels, "myo")
    return fit_1tcm(ca, ct, series.frame_start, series.frame_duration, cfg)


# ----------------------------------------------------------------- flow


def mbf_to_k1(mbf: float, a: float = 0.77, b: float = 0.63) -> float:
    """K1 = MBF * (1 - a * exp(-b / MBF))."""
    if mbf < 0:
        raise ValueError("mbf_to_k1: flow must be nonnegative")
    if mbf == 0:
        return 0.0
    return float(mbf * (1.0 - a * np.exp(-b / mbf)))


MBF_BRACKET = (1e-6, 20.0)


def k1_to_mbf(K1: float, a: float = 0.77, b: float = 0.63, tol: float = 1e-9) -> float:
    """Invert :func:`mbf_to_k1` by bisection on ``[1e-6, 20]`` mL/min/g."""
    if K1 < 0:
        raise ValueError("k1_to_mbf: K1 must be nonnegative")
    lo, hi = MBF_BRACKET
    if K1 == 0:
        return 0.0
    if K1 > mbf_to_k1(hi, a, b):
        raise ValueError(f"k1_to_mbf: K1={K1:g} exceeds the attainable {mbf_to_k1(hi, a, b):.4g} at MBF={hi}")
    if K1 <= mbf_to_k1(lo, a, b):
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mbf_to_k1(mid, a, b) < K1:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def percent_difference(value: float, reference: float) -> float:
    if reference == 0:
        raise ValueError("percent_difference: reference is zero")
    return 100.0 * (value - reference) / reference
