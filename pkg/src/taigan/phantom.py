"""Digital dynamic 82Rb cardiac phantom.

Time is in seconds throughout; K1 is in mL/min/g and k2 in 1/min, and
:func:`tissue_tac` converts internally. Volumes are indexed ``(x, y, z)`` with
voxel centres at integer coordinates. Label values: 0 background,
1 RVBP, 2 LVBP, 3 myocardium.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import lfilter

log = logging.getLogger(__name__)

BACKGROUND, RVBP, LVBP, MYO = 0, 1, 2, 3
ROI_NAMES = {"rvbp": RVBP, "lvbp": LVBP, "myo": MYO}

# 27 frames over 6 min 10 s
DEFAULT_SCHEDULE: tuple[tuple[int, float], ...] = ((14, 5.0), (6, 10.0), (3, 20.0), (3, 30.0), (1, 90.0))


def frame_timing(schedule: Sequence[tuple[int, float]] = DEFAULT_SCHEDULE) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous ``(starts, durations)`` for a ``[(count, seconds), ...]`` schedule."""
    durations = np.concatenate([np.full(n, float(d)) for n, d in schedule])
    starts = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    return starts, durations


@dataclass
class DynamicSeries:
    frames: np.ndarray  # (F, X, Y, Z)
    frame_start: np.ndarray
    frame_duration: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.frame_start = np.asarray(self.frame_start, dtype=np.float64)
        self.frame_duration = np.asarray(self.frame_duration, dtype=np.float64)
        n = self.frames.shape[0]
        if self.frames.ndim != 4:
            raise ValueError(f"DynamicSeries: frames must be (F, X, Y, Z), got {self.frames.shape}")
        if self.frame_start.shape != (n,) or self.frame_duration.shape != (n,):
            raise ValueError("DynamicSeries: timing arrays must have one entry per frame")
        if np.any(self.frame_duration <= 0):
            raise ValueError("DynamicSeries: frame durations must be positive")
        if n > 1 and np.any(np.diff(self.frame_start) <= 0):
            raise ValueError("DynamicSeries: frame starts must be strictly increasing")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    @property
    def mid_times(self) -> np.ndarray:
        return self.frame_start + 0.5 * self.frame_duration

    def with_frames(self, frames: np.ndarray) -> "DynamicSeries":
        return DynamicSeries(frames, self.frame_start.copy(), self.frame_duration.copy())


@dataclass
class PhantomConfig:
    grid: tuple[int, int, int] = (64, 64, 32)
    voxel_mm: tuple[float, float, float] = (3.125, 3.125, 3.270)
    body_radii: tuple[float, float] = (28.0, 23.0)
    lv_center: tuple[float, float, float] = (37.0, 33.0, 16.0)
    lv_radii: tuple[float, float, float] = (5.0, 5.0, 7.0)
    myo_thickness: float = 3.0
    rv_center: tuple[float, float, float] = (22.0, 33.0, 16.0)
    rv_radii: tuple[float, float, float] = (5.0, 6.5, 7.0)
    # blood-pool input function
    A: float = 2000.0
    alpha: float = 2.5
    tau: float = 5.0
    tail_fraction: float = 0.2
    tail_washout_s: float = 600.0
    rv_to_lv_delay: float = 6.0
    dispersion: float = 5.0
    # kinetics
    K1: float = 0.5
    k2: float = 0.1
    background_fraction: float = 0.05
    psf_sigma: float = 1.0
    noise_level: float = 0.0
    dt: float = 0.1
    seed: int = 0
    schedule: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        radii = [*self.lv_radii, *self.rv_radii, *self.body_radii, self.myo_thickness]
        if min(radii) <= 0:
            raise ValueError("PhantomConfig: all radii and the myocardium thickness must be positive")
        if self.alpha <= 0 or self.tau <= 0:
            raise ValueError("PhantomConfig: alpha and tau must be positive")
        if self.dt > 0.1:
            raise ValueError("PhantomConfig: fine time step must be <= 0.1 s")

    @classmethod
    def small(cls, **overrides) -> "PhantomConfig":
        """32^3 preset for desk-scale training runs (coarser voxels, same anatomy)."""
        base = dict(
            grid=(32, 32, 32),
            voxel_mm=(6.25, 6.25, 6.54),
            body_radii=(14.5, 12.0),
            lv_center=(19.0, 17.0, 16.0),
            lv_radii=(3.5, 3.5, 5.0),
            myo_thickness=2.0,
            rv_center=(9.0, 17.0, 16.0),
            rv_radii=(3.0, 4.5, 5.0),
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class StudySample:
    series: DynamicSeries
    labels: np.ndarray
    K1: float
    k2: float
    tacs: dict[str, np.ndarray]  # binned generating curves: rvbp, lvbp, myo
    config: PhantomConfig = field(repr=False, default=None)
    study_id: str = "study"


# ----------------------------------------------------------------- curves


def input_function(t, A: float, alpha: float, tau: float) -> np.ndarray:
    """Gamma variate ``A * t**alpha * exp(-t / tau)`` (zero for t <= 0)."""
    t = np.asarray(t, dtype=np.float64)
    tp = np.clip(t, 0.0, None)
    return np.where(t > 0, A * tp**alpha * np.exp(-tp / tau), 0.0)


def delay_and_disperse(curve: np.ndarray, dt: float, delay: float, dispersion: float) -> np.ndarray:
    """Shift by ``delay`` seconds, then convolve with ``exp(-t/dispersion)/dispersion``."""
    t = np.arange(curve.size) * dt
    shifted = np.interp(t - delay, t, curve, left=0.0)
    if dispersion <= 0:
        return shifted
    a = np.exp(-dt / dispersion)
    # exact discrete convolution with the sampled, unit-area exponential kernel
    return lfilter([1.0 - a], [1.0, -a], shifted)


def blood_curves(cfg: PhantomConfig, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RV and LV blood activity on the fine grid ``t`` (uniform, starting at 0)."""
    rv = input_function(t, cfg.A, cfg.alpha, cfg.tau)
    if cfg.tail_fraction > 0:
        peak = cfg.A * (cfg.alpha * cfg.tau) ** cfg.alpha * np.exp(-cfg.alpha)
        rv = rv + cfg.tail_fraction * peak * (1.0 - np.exp(-t / cfg.tau)) * np.exp(-t / cfg.tail_washout_s)
    lv = delay_and_disperse(rv, cfg.dt, cfg.rv_to_lv_delay, cfg.dispersion)
    return rv, lv


def tissue_tac(ca: np.ndarray, K1: float, k2: float, dt: float) -> np.ndarray:
    """One-tissue compartment response ``K1 * (ca conv exp(-k2 t))`` by trapezoidal accumulation.

    ``ca`` is sampled on a uniform grid of spacing ``dt`` seconds starting at 0;
    rates are per minute.
    """
    if K1 < 0 or k2 < 0:
        raise ValueError(f"tissue_tac: rate constants must be nonnegative (K1={K1}, k2={k2})")
    if dt > 0.1 + 1e-12:
        raise ValueError("tissue_tac: fine grid step must be <= 0.1 s")
    ca = np.asarray(ca, dtype=np.float64)
    k1s, k2s = K1 / 60.0, k2 / 60.0
    a = np.exp(-k2s * dt)
    # C[n] = a*C[n-1] + K1*dt/2*(a*ca[n-1] + ca[n]), the trapezoid rule on each step
    return lfilter([k1s * dt / 2.0, k1s * dt / 2.0 * a], [1.0, -a], ca) - k1s * dt / 2.0 * ca[0] * a ** np.arange(ca.size)


def bin_frames(values: np.ndarray, dt: float, starts: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Time-average fine samples (axis 0, spacing ``dt`` from t=0) over each frame window."""
    values = np.asarray(values, dtype=np.float64)
    end = float(starts[-1] + durations[-1])
    t_last = (values.shape[0] - 1) * dt
    if t_last < end - 1e-9 or starts[0] < 0:
        raise ValueError(f"bin_frames: fine grid covers [0, {t_last:g}] s but frames need [{starts[0]:g}, {end:g}] s")
    stops = starts + durations
    if np.any(starts[1:] > stops[:-1] + 1e-9):
        raise ValueError("bin_frames: gap between consecutive frames")
    t = np.arange(values.shape[0]) * dt
    cum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(0.5 * (values[1:] + values[:-1]) * dt, axis=0)])

    def integral(at):
        # exact integral of the piecewise-linear interpolant from 0 to ``at``
        idx = np.clip(np.searchsorted(t, at, side="right") - 1, 0, len(t) - 2)
        frac = np.clip((at - t[idx]) / dt, 0.0, 1.0).reshape((-1,) + (1,) * (values.ndim - 1))
        v0, v1 = values[idx], values[idx + 1]
        return cum[idx] + dt * (frac * v0 + 0.5 * frac * frac * (v1 - v0))

    return (integral(stops) - integral(starts)) / durations.reshape((-1,) + (1,) * (values.ndim - 1))


# ----------------------------------------------------------------- geometry


def _ellipsoid(grid, center, radii) -> np.ndarray:
    x, y, z = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid], indexing="ij")
    return ((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((z - center[2]) / radii[2]) ** 2


def make_labels(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Label map and body mask. Raises if the RV touches the LV or myocardium."""
    lv = _ellipsoid(cfg.grid, cfg.lv_center, cfg.lv_radii) <= 1.0
    outer = tuple(r + cfg.myo_thickness for r in cfg.lv_radii)
    myo = (_ellipsoid(cfg.grid, cfg.lv_center, outer) <= 1.0) & ~lv
    rv = _ellipsoid(cfg.grid, cfg.rv_center, cfg.rv_radii) <= 1.0
    if np.any(rv & (lv | myo)):
        raise ValueError("phantom: RVBP overlaps LVBP/myocardium; move rv_center or shrink radii")
    if not (lv.any() and myo.any() and rv.any()):
        raise ValueError("phantom: an ROI is empty; check centers and radii against the grid")
    gx, gy, _ = cfg.grid
    x, y = np.meshgrid(np.arange(gx, dtype=np.float64), np.arange(gy, dtype=np.float64), indexing="ij")
    body2d = ((x - (gx - 1) / 2) / cfg.body_radii[0]) ** 2 + ((y - (gy - 1) / 2) / cfg.body_radii[1]) ** 2 <= 1.0
    body = np.repeat(body2d[:, :, None], cfg.grid[2], axis=2) | lv | myo | rv
    labels = np.zeros(cfg.grid, dtype=np.int64)
    labels[rv] = RVBP
    labels[lv] = LVBP
    labels[myo] = MYO
    return labels, body


# ----------------------------------------------------------------- assembly


def simulate_study(cfg: PhantomConfig, study_id: str = "study") -> StudySample:
    """Noisy (or noiseless) dynamic series plus ground truth for one configuration."""
    starts, durations = frame_timing(cfg.schedule)
    end = starts[-1] + durations[-1]
    nt = int(round(end / cfg.dt)) + 1
    t = np.arange(nt) * cfg.dt
    rv, lv = blood_curves(cfg, t)
    myo = tissue_tac(lv, cfg.K1, cfg.k2, cfg.dt)
    curves = {"rvbp": rv, "lvbp": lv, "myo": myo, "bg": cfg.background_fraction * lv}
    binned = {k: bin_frames(v, cfg.dt, starts, durations) for k, v in curves.items()}

    labels, body = make_labels(cfg)
    masks = {
        "rvbp": labels == RVBP,
        "lvbp": labels == LVBP,
        "myo": labels == MYO,
        "bg": body & (labels == BACKGROUND),
    }
    frames = np.zeros((len(starts), *cfg.grid))
    for name, mask in masks.items():
        m = mask.astype(np.float64)
        if cfg.psf_sigma > 0:
            m = gaussian_filter(m, cfg.psf_sigma, mode="constant")
        frames += binned[name][:, None, None, None] * m[None]
    if cfg.noise_level > 0:
        rng = np.random.default_rng(cfg.seed)
        sigma = cfg.noise_level * np.sqrt(np.clip(frames, 0.0, None) / durations[:, None, None, None])
        frames = frames + sigma * rng.standard_normal(frames.shape)
    series = DynamicSeries(frames, starts, durations)
    tacs = {k: binned[k] for k in ("rvbp", "lvbp", "myo")}
    return StudySample(series, labels, cfg.K1, cfg.k2, tacs, cfg, study_id)


def cohort_configs(base: PhantomConfig, n: int, seed: int) -> list[PhantomConfig]:
    """``n`` per-study configs with jittered physiology and geometry.

    Each study draws from its own ``SeedSequence`` child, so study ``i`` is the
    same regardless of ``n``.
    """
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        shift = rng.uniform(-1.0, 1.0, 3)
        scale = rng.uniform(0.9, 1.1)
        cfg = dataclasses.replace(
            base,
            K1=float(rng.uniform(0.35, 0.85)),
            k2=float(rng.uniform(0.06, 0.2)),
            alpha=float(base.alpha * rng.uniform(0.85, 1.15)),
            tau=float(base.tau * rng.uniform(0.85, 1.15)),
            A=float(base.A * rng.uniform(0.7, 1.3)),
            rv_to_lv_delay=float(base.rv_to_lv_delay * rng.uniform(0.8, 1.2)),
            dispersion=float(base.dispersion * rng.uniform(0.8, 1.2)),
            lv_center=tuple(float(c + s) for c, s in zip(base.lv_center, shift)),
            rv_center=tuple(float(c + s) for c, s in zip(base.rv_center, shift)),
            lv_radii=tuple(float(r * scale) for r in base.lv_radii),
            seed=int(rng.integers(2**31)),
        )
        # keep the RV just clear of the (possibly enlarged) myocardium
        gap = cfg.lv_center[0] - cfg.lv_radii[0] - cfg.myo_thickness - cfg.rv_radii[0] - 1.0
        if gap < cfg.rv_center[0]:
            cfg = dataclasses.replace(cfg, rv_center=(gap, *cfg.rv_center[1:]))
        out.append(cfg)
    return out
