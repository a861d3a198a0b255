"""Cubic B-spline free-form deformations: simulation, warping, registration, error.

Displacements are in voxels of the full-resolution volume. Control point ``k``
along an axis sits at voxel ``(k - 1) * spacing``, so a volume of extent ``N``
needs ``ceil((N - 1) / spacing) + 3`` control points (one cell of margin on
each side). Warping is backward: ``out(x) = in(x + u(x))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensorcore import Adam, NonFiniteError, Tensor, no_grad, ops, reset_tape

log = logging.getLogger(__name__)


def control_extent(n: int, spacing: float) -> int:
    return int(math.ceil((n - 1) / spacing)) + 3


def _bspline_weights(t: np.ndarray) -> np.ndarray:
    t2, t3 = t * t, t * t * t
    return np.stack([(1 - t) ** 3, 3 * t3 - 6 * t2 + 4, -3 * t3 + 3 * t2 + 3 * t + 1, t3], axis=-1) / 6.0


def basis_matrix(positions: np.ndarray, spacing: float, n_ctrl: int) -> np.ndarray:
    """``(len(positions), n_ctrl)`` cubic B-spline weights at voxel ``positions``."""
    u = np.asarray(positions, dtype=np.float64) / spacing
    i = np.clip(np.floor(u).astype(int), 0, n_ctrl - 4)
    w = _bspline_weights(u - i)
    out = np.zeros((u.size, n_ctrl))
    rows = np.arange(u.size)
    for k in range(4):
        out[rows, i + k] = w[:, k]
    return out


@dataclass
class BSplineField:
    coeffs: np.ndarray  # (n0, n1, n2, 3) control-point displacements in voxels
    spacing: float = 8.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 4 or self.coeffs.shape[-1] != 3:
            raise ValueError(f"BSplineField: coefficients must be (n0, n1, n2, 3), got {self.coeffs.shape}")
        if min(self.coeffs.shape[:3]) < 4:
            raise ValueError("BSplineField: need at least 4 control points per axis")
        if self.spacing <= 0:
            raise ValueError("BSplineField: spacing must be positive")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("BSplineField: displacements must be finite")

    @classmethod
    def zeros(cls, shape: Sequence[int], spacing: float = 8.0) -> "BSplineField":
        return cls(np.zeros((*[control_extent(n, spacing) for n in shape], 3)), spacing)

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.coeffs.shape[:3]

    def check_covers(self, shape: Sequence[int]) -> None:
        need = tuple(control_extent(n, self.spacing) for n in shape)
        if any(g < k for g, k in zip(self.grid, need)):
            raise ValueError(f"BSplineField: control grid {self.grid} does not cover volume {tuple(shape)} (needs {need})")

    def bases(self, shape: Sequence[int]) -> list[np.ndarray]:
        self.check_covers(shape)
        return [basis_matrix(np.arange(n, dtype=np.float64), self.spacing, g) for n, g in zip(shape, self.grid)]

    def dense(self, shape: Sequence[int]) -> np.ndarray:
        """Voxel-wise displacement ``(X, Y, Z, 3)``."""
        b0, b1, b2 = self.bases(shape)
        return np.einsum("xi,yj,zk,ijkc->xyzc", b0, b1, b2, self.coeffs, optimize=True)


def scale_field(f: BSplineField, s: float) -> BSplineField:
    return BSplineField(f.coeffs * s, f.spacing)


def warp(volume: np.ndarray, f: BSplineField | np.ndarray) -> np.ndarray:
    """Resample ``volume`` at ``x + u(x)`` (trilinear, border value outside)."""
    volume = np.asarray(volume, dtype=np.float64)
    disp = f.dense(volume.shape) if isinstance(f, BSplineField) else np.asarray(f, dtype=np.float64)
    with no_grad():
        return ops.warp3d(Tensor(volume), Tensor(disp)).data


def simulate_motion(
    shape: Sequence[int],
    magnitude: float,
    rng: np.random.Generator,
    spacing: float = 8.0,
    smooth_sigma: float = 1.0,
) -> BSplineField:
    """Control displacements ``~U(-magnitude, magnitude)`` smoothed over the control grid."""
    if magnitude <= 0:
        raise ValueError("simulate_motion: magnitude must be positive")
    grid = [control_extent(n, spacing) for n in shape]
    c = rng.uniform(-magnitude, magnitude, (*grid, 3))
    if smooth_sigma > 0:
        c = np.stack([gaussian_filter(c[..., a], smooth_sigma, mode="nearest") for a in range(3)], axis=-1)
    return BSplineField(c, spacing)


def invert_field(f: BSplineField, shape: Sequence[int], iters: int = 30) -> BSplineField:
    """B-spline approximation of the inverse displacement ``v(x) = -u(x + v(x))``.

    Fixed-point iteration on the dense field, then a least-squares projection
    back onto the control grid. Registering a frame corrupted by ``f`` back to
    its clean version ideally recovers this field.
    """
    u = f.dense(shape)
    v = -u
    comps = [Tensor(u[..., a]) for a in range(3)]
    with no_grad():
        for _ in range(iters):
            d = Tensor(v)
            v = -np.stack([ops.warp3d(c, d).data for c in comps], axis=-1)
    pinvs = [np.linalg.pinv(b) for b in f.bases(shape)]
    coeffs = np.einsum("ix,jy,kz,xyzc->ijkc", *pinvs, v, optimize=True)
    return BSplineField(coeffs, f.spacing)


def motion_error(pred, truth, voxel_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Mean absolute control-point displacement difference in mm, averaged over axes and points.

    Accepts :class:`BSplineField` objects or raw ``(..., 3)`` displacement arrays.
    """
    if isinstance(pred, BSplineField) and isinstance(truth, BSplineField):
        if pred.grid != truth.grid or pred.spacing != truth.spacing:
            raise ValueError(
                f"motion_error: control grids differ ({pred.grid}/{pred.spacing} vs {truth.grid}/{truth.spacing})"
            )
    p = pred.coeffs if isinstance(pred, BSplineField) else np.asarray(pred, dtype=np.float64)
    t = truth.coeffs if isinstance(truth, BSplineField) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != 3:
        raise ValueError(f"motion_error: control grids differ ({p.shape} vs {t.shape})")
    diff = np.abs(p - t) * np.asarray(voxel_mm, dtype=np.float64)
    return float(diff.mean())


# ----------------------------------------------------------------- registration


@dataclass
class RegistrationConfig:
    levels: int = 3
    iterations: int = 100
    lr: float = 0.5  # at the coarsest level, halved per finer level
    spacing: float = 8.0
    adam_eps: float = 1e-8
    # Adam's eps is raised to eps_rel * RMS(first gradient) at each level, so
    # control points the images barely constrain (background, margin) stay put
    # instead of taking full-size normalized steps on noise.
    eps_rel: float = 10.0
    coarse_grids: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 0 or self.lr <= 0 or self.spacing <= 0:
            raise ValueError("RegistrationConfig: levels >= 1, iterations >= 0, lr > 0, spacing > 0 required")
        if self.eps_rel < 0 or self.adam_eps <= 0:
            raise ValueError("RegistrationConfig: adam_eps must be positive and eps_rel nonnegative")


def _downsample(v: np.ndarray) -> np.ndarray:
    """2x2x2 block mean (odd extents padded by edge replication)."""
    pad = [(0, n % 2) for n in v.shape]
    v = np.pad(v, pad, mode="edge")
    x, y, z = (n // 2 for n in v.shape)
    return v.reshape(x, 2, y, 2, z, 2).mean(axis=(1, 3, 5))


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def project_field(f: BSplineField, shape: Sequence[int], spacing: float) -> BSplineField:
    """Least-squares refit of ``f``'s dense displacement onto a grid of ``spacing``.

    Exact when the new knots contain the old ones (e.g. halving the spacing).
    """
    target = BSplineField.zeros(shape, spacing)
    pinvs = [np.linalg.pinv(b) for b in target.bases(shape)]
    return BSplineField(np.einsum("ix,jy,kz,xyzc->ijkc", *pinvs, f.dense(shape), optimize=True), spacing)


def register(
    moving: np.ndarray,
    fixed: np.ndarray,
    cfg: RegistrationConfig | None = None,
    trace: list | None = None,
) -> BSplineField:
    """Find ``f`` with ``warp(moving, f) ~ fixed`` by multi-resolution Adam on MSE.

    Level ``l`` (0 = finest) works on images downsampled by ``2**l`` with a
    control spacing of ``cfg.spacing * 2**l`` full-resolution voxels (or
    ``cfg.spacing`` throughout when ``coarse_grids`` is off); each level's field
    is refit onto the next finer grid. If ``trace`` is a list it receives
    ``(level, iteration, loss)`` tuples, plus ``("full", k, loss)`` entries with
    the full-resolution MSE before registration and after each level.
    """
    cfg = cfg or RegistrationConfig()
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape or moving.ndim != 3:
        raise ValueError(f"register: volumes must share a 3-D shape, got {moving.shape} vs {fixed.shape}")
    shape = moving.shape
    pyramid = [(moving, fixed)]
    for _ in range(cfg.levels - 1):
        m, f = pyramid[-1]
        pyramid.append((_downsample(m), _downsample(f)))
    if trace is not None:
        trace.append(("full", 0, _mse(moving, fixed)))

    field = None
    for step, level in enumerate(range(cfg.levels - 1, -1, -1)):
        spacing = cfg.spacing * 2**level if cfg.coarse_grids else cfg.spacing
        field = BSplineField.zeros(shape, spacing) if field is None else project_field(field, shape, spacing)
        coeffs = Tensor(field.coeffs, requires_grad=True)
        mov, fix = pyramid[level]
        f = 2**level
        # coarse voxel c covers full-resolution voxels [f*c, f*c + f - 1]
        bases = [basis_matrix(f * np.arange(n) + (f - 1) / 2.0, spacing, g) for n, g in zip(mov.shape, field.grid)]
        mov_t, fix_t = Tensor(mov), Tensor(fix)
        opt = Adam([coeffs], cfg.lr / 2**step, eps=cfg.adam_eps)
        for it in range(cfg.iterations):
            reset_tape()
            coeffs.grad = None
            disp = ops.scale(ops.separable_expand(coeffs, *bases), 1.0 / f)
            loss = ops.mean(ops.square(ops.sub(ops.warp3d(mov_t, disp), fix_t)))
            val = loss.item()
            if not math.isfinite(val):
                raise NonFiniteError(f"register: loss became {val} at level {level}, iteration {it}")
            if trace is not None:
                trace.append((level, it, val))
            loss.backward()
            if it == 0 and cfg.eps_rel > 0:
                rms = float(np.sqrt(np.mean(coeffs.grad**2)))
                opt.state.eps = max(cfg.adam_eps, cfg.eps_rel * rms)
            opt.step()
        reset_tape()
        field = BSplineField(coeffs.data.copy(), spacing)
        if trace is not None:
            trace.append(("full", step + 1, _mse(warp(moving, field), fixed)))
    return field
