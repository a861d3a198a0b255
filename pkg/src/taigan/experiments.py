"""End-to-end pipeline pieces shared by the CLI, the scripts and the acceptance suite.

Motion simulation follows the conversion-before-motion protocol: early frames
are converted while still motion free, then the same simulated field corrupts
both the original and the converted frame. Each moving frame (original or
converted) is registered to the uncorrupted last frame, and the recovered
field is applied to the raw corrupted frame before kinetic fitting.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kinetics import KineticParams, KineticsConfig, fit_series, percent_difference
from .metrics import image_metrics, paired_t_test
from .model import DiscriminatorConfig, GeneratorConfig, Params, TemporalInput
from .motion import (
    BSplineField,
    RegistrationConfig,
    invert_field,
    motion_error,
    register,
    scale_field,
    simulate_motion,
    warp,
)
from .phantom import DynamicSeries, PhantomConfig, StudySample, cohort_configs, simulate_study
from .training import (
    TrainConfig,
    TrainResult,
    build_samples,
    convert_frame,
    crop_sample,
    find_eq_frame,
    normalize_frame,
    select_eligible_frames,
    study_tacs,
    train,
)

log = logging.getLogger(__name__)

STRATA = ("EQ-1", "EQ+1", "pre-EQ", "all")


def worker_count() -> int:
    """Worker cap from ``DYNPET_THREADS`` (default 1)."""
    raw = os.environ.get("DYNPET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DYNPET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DYNPET_THREADS must be a positive integer, got {raw!r}")
    return n


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    """Generator keyed by ``(seed, frame)`` so each frame's draw is independent of the others."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame)]))


def _map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ----------------------------------------------------------------- configuration


@dataclass
class MotionConfig:
    magnitude: float = 6.0  # control displacements ~ U(-m, m) voxels before scaling
    scale: float = 2.0
    spacing: float = 8.0
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if self.magnitude < 0 or self.spacing <= 0 or self.smooth_sigma < 0:
            raise ValueError("MotionConfig: magnitude >= 0, spacing > 0 and smooth_sigma >= 0 required")


def desk_train_config(**overrides) -> TrainConfig:
    """Training settings used for the desk-scale runs (see the README)."""
    base = dict(epochs=30, samples_per_epoch=0, adv_weight=0.1, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PipelineConfig:
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig.small(noise_level=50.0))
    train: TrainConfig = field(default_factory=desk_train_config)
    model: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(base_channels=8))
    disc: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(base_channels=8))
    motion: MotionConfig = field(default_factory=MotionConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    kinetics: KineticsConfig = field(default_factory=KineticsConfig)
    seed: int = 0

    def __post_init__(self):
        if self.motion.spacing != self.registration.spacing:
            raise ValueError(
                f"PipelineConfig: motion spacing {self.motion.spacing} and registration spacing "
                f"{self.registration.spacing} must match (errors compare control grids)"
            )


# ----------------------------------------------------------------- cohort + training


def simulate_cohort(base: PhantomConfig, n: int, seed: int, start: int = 0) -> list[StudySample]:
    """Studies ``start .. n-1`` of the cohort drawn from ``seed``."""
    cfgs = cohort_configs(base, n, seed)
    return [simulate_study(c, f"study_{i:03d}") for i, c in enumerate(cfgs) if i >= start]


def train_on_studies(
    studies: Sequence[StudySample],
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    **kw,
) -> TrainResult:
    samples = [s for st in studies for s in build_samples(st)]
    return train(samples, cfg, gen_cfg, disc_cfg, **kw)


def study_temporal(series: DynamicSeries, labels: np.ndarray, frame: int) -> TemporalInput:
    tacs = study_tacs(StudySample(series, labels, 0.0, 0.0, {}))
    return TemporalInput(tacs["rvbp"].tolist(), tacs["lvbp"].tolist(), frame, series.num_frames)


def eligible_frames(series: DynamicSeries, labels: np.ndarray) -> list[int]:
    tacs = study_tacs(StudySample(series, labels, 0.0, 0.0, {}))
    return select_eligible_frames(tacs["lvbp"])


def eq_frame(series: DynamicSeries, labels: np.ndarray) -> int:
    tacs = study_tacs(StudySample(series, labels, 0.0, 0.0, {}))
    return find_eq_frame(tacs["rvbp"], tacs["lvbp"])


def convert_series(
    series: DynamicSeries,
    labels: np.ndarray,
    gen: Params,
    gen_cfg: GeneratorConfig,
    frames: Sequence[int] | None = None,
) -> dict[int, np.ndarray]:
    """Normalized predicted last frames for each eligible (or listed) early frame."""
    frames = eligible_frames(series, labels) if frames is None else list(frames)
    tacs = study_tacs(StudySample(series, labels, 0.0, 0.0, {}))
    out = {}
    for i in frames:
        t = TemporalInput(tacs["rvbp"].tolist(), tacs["lvbp"].tolist(), i, series.num_frames)
        out[i] = convert_frame(series.frames[i], labels, t, gen, gen_cfg)
    return out


# ----------------------------------------------------------------- image metrics


def stratum_members(frames: Sequence[int], eq: int) -> dict[str, list[int]]:
    frames = list(frames)
    return {
        "EQ-1": [f for f in frames if f == eq - 1],
        "EQ+1": [f for f in frames if f == eq + 1],
        "pre-EQ": [f for f in frames if f < eq],
        "all": frames,
    }


def crop_pair(study: StudySample, frame: int, pred: np.ndarray, patch: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Heart-centred crops of ``pred`` and the normalized last frame (no augmentation)."""
    s = build_samples(study, [frame])[0]
    twin = dataclasses.replace(s, early_frame=np.asarray(pred, dtype=np.float64))
    c = crop_sample(twin, patch)
    return c.early_frame, c.last_frame


def conversion_metrics(
    study: StudySample,
    converted: dict[int, np.ndarray],
    patch: Sequence[int] | None = (32, 32, 16),
) -> dict[int, dict[str, float]]:
    """Per-frame SSIM/MSE/NMAE/PSNR of each volume against the normalized last frame.

    With ``patch`` set the comparison uses the heart-centred crop the network
    was trained on; ``None`` compares whole volumes.
    """
    last = normalize_frame(study.series.frames[-1])
    out = {}
    for i, pred in converted.items():
        if patch is None:
            out[i] = image_metrics(pred, last)
        else:
            out[i] = image_metrics(*crop_pair(study, i, pred, patch))
    return out


def stratified_means(per_frame: dict[int, dict[str, float]], eq: int) -> dict[str, dict[str, float]]:
    """Mean of each metric over each stratum (strata without frames are omitted)."""
    out = {}
    for name, members in stratum_members(sorted(per_frame), eq).items():
        if not members:
            continue
        keys = per_frame[members[0]].keys()
        out[name] = {k: float(np.mean([per_frame[f][k] for f in members])) for k in keys}
        out[name]["n"] = len(members)
    return out


# ----------------------------------------------------------------- motion


@dataclass
class Corruption:
    series: DynamicSeries  # raw frames with motion applied
    frames: list[int]
    applied: dict[int, BSplineField]  # field used to corrupt each frame
    truth: dict[int, BSplineField]  # field that undoes it (registration target)


def frame_motion(shape: Sequence[int], cfg: MotionConfig, seed: int, frame: int) -> BSplineField:
    if cfg.magnitude == 0:
        return BSplineField.zeros(shape, cfg.spacing)
    f = simulate_motion(shape, cfg.magnitude, frame_rng(seed, frame), cfg.spacing, cfg.smooth_sigma)
    return scale_field(f, cfg.scale)


def corrupt_series(series: DynamicSeries, frames: Sequence[int], cfg: MotionConfig, seed: int) -> Corruption:
    """Warp each listed frame by its own simulated field; other frames are untouched."""
    shape = series.shape
    out = series.frames.copy()
    applied, truth = {}, {}
    for i in frames:
        f = frame_motion(shape, cfg, seed, i)
        applied[i] = f
        truth[i] = BSplineField.zeros(shape, cfg.spacing) if cfg.magnitude == 0 else invert_field(f, shape)
        out[i] = warp(series.frames[i], f)
    return Corruption(series.with_frames(out), list(frames), applied, truth)


def register_frames(
    moving: dict[int, np.ndarray],
    fixed: np.ndarray,
    cfg: RegistrationConfig | None = None,
    workers: int | None = None,
) -> dict[int, BSplineField]:
    keys = sorted(moving)
    fields = _map(lambda k: register(moving[k], fixed, cfg), keys, workers)
    return dict(zip(keys, fields))


def apply_fields(series: DynamicSeries, fields: dict[int, BSplineField]) -> DynamicSeries:
    out = series.frames.copy()
    for i, f in fields.items():
        out[i] = warp(series.frames[i], f)
    return series.with_frames(out)


@dataclass
class ArmResult:
    params: KineticParams
    pct_k1: float
    pct_mbf: float
    motion_errors: dict[int, float] = field(default_factory=dict)  # mm, per registered frame


@dataclass
class MotionStudyResult:
    study_id: str
    eq: int
    frames: list[int]
    arms: dict[str, ArmResult]


def _arm(series, labels, ref: KineticParams, kcfg: KineticsConfig, errors=None) -> ArmResult:
    p = fit_series(series, labels, kcfg)
    return ArmResult(p, percent_difference(p.K1, ref.K1), percent_difference(p.mbf, ref.mbf), errors or {})


def motion_correction_study(
    study: StudySample,
    converters: dict[str, Callable[[DynamicSeries, np.ndarray, list[int]], dict[int, np.ndarray]]],
    cfg: PipelineConfig,
    seed: int,
) -> MotionStudyResult:
    """Quantify one study motion free, with motion, and after each correction arm.

    Arms: ``motion_free``, ``no_mc``, ``mc`` (register the original frames) and
    ``<name>_mc`` for every converter, which maps ``(series, labels, frames)`` to
    normalized converted frames of the motion-free series.
    """
    series, labels = study.series, study.labels
    kcfg, voxel = cfg.kinetics, study.config.voxel_mm if study.config else (1.0, 1.0, 1.0)
    frames = eligible_frames(series, labels)
    eq = eq_frame(series, labels)
    fixed = normalize_frame(series.frames[-1])
    corr = corrupt_series(series, frames, cfg.motion, seed)

    ref = fit_series(series, labels, kcfg)
    arms = {"motion_free": ArmResult(ref, 0.0, 0.0), "no_mc": _arm(corr.series, labels, ref, kcfg)}
    movings = {"mc": {i: normalize_frame(corr.series.frames[i]) for i in frames}}
    for name, conv in converters.items():
        converted = conv(series, labels, frames)
        movings[f"{name}_mc"] = {i: normalize_frame(warp(converted[i], corr.applied[i])) for i in frames}
    for arm, moving in movings.items():
        fields = register_frames(moving, fixed, cfg.registration)
        errors = {i: motion_error(fields[i], corr.truth[i], voxel) for i in frames}
        arms[arm] = _arm(apply_fields(corr.series, fields), labels, ref, kcfg, errors)
    return MotionStudyResult(study.study_id, eq, frames, arms)


def gan_converter(gen: Params, gen_cfg: GeneratorConfig):
    def conv(series, labels, frames):
        return convert_series(series, labels, gen, gen_cfg, frames)

    return conv


# ----------------------------------------------------------------- summaries


def quantification_rows(results: Sequence[MotionStudyResult]) -> list[dict]:
    rows = []
    for r in results:
        for arm, a in r.arms.items():
            rows.append(
                dict(
                    study_id=r.study_id,
                    arm=arm,
                    K1=a.params.K1,
                    k2=a.params.k2,
                    MBF=a.params.mbf,
                    wss=a.params.wss,
                    pct_diff_K1=a.pct_k1,
                    pct_diff_MBF=a.pct_mbf,
                )
            )
    return rows


def median_abs_pct_k1(results: Sequence[MotionStudyResult], arm: str) -> float:
    return float(np.median([abs(r.arms[arm].pct_k1) for r in results]))


def mean_motion_error(results: Sequence[MotionStudyResult], arm: str, stratum: str = "all") -> float:
    """Mean control-point motion error (mm) over the stratum's frames, pooled over studies."""
    vals = []
    for r in results:
        members = stratum_members(r.frames, r.eq)[stratum]
        vals += [r.arms[arm].motion_errors[f] for f in members]
    return float(np.mean(vals)) if vals else float("nan")


def compare_arms(per_study_a: Sequence[float], per_study_b: Sequence[float]) -> tuple[float, float]:
    """Paired two-tailed t-test across studies."""
    return paired_t_test(per_study_a, per_study_b)
