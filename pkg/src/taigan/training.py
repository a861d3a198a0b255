"""Frame selection, augmentation, losses and the adversarial training loop."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.ndimage import shift as nd_shift

from .kinetics import extract_tac
from .model import (
    DiscriminatorConfig,
    GeneratorConfig,
    Params,
    TemporalInput,
    config_to_meta,
    discriminator_forward,
    encode_anatomy,
    generator_forward,
    init_discriminator,
    init_generator,
)
from .phantom import LVBP, MYO, StudySample
from .tensorcore import Adam, NonFiniteError, ShapeError, Tensor, no_grad, ops, reset_tape, save_weights

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

# ablation arms: (use_adv, use_mse, use_mask, use_film)
ARMS: dict[str, tuple[bool, bool, bool, bool]] = {
    "vanilla": (True, False, False, False),
    "mse": (True, True, False, False),
    "mse_mask": (True, True, True, False),
    "mse_film": (True, True, False, True),
    "full": (True, True, True, True),
}


class NormalizationWarning(UserWarning):
    """Raised (as a warning) when a constant volume cannot be rescaled."""


@dataclass
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 5e-5
    epochs: int = 30
    patch: tuple[int, int, int] = (32, 32, 16)
    rot_xy_deg: float = 45.0
    trans_vox: int = 5
    mask_jitter_vox: int = 3
    crop_jitter_vox: int = 4
    use_adv: bool = True
    use_mse: bool = True
    use_mask: bool = True
    use_film: bool = True
    adv_weight: float = 1.0  # multiplies the generator's adversarial term
    seed: int = 0
    samples_per_epoch: int = 0  # 0 = every sample once per epoch
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("TrainConfig: learning rates must be positive")
        if self.adv_weight < 0:
            raise ValueError("TrainConfig: adv_weight must be nonnegative")
        if not (self.use_adv or self.use_mse):
            raise ValueError("TrainConfig: at least one of use_adv / use_mse must be on")
        self.patch = tuple(int(p) for p in self.patch)

    @classmethod
    def arm(cls, name: str, **overrides) -> "TrainConfig":
        if name not in ARMS:
            raise ValueError(f"unknown ablation arm {name!r}; choose from {sorted(ARMS)}")
        adv, mse, mask, film = ARMS[name]
        return cls(use_adv=adv, use_mse=mse, use_mask=mask, use_film=film, **overrides)


@dataclass
class TrainingSample:
    early_frame: np.ndarray  # normalized, (X, Y, Z)
    last_frame: np.ndarray
    label_map: np.ndarray
    temporal: TemporalInput
    study_id: str
    frame_index: int

    def __post_init__(self):
        if not (self.early_frame.shape == self.last_frame.shape == self.label_map.shape):
            raise ShapeError(
                f"TrainingSample: shapes differ {self.early_frame.shape}/{self.last_frame.shape}/{self.label_map.shape}"
            )


# ----------------------------------------------------------------- frames


def normalize_frame(v) -> np.ndarray:
    """Rescale to [-1, 1] by min/max. Constant input gives zeros and a warning."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("normalize_frame: volume contains NaN or infinite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        warnings.warn("normalize_frame: constant volume mapped to zeros", NormalizationWarning, stacklevel=2)
        return np.zeros_like(v)
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def select_eligible_frames(lvbp_tac) -> list[int]:
    """Frames (last excluded) whose LVBP activity exceeds 10% of the TAC maximum."""
    lv = np.asarray(lvbp_tac, dtype=np.float64)
    if lv.size and lv.min() < 0:
        raise ValueError("select_eligible_frames: TAC must be nonnegative")
    if lv.size == 0 or lv.max() == 0:
        return []
    thr = 0.1 * lv.max()
    return [i for i in range(lv.size - 1) if lv[i] > thr]


def find_eq_frame(rvbp_tac, lvbp_tac) -> int:
    """First frame with LVBP activity >= RVBP activity."""
    rv = np.asarray(rvbp_tac, dtype=np.float64)
    lv = np.asarray(lvbp_tac, dtype=np.float64)
    if rv.shape != lv.shape:
        raise ValueError("find_eq_frame: TACs must have equal length")
    hit = np.flatnonzero(lv >= rv)
    if hit.size == 0:
        raise ValueError("no EQ frame: LVBP activity never reaches RVBP activity")
    return int(hit[0])


def study_tacs(study: StudySample) -> dict[str, np.ndarray]:
    """Image-derived RVBP/LVBP/myocardium TACs, clipped at zero (noise can dip below)."""
    return {k: np.clip(extract_tac(study.series, study.labels, k), 0.0, None) for k in ("rvbp", "lvbp", "myo")}


def build_samples(study: StudySample, frames: Sequence[int] | None = None) -> list[TrainingSample]:
    """One :class:`TrainingSample` per eligible early frame (or per index in ``frames``)."""
    tacs = study_tacs(study)
    n = study.series.num_frames
    idx = select_eligible_frames(tacs["lvbp"]) if frames is None else list(frames)
    last = normalize_frame(study.series.frames[-1])
    out = []
    for i in idx:
        t = TemporalInput(tacs["rvbp"].tolist(), tacs["lvbp"].tolist(), i, n)
        out.append(TrainingSample(normalize_frame(study.series.frames[i]), last, study.labels, t, study.study_id, i))
    return out


# ----------------------------------------------------------------- augmentation


def inferior_wall_center(labels: np.ndarray) -> np.ndarray:
    """Centroid of the myocardium voxels below (-y of) the LV cavity centroid."""
    lv = np.argwhere(labels == LVBP)
    myo = np.argwhere(labels == MYO)
    if lv.size == 0 or myo.size == 0:
        raise ValueError("inferior_wall_center: label map lacks LVBP or myocardium")
    below = myo[myo[:, 1] < lv[:, 1].mean()]
    pts = below if below.size else myo
    return pts.mean(axis=0)


def jitter_mask(labels: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    """Shift the label map by an integer voxel offset (edge values replicated)."""
    return nd_shift(labels, tuple(int(o) for o in offset), order=0, mode="nearest").astype(labels.dtype)


def _patch_coords(shape, patch, center, theta: float, translation) -> np.ndarray:
    """Source coordinates of every patch voxel, ``(3, *patch)``."""
    patch = np.asarray(patch)
    corner = np.round(np.asarray(center)).astype(int) - patch // 2 + np.asarray(translation, dtype=int)
    corner = np.clip(corner, 0, np.asarray(shape) - patch)
    grids = np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch], indexing="ij")
    c = (patch - 1) / 2.0
    dx, dy = grids[0] - c[0], grids[1] - c[1]
    cos, sin = math.cos(theta), math.sin(theta)
    x = cos * dx - sin * dy + c[0] + corner[0]
    y = sin * dx + cos * dy + c[1] + corner[1]
    z = grids[2] + corner[2]
    return np.stack([x, y, z])


def crop_sample(
    sample: TrainingSample,
    patch: Sequence[int],
    center=None,
    theta: float = 0.0,
    translation=(0, 0, 0),
    mask_offset=(0, 0, 0),
) -> TrainingSample:
    """Apply one explicit geometric transform to a sample (frames trilinear, labels nearest)."""
    shape = sample.early_frame.shape
    if any(p > n for p, n in zip(patch, shape)):
        raise ShapeError(f"crop: patch {tuple(patch)} larger than volume {shape}")
    if center is None:
        center = inferior_wall_center(sample.label_map)
    coords = _patch_coords(shape, patch, center, theta, translation)
    early = map_coordinates(sample.early_frame, coords, order=1, mode="nearest")
    last = map_coordinates(sample.last_frame, coords, order=1, mode="nearest")
    labels = map_coordinates(sample.label_map, coords, order=0, mode="nearest").astype(sample.label_map.dtype)
    if any(mask_offset):
        labels = jitter_mask(labels, mask_offset)
    return replace(sample, early_frame=early, last_frame=last, label_map=labels)


def augment(sample: TrainingSample, cfg: TrainConfig, rng: np.random.Generator) -> TrainingSample:
    """Random crop near the inferior wall, xy rotation, translation, then label jitter."""
    j = cfg.crop_jitter_vox
    center = inferior_wall_center(sample.label_map) + rng.uniform(-j, j, 3)
    theta = math.radians(rng.uniform(-cfg.rot_xy_deg, cfg.rot_xy_deg))
    translation = rng.integers(-cfg.trans_vox, cfg.trans_vox + 1, 3)
    offset = rng.integers(-cfg.mask_jitter_vox, cfg.mask_jitter_vox + 1, 3)
    return crop_sample(sample, cfg.patch, center, theta, translation, offset)


# ----------------------------------------------------------------- losses


def _prob(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if np.any(t.data < 0) or np.any(t.data > 1) or not t.is_finite():
        raise ValueError("adv_loss: probabilities must lie in [0, 1]")
    return ops.clamp(t, PROB_EPS, 1.0 - PROB_EPS)


def adv_loss(d_real, d_fake) -> Tensor:
    """``-ln D(real) - ln(1 - D(fake))`` with probabilities clamped to [1e-7, 1 - 1e-7]."""
    real, fake = _prob(d_real), _prob(d_fake)
    return ops.sum(ops.scale(ops.add(ops.log(real), ops.log(1.0 - fake)), -1.0))


def generator_adv_loss(d_fake) -> Tensor:
    """Non-saturating generator term ``-ln D(G(x))``."""
    return ops.sum(ops.scale(ops.log(_prob(d_fake)), -1.0))


def mse_loss(pred, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    return ops.mean(ops.square(ops.sub(pred, target)))


def generator_objective(d_fake, pred, target, cfg: TrainConfig) -> tuple[Tensor, float, float]:
    """Generator loss and its (adv, mse) parts as floats; disabled parts are not added.

    The adversarial part enters as ``adv_weight * adv`` (a plain sum at the default 1).
    """
    adv = generator_adv_loss(d_fake) if cfg.use_adv else None
    mse = mse_loss(pred, target)
    weighted = adv if adv is None or cfg.adv_weight == 1.0 else ops.scale(adv, cfg.adv_weight)
    terms = [t for t, on in ((weighted, cfg.use_adv), (mse, cfg.use_mse)) if on]
    total = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
    return total, (adv.item() if adv is not None else 0.0), mse.item()


# ----------------------------------------------------------------- loop


@dataclass
class EpochLosses:
    epoch: int
    d_loss: float
    g_adv: float
    g_mse: float


@dataclass
class TrainResult:
    gen_params: Params
    disc_params: Params
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    history: list[EpochLosses] = field(default_factory=list)
    step_d_loss: list[float] = field(default_factory=list)
    step_g_mse: list[float] = field(default_factory=list)

    def weights(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.gen_params.items()}
        out.update({k: v.data for k, v in self.disc_params.items()})
        out.update(config_to_meta("gen", self.gen_cfg))
        out.update(config_to_meta("disc", self.disc_cfg))
        return out


def _inputs(s: TrainingSample) -> tuple[Tensor, Tensor, Tensor]:
    frame = Tensor(s.early_frame[None])
    anatomy = Tensor(encode_anatomy(s.label_map)[None])
    target = Tensor(s.last_frame[None])
    return frame, anatomy, target


def _prob_of(logit: Tensor) -> Tensor:
    return ops.sigmoid(logit)


def write_history(path: str | Path, history: Sequence[EpochLosses]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "d_loss", "g_adv", "g_mse"])
        for h in history:
            w.writerow([h.epoch, repr(h.d_loss), repr(h.g_adv), repr(h.g_mse)])


def _check(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"train: {what} became {value} at epoch {epoch}, step {step}; lower the learning rates")


def train(
    dataset: Sequence[TrainingSample],
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig | None = None,
    disc_cfg: DiscriminatorConfig | None = None,
    checkpoint: str | Path | None = None,
    history_csv: str | Path | None = None,
) -> TrainResult:
    """Alternating D/G updates with batch size 1.

    D minimizes ``-ln D(real) - ln(1 - D(G(x)))``; G minimizes the enabled
    subset of ``-ln D(G(x))`` and the voxel MSE. When ``use_adv`` is off the
    discriminator is not updated and ``d_loss``/``g_adv`` are logged as 0.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    gen_cfg = replace(gen_cfg or GeneratorConfig(), use_mask=cfg.use_mask, use_film=cfg.use_film)
    disc_cfg = disc_cfg or DiscriminatorConfig()
    div = 2**gen_cfg.levels
    if any(p % div for p in cfg.patch):
        raise ValueError(f"TrainConfig: patch {cfg.patch} not divisible by 2**levels = {div}")

    ss = np.random.SeedSequence(cfg.seed)
    g_seed, d_seed, data_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    gen = init_generator(gen_cfg, seed=g_seed)
    disc = init_discriminator(disc_cfg, cfg.patch, seed=d_seed)
    opt_g = Adam(list(gen.values()), cfg.lr_g)
    opt_d = Adam(list(disc.values()), cfg.lr_d)
    rng = np.random.default_rng(data_seed)
    result = TrainResult(gen, disc, gen_cfg, disc_cfg)
    n_per_epoch = cfg.samples_per_epoch or len(dataset)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        if n_per_epoch > len(dataset):
            order = np.concatenate([order, rng.integers(0, len(dataset), n_per_epoch - len(dataset))])
        sums = np.zeros(3)
        for step, k in enumerate(order[:n_per_epoch]):
            s = augment(dataset[int(k)], cfg, rng)
            frame, anatomy, target = _inputs(s)
            reset_tape()
            opt_g.zero_grad()
            opt_d.zero_grad()
            fake = generator_forward(frame, anatomy, s.temporal, gen, gen_cfg)
            if not fake.is_finite():
                raise NonFiniteError(f"train: generator output is not finite at epoch {epoch}, step {step}")

            d_val = 0.0
            if cfg.use_adv:
                d_loss = adv_loss(
                    _prob_of(discriminator_forward(target, disc, disc_cfg)),
                    _prob_of(discriminator_forward(fake.detach(), disc, disc_cfg)),
                )
                d_val = d_loss.item()
                _check(d_val, "discriminator loss", epoch, step)
                d_loss.backward()
                opt_d.step()
                opt_d.zero_grad()

            d_fake = _prob_of(discriminator_forward(fake, disc, disc_cfg)) if cfg.use_adv else None
            g_loss, g_adv, g_mse = generator_objective(d_fake, fake, target, cfg)
            _check(g_loss.item(), "generator loss", epoch, step)
            g_loss.backward()
            opt_g.step()
            reset_tape()

            sums += (d_val, g_adv, g_mse)
            result.step_d_loss.append(d_val)
            result.step_g_mse.append(g_mse)
        avg = sums / n_per_epoch
        result.history.append(EpochLosses(epoch, float(avg[0]), float(avg[1]), float(avg[2])))
        log.info("epoch %d: d=%.4f g_adv=%.4f g_mse=%.5f", epoch, *avg)
        if checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_weights(checkpoint, result.weights())
            if history_csv:
                write_history(history_csv, result.history)
    if checkpoint:
        save_weights(checkpoint, result.weights())
    if history_csv:
        write_history(history_csv, result.history)
    return result


# ----------------------------------------------------------------- inference


def convert_frame(
    early: np.ndarray,
    labels: np.ndarray,
    temporal: TemporalInput,
    gen: Params,
    gen_cfg: GeneratorConfig,
) -> np.ndarray:
    """Predicted normalized last frame for one raw early frame (full volume)."""
    with no_grad():
        out = generator_forward(
            Tensor(normalize_frame(early)[None]), Tensor(encode_anatomy(labels)[None]), temporal, gen, gen_cfg
        )
    reset_tape()
    return out.data[0]
