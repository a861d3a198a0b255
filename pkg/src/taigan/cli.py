"""``taigan`` command line: simulate, train, convert, corrupt, register, quantify, evaluate.

A study directory holds ``frames.dpv`` (dynamic series), ``labels.dpv``,
``tacs.csv`` and ``truth.json``. A data root holds ``study_XXX`` directories.
Every subcommand writes into its ``--out`` target only and is deterministic
given its inputs and ``--seed``.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .config import ConfigError, load_config
from .experiments import (
    STRATA,
    apply_fields,
    corrupt_series,
    eligible_frames,
    eq_frame,
    register_frames,
    simulate_cohort,
    stratified_means,
    train_on_studies,
)
from .kinetics import fit_series, k1_to_mbf, percent_difference
from .metrics import image_metrics, paired_t_test
from .model import GeneratorConfig, TemporalInput, config_from_meta, params_from_weights
from .motion import motion_error
from .phantom import StudySample
from .tensorcore import CheckpointError, load_weights
from .training import ARMS, build_samples, convert_frame, crop_sample, normalize_frame, study_tacs

log = logging.getLogger("taigan")

EVAL_COLUMNS = (
    "method",
    "stratum",
    "n_studies",
    "n_frames",
    "SSIM",
    "MSE",
    "NMAE",
    "PSNR",
    "motion_error_mm",
    "p_SSIM",
    "p_motion_error",
)


class CLIError(Exception):
    pass


# ----------------------------------------------------------------- study directories


def save_study(
    out: Path, study: StudySample, voxel_mm, truth: dict | None = None, tacs: dict | None = None
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    s = study.series
    io.write_dpv(out / "frames.dpv", s, voxel_mm)
    io.write_volume(out / "labels.dpv", study.labels, voxel_mm)
    io.write_tacs(out / "tacs.csv", s.frame_start, s.frame_duration, tacs if tacs is not None else study.tacs)
    if truth is not None:
        io.write_json(out / "truth.json", truth)


def load_study(path: Path) -> tuple[StudySample, tuple[float, float, float], dict]:
    path = Path(path)
    if not path.is_dir():
        raise CLIError(f"{path}: not a study directory")
    series, voxel = io.read_dpv(path / "frames.dpv")
    labels = io.read_labels(path / "labels.dpv")
    if labels.shape != series.shape:
        raise CLIError(f"{path}: labels {labels.shape} do not match frames {series.shape}")
    truth = io.read_json(path / "truth.json") if (path / "truth.json").exists() else {}
    study_id = str(truth.get("study_id", path.name))
    study = StudySample(series, labels, float(truth.get("K1", 0.0)), float(truth.get("k2", 0.0)), {}, None, study_id)
    return study, voxel, truth


def study_dirs(root: Path) -> list[Path]:
    """``root`` itself if it is a study, else its ``study_*`` children (sorted)."""
    root = Path(root)
    if (root / "frames.dpv").exists():
        return [root]
    dirs = sorted(p for p in root.glob("study_*") if (p / "frames.dpv").exists())
    if not dirs:
        raise CLIError(f"{root}: no study directories (expected frames.dpv or study_*/frames.dpv)")
    return dirs


def _copy_meta(src: Path, dst: Path) -> None:
    for name in ("labels.dpv", "truth.json", "tacs.csv"):
        if (src / name).exists():
            shutil.copyfile(src / name, dst / name)


def _frames_of(path: Path, key: str) -> list[int] | None:
    """Frame indices flagged in ``conversion.csv`` or listed in ``motion.csv``."""
    if (path / "conversion.csv").exists() and key == "conversion":
        rows = io.read_csv(path / "conversion.csv", ("frame_index", "converted"))
        return [int(r["frame_index"]) for r in rows if r["converted"] == "1"]
    if (path / "motion.csv").exists():
        rows = io.read_csv(path / "motion.csv", ("frame_index",))
        return [int(r["frame_index"]) for r in rows]
    return None


def _load_generator(ckpt: Path):
    try:
        w = load_weights(ckpt)
    except FileNotFoundError:
        raise CLIError(f"{ckpt}: no such checkpoint") from None
    gen_cfg = config_from_meta("gen", GeneratorConfig, w)
    return params_from_weights(w, ["gen", "temporal"]), gen_cfg


# ----------------------------------------------------------------- subcommands


def cmd_simulate(args, cfg) -> None:
    if args.n < 1:
        raise CLIError("simulate: --n must be >= 1")
    out = Path(args.out)
    for study in simulate_cohort(cfg.phantom, args.n, cfg.seed):
        pc = study.config
        truth = dict(
            study_id=study.study_id,
            K1=study.K1,
            k2=study.k2,
            MBF=k1_to_mbf(study.K1, cfg.kinetics.a, cfg.kinetics.b),
            eq_frame=eq_frame(study.series, study.labels),
            phantom=asdict(pc),
        )
        save_study(out / study.study_id, study, pc.voxel_mm, truth)
    log.info("simulate: wrote %d studies to %s", args.n, out)


def cmd_train(args, cfg) -> None:
    tcfg = cfg.train
    if args.arm:
        adv, mse, mask, film = ARMS[args.arm] if args.arm in ARMS else (None,) * 4
        if adv is None:
            raise CLIError(f"train: unknown arm {args.arm!r} (choose from {', '.join(sorted(ARMS))})")
        tcfg = replace(tcfg, use_adv=adv, use_mse=mse, use_mask=mask, use_film=film)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    tcfg = replace(tcfg, seed=cfg.seed)
    studies = [load_study(d)[0] for d in study_dirs(Path(args.data))]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = Path(args.history) if args.history else out.with_suffix(".loss.csv")
    train_on_studies(studies, tcfg, cfg.model, cfg.disc, checkpoint=out, history_csv=history)
    log.info("train: checkpoint %s, losses %s", out, history)


def cmd_convert(args, cfg) -> None:
    gen, gen_cfg = _load_generator(Path(args.ckpt))
    src = Path(args.study)
    study, voxel, _ = load_study(src)
    series, labels = study.series, study.labels
    frames = eligible_frames(series, labels)
    eq = eq_frame(series, labels)
    tacs = study_tacs(study)
    out_frames = np.stack([normalize_frame(f) for f in series.frames])
    for i in frames:
        t = TemporalInput(tacs["rvbp"].tolist(), tacs["lvbp"].tolist(), i, series.num_frames)
        out_frames[i] = convert_frame(series.frames[i], labels, t, gen, gen_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_dpv(out / "frames.dpv", series.with_frames(out_frames), voxel)
    _copy_meta(src, out)
    rows = [
        dict(
            frame_index=i,
            frame_start=float(series.frame_start[i]),
            duration=float(series.frame_duration[i]),
            converted=int(i in frames),
            eq_offset=i - eq,
        )
        for i in range(series.num_frames)
    ]
    io.write_csv(out / "conversion.csv", ("frame_index", "frame_start", "duration", "converted", "eq_offset"), rows)
    log.info("convert: %d frames converted into %s", len(frames), out)


def cmd_corrupt(args, cfg) -> None:
    mcfg = replace(cfg.motion, magnitude=args.magnitude, scale=args.scale)
    src = Path(args.study)
    study, voxel, _ = load_study(src)
    frames = _frames_of(src, "conversion")
    if frames is None:
        frames = eligible_frames(study.series, study.labels)
    corr = corrupt_series(study.series, frames, mcfg, cfg.seed)
    out = Path(args.out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    io.write_dpv(out / "frames.dpv", corr.series, voxel)
    _copy_meta(src, out)
    if (src / "conversion.csv").exists():
        shutil.copyfile(src / "conversion.csv", out / "conversion.csv")
    for i in frames:
        io.write_tgf(out / "fields" / f"applied_{i:02d}.tgf", corr.applied[i])
        io.write_tgf(out / "fields" / f"truth_{i:02d}.tgf", corr.truth[i])
    rows = [dict(frame_index=i, magnitude=mcfg.magnitude, scale=mcfg.scale) for i in frames]
    io.write_csv(out / "motion.csv", ("frame_index", "magnitude", "scale"), rows)
    log.info("corrupt: %d frames in %s", len(frames), out)


def _fixed_volume(path: Path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        path = path / "frames.dpv"
    series, _ = io.read_dpv(path)
    return normalize_frame(series.frames[-1])


def cmd_register(args, cfg) -> None:
    mov_dir = Path(args.moving)
    moving, voxel = io.read_dpv(mov_dir / "frames.dpv")
    fixed = _fixed_volume(Path(args.fixed))
    if fixed.shape != moving.shape:
        raise CLIError(f"register: fixed volume {fixed.shape} does not match moving frames {moving.shape}")
    frames = _frames_of(mov_dir, "motion")
    if frames is None:
        frames = list(range(moving.num_frames - 1))
    apply_dir = Path(args.apply) if args.apply else mov_dir
    target, _ = io.read_dpv(apply_dir / "frames.dpv")
    if target.frames.shape != moving.frames.shape:
        raise CLIError(f"register: --apply series {target.frames.shape} does not match moving {moving.frames.shape}")
    fields = register_frames({i: normalize_frame(moving.frames[i]) for i in frames}, fixed, cfg.registration)
    out = Path(args.out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    for i, f in fields.items():
        io.write_tgf(out / "fields" / f"pred_{i:02d}.tgf", f)
    io.write_dpv(out / "frames.dpv", apply_fields(target, fields), voxel)
    _copy_meta(apply_dir, out)
    if (mov_dir / "motion.csv").exists():
        shutil.copyfile(mov_dir / "motion.csv", out / "motion.csv")
    log.info("register: %d frames registered into %s", len(frames), out)


def _named(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).name, Path(spec)
    return name, Path(path)


def cmd_quantify(args, cfg) -> None:
    rows = []
    ref_fits = {}
    for arm, root in map(_named, args.study):
        for d in study_dirs(root):
            study, _, truth = load_study(d)
            p = fit_series(study.series, study.labels, cfg.kinetics)
            if args.reference:
                ref = Path(args.reference)
                ref_dir = ref if (ref / "frames.dpv").exists() else ref / d.name
                if ref_dir not in ref_fits:
                    rs, _, _ = load_study(ref_dir)
                    ref_fits[ref_dir] = fit_series(rs.series, rs.labels, cfg.kinetics)
                ref_k1, ref_mbf = ref_fits[ref_dir].K1, ref_fits[ref_dir].mbf
            elif "K1" in truth:
                ref_k1 = float(truth["K1"])
                ref_mbf = k1_to_mbf(ref_k1, cfg.kinetics.a, cfg.kinetics.b)
            else:
                raise CLIError(f"quantify: {d} has no truth.json and no --reference was given")
            rows.append(
                dict(
                    study_id=study.study_id,
                    arm=arm,
                    K1=p.K1,
                    k2=p.k2,
                    MBF=p.mbf,
                    wss=p.wss,
                    pct_diff_K1=percent_difference(p.K1, ref_k1),
                    pct_diff_MBF=percent_difference(p.mbf, ref_mbf),
                )
            )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(args.out, io.QUANT_COLUMNS, rows)
    log.info("quantify: %d rows to %s", len(rows), args.out)


def _conversion_frames(d: Path) -> dict[int, np.ndarray]:
    series, _ = io.read_dpv(d / "frames.dpv")
    frames = _frames_of(d, "conversion")
    if frames is None:
        raise CLIError(f"evaluate: {d} has no conversion.csv")
    return {i: series.frames[i] for i in frames}


def _image_rows(study: StudySample, vols: dict[int, np.ndarray], patch) -> dict[int, dict[str, float]]:
    out = {}
    for i, v in vols.items():
        s = build_samples(study, [i])[0]
        if patch is None:
            out[i] = image_metrics(v, s.last_frame)
        else:
            c = crop_sample(replace(s, early_frame=np.asarray(v, dtype=np.float64)), patch)
            out[i] = image_metrics(c.early_frame, c.last_frame)
    return out


def _motion_rows(pred_dir: Path, truth_dir: Path, voxel) -> dict[int, float]:
    out = {}
    for p in sorted((pred_dir / "fields").glob("pred_*.tgf")):
        i = int(p.stem.split("_")[1])
        t = truth_dir / "fields" / f"truth_{i:02d}.tgf"
        if not t.exists():
            raise CLIError(f"evaluate: {t} missing for predicted field {p}")
        out[i] = motion_error(io.read_tgf(p), io.read_tgf(t), voxel)
    return out


def cmd_evaluate(args, cfg) -> None:
    truth_dirs = study_dirs(Path(args.truth))
    patch = None if args.full_volume else cfg.train.patch
    methods = [_named(s) for s in args.pred]
    # per method -> per study -> stratum -> metric means
    per: dict[str, list[dict]] = {}
    if not args.no_baseline:
        per["no_conversion"] = []
    for name, _ in methods:
        per[name] = []
    for td in truth_dirs:
        study, voxel, _ = load_study(td)
        eq = eq_frame(study.series, study.labels)
        motion_truth = td if (td / "fields").exists() else None
        for name, root in methods:
            d = root / td.name if (root / td.name).exists() else root
            metrics: dict[int, dict[str, float]] = {}
            if (d / "conversion.csv").exists():
                metrics = _image_rows(study, _conversion_frames(d), patch)
            if (d / "fields").exists() and any((d / "fields").glob("pred_*.tgf")):
                if motion_truth is None:
                    raise CLIError(f"evaluate: {d} has predicted fields but {td} has no fields/truth_*.tgf")
                for i, e in _motion_rows(d, motion_truth, voxel).items():
                    metrics.setdefault(i, {})["motion_error_mm"] = e
            if not metrics:
                raise CLIError(f"evaluate: {d} holds neither conversion.csv nor fields/pred_*.tgf")
            per[name].append(stratified_means(metrics, eq))
        if "no_conversion" in per:
            # original normalized frames as the unconverted reference
            vols = {i: normalize_frame(study.series.frames[i]) for i in eligible_frames(study.series, study.labels)}
            per["no_conversion"].append(stratified_means(_image_rows(study, vols, patch), eq))

    rows = []
    order = list(per)
    base = order[0]
    for name in order:
        for stratum in STRATA:
            studies = [s[stratum] for s in per[name] if stratum in s]
            if not studies:
                continue
            row = {c: "" for c in EVAL_COLUMNS}
            row.update(method=name, stratum=stratum, n_studies=len(studies), n_frames=int(sum(s["n"] for s in studies)))
            for key in ("SSIM", "MSE", "NMAE", "PSNR", "motion_error_mm"):
                vals = [s[key] for s in studies if key in s]
                if vals:
                    row[key] = float(np.mean(vals))
            if name != base:
                for key, col in (("SSIM", "p_SSIM"), ("motion_error_mm", "p_motion_error")):
                    pairs = [
                        (a[stratum][key], b[stratum][key])
                        for a, b in zip(per[name], per[base])
                        if stratum in a and stratum in b and key in a[stratum] and key in b[stratum]
                    ]
                    if len(pairs) >= 2:
                        row[col] = paired_t_test(*map(list, zip(*pairs)))[1]
            rows.append(row)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(args.out, EVAL_COLUMNS, rows)
    log.info("evaluate: %d rows to %s", len(rows), args.out)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="taigan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write N phantom studies")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train the frame-conversion GAN")
    s.add_argument("--data", required=True, help="data root or single study directory")
    s.add_argument("--out", required=True, help="checkpoint path (.tgw)")
    s.add_argument("--history", help="loss CSV (default: <out>.loss.csv)")
    s.add_argument("--arm", help=f"ablation arm ({', '.join(sorted(ARMS))})")
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("convert", parents=[common], help="convert eligible early frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--study", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("corrupt", parents=[common], help="apply simulated motion")
    s.add_argument("--study", required=True)
    s.add_argument("--magnitude", type=float, required=True)
    s.add_argument("--scale", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_corrupt)

    s = sub.add_parser("register", parents=[common], help="register frames to a reference")
    s.add_argument("--moving", required=True, help="series directory whose frames are registered")
    s.add_argument("--fixed", required=True, help="reference: DPV file or study directory (last frame)")
    s.add_argument("--apply", help="series the recovered fields are applied to (default: --moving)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("quantify", parents=[common], help="1-tissue fit and percent differences")
    s.add_argument("--study", required=True, action="append", help="[ARM=]DIR, repeatable")
    s.add_argument("--reference", help="motion-free study (or root) used as ground truth")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_quantify)

    s = sub.add_parser("evaluate", parents=[common], help="image metrics and motion errors")
    s.add_argument("--pred", required=True, action="append", help="[NAME=]DIR, repeatable")
    s.add_argument("--truth", required=True, help="study (or root) holding the true frames and fields")
    s.add_argument("--out", required=True)
    s.add_argument("--full-volume", action="store_true", help="compare whole volumes, not heart crops")
    s.add_argument("--no-baseline", action="store_true", help="omit the unconverted-frame rows")
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        args.fn(args, cfg)
    except (CLIError, ConfigError, io.FormatError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"taigan {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
