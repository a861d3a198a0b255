"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 (early-frame part), 6 and 7 share one desk-scale model trained on
studies 0-15 of the default cohort; studies 16-19 validate conversion and
studies 16-29 carry the motion experiment. Expect about an hour on
one CPU for the whole module (about 45 min of it training).
"""

import csv
import math
import time

import numpy as np
import pytest

from taigan.cli import EVAL_COLUMNS, main
from taigan.experiments import (
    PipelineConfig,
    convert_series,
    conversion_metrics,
    eligible_frames,
    eq_frame,
    gan_converter,
    mean_motion_error,
    median_abs_pct_k1,
    motion_correction_study,
    simulate_cohort,
    train_on_studies,
)
from taigan.kinetics import fit_series, k1_to_mbf, mbf_to_k1
from taigan.model import FiLMParams, GeneratorConfig, TemporalInput, film, init_temporal, temporal_encode
from taigan.motion import BSplineField, motion_error, register, warp
from taigan.phantom import PhantomConfig, simulate_study
from taigan.tensorcore import Tensor, grad_check, ops, reset_tape
from taigan.training import ARMS, adv_loss, mse_loss, normalize_frame

TRAIN_STUDIES = range(0, 16)
VALID_STUDIES = range(16, 20)
MOTION_STUDIES = range(16, 30)


# ---------------------------------------------------------------- 1 autodiff


def _grad_cases(rng):
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    t = Tensor
    w3, w3s, wt = t(r(2, 2, 3, 3, 3) * 0.3), t(r(2, 2, 3, 3, 3) * 0.3), t(r(2, 2, 2, 2, 2) * 0.3)
    b2, w1 = t(r(2)), t(r(2, 2, 3))
    wl, bl = t(r(4, 16)), t(r(4))
    gam, bet = t(r(2)), t(r(2))
    other = t(r(2, 8, 8, 8))
    hsz = 4
    h0, c0 = t(r(hsz) * 0.5), t(r(hsz) * 0.5)
    lstm_w = [t(r(4 * hsz, 8) * 0.3), t(r(4 * hsz, hsz) * 0.3), t(r(4 * hsz) * 0.3)]
    vol = rng.random((8, 8, 8))
    disp = rng.uniform(0.3, 0.7, (8, 8, 8, 3)) * rng.choice([-1.0, 1.0], (8, 8, 8, 3))
    sq = lambda y: ops.mean(ops.square(y))  # noqa: E731
    x8 = (2, 8, 8, 8)
    return {
        "add": (lambda x: sq(ops.add(x, other)), x8),
        "sub": (lambda x: sq(ops.sub(x, other)), x8),
        "mul": (lambda x: ops.mean(ops.mul(x, other)), x8),
        "scale": (lambda x: sq(ops.scale(x, -1.7)), x8),
        "shift": (lambda x: sq(ops.shift(x, 0.4)), x8),
        "square": (lambda x: ops.mean(ops.square(x)), x8),
        "relu": (lambda x: sq(ops.relu(x)), x8),
        "leaky_relu": (lambda x: sq(ops.leaky_relu(x)), x8),
        "tanh": (lambda x: ops.mean(ops.tanh(x)), x8),
        "sigmoid": (lambda x: sq(ops.sigmoid(x)), x8),
        "clamp": (lambda x: sq(ops.clamp(x, -0.5, 0.5)), x8),
        "log": (lambda x: ops.mean(ops.log(ops.sigmoid(x))), x8),
        "mean": (lambda x: ops.mean(ops.tanh(x)), x8),
        "mean_axis": (lambda x: sq(ops.mean(x, axis=1)), x8),
        "sum": (lambda x: ops.sum(ops.tanh(x)), x8),
        "reshape": (lambda x: ops.mean(ops.mul(ops.reshape(x, (16, 64)), ops.reshape(other, (16, 64)))), x8),
        "flatten": (lambda x: sq(ops.flatten(x)), x8),
        "narrow": (lambda x: sq(ops.narrow(x, 0, 1)), x8),
        "concat": (lambda x: sq(ops.concat([x, ops.scale(x, 2.0)], axis=0)), x8),
        "stack": (lambda x: sq(ops.stack([x, ops.tanh(x)], axis=1)), x8),
        "linear": (lambda x: sq(ops.linear(x, wl, bl)), (16,)),
        "channel_affine": (lambda x: sq(ops.channel_affine(x, gam, bet)), x8),
        "conv3d": (lambda x: sq(ops.conv3d(x, w3, b2, padding=1)), x8),
        "conv3d_stride2": (lambda x: sq(ops.conv3d(x, w3s, stride=2, padding=1)), x8),
        "conv_transpose3d": (lambda x: sq(ops.conv_transpose3d(x, wt, b2)), (2, 4, 4, 4)),
        "conv1d": (lambda x: sq(ops.conv1d(x, w1, b2, padding=1)), (2, 8)),
        "lstm_cell": (
            lambda x: ops.mean(ops.add(*ops.lstm_cell(x, h0, c0, *lstm_w))),
            (8,),
        ),
        "warp3d_volume": (lambda x: sq(ops.warp3d(x, t(disp))), vol),
        "warp3d_displacement": (lambda x: ops.mean(ops.square(ops.warp3d(t(vol), x))), disp),
    }


def test_acceptance_1_autodiff_soundness(report):
    t0 = time.perf_counter()
    cases = _grad_cases(np.random.default_rng(11))
    rng = np.random.default_rng(12)
    errors = {}
    for name, (f, x) in cases.items():
        reset_tape()
        x = rng.standard_normal(x) if isinstance(x, tuple) else x
        # the displacement check steps through mid-cell offsets where trilinear sampling is smooth
        errors[name] = grad_check(f, x, h=1e-3 if name == "warp3d_displacement" else 1e-5)
    reset_tape()
    worst = max(errors, key=errors.get)
    elapsed = time.perf_counter() - t0
    ok = errors[worst] < 1e-4 and elapsed < 60
    report(1, "autodiff soundness", ok, f"{len(errors)} primitives, worst {worst} {errors[worst]:.2e}, {elapsed:.1f} s")
    assert ok, errors


# ---------------------------------------------------------------- 2 FiLM


def test_acceptance_2_film_contract(report):
    rng = np.random.default_rng(2)
    m = Tensor(rng.standard_normal((6, 4, 4, 2)))
    exact = np.array_equal(film(m, FiLMParams(Tensor(np.ones(6)), Tensor(np.zeros(6)))).data, m.data)
    cfg = GeneratorConfig(base_channels=2, levels=2)
    head = init_temporal(cfg, np.random.default_rng(0))
    t = TemporalInput(list(rng.random(27)), list(rng.random(27)), 5, 27)
    p = temporal_encode(t, head)
    identity = np.array_equal(p.gamma.data, np.ones_like(p.gamma.data)) and not p.beta.data.any()
    bottleneck = Tensor(rng.standard_normal((p.gamma.shape[0], 4, 4, 2)))
    modulated = np.array_equal(film(bottleneck, p).data, bottleneck.data)
    ok = exact and identity and modulated
    report(2, "FiLM contract", ok, f"film(M,1,0)==M {exact}, zero-init head gamma=1 beta=0 {identity}, identity modulation {modulated}")
    assert ok


# ---------------------------------------------------------------- 3 losses


def test_acceptance_3_loss_anchors(report):
    adv = adv_loss(0.5, 0.5).item()
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 4, 4)), rng.standard_normal((4, 4, 4))
    base = mse_loss(a, b).item()
    homog = max(abs(mse_loss(c * a, c * b).item() - c * c * base) / (c * c * base) for c in (0.5, 2.0, 3.0, 10.0))
    ok = abs(adv - 2 * math.log(2)) <= 1e-12 and homog <= 1e-12
    report(3, "loss anchors", ok, f"|adv - 2ln2| {abs(adv - 2 * math.log(2)):.1e}, mse homogeneity {homog:.1e}")
    assert ok


# ---------------------------------------------------------------- 4 kinetics


def test_acceptance_4_kinetic_recovery(report):
    study = simulate_study(PhantomConfig(K1=0.5, k2=0.1, psf_sigma=0.0, noise_level=0.0))
    p = fit_series(study.series, study.labels)
    e1, e2 = abs(p.K1 / 0.5 - 1), abs(p.k2 / 0.1 - 1)
    rt = max(abs(k1_to_mbf(mbf_to_k1(m)) - m) for m in np.linspace(0.2, 5.0, 25))
    ok = e1 < 0.01 and e2 < 0.02 and rt < 1e-6
    report(4, "kinetic fit recovery", ok, f"K1 err {100 * e1:.3f}%, k2 err {100 * e2:.3f}%, MBF roundtrip {rt:.1e}")
    assert ok


# ---------------------------------------------------------------- shared desk model


@pytest.fixture(scope="module")
def desk():
    cfg = PipelineConfig()
    studies = simulate_cohort(cfg.phantom, max(MOTION_STUDIES) + 1, cfg.seed)
    result = train_on_studies([studies[i] for i in TRAIN_STUDIES], cfg.train, cfg.model, cfg.disc)
    return cfg, studies, result


@pytest.fixture(scope="module")
def motion_results(desk):
    cfg, studies, result = desk
    conv = {"taigan": gan_converter(result.gen_params, result.gen_cfg)}
    return [motion_correction_study(studies[i], conv, cfg, seed=cfg.seed) for i in MOTION_STUDIES]


# ---------------------------------------------------------------- 5 registration


def test_acceptance_5_registration_oracle(motion_results, report):
    s = simulate_study(PhantomConfig.small())
    v, labels = normalize_frame(s.series.frames[-1]), s.labels
    shift = np.array([-2.0, 0.0, 0.0])
    fixed = warp(v, np.broadcast_to(shift, (*v.shape, 3)))
    f = register(v, fixed)
    recovered = np.linalg.norm(f.dense(v.shape)[labels > 0].mean(axis=0) - shift)
    truth = BSplineField(np.broadcast_to(shift, f.coeffs.shape).copy())
    reduction = 1 - motion_error(f, truth) / motion_error(BSplineField.zeros(v.shape), truth)
    early_conv = mean_motion_error(motion_results, "taigan_mc", "pre-EQ")
    early_orig = mean_motion_error(motion_results, "mc", "pre-EQ")
    ok = recovered < 0.5 and reduction >= 0.5 and early_conv <= early_orig
    report(
        5,
        "registration oracle",
        ok,
        f"translation residual {recovered:.3f} vox, error reduction {100 * reduction:.0f}%, "
        f"pre-EQ motion error converted {early_conv:.3f} mm vs original {early_orig:.3f} mm",
    )
    assert ok


# ---------------------------------------------------------------- 6 training trend


def test_acceptance_6_training_trend(desk, report):
    cfg, studies, result = desk
    gen, early = [], []
    for i in VALID_STUDIES:
        st = studies[i]
        eq = eq_frame(st.series, st.labels)
        frames = [f for f in eligible_frames(st.series, st.labels) if f < eq]
        conv = conversion_metrics(st, convert_series(st.series, st.labels, result.gen_params, result.gen_cfg, frames))
        raw = conversion_metrics(st, {f: normalize_frame(st.series.frames[f]) for f in frames})
        gen += [conv[f]["SSIM"] for f in frames]
        early += [raw[f]["SSIM"] for f in frames]
    g, e = float(np.mean(gen)), float(np.mean(early))
    ok = g > e
    report(6, "training trend", ok, f"pre-EQ SSIM generated {g:.3f} vs early frame {e:.3f} over {len(gen)} frames")
    assert ok


# ---------------------------------------------------------------- 7 quantification trend


def test_acceptance_7_quantification_trend(motion_results, report):
    arms = ("no_mc", "mc", "taigan_mc")
    med = {a: median_abs_pct_k1(motion_results, a) for a in arms}
    ok = len(motion_results) >= 10 and med["taigan_mc"] < med["no_mc"]
    detail = ", ".join(f"{a} {med[a]:.2f}%" for a in arms)
    report(7, "quantification trend", ok, f"median |%dK1| over {len(motion_results)} studies: {detail}")
    assert ok


# ---------------------------------------------------------------- 8 ablation harness, 9 determinism

TINY = """
seed = 5
phantom.noise_level = 20
train.epochs = 1
train.samples_per_epoch = 2
train.patch = 16, 16, 8
train.adv_weight = 0.1
model.levels = 2
model.base_channels = 4
model.lstm_hidden = 8
disc.base_channels = 4
motion.magnitude = 3
motion.levels = 2
motion.iterations = 4
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_acceptance_8_ablation_harness(tmp_path, report):
    (tmp_path / "base.cfg").write_text(TINY)
    assert main(["simulate", "--out", str(tmp_path / "data"), "--n", "2", "--config", str(tmp_path / "base.cfg")]) == 0
    study = tmp_path / "data" / "study_001"
    preds = []
    for arm, (adv, mse, mask, film_on) in ARMS.items():
        flags = f"train.use_adv = {adv}\ntrain.use_mse = {mse}\ntrain.use_mask = {mask}\ntrain.use_film = {film_on}\n"
        cfg = tmp_path / f"{arm}.cfg"
        cfg.write_text(TINY + flags)
        ckpt = tmp_path / arm / "gan.tgw"
        assert main(["train", "--data", str(tmp_path / "data"), "--out", str(ckpt), "--config", str(cfg)]) == 0
        assert main(["convert", "--ckpt", str(ckpt), "--study", str(study), "--out", str(tmp_path / arm / "conv"),
                     "--config", str(cfg)]) == 0
        preds += ["--pred", f"{arm}={tmp_path / arm / 'conv'}"]
    out = tmp_path / "ablation.csv"
    assert main(["evaluate", *preds, "--truth", str(study), "--no-baseline", "--out", str(out),
                 "--config", str(tmp_path / "base.cfg")]) == 0
    rows = _rows(out)
    header = list(rows[0])
    by_arm = {a: [r["stratum"] for r in rows if r["method"] == a] for a in ARMS}
    strata = by_arm["full"]
    ok = (
        header == list(EVAL_COLUMNS)
        and all(s == strata for s in by_arm.values())
        and len(rows) == len(ARMS) * len(strata)
        and all(math.isfinite(float(r["SSIM"])) for r in rows)
    )
    report(8, "ablation harness", ok, f"{len(ARMS)} arms x {len(strata)} strata, columns {','.join(header[:4])},...")
    assert ok


def test_acceptance_9_determinism(tmp_path, report):
    (tmp_path / "tiny.cfg").write_text(TINY)

    def stages(root):
        d, s = root / "data", root / "data" / "study_000"
        return [
            ("simulate", "--out", str(d), "--n", "2"),
            ("train", "--data", str(d), "--out", str(root / "m" / "gan.tgw")),
            ("convert", "--ckpt", str(root / "m" / "gan.tgw"), "--study", str(s), "--out", str(root / "conv")),
            ("corrupt", "--study", str(s), "--magnitude", "3", "--out", str(root / "corr")),
            ("corrupt", "--study", str(root / "conv"), "--magnitude", "3", "--out", str(root / "corr_conv")),
            ("register", "--moving", str(root / "corr"), "--fixed", str(s), "--out", str(root / "reg")),
            ("register", "--moving", str(root / "corr_conv"), "--fixed", str(s), "--apply", str(root / "corr"),
             "--out", str(root / "reg_conv")),
            ("quantify", "--study", f"no_mc={root / 'corr'}", "--study", f"mc={root / 'reg'}", "--study",
             f"gan_mc={root / 'reg_conv'}", "--reference", str(s), "--out", str(root / "quant.csv")),
            ("evaluate", "--pred", f"gan={root / 'conv'}", "--truth", str(s), "--out", str(root / "img.csv")),
            ("evaluate", "--pred", f"mc={root / 'reg'}", "--pred", f"gan_mc={root / 'reg_conv'}", "--truth",
             str(root / "corr"), "--no-baseline", "--out", str(root / "motion.csv")),
        ]

    for run in ("a", "b"):
        for st in stages(tmp_path / run):
            assert main([*st, "--config", str(tmp_path / "tiny.cfg")]) == 0, st
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differ and len(a) > 0
    report(9, "determinism", ok, f"{len(a)} output files over 10 stages, {len(differ)} differ")
    assert ok, differ
