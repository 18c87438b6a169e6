"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Run with `pytest -v -s tests/test_acceptance.py` to see the
checklist; tolerances are pinned here and nowhere else."""

import subprocess
import sys

import numpy as np
import pytest
import yaml

from noiseopt import cli
from noiseopt import diffengine as de
from noiseopt import (
    diversity,
    features,
    generator,
    noise_init,
    numerics,
    objective,
    optimizer,
    regularizer,
    spectra,
)
from noiseopt.features import FeatureSet, ImageBatch


def _verdict(name: str, ok: bool, detail: str = ""):
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, f"{name} failed: {detail}"


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# 1. DPP / Vendi analytic extremes
# ---------------------------------------------------------------------------


def test_c01_set_metric_extremes():
    ortho = FeatureSet(de.constant(np.eye(4)[:, None, :]), "t", True, 2.0)
    k = diversity.build_kernel(ortho)
    dpp = diversity.dpp_score(k).value
    vendi_o = diversity.vendi_score(k).value

    ident = FeatureSet(
        de.constant(np.repeat(unit_rows(numerics.SeededRng(0).normal((1, 1, 8))), 4, axis=0)),
        "t", True, 2.0,
    )
    vendi_i = diversity.vendi_score(diversity.build_kernel(ident, epsilon=0.0)).value

    ok = (
        abs(dpp - 4 * np.log(2 + 1e-6)) < 1e-4
        and abs(dpp - 2.7726) < 1e-4
        and abs(vendi_o - 4.0) < 1e-6
        and abs(vendi_i - 1.0) < 1e-6
    )
    _verdict(
        "dpp-vendi-extremes", ok,
        f"dpp={dpp:.6f} vendi_orthogonal={vendi_o:.8f} vendi_identical={vendi_i:.8f}",
    )


# ---------------------------------------------------------------------------
# 2. gradient suite: every registered VJP at < 1e-4, h = 1e-5, 20+ instances
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-4
GRAD_H = 1e-5
N_INSTANCES = 20


def _interior_images(seed, b, h, w):
    raw = numerics.SeededRng(seed).normal((b, 3, h, w))
    return 1.0 / (1.0 + np.exp(-raw))


def _grad_family_features(seed):
    kind = seed % 3
    if kind == 0:
        x = _interior_images(seed, 2, 8, 8)
        w = numerics.SeededRng(seed + 5000).normal((2, 4, 48))
        return lambda v: de.sum_(de.mul(features.pixel_patches(ImageBatch(v), 2).values, w)), x
    if kind == 1:
        x = _interior_images(seed, 1, 32, 32)
        w = numerics.SeededRng(seed + 5000).normal((1, 1, 3072))
        return lambda v: de.sum_(de.mul(features.lowres_vec(ImageBatch(v)).values, w)), x
    x = _interior_images(seed, 2, 6, 6)
    w = numerics.SeededRng(seed + 5000).normal((2, 3, 8))
    return lambda v: de.sum_(
        de.mul(features.soft_color_hist(ImageBatch(v), bins=8).values, w)
    ), x


def _grad_family_diversity(seed):
    kind = seed % 3
    f0 = numerics.SeededRng(seed).normal((4, 1, 8))
    if kind == 0:
        def f(z):
            fs = FeatureSet(z, "t", False, 4.0)
            return diversity.pairwise_mean(fs, "l2_normalized").node
        return f, f0
    if kind == 1:
        def f(z):
            fs = FeatureSet(z, "t", False, 2.0)
            return diversity.dpp_score(diversity.build_kernel(fs)).node
        return f, f0
    def f(z):
        fs = FeatureSet(z, "t", False, 2.0)
        return diversity.vendi_score(diversity.build_kernel(fs)).node
    return f, f0


def _grad_family_regularizer(seed):
    d = (4, 16, 64)[seed % 3]
    rng = numerics.SeededRng(seed)
    eps = rng.normal((d,))
    # radii around but never exactly at the stationary sqrt(d-1), where the
    # gradient vanishes identically and relative error is pure FD noise
    factor = (0.7, 0.8, 0.9, 1.05, 1.15, 1.25, 1.4)[seed % 7]
    eps *= factor * np.sqrt(d - 1) / np.linalg.norm(eps)
    return regularizer.log_density, eps


def _grad_family_generators(seed):
    kind = seed % 3
    rng = numerics.SeededRng(seed)
    if kind == 0:
        gen = generator.GeneratorSpec("linear", 6, 6)
        z = rng.normal((2, 3, 6, 6)) * 0.8
    elif kind == 1:
        gen = generator.GeneratorSpec("lowpass_painter", 8, 8)
        z = rng.normal((1, 1, 8, 8)) * 0.8
    else:
        gen = generator.GeneratorSpec("mlp", 6, 6, params={"hidden": 16, "weight_seed": seed})
        z = rng.normal((1, 1, 4, 4)) * 0.8
    w = numerics.SeededRng(seed + 9000).normal((1,))

    def f(zv):
        img = generator.generate(gen, zv)
        r = generator.reward(generator.RewardSpec(), img, "hgrad")
        return de.add(de.sum_(de.mul(img.node, float(w[0]))), de.sum_(r))

    return f, z


def _grad_family_full_loss(seed):
    gen = generator.GeneratorSpec("linear", 4, 4)
    spec = objective.ObjectiveSpec(
        lambda_div=0.7, lambda_min=0.4, lambda_reg=0.05, lambda_q=1.0,
        tau_s=2.0, tau_d=2.0,  # hinges strictly active: no kink within h
        metric="pairwise_cosine", extractor="pixel_patches",
        extractor_params={"grid": 2},
    )
    z = numerics.SeededRng(seed).normal((2, 1, 4, 4))

    def f(zv):
        _, node = objective.evaluate(spec, zv, gen)
        return node

    return f, z


GRAD_FAMILIES = {
    "features": _grad_family_features,
    "diversity": _grad_family_diversity,
    "regularizer": _grad_family_regularizer,
    "toy-generators": _grad_family_generators,
    "full-loss": _grad_family_full_loss,
}


@pytest.mark.parametrize("family", sorted(GRAD_FAMILIES))
def test_c02_gradient_suite(family):
    make = GRAD_FAMILIES[family]
    worst = 0.0
    for seed in range(N_INSTANCES):
        f, point = make(seed)
        err = de.grad_check(f, point, h=GRAD_H)
        worst = max(worst, err)
    _verdict(
        f"gradient-suite[{family}]", worst < GRAD_TOL,
        f"max rel err {worst:.2e} over {N_INSTANCES} instances",
    )


# ---------------------------------------------------------------------------
# 3. chi-radius fixed point
# ---------------------------------------------------------------------------


def test_c03_radius_fixed_point():
    spec = objective.ObjectiveSpec(
        lambda_div=0.0, lambda_min=0.0, lambda_reg=1.0, lambda_q=0.0,
        tau_s=1e9, tau_d=1e9, metric="pairwise_cosine",
        extractor="pixel_patches", extractor_params={"grid": 1},
    )
    worst = 0.0
    for d, shape in [(4, (1, 2, 2)), (16, (1, 4, 4)), (64, (1, 8, 8))]:
        z0 = noise_init.sample_white(numerics.SeededRng(d), 4, *shape)
        gen = generator.GeneratorSpec("linear", shape[1], shape[2])
        cfg = optimizer.OptimizerConfig(learning_rate=1.0, clip_norm=1e9, max_iters=400)
        zf, _ = optimizer.optimize_batch(z0, spec, cfg, gen)
        radii = np.linalg.norm(zf.values.reshape(4, -1), axis=1)
        worst = max(worst, float(np.abs(radii - np.sqrt(d - 1)).max()))
    _verdict("chi-radius-fixed-point", worst < 1e-4, f"max radius error {worst:.2e}")


# ---------------------------------------------------------------------------
# 4. pink-noise spectrum law
# ---------------------------------------------------------------------------


def test_c04_pink_noise_spectrum():
    h = w = 64
    f = noise_init.radial_frequency(h, w).ravel()
    n_bins = 46
    edges = np.linspace(0.0, f.max() * (1 + 1e-12), n_bins + 1)
    idx = np.clip(np.digitize(f, edges) - 1, 0, n_bins - 1)

    # 512 colored sample planes (128 batches of B=1, C=4)
    planes = []
    for seed in range(128):
        white = noise_init.sample_white(numerics.SeededRng(3000 + seed), 1, 4, h, w)
        planes.append(noise_init.colorize(white, noise_init.SpectralProfile(0.2)).values)
    pink = spectra.radial_power_spectrum(np.concatenate(planes, axis=0), n_bins)

    law = np.array([
        np.mean((1.0 + f[idx == b]) ** (-0.4)) if np.any(idx == b) else 0.0
        for b in range(n_bins)
    ])
    mid = (pink.centers >= 2) & (pink.centers <= 16) & (pink.cells > 0)
    i, j = np.where(mid)[0][:-1], np.where(mid)[0][1:]
    ratio_err = np.abs((pink.power[i] / pink.power[j]) / (law[i] / law[j]) - 1.0)
    pink_ok = bool(ratio_err.max() < 0.05)

    white_batch = noise_init.sample_white(numerics.SeededRng(4000), 128, 4, h, w)
    flat = spectra.radial_power_spectrum(white_batch, n_bins)
    dense = flat.cells >= 100
    flat_ok = bool(flat.power[dense].max() / flat.power[dense].min() < 1.1)

    _verdict(
        "pink-noise-spectrum", pink_ok and flat_ok,
        f"max ratio err {ratio_err.max():.3f}, white max/min "
        f"{flat.power[dense].max() / flat.power[dense].min():.3f}",
    )


# ---------------------------------------------------------------------------
# 5. band decomposition conservation
# ---------------------------------------------------------------------------


def test_c05_band_conservation():
    rng = numerics.SeededRng(5000)
    worst = 0.0
    for _ in range(100):
        m = np.abs(rng.normal((16, 16))) + 0.05
        report = spectra.band_decompose(m)
        recon = sum(report.maps[b] for b in spectra.BAND_NAMES)
        worst = max(worst, float((np.abs(recon - m) / np.abs(m)).max()))
    conserve_ok = worst < 1e-6

    checker = ((np.indices((16, 16)).sum(axis=0) % 2) * 2 - 1).astype(float)
    nyq = spectra.band_decompose(checker)
    nyq_ok = nyq.energies[2] / nyq.energies.sum() >= 0.99

    const = spectra.band_decompose(np.full((16, 16), 3.0))
    const_ok = const.energies[0] / const.energies.sum() > 0.999

    _verdict(
        "band-conservation", conserve_ok and nyq_ok and const_ok,
        f"max per-pixel rel err {worst:.2e}, nyquist high share "
        f"{nyq.energies[2] / nyq.energies.sum():.4f}",
    )


# ---------------------------------------------------------------------------
# 6. low-frequency dominance on the lowpass painter
# ---------------------------------------------------------------------------


def _painter_spec(metric="pairwise_cosine"):
    return objective.ObjectiveSpec(
        lambda_div=1.0, lambda_min=0.0, lambda_reg=0.01, lambda_q=0.0,
        tau_s=1e9, tau_d=2.0 if metric.startswith("pairwise") else 10.0,
        metric=metric, extractor="pixel_patches", extractor_params={"grid": 2},
    )


def test_c06_low_frequency_dominance():
    h = w = 16
    gen = generator.GeneratorSpec("lowpass_painter", h, w)
    spec = _painter_spec()
    hits = 0
    for seed in range(25):
        z0 = noise_init.sample_white(numerics.SeededRng(seed), 4, 1, h, w)
        cfg = optimizer.OptimizerConfig(learning_rate=10.0, clip_norm=0.1, max_iters=60)
        _, rec = optimizer.optimize_batch(z0, spec, cfg, gen)
        cum = np.sum([r.band_energies for r in rec.rows], axis=0)
        hits += bool(cum[0] > cum[1] and cum[0] > cum[2])
    _verdict("low-frequency-dominance", hits == 25, f"{hits}/25 seeds")


# ---------------------------------------------------------------------------
# 7. diversity-improvement trend and alpha ordering
# ---------------------------------------------------------------------------


def test_c07_diversity_trend():
    h = w = 16
    gen = generator.GeneratorSpec("lowpass_painter", h, w)
    spec = _painter_spec()
    improved = 0
    ordered = 0
    reconstruction_ok = True
    for seed in range(50):
        finals = {}
        first = None
        for alpha in (0.0, 0.2, 0.5):
            white = noise_init.sample_white(numerics.SeededRng(seed), 4, 1, h, w)
            z0 = (
                noise_init.colorize(white, noise_init.SpectralProfile(alpha))
                if alpha > 0
                else white
            )
            cfg = optimizer.OptimizerConfig(learning_rate=10.0, clip_norm=0.1, max_iters=50)
            _, rec = optimizer.optimize_batch(z0, spec, cfg, gen)
            finals[alpha] = rec.rows[-1].breakdown.v_b
            if alpha == 0.0:
                first = rec.rows[0].breakdown.v_b
            for row in rec.rows:  # criterion 8 piggybacks on these trajectories
                if abs(row.breakdown.total - row.breakdown.reconstruct(spec)) >= 1e-10:
                    reconstruction_ok = False
        improved += bool(finals[0.0] > first)
        ordered += bool(finals[0.5] >= finals[0.2] >= finals[0.0])
    trend_ok = improved >= 0.95 * 50 and ordered >= 0.80 * 50
    _verdict(
        "diversity-trend", trend_ok and reconstruction_ok,
        f"improved {improved}/50, alpha-ordered {ordered}/50",
    )


# ---------------------------------------------------------------------------
# 8. objective bookkeeping and the stopping boundary
# ---------------------------------------------------------------------------


def test_c08_objective_bookkeeping():
    # reconstruction on freshly logged trajectories
    h = w = 8
    gen = generator.GeneratorSpec("linear", h, w)
    spec = objective.ObjectiveSpec(
        lambda_div=0.9, lambda_min=0.2, lambda_reg=0.01, lambda_q=1.0,
        tau_s=0.95, tau_d=0.5, metric="pairwise_cosine",
        extractor="pixel_patches", extractor_params={"grid": 2},
    )
    z0 = noise_init.sample_white(numerics.SeededRng(88), 4, 1, h, w)
    cfg = optimizer.OptimizerConfig(learning_rate=1.0, clip_norm=0.5, max_iters=30)
    _, rec = optimizer.optimize_batch(z0, spec, cfg, gen)
    recon_ok = all(
        abs(r.breakdown.total - r.breakdown.reconstruct(spec)) < 1e-10 for r in rec.rows
    )

    bd = lambda mr, vb: objective.LossBreakdown(0, 0, 0, 0, 0, vb, mr)
    s = objective.ObjectiveSpec(tau_s=0.9, tau_d=0.8)
    boundary_ok = (
        objective.stopping(s, bd(0.9, 0.8))
        and objective.stopping(s, bd(1.0, 1.0))
        and not objective.stopping(s, bd(0.9 - 1e-12, 0.8))
        and not objective.stopping(s, bd(0.9, 0.8 - 1e-12))
        and not objective.stopping(s, bd(0.0, 1.0))
        and not objective.stopping(s, bd(1.0, 0.0))
    )
    _verdict(
        "objective-bookkeeping", recon_ok and boundary_ok,
        f"reconstruction over {len(rec.rows)} iterations, boundary cases exact",
    )


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------


def test_c09_cli_determinism(tmp_path):
    doc = {
        "run": {"seed": 11, "snapshot_every": 4},
        "noise": {"batch": 4, "channels": 1, "height": 16, "width": 16, "alpha": 0.2},
        "generator": {"kind": "lowpass_painter"},
        "objective": {
            "metric": "pairwise_cosine", "extractor": "pixel_patches",
            "extractor_params": {"grid": 2}, "lambda_div": 1.0,
            "lambda_reg": 0.01, "tau_s": 1e9, "tau_d": 2.0,
        },
        "optimizer": {"learning_rate": 10.0, "clip_norm": 0.1, "max_iters": 12},
    }
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    for sub in ("a", "b"):
        proc = subprocess.run(
            [sys.executable, "-m", "noiseopt.cli", "run", str(cfg), "--out", str(tmp_path / sub)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
    names = ["noise_init.dnz", "noise_snapshot_00004.dnz", "noise_final.dnz"]
    same = all(
        (tmp_path / "a" / "run" / n).read_bytes() == (tmp_path / "b" / "run" / n).read_bytes()
        for n in names
    )
    _verdict("cli-determinism", same, f"{len(names)} noise artifacts byte-identical")


# ---------------------------------------------------------------------------
# 10. sequential mode beats i.i.d. on set DPP
# ---------------------------------------------------------------------------


def test_c10_sequential_dpp():
    h = w = 16
    gen = generator.GeneratorSpec("lowpass_painter", h, w)
    spec = _painter_spec(metric="dpp")

    def set_dpp(values):
        imgs = generator.generate(gen, de.constant(values))
        fs = optimizer.context_feature_stack(spec, imgs)
        pooled = diversity.pool_features(fs)
        return diversity.dpp_score(diversity.build_kernel(pooled)).value

    wins = 0
    for seed in range(50):
        cfg = optimizer.OptimizerConfig(
            learning_rate=10.0, clip_norm=0.1, max_iters=30, seed=seed
        )
        build = optimizer.sequential_build(6, spec, cfg, gen, (1, h, w))
        wins += bool(set_dpp(build.noise.values) > set_dpp(build.iid_noise.values))
    _verdict("sequential-dpp", wins >= 45, f"{wins}/50 seeds beat i.i.d.")
