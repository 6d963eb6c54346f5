"""Acceptance criteria 1-10, one test each; every test prints a single PASS/FAIL line."""

import json
import struct
import time

import numpy as np
import pytest

from volshift.cli import dispatch
from volshift.cycletrain import CycleTrainConfig, train_cyclegan, translate_volume
from volshift.domainstats import delta_js, histogram_match, js_divergence, monotone_map_ok, pair_js
from volshift.evalkit import ExperimentReport, dice, gap_recovery, preprocess
from volshift.netarch import build_discriminator, build_generator, build_unet, discriminator_output_extent
from volshift.synthgen import default_specs, generate_dataset
from volshift.volio import Volume, encode_nifti, read_nifti, read_vvol, write_nifti, write_vvol
from volshift.voltensor import Tensor
from volshift.voltensor.gradcheck import OP_CASES, run_suite


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


# ---------------------------------------------------------------- 1. gradients

def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    res = run_suite(seeds=(0, 1, 2, 3, 4))
    elapsed = time.perf_counter() - t0
    worst = max(max(v) for v in res.values())
    ok = set(res) == set(OP_CASES) and all(len(v) == 5 for v in res.values()) and worst <= 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(res)} ops x 5 seeds, worst rel. err {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 120 s)")


# ---------------------------------------------------------------- 2. shapes

def test_criterion_2_shape_suite(verdict):
    problems = []
    G = build_generator(base_filters=4, n_resblocks=2, seed=1)
    for e in (16, 24, 32, 48):
        if G(rand((1, 2, e, e, e))).shape != (1, 2, e, e, e):
            problems.append(f"generator {e}")
    D = build_discriminator(base_filters=4, seed=2)
    for ext in ((32, 32, 32), (16, 24, 40), (48, 17, 29)):
        expected = ext
        for s in (2, 2, 2, 1, 1):
            expected = tuple(-(-e // s) for e in expected)
        got = D(rand((1, 2) + ext)).shape[2:]
        if got != expected or got != tuple(discriminator_output_extent(e) for e in ext):
            problems.append(f"discriminator {ext}: {got} vs {expected}")
    U = build_unet(base_filters=4, seed=3)
    for ext in ((32, 32, 32), (16, 32, 48)):
        p = U(rand((1, 2) + ext)).data
        if p.shape != (1, 2) + ext or np.abs(p.sum(axis=1) - 1).max() > 1e-6:
            problems.append(f"unet {ext}")
    verdict(2, not problems, "generator/discriminator/U-Net shapes and probability sums" +
            (f"; failures: {problems}" if problems else ""))


# ---------------------------------------------------------------- 3. divergence

def test_criterion_3_divergence_suite(verdict):
    rng = np.random.default_rng(0)
    checks = {}
    ps = [rng.dirichlet(np.ones(16)) for _ in range(20)]
    checks["symmetry"] = all(js_divergence(p, q) == js_divergence(q, p) for p in ps for q in ps)
    checks["self"] = all(js_divergence(p, p) == 0.0 for p in ps)
    checks["disjoint"] = abs(js_divergence(np.array([0.3, 0.7, 0, 0]), np.array([0, 0, 0.6, 0.4])) - 1) <= 1e-12
    checks["worked"] = abs(js_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) - 0.311278) <= 1e-6

    def vol(seed):
        r = np.random.default_rng(seed)
        return Volume((r.gamma(2.0, 1.0, (1, 10, 10, 10)) * r.uniform(0.5, 2)).astype(np.float32),
                      mask=np.ones((10, 10, 10), bool))
    A, B = [vol(i) for i in range(3)], [vol(10 + i) for i in range(4)]
    brute = sum(pair_js(a, b) for a in A for b in B) / 12
    checks["brute"] = abs(delta_js(A, B).delta_js - brute) <= 1e-12
    inter, intra = delta_js(B, B).delta_js, delta_js(B, mode="intra").delta_js
    n = len(B)
    checks["intra"] = abs(inter * n * n - intra * n * (n - 1)) <= 1e-12
    bad = [k for k, v in checks.items() if not v]
    verdict(3, not bad, f"JS symmetry/self/disjoint/0.311278, delta_js brute force, intra relation"
            + (f"; failures: {bad}" if bad else ""))


# ---------------------------------------------------------------- 4. histogram matching

def test_criterion_4_histogram_matching(verdict):
    (domain,) = generate_dataset(default_specs()[:1], n_subjects=20, extent=32, master_seed=4)
    rng = np.random.default_rng(4)
    better, monotone = 0, 0
    for x in preprocess(domain):
        gamma, gain, off = rng.uniform(0.3, 3.0), rng.uniform(0.5, 2.0), rng.uniform(-1, 1)
        lo, hi = x.data.min(), x.data.max()
        y = Volume((gain * ((x.data - lo) / (hi - lo)) ** gamma + off).astype(np.float32), mask=x.mask)
        hm = histogram_match(y, x)
        better += pair_js(hm, x) < pair_js(y, x)
        monotone += all(monotone_map_ok(y.data[c][x.mask], hm.data[c][x.mask]) for c in range(2))
    verdict(4, better >= 18 and monotone == 20, f"JS reduced in {better}/20 (>= 18), monotone in {monotone}/20")


# ---------------------------------------------------------------- 5. checkerboard

def test_criterion_5_checkerboard(verdict):
    h = Tensor(np.ones((1, 16, 6, 6, 6), np.float32))

    def parity_var(out):
        inner = out[0, :, 2:-2, 2:-2, 2:-2]
        means = np.stack([inner[:, a::2, b::2, c::2].mean(axis=(1, 2, 3))
                          for a in (0, 1) for b in (0, 1) for c in (0, 1)])
        return float(means.var(axis=0).mean()), inner

    resize = build_generator(base_filters=4, n_resblocks=0, use_resize_conv=True, seed=11)
    tconv = build_generator(base_filters=4, n_resblocks=0, use_resize_conv=False, seed=11)
    var_r, inner = parity_var(resize.upsample_stage(h, "L16").data)
    var_t, _ = parity_var(tconv.upsample_stage(h, "L16").data)
    spread = float(np.ptp(inner, axis=(1, 2, 3)).max())
    ok = spread <= 1e-5 and var_t > 0 and var_t >= 10 * var_r
    verdict(5, ok, f"resize interior spread {spread:.1e} (<= 1e-5); parity variance tconv {var_t:.2e} vs resize {var_r:.2e}")


# ---------------------------------------------------------------- 6. identity regularization

@pytest.mark.slow
def test_criterion_6_identity_regularization(verdict):
    A, B = generate_dataset(default_specs()[:2], n_subjects=4, extent=64, master_seed=7)
    A, B = preprocess(A), preprocess(B)
    cfg = CycleTrainConfig(epochs=10, steps_per_epoch=50, patch_size=16, base_filters=8, n_resblocks=2,
                           disc_filters=8, w_adv=0.0, w_cyc=0.0, w_id=1.0, seed=7)
    res = train_cyclegan(A, B, cfg)
    errs = []
    for x in A:
        fx = translate_volume(res.F, x, tile=16, overlap=8)
        errs.append(float(np.abs(fx.data - x.data)[:, x.mask].mean()))
    err = float(np.mean(errs))
    steps = len(res.history)
    verdict(6, steps == 500 and err < 0.05,
            f"identity-only training, {steps} steps: masked mean |F(x)-x| = {err:.3f} (bar < 0.05)")


# ---------------------------------------------------------------- 7 and 10. desk pipeline

DESK_ARGS = ["pipeline", "--preset", "desk", "--threads", "1", "--seed", "7"]
METRIC_FILES = ("report.json", "report.csv", "delta_js.csv", "summary.json", "config.json",
                "cyclegan_A_B_losses.csv", "segmenter_A_fold0_curve.csv", "segmenter_B_fold0_curve.csv")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "run1"
    t0 = time.perf_counter()
    code = dispatch(DESK_ARGS + ["-o", str(out)])
    return out, code, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_toy_adaptation(desk_run, verdict):
    out, code, elapsed = desk_run
    assert code == 0
    rep = ExperimentReport.from_json((out / "report.json").read_text())
    js = rep.delta_js[("A", "B")]
    source_dice = rep.mean("B", "A", "target-trained")  # the A segmenter on A's test subjects
    none, cyc, top = (rep.mean("A", "B", c) for c in ("none", "cyclegan", "target-trained"))
    rec = gap_recovery(rep, "A", "B")
    checks = {
        "js": js["cyclegan"] <= 0.7 * js["none"],
        "source dice": source_dice > 0.6,
        "none <= cyclegan": none <= cyc,
        "gap recovery": rec >= 0.5,
        "runtime": elapsed <= 3600,
    }
    bad = [k for k, v in checks.items() if not v]
    verdict(7, not bad,
            f"delta_js none {js['none']:.3f} -> cyclegan {js['cyclegan']:.3f} (ratio {js['cyclegan'] / js['none']:.2f}, "
            f"<= 0.70); source Dice {source_dice:.3f}; target Dice none {none:.3f} hm {rep.mean('A', 'B', 'hm'):.3f} "
            f"cyclegan {cyc:.3f} target-trained {top:.3f}; gap recovered {rec:.2f} (>= 0.5); {elapsed / 60:.1f} min"
            + (f"; failing: {bad}" if bad else ""))


@pytest.mark.slow
def test_criterion_10_determinism(desk_run, verdict):
    out1, code1, _ = desk_run
    out2 = out1.parent / "run2"
    code2 = dispatch(DESK_ARGS + ["-o", str(out2)])
    differ = [f for f in METRIC_FILES if (out1 / f).read_bytes() != (out2 / f).read_bytes()]
    verdict(10, code1 == code2 == 0 and not differ,
            f"two desk runs with --threads 1 --seed 7: {len(METRIC_FILES) - len(differ)}/{len(METRIC_FILES)} "
            f"metric files byte-identical" + (f"; differing: {differ}" if differ else ""))


# ---------------------------------------------------------------- 8. Dice

def test_criterion_8_dice_oracle(verdict):
    rng = np.random.default_rng(8)
    agree = 0
    for _ in range(100):
        a, b = rng.random((8, 8, 8)) < rng.random(), rng.random((8, 8, 8)) < rng.random()
        sa, sb = {tuple(i) for i in np.argwhere(a)}, {tuple(i) for i in np.argwhere(b)}
        oracle = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
        agree += dice(a, b) == oracle
    m = np.zeros((4, 4, 4), bool)
    m[0, 0, :3] = True
    one = np.zeros_like(m)
    one[0, 0, 0] = True
    analytic = dice(m, m) == 1.0 and dice(m, ~m) == 0.0 and dice(m, one) == 0.5
    verdict(8, agree == 100 and analytic, f"{agree}/100 exact oracle agreements; analytic cases 1, 0, 0.5 hold: {analytic}")


# ---------------------------------------------------------------- 9. I/O

def test_criterion_9_io(verdict):
    rng = np.random.default_rng(9)
    v = Volume(rng.normal(size=(2, 5, 6, 7)).astype(np.float32), spacing=(0.9, 1.2, 3.0),
               mask=rng.random((5, 6, 7)) > 0.5)
    checks = {
        "nifti": read_nifti(write_nifti(v)).data.tobytes() == v.data.tobytes(),
        "vvol": read_vvol(write_vvol(v)).data.tobytes() == v.data.tobytes()
        and np.array_equal(read_vvol(write_vvol(v)).mask, v.mask),
    }
    arr = rng.integers(-500, 500, (1, 3, 4, 5)).astype(np.int16)
    big = encode_nifti(arr, (1.5, 2.0, 2.5), datatype=4, scl_slope=2.0, scl_inter=1.0, byteorder=">")
    checks["byte-swapped"] = struct.unpack_from(">i", big, 0)[0] == 348 and read_nifti(big).spacing == (1.5, 2.0, 2.5)
    checks["scaling"] = np.array_equal(read_nifti(big).data, 2.0 * arr.astype(np.float32) + 1.0)
    bad = [k for k, ok in checks.items() if not ok]
    verdict(9, not bad, "NIfTI and .vvol bit-exact round-trips, big-endian header, scl_slope/scl_inter"
            + (f"; failures: {bad}" if bad else ""))
