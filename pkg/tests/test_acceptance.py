"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -s`. The performance criterion is in
the opt-in perf profile (`pytest -m perf`); the real-dataset reproduction path
activates only when DEAP_DATA_DIR points at converted trials.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from eegnet3d import bench, binary, models, ops, pipeline, training
from eegnet3d.models import build_bi_eegnet, build_eegnet, build_model, count_params, memory_bits, preset
from eegnet3d.ops import BatchNorm3dState, Conv3dSpec, LossConfig
from eegnet3d.tensor import Rng

from helpers import assert_grad_close, numeric_grad
from test_binary import random_binary_case
from test_ops import random_conv_case

GOLDEN = json.load(open(os.path.join(os.path.dirname(__file__), "golden", "param_counts.json")))


def ok(name: str, detail: str = ""):
    print(f"\nACCEPTANCE {name}: PASS{f' ({detail})' if detail else ''}")


# ---------------------------------------------------------------------------
# 1. Binary-kernel oracle equivalence
# ---------------------------------------------------------------------------

def test_binary_kernel_oracle_equivalence():
    t0 = time.perf_counter()
    for i in range(200):
        rng = np.random.default_rng(10_000 + i)
        a, w, spec = random_binary_case(rng)
        ref = ops.conv3d_forward(a, w, spec)
        pa = binary.pack_channels(a, spec.groups)
        pw = binary.pack_weight(w)
        acc = binary.xnor_conv3d_int(pa, pw, spec)
        assert np.array_equal(ref.astype(np.int64), acc.astype(np.int64)), f"case {i}"
        alpha = binary.ChannelScales(rng.uniform(0.1, 2.0, spec.out_channels).astype(np.float32))
        scaled = binary.xnor_conv3d(pa, pw, alpha, spec)
        assert np.max(np.abs(scaled - ref * alpha.alpha.reshape(1, -1, 1, 1, 1))) < 1e-6
    dt = time.perf_counter() - t0
    assert dt < 60, f"oracle suite took {dt:.1f}s (budget 60s)"
    ok("binary-kernel oracle equivalence", f"200 cases in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. Gradient suite
# ---------------------------------------------------------------------------

def _fd_conv(flavor, seed):
    rng = np.random.default_rng(seed)
    x, w, spec = random_conv_case(rng, flavor)
    proj = rng.standard_normal((x.shape[0], spec.out_channels, *spec.out_spatial(x.shape[2:])))
    gx, gw = ops.conv3d_backward(proj, x, w, spec)

    def loss():
        return float(np.sum(ops.conv3d_forward(x, w, spec) * proj))

    assert_grad_close(gx, numeric_grad(loss, x), f"{flavor} gx")
    assert_grad_close(gw, numeric_grad(loss, w), f"{flavor} gw")


def test_gradient_suite():
    t0 = time.perf_counter()
    for flavor in ("standard", "depthwise", "pointwise"):
        for i in range(50):
            _fd_conv(flavor, 20_000 + i)
    for i in range(50):
        rng = np.random.default_rng(21_000 + i)
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((2, c, 2, 3, 2))
        state = BatchNorm3dState.create(c)
        state.gamma[:] = rng.standard_normal(c)
        proj = rng.standard_normal(x.shape)
        _, cache = ops.bn_forward(x, state, "train")
        gx, _, _ = ops.bn_backward(proj, cache, state)
        assert_grad_close(
            gx, numeric_grad(lambda: float(np.sum(ops.bn_forward(x, state, "train")[0] * proj)), x),
            "bn",
        )
    for i in range(50):
        rng = np.random.default_rng(22_000 + i)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        proj = rng.standard_normal((3, 2))
        gx, gw, gb = ops.linear_backward(proj, x, w)
        fn = lambda: float(np.sum(ops.linear(x, w, b) * proj))
        assert_grad_close(gx, numeric_grad(fn, x), "linear x")
        assert_grad_close(gw, numeric_grad(fn, w), "linear w")
        assert_grad_close(gb, numeric_grad(fn, b), "linear b")
    for i in range(50):
        rng = np.random.default_rng(23_000 + i)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        proj = rng.standard_normal((1, 2, 2, 2, 2))
        gx = ops.avgpool3d_backward(proj, x.shape, (2, 2, 2))
        assert_grad_close(
            gx, numeric_grad(lambda: float(np.sum(ops.avgpool3d(x, (2, 2, 2)) * proj)), x), "avgpool"
        )
    for i in range(50):
        rng = np.random.default_rng(24_000 + i)
        logits = rng.standard_normal((4, 2))
        labels = rng.integers(0, 2, 4)
        cfg = LossConfig(0.1, 2)
        _, grad = ops.cross_entropy_smoothed(logits, labels, cfg)
        assert_grad_close(
            grad, numeric_grad(lambda: ops.cross_entropy_smoothed(logits, labels, cfg)[0], logits),
            "loss",
        )
    for i in range(50):
        rng = np.random.default_rng(25_000 + i)
        x = rng.uniform(-1.5, 1.5, 16)
        for kink in (-1.0, 0.0, 1.0):
            x = np.where(np.abs(x - kink) < 0.02, x + 0.05, x)
        proj = rng.standard_normal(x.shape)
        g = binary.approx_sign_backward(proj, x)
        assert_grad_close(
            g, numeric_grad(lambda: float(np.sum(binary.approx_sign(x) * proj)), x), "approx_sign"
        )
    dt = time.perf_counter() - t0
    assert dt < 120, f"gradient suite took {dt:.1f}s (budget 120s)"
    ok("gradient suite", f"8 layer families x 50 instances in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. Parameter accounting
# ---------------------------------------------------------------------------

def test_parameter_accounting():
    counts = {}
    for arch in ("v1", "v2", "v3"):
        real, bin_ = count_params(build_eegnet(preset(arch), seed=0))
        gold = GOLDEN["full_precision"][arch]
        assert (real, bin_) == (gold["real"], gold["binary"]), arch
        ref = GOLDEN["reference_totals"][arch]
        assert abs(real - ref) / ref <= 0.20, f"{arch}: {real} vs {ref}"
        counts[arch] = real
    assert counts["v1"] < counts["v2"] < counts["v3"]
    # the published memory figures follow from the published counts
    assert memory_bits(6400, 0) == pytest.approx(0.2048)
    assert abs(memory_bits(6400, 0) - 0.20) < 0.04
    assert abs(memory_bits(14600, 0) - 0.45) < 0.04
    assert abs(memory_bits(24800, 0) - 0.76) < 0.04
    assert memory_bits(3500, 9100) == pytest.approx(0.1211)
    assert abs(memory_bits(3500, 9100) - 0.11) < 0.04
    ok("parameter accounting",
       f"v1/v2/v3 = {counts['v1']}/{counts['v2']}/{counts['v3']} within ±20% of 6.4K/14.6K/24.8K")


# ---------------------------------------------------------------------------
# 4. Binarized-model structure
# ---------------------------------------------------------------------------

def test_bi_model_structure():
    savings = []
    for arch in ("v1", "v2", "v3"):
        fp = build_eegnet(preset(arch), seed=0)
        bi = build_bi_eegnet(preset(arch, binary_model=True), seed=0)
        adds = [l.name for l in bi.layers if l.kind == "add"]
        assert adds == ["b1.add", "b2.add", "b3.add"]
        shapes = bi.validate((1, 1, 6, 32, 128))
        assert shapes[bi["head.conv"].inputs[0]][2:] == (1, 1, 1)
        assert bi.meta["stem_base"] * 2 == fp.meta["stem_base"] == 16
        fp_m = memory_bits(*count_params(fp))
        bi_m = memory_bits(*count_params(bi))
        assert bi_m < fp_m
        savings.append(100 * (1 - bi_m / fp_m))
    ok("bi-model structure",
       "storage savings " + ", ".join(f"{s:.1f}%" for s in savings) + " (reported; asserted > 0)")


# ---------------------------------------------------------------------------
# 5. Identity-residual algebra
# ---------------------------------------------------------------------------

def test_identity_residual():
    g = build_eegnet(preset("v1"), seed=8)
    g["b1.project.bn"].state.gamma[:] = 0.0
    x = Rng(123).normal((2, 1, 6, 32, 128))
    _, ctx = g.forward(x, mode="eval")
    block_in = ctx["acts"][g["b1.expand.conv"].inputs[0]]
    block_out = ctx["acts"]["b1.add"]
    assert np.max(np.abs(block_out - block_in)) < 1e-6
    ok("identity-residual algebra", "zeroed project-BN gamma gives exact identity")


# ---------------------------------------------------------------------------
# 6. Pipeline invariants
# ---------------------------------------------------------------------------

def test_pipeline_invariants():
    t0 = time.perf_counter()
    trial = pipeline.Trial(
        Rng(5).normal((40, 8064)), 128, dict.fromkeys(pipeline.RATING_KEYS, 6.0), 1, 2
    )
    trimmed = pipeline.trim_and_select(trial)
    assert trimmed.shape == (32, 7680)
    assert pipeline.frame_count(7680, 128, 64) == 119
    chunks = pipeline.process_trial(trial, pipeline.PipelineConfig())
    assert len(chunks) == 19
    for c in chunks:
        assert c.data.shape == (6, 32, 128)
        assert 0.0 <= c.data.min() and c.data.max() <= 1.0
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 3000))
        window = int(rng.integers(1, 200))
        hop = int(rng.integers(1, 200))
        fpc = int(rng.integers(1, 10))
        chop = int(rng.integers(1, 10))
        nf_naive = 0
        s = 0
        while s + window <= t:
            nf_naive += 1
            s += hop
        assert pipeline.frame_count(t, window, hop) == nf_naive
        nc_naive = 0
        s = 0
        while s + fpc <= nf_naive:
            nc_naive += 1
            s += chop
        assert pipeline.chunk_count(nf_naive, fpc, chop) == nc_naive
    dt = time.perf_counter() - t0
    assert dt < 60
    ok("pipeline invariants", f"trim/frames/chunks + 100 config enumerations in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 7. Learnability smoke test (desk profile)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_512():
    ds = pipeline.synth_dataset(512, seed=42)
    return training.split_train_val(ds.data, ds.label_valence, 0.2, seed=42)

@pytest.mark.slow
def test_learnability_full_precision(synth_512):
    # the bar is "within 30 epochs"; 12 are plenty (converges around epoch 5)
    (xt, yt), (xv, yv) = synth_512
    g = build_model(preset("v1"), seed=42)
    cfg = training.profile_config("desk", binary_model=False, seed=42,
                                  epochs=12, lr_milestones=())
    res = training.train(g, (xt, yt), (xv, yv), cfg)
    best_train = max(e["train_accuracy"] for e in res.log)
    best_val = max(e["val_accuracy"] for e in res.log)
    assert best_train >= 0.95, f"train acc {best_train:.3f} < 0.95"
    assert best_val >= 0.90, f"val acc {best_val:.3f} < 0.90"
    ok("learnability (full precision V1)",
       f"train {best_train:.3f} / val {best_val:.3f} within {cfg.epochs} <= 30 epochs")


@pytest.mark.slow
def test_learnability_binarized(synth_512):
    (xt, yt), (xv, yv) = synth_512
    g = build_model(preset("v1", binary_model=True), seed=42)
    cfg = training.profile_config("desk", binary_model=True, seed=42,
                                  epochs=20, lr_milestones=(15,))
    res = training.train(g, (xt, yt), (xv, yv), cfg)
    best_val = max(e["val_accuracy"] for e in res.log)
    assert best_val >= 0.85, f"binarized val acc {best_val:.3f} < 0.85"
    ok("learnability (binarized V1, all techniques)",
       f"val {best_val:.3f} within {cfg.epochs} <= 30 epochs")


@pytest.mark.slow
def test_techniques_beat_plain_bnn(synth_512):
    (xt, yt), (xv, yv) = synth_512
    # class-balanced random subsets keep the reduced-profile runs honest
    sub_t = Rng(77).child(1).permutation(len(xt))[:256]
    sub_v = Rng(77).child(2).permutation(len(xv))[:128]
    data = ((xt[sub_t], yt[sub_t]), (xv[sub_v], yv[sub_v]))
    full_accs, plain_accs = [], []
    for seed in (1, 2, 3):
        cfg = training.profile_config("desk", binary_model=True, seed=seed,
                                      epochs=10, lr_milestones=())
        g_full = build_model(preset("v1", binary_model=True), seed=seed)
        full_accs.append(training.train(g_full, *data, cfg).best_val_accuracy)
        g_plain = build_model(
            preset("v1", binary_model=True, real_shortcuts=False,
                   channel_wise_alpha=False, last_stage_tuning=False),
            seed=seed,
        )
        plain_accs.append(training.train(g_plain, *data, cfg).best_val_accuracy)
    margin = float(np.mean(full_accs) - np.mean(plain_accs))
    assert margin > 0, f"margin {margin:.4f} (full {full_accs}, plain {plain_accs})"
    ok("techniques beat plain BNN",
       f"mean margin {margin:+.4f} over 3 seeds (full {np.mean(full_accs):.3f}, "
       f"plain {np.mean(plain_accs):.3f})")


# ---------------------------------------------------------------------------
# 8. Determinism of artifacts
# ---------------------------------------------------------------------------

def _dir_checksums(d):
    return {
        name: hashlib.sha256(open(os.path.join(d, name), "rb").read()).hexdigest()
        for name in sorted(os.listdir(d))
    }


def test_artifact_determinism(tmp_path):
    from eegnet3d import cli

    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert cli.main(["synth", "--out", out, "--seed", "11", "--n-per-class", "20"]) == 0
    assert _dir_checksums(a) == _dir_checksums(b)

    ta, tb = str(tmp_path / "ta"), str(tmp_path / "tb")
    for out in (ta, tb):
        code = cli.main(["train", "--data", a, "--out", out, "--arch", "v1", "--seed", "5",
                         "--set", "train.epochs=2", "--set", "model.width_factor=0.2"])
        assert code == 0
    assert _dir_checksums(ta) == _dir_checksums(tb)

    # preprocess determinism over the converter input layout
    raw = str(tmp_path / "raw")
    os.makedirs(raw)
    rng = Rng(3)
    sidecar = []
    from eegnet3d.tensor import write_ntf

    for trial_id in range(2):
        x = rng.child(trial_id).normal((40, 8064), std=10.0)
        write_ntf(os.path.join(raw, f"s01_t{trial_id:02d}.ntf"), x)
        sidecar.append({"subject": 1, "trial": trial_id, "valence": 6.5, "arousal": 4.0,
                        "dominance": 5.0, "liking": 5.0, "sample_rate": 128})
    with open(os.path.join(raw, "s01_ratings.json"), "w") as fh:
        json.dump(sidecar, fh)
    pa, pb = str(tmp_path / "pa"), str(tmp_path / "pb")
    for out in (pa, pb):
        assert cli.main(["preprocess", "--data", raw, "--out", out]) == 0
    assert _dir_checksums(pa) == _dir_checksums(pb)
    ok("artifact determinism", "synth/train/preprocess reruns are checksum-identical")


# ---------------------------------------------------------------------------
# 9. Performance smoke (opt-in perf profile)
# ---------------------------------------------------------------------------

@pytest.mark.perf
def test_perf_packed_kernel_speedup():
    spec, shape = bench.CANONICAL_CASES[bench.PERF_GATE_CASE]
    case = bench.BenchCase(bench.PERF_GATE_CASE, spec, shape, iterations=20)
    out = bench.bench_compare(case)
    assert out["speedup"] >= 2.0, f"packed speedup {out['speedup']:.2f}x < 2x"
    ok("perf smoke", f"packed {out['speedup']:.2f}x faster at {bench.PERF_GATE_CASE}")


# ---------------------------------------------------------------------------
# 10. Conditional real-dataset reproduction path
# ---------------------------------------------------------------------------

@pytest.mark.skipif("DEAP_DATA_DIR" not in os.environ,
                    reason="set DEAP_DATA_DIR to converted trials to run the reproduction path")
@pytest.mark.slow
def test_deap_reproduction_path(tmp_path):
    from eegnet3d import cli

    data = os.environ["DEAP_DATA_DIR"]
    shards = str(tmp_path / "shards")
    assert cli.main(["preprocess", "--data", data, "--out", shards]) == 0
    results = {}
    for arch in ("v1", "v2", "v3"):
        for flag in ([], ["--binary"]):
            for label in ("valence", "arousal"):
                out = str(tmp_path / f"{arch}{'-bi' if flag else ''}-{label}")
                code = cli.main(["train", "--data", shards, "--out", out, "--arch", arch,
                                 "--label", label, "--profile", "paper", *flag])
                assert code == 0
                report = json.load(open(os.path.join(out, "report.json")))
                results[f"{arch}{'-bi' if flag else ''}/{label}"] = report["best_val_accuracy"]
    ok("reproduction path", "; ".join(f"{k}={v:.4f}" for k, v in results.items()))
