"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting. The desk-scale runs (criteria 5, 6 and 8) train through the CLI on
one shared phantom directory and take tens of minutes on a single core.
"""
import json
import math
import time

import numpy as np
import pytest

from mrdenoise.checkpoint import encode_checkpoint, load_checkpoint
from mrdenoise.cli import load_config, main
from mrdenoise.data import (
    PhantomSpec,
    VolumePairs,
    build_patch_dataset,
    decode_volume,
    encode_volume,
    generate_phantom,
    list_volumes,
    load_volume,
    prepare_dataset,
)
from mrdenoise.gradcheck import check_gradients
from mrdenoise.metrics import decode_metric, psnr, ssim
from mrdenoise.model import (
    ModelConfig,
    cnn_encoder_decoder,
    forward,
    init_params,
    mlp_encoder_stack,
    with_variant,
)
from mrdenoise.noise import NoiseSpec, add_rician
from mrdenoise.patches import patchify
from mrdenoise.tensor import (
    BatchNormStats,
    Tensor,
    add,
    batch_norm3d,
    conv3d,
    deconv3d,
    gelu,
    layer_norm,
    leaky_relu,
    linear,
    mse_loss,
    relu,
    reshape,
    sum_all,
)
from mrdenoise.train import PUBLISHED_TEST_RESULTS, train

F64 = np.float64


def t64(a):
    return Tensor(a, requires_grad=True, dtype=F64)


# ---------------------------------------------------------------------------
# shared desk-scale workspace


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert main(["generate-phantoms", "--count", "30", "--shape", "64x64x6", "--lesions", "4",
                 "--seed", "0", "--out-dir", str(root / "phantoms")]) == 0
    (root / "desk.json").write_text("{}\n")  # the desk preset is the default
    return root


@pytest.fixture(scope="session")
def desk_train(desk):
    started = time.perf_counter()
    code = main(["train", "--config", str(desk / "desk.json"), "--data-dir", str(desk / "phantoms"),
                 "--out-dir", str(desk / "train")])
    return code, time.perf_counter() - started


@pytest.fixture(scope="session")
def desk_ablate(desk):
    started = time.perf_counter()
    code = main(["ablate", "--config", str(desk / "desk.json"), "--data-dir", str(desk / "phantoms"),
                 "--report", str(desk / "ablation.json"), "--out-dir", str(desk / "ablation")])
    return code, time.perf_counter() - started


# ---------------------------------------------------------------------------
# 1. gradients


def _op_cases(rng):
    x = t64(rng.normal(size=(3, 5)))
    w = t64(rng.normal(size=(4, 5)))
    b = t64(rng.normal(size=4))
    g = t64(rng.normal(size=5))
    s = t64(rng.normal(size=5))
    other = t64(rng.normal(size=(3, 5)))
    vol = t64(rng.normal(size=(2, 2, 3, 4, 3)))
    kern = t64(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3)
    kb = t64(rng.normal(size=3))
    dkern = t64(rng.normal(size=(2, 3, 3, 3, 3)) * 0.3)
    dkb = t64(rng.normal(size=3))
    bg = t64(rng.normal(size=2))
    bs = t64(rng.normal(size=2))
    stats = BatchNormStats(2, F64)
    stats.mean = rng.normal(size=2)
    stats.var = rng.uniform(0.5, 2.0, size=2)
    stats.count = 1
    t35 = rng.normal(size=(3, 5))
    t34 = rng.normal(size=(3, 4))
    tvol = rng.normal(size=(2, 3, 3, 4, 3))
    tvol2 = rng.normal(size=vol.shape)
    return {
        "add": (lambda: mse_loss(add(x, other), t35), [x, other]),
        "reshape": (lambda: mse_loss(reshape(x, (5, 3)), t35.reshape(5, 3)), [x]),
        "sum_all": (lambda: sum_all(linear(x, w, b)), [x, w, b]),
        "mse_loss": (lambda: mse_loss(x, t35), [x]),
        "gelu": (lambda: mse_loss(gelu(x), t35), [x]),
        "relu": (lambda: mse_loss(relu(x), t35), [x]),
        "leaky_relu": (lambda: mse_loss(leaky_relu(x, 0.2), t35), [x]),
        "linear": (lambda: mse_loss(linear(x, w, b), t34), [x, w, b]),
        "layer_norm": (lambda: mse_loss(layer_norm(x, g, s), t35), [x, g, s]),
        "batch_norm3d/train": (lambda: mse_loss(batch_norm3d(vol, bg, bs, stats.copy(), "train"), tvol2),
                               [vol, bg, bs]),
        "batch_norm3d/eval": (lambda: mse_loss(batch_norm3d(vol, bg, bs, stats, "eval"), tvol2), [vol, bg, bs]),
        "conv3d": (lambda: mse_loss(conv3d(vol, kern, kb), tvol), [vol, kern, kb]),
        "deconv3d": (lambda: mse_loss(deconv3d(vol, dkern, dkb), tvol), [vol, dkern, dkb]),
    }


def test_criterion_1_gradients(record_criterion):
    started = time.perf_counter()
    per_op = {name: check_gradients(fn, ts, step=1e-3)
              for name, (fn, ts) in _op_cases(np.random.default_rng(0)).items()}
    model = {}
    excluded = 0
    for variant in ("MLP_CNN", "MLP_MLP", "CNN_CNN"):
        cfg = with_variant(ModelConfig(P=4, C=2, L=1, J=1, channels=[2]), variant)
        params = init_params(cfg, 3, dtype=F64)
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((3, cfg.d)), dtype=F64)
        y = rng.random((3, cfg.d))
        report = {}
        model[variant] = check_gradients(lambda: mse_loss(forward(x, cfg, params), y),
                                         [t for _, t in params], step=1e-3, report=report)
        excluded += report["excluded"]
    elapsed = time.perf_counter() - started
    worst_op = max(per_op, key=per_op.get)
    ok = max(per_op.values()) < 1e-4 and max(model.values()) < 1e-3 and elapsed < 60
    record_criterion(1, ok, f"worst per-op {worst_op} {per_op[worst_op]:.2e} (< 1e-4); full model "
                            + ", ".join(f"{k} {v:.2e}" for k, v in model.items())
                            + f" (< 1e-3, {excluded} kink-adjacent entries excluded); {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. patch counts


def test_criterion_2_patch_counts(record_criterion):
    vol = np.zeros((176, 256, 6), np.float32)
    single = len(patchify(vol, 16, 10))
    ids = [f"v{i:03d}" for i in range(100)]
    pairs = build_patch_dataset(VolumePairs(ids, [vol] * 100, [vol] * 100), 16, 10)
    total = len(pairs)
    shape = pairs.noisy.shape
    del pairs
    ok = single == 425 and total == 42_500 and shape == (42_500, 1536)
    record_criterion(2, ok, f"{single} patches per 176x256x6 volume, {total} pairs from 100 volumes")
    assert ok


# ---------------------------------------------------------------------------
# 3. Rician statistics


def test_criterion_3_rician(record_criterion):
    const = np.ones((100, 100, 100), np.float32)
    a = add_rician(const, NoiseSpec(0.15, seed=2024)).astype(np.float64)
    m2 = float(np.mean(a * a))
    rel = abs(m2 - 1.045) / 1.045
    phantom = generate_phantom(PhantomSpec(seed=1))[0]
    identity = add_rician(phantom, NoiseSpec(0.0, seed=5)).tobytes() == phantom.tobytes()
    ok = rel < 0.005 and identity
    record_criterion(3, ok, f"mean A^2 = {m2:.5f} over 1e6 voxels, rel. error {rel:.2e} (< 5e-3); "
                            f"level 0 bit-identical: {identity}")
    assert ok


# ---------------------------------------------------------------------------
# 4. monotone degradation


def test_criterion_4_monotone(record_criterion):
    clean = generate_phantom(PhantomSpec(seed=7))[0]
    ps, ss = [], []
    for level in (0.03, 0.09, 0.15):
        noisy = add_rician(clean, NoiseSpec(level, seed=42))
        ps.append(psnr(noisy, clean))
        ss.append(ssim(noisy, clean))
    ok = ps[0] > ps[1] > ps[2] and ss[0] > ss[1] > ss[2]
    record_criterion(4, ok, "PSNR " + " > ".join(f"{v:.2f}" for v in ps) + " dB; SSIM "
                     + " > ".join(f"{v:.4f}" for v in ss))
    assert ok


# ---------------------------------------------------------------------------
# 5. desk-scale denoising gain


def test_criterion_5_desk_gain(desk, desk_train, record_criterion):
    code, elapsed = desk_train
    assert code == 0
    report = json.loads((desk / "train" / "test_report.json").read_text())
    den_p = decode_metric(report["denoised"]["mean"]["psnr"])
    noi_p = decode_metric(report["noisy"]["mean"]["psnr"])
    den_s = report["denoised"]["mean"]["ssim"]
    noi_s = report["noisy"]["mean"]["ssim"]
    config = load_config(desk / "desk.json")
    by_epoch = {}
    for line in (desk / "train" / "loss.csv").read_text().splitlines()[1:]:
        e, _, l = line.split(",")
        by_epoch.setdefault(int(e), []).append(float(l))
    means = [np.mean(by_epoch[e]) for e in sorted(by_epoch)]
    ref = PUBLISHED_TEST_RESULTS[0.15]
    ok = den_p - noi_p >= 3.0 and den_s > noi_s and elapsed <= 1800 and means[-1] < 0.5 * means[0]
    record_criterion(5, ok, f"test PSNR {den_p:.2f} vs noisy {noi_p:.2f} dB (gain {den_p - noi_p:+.2f}, need >= 3); "
                            f"SSIM {den_s:.4f} vs {noi_s:.4f}; {config.epochs} epochs in {elapsed / 60:.1f} min "
                            f"on this machine; epoch loss {means[0]:.4f} -> {means[-1]:.4f}; "
                            f"reference-only published 15% result {ref[0]} dB / {ref[1]}")
    assert ok


# ---------------------------------------------------------------------------
# 6. ablation harness


def test_criterion_6_ablation(desk, desk_ablate, record_criterion):
    code, elapsed = desk_ablate
    assert code == 0
    table = json.loads((desk / "ablation.json").read_text())
    rows = table["rows"]
    shape_ok = len(rows) == 3 and [r["model"] for r in rows] == ["MLP+MLP", "CNN+CNN", "MLP+CNN"] \
        and table["columns"] == ["model", "PSNR", "SSIM"]
    converged = all(r["final_epoch_loss"] < 0.5 * r["first_epoch_loss"] for r in rows)
    ok = shape_ok and converged and isinstance(table["published_ordering_reproduced"], bool)
    summary = "; ".join(f"{r['model']} {r['PSNR']:.2f} dB / {r['SSIM']:.4f}, loss "
                        f"{r['first_epoch_loss']:.4f} -> {r['final_epoch_loss']:.4f}" for r in rows)
    record_criterion(6, ok, f"3-row table: {summary}; published ordering reproduced: "
                            f"{table['published_ordering_reproduced']} (recorded, not asserted); {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 7. metric identities


def _psnr_oracle(test, reference):
    t = [float(v) for v in np.asarray(test).ravel()]
    r = [float(v) for v in np.asarray(reference).ravel()]
    mse = math.fsum((a - b) ** 2 for a, b in zip(t, r)) / len(r)
    return 10.0 * math.log10(max(r) ** 2 / mse)


def test_criterion_7_metrics(record_criterion):
    clean = generate_phantom(PhantomSpec(seed=3))[0]
    inf_ok = psnr(clean, clean) == math.inf
    from mrdenoise.metrics import MetricReport
    rep = MetricReport()
    rep.add("x", clean, clean)
    sentinel_ok = rep.to_dict()["mean"]["psnr"] == "inf"
    ssim_err = abs(ssim(clean, clean) - 1.0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(4, 17, size=3))
        ref = rng.random(shape).astype(np.float32)
        test = np.abs(ref + rng.normal(0, rng.uniform(0.01, 0.3), shape)).astype(np.float32)
        worst = max(worst, abs(psnr(test, ref) - _psnr_oracle(test, ref)))
    ok = inf_ok and sentinel_ok and ssim_err < 1e-9 and worst < 1e-9
    record_criterion(7, ok, f"PSNR(x,x) = inf, reported as \"inf\": {inf_ok and sentinel_ok}; "
                            f"|SSIM(x,x) - 1| = {ssim_err:.1e}; max PSNR oracle diff over 100 pairs {worst:.1e} dB")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism and persistence


def test_criterion_8_determinism(desk, desk_train, desk_ablate, record_criterion, tmp_path):
    assert desk_train[0] == 0 and desk_ablate[0] == 0
    # two independent 50-epoch runs with identical seed, config and data
    same_run = all((desk / "train" / n).read_bytes() == (desk / "ablation" / "MLP_CNN" / n).read_bytes()
                   for n in ("best.ckpt", "last.ckpt", "loss.csv"))

    buf = (desk / "train" / "best.ckpt").read_bytes()
    ckpt_rt = encode_checkpoint(load_checkpoint(desk / "train" / "best.ckpt")) == buf
    vol_path = desk / "phantoms" / "phantom_000.vol"
    vol_rt = encode_volume(decode_volume(vol_path.read_bytes())) == vol_path.read_bytes()

    config = load_config(desk / "desk.json", epochs=3)
    clean = {vid: load_volume(p) for vid, p in list_volumes(desk / "phantoms").items()}
    _, data = prepare_dataset(clean, config.n_train, config.n_val, config.n_test, config.noise_level, config.seed)
    full = train(config, data, tmp_path / "full")
    train(load_config(desk / "desk.json", epochs=2), data, tmp_path / "part")
    resumed = train(config, data, tmp_path / "part", resume=load_checkpoint(tmp_path / "part" / "last.ckpt"))
    resume_ok = encode_checkpoint(resumed.final) == encode_checkpoint(full.final) \
        and (tmp_path / "part" / "best.ckpt").read_bytes() == (tmp_path / "full" / "best.ckpt").read_bytes()

    ok = same_run and ckpt_rt and vol_rt and resume_ok
    record_criterion(8, ok, f"repeat desk run checkpoints byte-identical: {same_run}; checkpoint round trip: "
                            f"{ckpt_rt}; .vol round trip: {vol_rt}; resume at epoch 2 == uninterrupted "
                            f"through epoch 3: {resume_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 9. residual degeneracy


def test_criterion_9_degeneracy(record_criterion):
    cfg = ModelConfig.desk()
    rng = np.random.default_rng(0)
    params = init_params(cfg, 1)
    for name, t in params:
        if name.startswith("mlp.") and (name.endswith(".weight") or name.endswith(".bias")):
            t.values = np.zeros_like(t.values)
    z0 = Tensor(rng.normal(size=(8, cfg.d)).astype(np.float32))
    mlp_identity = mlp_encoder_stack(z0, params, cfg).values.tobytes() == z0.values.tobytes()

    for name, t in params:
        if name.startswith("cnn.") and (name.endswith(".weight") or name.endswith(".bias")):
            t.values = np.zeros_like(t.values)
    x = rng.normal(size=(8, 1, cfg.P, cfg.P, cfg.C)).astype(np.float32)
    out_any = cnn_encoder_decoder(Tensor(x), params, cfg).values
    relu_skip = out_any.tobytes() == np.maximum(x, np.float32(0)).tobytes()
    x_neg = -np.abs(x)
    out_neg = cnn_encoder_decoder(Tensor(x_neg), params, cfg).values
    zero_out = not np.any(out_neg) and not np.signbit(out_neg).any()

    ok = mlp_identity and relu_skip and zero_out
    record_criterion(9, ok, f"zero MLP weights -> exact identity: {mlp_identity}; zero CNN weights with ReLU -> "
                            f"all-zero output for non-positive x0: {zero_out} (for general x0 the output is "
                            f"exactly relu(x0) via the final skip: {relu_skip})")
    assert ok
