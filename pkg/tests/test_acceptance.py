"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see each line as it is
produced; the lines are also repeated in the terminal summary.
"""
import math
import time

import numpy as np

from a2fsr import data as D
from a2fsr import tensor as T
from a2fsr import verify
from a2fsr.model import VARIANTS, build_model, count_multiadds, count_params, lambda_report, variant_config
from a2fsr.store import load_checkpoint, save_checkpoint
from a2fsr.train import AdamState, TrainConfig, adam_step, bicubic_upscaler, evaluate, l1_loss, train

# published parameter counts in thousands, per scale and variant
PUBLISHED_PARAMS_K = {
    2: {"SD": 313, "S": 320, "M": 999, "L": 1363},
    3: {"SD": 316, "S": 324, "M": 1003, "L": 1367},
    4: {"SD": 320, "S": 331, "M": 1010, "L": 1374},
}
PUBLISHED_ABLATION_K = {"full": 1363, "noca": 1329, "baseline": 1190}
PUBLISHED_MULTIADDS_G = {"SD": 18.2, "L": 77.2}


def closed_form_params(C, L, p, proj=True, ca=True, R=128):
    """Independent per-layer sum: head, skip, tail and L blocks."""
    total = 3 * 9 * C + C
    total += 3 * 9 * 3 * p * p + 3 * p * p
    total += C * 9 * 3 * p * p + 3 * p * p
    for i in range(1, L + 1):
        total += (i * C * C + C) if proj else 0
        total += 2 * (C * C + C) if ca else 0
        total += (C * R * 9 + R) + (R * C * 9 + C)
        total += 3 if proj else 2
    return total


def _rel(a, b):
    return abs(a - b) / b


def test_criterion_1_parameter_counts(verdict):
    worst, notes = 0.0, []
    for p, table in PUBLISHED_PARAMS_K.items():
        for name, k in table.items():
            L, C = VARIANTS[name]
            n = count_params(build_model(variant_config(name, p)))
            assert n == closed_form_params(C, L, p)
            worst = max(worst, _rel(n, 1000 * k))
    within = worst <= 0.005
    s2 = count_params(build_model(variant_config("S", 2)))
    sd2 = count_params(build_model(variant_config("SD", 2)))
    exact = s2 == 319_728 and sd2 == 312_956
    notes.append(f"12 pairs worst {100 * worst:.3f}%")
    notes.append(f"S x2 {s2:,} vs 319,728; SD x2 {sd2:,} vs 312,956")
    verdict(1, "parameter counts", within and exact, "; ".join(notes))


def test_criterion_2_ablation_counts(verdict):
    configs = {
        "full": variant_config("L", 2),
        "noca": variant_config("L", 2, channel_attention=False),
        "baseline": variant_config("L", 2, projection=False, channel_attention=False),
    }
    counts = {k: count_params(build_model(c)) for k, c in configs.items()}
    errs = {k: _rel(counts[k], 1000 * PUBLISHED_ABLATION_K[k]) for k in counts}
    ok = all(e <= 0.005 for e in errs.values())
    detail = ", ".join(f"{k} {counts[k]:,} ({100 * (counts[k] / (1000 * PUBLISHED_ABLATION_K[k]) - 1):+.2f}%)"
                       for k in counts)
    verdict(2, "ablation counts", ok, detail)


def test_criterion_3_multiadds(verdict):
    got = {v: count_multiadds(build_model(variant_config(v, 4)), (1280, 720)) / 1e9 for v in PUBLISHED_MULTIADDS_G}
    errs = {v: _rel(got[v], PUBLISHED_MULTIADDS_G[v]) for v in got}
    ok = all(e <= 0.02 for e in errs.values())
    detail = ", ".join(f"{v} x4 {got[v]:.2f}G ({100 * (got[v] / PUBLISHED_MULTIADDS_G[v] - 1):+.2f}%)" for v in got)
    verdict(3, "multi-adds at 1280x720", ok, detail)


def test_criterion_4_gradients(verdict):
    t0 = time.perf_counter()
    seeds = range(10)
    worst = {}
    for prec in ("wide", "standard"):
        op_err = max(r.max_rel_error for s in seeds for r in verify.op_gradcheck(s, prec).values())
        model_err = max(verify.model_gradcheck(verify.micro_config(), s, prec).max_rel_error for s in seeds)
        worst[prec] = (op_err, model_err)
    elapsed = time.perf_counter() - t0
    limits = {p: verify.precision(p).threshold for p in worst}
    ok = all(max(worst[p]) < limits[p] for p in worst) and elapsed < 120
    detail = "; ".join(
        f"{p}: ops {worst[p][0]:.2e}, micro-model {worst[p][1]:.2e} (limit {limits[p]:g})" for p in worst
    )
    verdict(4, "finite-difference gradients over 10 seeds", ok, f"{detail}; {elapsed:.0f}s")


def _fixed_patches(lr_size=16, scale=2):
    from skimage import data as skdata

    pairs = []
    for name in ("astronaut", "coffee", "chelsea", "rocket"):
        img = getattr(skdata, name)()
        h, w = img.shape[:2]
        y, x = h // 3, w // 3
        pairs.append(D.make_pair(name, img[y:y + scale * lr_size, x:x + scale * lr_size], scale))
    lr = np.stack([D.image_to_tensor(D.ImagePlane(p.lr))[0] for p in pairs])
    hr = np.stack([D.image_to_tensor(D.ImagePlane(p.hr))[0] for p in pairs])
    return pairs, lr, hr


def test_criterion_5_overfit(verdict):
    t0 = time.perf_counter()
    pairs, x, y = _fixed_patches()
    model = build_model(variant_config("custom", 2, n_blocks=2, channels=8), seed=0)
    named = model.named_parameters()
    state, config = AdamState.zeros(named), TrainConfig()
    losses = []
    with T.deterministic():
        for _ in range(2000):
            cache = {}
            loss, grad = l1_loss(model.forward(x, cache), y)
            model.backward(grad, cache)
            adam_step(named, state, config)
            losses.append(loss)
    out = model.forward(x)
    psnrs = [D.psnr_y(D.tensor_to_image(out[i:i + 1]), pairs[i].hr, 2) for i in range(len(pairs))]
    reduction = 1 - losses[-1] / losses[0]
    elapsed = time.perf_counter() - t0
    ok = reduction >= 0.9 and min(psnrs) > 35 and elapsed < 600
    verdict(5, "overfit 4 patches in 2000 steps", ok,
            f"L1 {losses[0]:.4f} -> {losses[-1]:.4f} ({100 * reduction:.1f}% lower), "
            f"PSNR-Y min {min(psnrs):.2f} dB, {elapsed:.0f}s")


# Desk-scale beats-bicubic run.  Both sets come from the scikit-image sample
# images; none of the held-out images appears in the training list.
TRAIN_IMAGES = ["chelsea", "hubble_deep_field", "immunohistochemistry", "retina", "brick", "grass",
                "gravel", "coins", "clock", "page", "text", "cell", "colorwheel", "logo"]
HELD_OUT_IMAGES = ["astronaut", "coffee", "rocket", "camera", "moon"]
BEAT_BICUBIC = dict(total_steps=3000, batch_size=4, lr_patch=24, lr=1e-3)


def _sample_image(name):
    from skimage import data as skdata

    img = getattr(skdata, name)()
    return img[..., :3] if img.ndim == 3 else img


def _center_crop(img, size=256):
    h, w = img.shape[:2]
    y, x = (h - size) // 2, (w - size) // 2
    return img[y:y + size, x:x + size]


def test_criterion_6_beats_bicubic(verdict):
    t0 = time.perf_counter()
    train_pairs = [D.make_pair(n, _sample_image(n), 2) for n in TRAIN_IMAGES]
    held_out = [D.make_pair(n, _center_crop(_sample_image(n)), 2) for n in HELD_OUT_IMAGES]
    assert len(train_pairs) <= 50 and len(held_out) == 5
    assert not set(TRAIN_IMAGES) & set(HELD_OUT_IMAGES)
    config = TrainConfig(seed=0, log_interval=100, **BEAT_BICUBIC)
    assert config.total_steps <= 50_000
    model = build_model(variant_config("SD", 2), seed=0)
    with T.deterministic():
        model, _ = train(model, train_pairs, config)
    ours = evaluate(model, held_out, 2).mean_psnr
    bicubic = evaluate(bicubic_upscaler(2), held_out, 2).mean_psnr
    gain = ours - bicubic
    verdict(6, "SD x2 beats bicubic on held-out images", gain >= 0.3,
            f"{ours:.2f} vs {bicubic:.2f} dB, gain {gain:+.2f} dB after {config.total_steps} steps, "
            f"{time.perf_counter() - t0:.0f}s")


def ssim_window_oracle(a, b):
    """Direct evaluation at every valid 11x11 position with an explicit 2-D window."""
    xs = np.arange(11) - 5.0
    g = np.exp(-xs ** 2 / (2 * 1.5 ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for yy in range(a.shape[0] - 10):
        for xx in range(a.shape[1] - 10):
            pa, pb = a[yy:yy + 11, xx:xx + 11], b[yy:yy + 11, xx:xx + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va, vb = (win * (pa - ma) ** 2).sum(), (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_criterion_7_metric_oracles(verdict):
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (40, 36, 3), dtype=np.uint8)
    self_ssim = D.ssim_y(img, img)

    a = rng.integers(0, 256, (24, 27), dtype=np.uint8)
    b = np.clip(a.astype(int) + rng.integers(-25, 26, a.shape), 0, 255).astype(np.uint8)
    ssim_gap = abs(D.ssim_y(D.ImagePlane(a, "Y"), D.ImagePlane(b, "Y"))
                   - ssim_window_oracle(a.astype(float), b.astype(float)))

    zeros = D.ImagePlane(np.zeros((8, 8), np.uint8), "Y")
    full = D.ImagePlane(np.full((8, 8), 255, np.uint8), "Y")
    zero_db = D.psnr_y(zeros, full)
    one = D.psnr_y(D.ImagePlane(np.full((8, 8), 50, np.uint8), "Y"), D.ImagePlane(np.full((8, 8), 51, np.uint8), "Y"))
    one_level_gap = abs(one - 20 * math.log10(255))

    ok = abs(self_ssim - 1) <= 1e-9 and ssim_gap <= 1e-6 and abs(zero_db) <= 1e-6 and one_level_gap <= 1e-6
    verdict(7, "metric oracles", ok,
            f"SSIM self {self_ssim:.12f}, oracle gap {ssim_gap:.1e}, PSNR {zero_db:.2e} dB and {one:.6f} dB")


def _small_pairs():
    from skimage import data as skdata

    img = skdata.astronaut()
    return [D.make_pair(f"crop{i}", img[60 * i:60 * i + 64, 100:164], 2) for i in range(3)]


def _params_equal(a, b):
    return all(na == nb and np.array_equal(sa.value, sb.value)
               for (na, sa), (nb, sb) in zip(a.named_parameters(), b.named_parameters()))


def test_criterion_8_determinism_and_persistence(verdict, tmp_path):
    pairs = _small_pairs()
    cfg = TrainConfig(batch_size=2, lr_patch=12, total_steps=6, seed=3, checkpoint_interval=3)

    def fresh():
        return build_model(variant_config("SD", 2), seed=1)

    with T.deterministic():
        m1, log1 = train(fresh(), pairs, cfg, out_dir=tmp_path / "a")
        m2, log2 = train(fresh(), pairs, cfg)
    same_curve = log1.losses == log2.losses and _params_equal(m1, m2)

    path = save_checkpoint(m1, tmp_path / "rt.a2f")
    back, _, _ = load_checkpoint(path)
    x = np.random.default_rng(0).random((1, 3, 9, 11)).astype(np.float32)
    round_trip = _params_equal(m1, back) and np.array_equal(m1.forward(x), back.forward(x))

    mid, opt, meta = load_checkpoint(tmp_path / "a" / "step_00000003.a2f")
    with T.deterministic():
        resumed, log3 = train(mid, pairs, cfg, optimizer_state=opt)
    resume_ok = _params_equal(resumed, m1) and log3.losses == log1.losses[3:]

    verdict(8, "determinism and persistence", same_curve and round_trip and resume_ok,
            f"loss curve bit-exact {same_curve}, round-trip bit-exact {round_trip}, resume exact {resume_ok}")


def pixel_shuffle_oracle(x, p):
    n, c, h, w = x.shape
    out = np.empty((n, c // (p * p), h * p, w * p), x.dtype)
    for ch in range(c // (p * p)):
        for i in range(p):
            for j in range(p):
                out[:, ch, i::p, j::p] = x[:, ch * p * p + i * p + j]
    return out


def test_criterion_9_structural_contracts(verdict):
    rng = np.random.default_rng(9)
    shapes_ok, lambdas_ok = True, True
    for p in (2, 3, 4):
        for name in VARIANTS:
            model = build_model(variant_config(name, p), seed=p)
            h, w = 3, 5
            y = model.forward(rng.random((2, 3, h, w)).astype(np.float32))
            shapes_ok &= y.shape == (2, 3, p * h, p * w)
            lambdas_ok &= all(lam == (1.0, 1.0, 1.0) for lam in lambda_report(model))

    perm_ok = True
    for p in (2, 3, 4):
        x = rng.permutation(2 * 3 * p * p * 4 * 5).astype(np.float64).reshape(2, 3 * p * p, 4, 5)
        y = T.pixel_shuffle(x, p)
        perm_ok &= np.array_equal(y, pixel_shuffle_oracle(x, p))
        perm_ok &= np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
        perm_ok &= np.array_equal(T.pixel_unshuffle(y, p), x)

    verdict(9, "structural contracts", shapes_ok and lambdas_ok and perm_ok,
            f"shapes {shapes_ok}, fresh lambdas {lambdas_ok}, pixel shuffle permutation {perm_ok}")
