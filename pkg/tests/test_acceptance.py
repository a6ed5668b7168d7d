"""Acceptance criteria, one test each; every test reports a PASS/FAIL line in the terminal summary."""
import json
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from voxface.composer import (Composer, ComposerConfig, GeneratorInput, IdentityInflater, Stage2Config,
                              adv_loss_frame, adv_loss_id, adv_loss_sync, frame_similarity_loss, generate_frame,
                              gradient_loss, prepare_clips, sync_accuracy, total_losses, train_stage2)
from voxface.cpc import CPC, CpcConfig, aggregate_context
from voxface.distill import FeatureBundle, Students, build_teachers, distill_loss, softmax_xent, train_distiller
from voxface.media import split_dataset, synth_toy_dataset
from voxface.metrics import psnr, ssim

from conftest import ACCEPTANCE_LINES, SYNC_STEPS
from oracles import scalar_entropy, scalar_nmse, scalar_xent
from pipeline import run_pipeline
from test_composer import inflation_gradient_error
from test_cpc import cpc_gradient_error
from test_distill import distill_gradient_error
from test_losses import by_mean, const, explicit_gradient_loss, frames, maps, matcher, pixel_gradient_errors, \
    sync_inputs

D64 = torch.float64


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_loss_oracles():
    start = time.perf_counter()
    t = lambda v: torch.tensor(v, dtype=D64)
    checks = []

    def check(name, got, expected):
        checks.append((name, float(got), float(expected)))

    # softmax cross-entropy
    check("xent uniform", softmax_xent(t([0.0, 0.0]), t([0.0, 0.0])), math.log(2))
    check("xent 0.75/0.25", softmax_xent(t([0.0, 0.0]), t([math.log(3), 0.0])),
          -(0.5 * math.log(0.75) + 0.5 * math.log(0.25)))
    check("xent large logits", softmax_xent(t([1000.0, 0.0]), t([1000.0, 0.0])), 0.0)
    # joint distillation loss
    mu, nu = [0.3, -1.2, 0.8], [1.5, 0.2, -0.4, 0.0]
    check("distill matched", distill_loss(FeatureBundle(t(nu), t(mu), t(nu), t(mu))),
          scalar_entropy(mu) + scalar_entropy(nu))
    mu, mu_s, nu, nu_s = [1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [2.0, 0.0]
    check("distill 2-dim", distill_loss(FeatureBundle(t(nu), t(mu), t(nu_s), t(mu_s))),
          0.025 * scalar_nmse(mu, mu_s) + scalar_xent(mu, mu_s) + 0.025 * scalar_nmse(nu, nu_s) + scalar_xent(nu, nu_s))
    # adversarial terms
    check("adv_id constant", adv_loss_id(const(0.5), maps(0.0), maps(0.0)), 0.25)
    check("adv_id minimum", adv_loss_id(by_mean, maps(1.0), maps(0.0)), 0.0)
    check("adv_id worst", adv_loss_id(by_mean, maps(0.0), maps(1.0)), 1.0)
    check("adv_fr T=1", adv_loss_frame(const(0.5), frames(1, 0.2), frames(1, 0.8)), 0.25)
    check("adv_fr T=4", adv_loss_frame(const(0.5), frames(4, 0.2), frames(4, 0.8)), 1.0)
    check("adv_fr minimum", adv_loss_frame(by_mean, frames(6, 1.0), frames(6, 0.0)), 0.0)
    C, real, fake = sync_inputs()
    check("adv_sync zero", adv_loss_sync(const(0.0), C, real, fake, 1, 3), 1.0)
    check("adv_sync minimum", adv_loss_sync(matcher, C, real, fake, 1, 3), 0.0)
    check("adv_sync constant", adv_loss_sync(const(0.5), C, real, fake, 1, 3), 0.5)
    # pixel losses
    x = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(0), dtype=D64)
    check("sim identical", frame_similarity_loss(x, x.clone()), 0.0)
    check("sim 2x2 offset", frame_similarity_loss(torch.full((1, 2, 2), 0.1, dtype=D64), torch.zeros(1, 2, 2, dtype=D64)),
          0.2)
    y = x.clone()
    y[:, 4:] += 0.5
    check("sim bottom half", frame_similarity_loss(x, y), 0.0)
    check("grad identical", gradient_loss(x, x.clone()), 0.0)
    check("grad offset", gradient_loss(x + 0.25, x), 0.0)
    ramp = (torch.arange(4, dtype=D64) / 4).expand(1, 4, 4).clone()
    flat = torch.full((1, 4, 4), 0.5, dtype=D64)
    check("grad ramp", gradient_loss(ramp, flat), explicit_gradient_loss(ramp.numpy(), flat.numpy()))
    # totals
    r = total_losses((0.25, 1.0, 0.5, 0.0, 0.0))
    check("total adv", r.l_adv_total, 1.75)
    check("total", r.l_total, 1.75)
    z = total_losses((0.0,) * 5)
    check("zero totals", z.l_adv_total + z.l_total, 0.0)
    rng = np.random.default_rng(0)
    for i in range(5):
        r = total_losses(rng.uniform(0, 10, size=5).tolist())
        check(f"random adv sum {i}", r.l_adv_total, r.l_adv_id + r.l_adv_fr + r.l_adv_sync)
        check(f"random total sum {i}", r.l_total, r.l_adv_total + r.l_sim + r.l_grad)

    elapsed = time.perf_counter() - start
    worst = max(abs(g - e) for _, g, e in checks)
    failed = [n for n, g, e in checks if abs(g - e) >= 1e-6]
    report(1, not failed and elapsed < 10,
           f"{len(checks)} loss examples, max abs error {worst:.2e} (tol 1e-6), {elapsed:.2f}s (limit 10s)"
           + (f"; failing: {failed}" if failed else ""))


def test_criterion_2_gradient_checks():
    start = time.perf_counter()
    sim, grad = pixel_gradient_errors()
    errors = {"cpc_infonce_loss": cpc_gradient_error(), "distill_loss": distill_gradient_error(),
              "frame_similarity_loss": sim, "gradient_loss": grad, "inflate_identity": inflation_gradient_error()}
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    report(2, worst < 1e-4 and elapsed < 60,
           "finite-difference rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
           + f" (tol 1e-4), {elapsed:.2f}s (limit 60s)")


def test_criterion_3_structure_invariants():
    start = time.perf_counter()
    torch.manual_seed(0)
    cfg = ComposerConfig()
    inflated = IdentityInflater(cfg)(torch.randn(1, cfg.d_id))
    sizes = [m.shape[-1] for m in inflated.maps]
    s = inflated.base_size
    inflation_ok = sizes == [s, 2 * s, 4 * s] and all(m.shape[-2] == m.shape[-1] for m in inflated.maps)

    torch.manual_seed(0)
    cpc = CPC(CpcConfig()).eval()
    T = 8
    z = torch.randn(T, cpc.config.d_z)
    with torch.no_grad():
        C, omega = aggregate_context(z, cpc)
        causal = True
        for t in range(T):
            z2 = z.clone()
            z2[t:] += torch.randn(T - t, cpc.config.d_z)
            C2, omega2 = aggregate_context(z2, cpc)
            causal &= torch.equal(C[:t], C2[:t])
            causal &= torch.equal(omega2, C2[-1])
    omega_ok = torch.equal(omega, C[-1])

    torch.manual_seed(0)
    comp = Composer(cfg).eval()
    nu = torch.randn(cfg.d_id)
    frame = generate_frame(GeneratorInput(torch.randn(cfg.d_c), nu, torch.randn(cfg.d_emo)),
                           comp.inflater(nu[None]), comp.generator)
    frame_ok = frame.shape == (cfg.image_size, cfg.image_size, 3) and frame.min() >= 0 and frame.max() <= 1
    elapsed = time.perf_counter() - start
    report(3, inflation_ok and causal and omega_ok and frame_ok and elapsed < 30,
           f"inflation sizes {sizes}, causality at all {T} steps {causal}, omega == C[T] {omega_ok}, "
           f"frame {frame.shape} in [{frame.min():.3f}, {frame.max():.3f}], {elapsed:.2f}s (limit 30s)")


def test_criterion_4_sync_separation(sync_setup):
    acc = sync_accuracy(sync_setup["d_sync"], sync_setup["heldout"])
    train_acc = sync_accuracy(sync_setup["d_sync"], sync_setup["train"])
    steps = len(sync_setup["curve"])
    secs = sync_setup["seconds"]
    report(4, acc >= 0.90 and steps <= SYNC_STEPS and secs < 600,
           f"held-out balanced accuracy {acc:.3f} (>= 0.90) on {len(sync_setup['heldout'])} clips, "
           f"train {train_acc:.3f}, {steps} D_sync steps, {secs:.0f}s (limit 600s)")


def test_criterion_5_overfit_one_clip():
    start = time.perf_counter()
    clip = synth_toy_dataset(1, 16, 64, 64, seed=0)
    torch.manual_seed(0)
    cpc = CPC(CpcConfig()).eval()  # random frozen audio encoder
    id_teacher, _ = build_teachers(64)
    torch.manual_seed(0)
    students = Students()
    cfg = Stage2Config(epochs=10 ** 6, max_steps=500, batch_size=1, seed=0)
    comp, _, hist = train_stage2(clip, cpc, students, id_teacher, cfg)
    sim = [r.l_sim for r in hist["generator"]]
    ratio = sim[499] / sim[9]
    c = prepare_clips(clip, cpc, students, id_teacher)[0]
    with torch.no_grad():
        gen = comp.generate(c.C, c.nu, c.mu).permute(0, 2, 3, 1).numpy()
    score = float(np.mean([ssim(a, b) for a, b in zip(gen, clip[0].frames)]))
    elapsed = time.perf_counter() - start
    report(5, len(sim) == 500 and ratio <= 0.5 and score >= 0.6 and elapsed < 900,
           f"L_sim step 10 {sim[9]:.2f} -> step 500 {sim[499]:.2f} (ratio {ratio:.3f}, <= 0.5), "
           f"SSIM {score:.3f} (>= 0.6), {elapsed:.0f}s (limit 900s)")


def test_criterion_6_distillation(sync_setup):
    start = time.perf_counter()
    data, cpc = sync_setup["data"], sync_setup["cpc"]
    _, _, curve = train_distiller(data, cpc, build_teachers(32), epochs=50, lr=3e-4, batch_size=8, seed=0)
    loss = curve["loss"]
    decreasing = all(b < a for a, b in zip(loss[:10], loss[1:10]))
    ratios = {k: curve[k][-1] / curve[k][0] for k in ("mse_id", "mse_emo")}
    elapsed = time.perf_counter() - start
    report(6, decreasing and all(r < 0.5 for r in ratios.values()) and elapsed < 300,
           f"L1 strictly decreasing over epochs 1-10 {decreasing} ({loss[0]:.3f} -> {loss[9]:.3f}), "
           f"final/initial normalized MSE id {ratios['mse_id']:.3f} emo {ratios['mse_emo']:.3f} (< 0.5), "
           f"{elapsed:.1f}s (limit 300s)")


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        mse = float(np.mean((a - b) ** 2))
        worst = max(worst, abs(psnr(a, b) - 10 * math.log10(1.0 / mse)))
    base = rng.uniform(0, 0.9, size=(32, 32, 3))
    offset = psnr(base + 1 / 255, base)
    self_ssim = [ssim(x, x) for x in rng.uniform(size=(100, 16, 16, 3))]
    ssim_ok = all(abs(v - 1.0) < 1e-12 for v in self_ssim)
    sizes = split_dataset(range(100), seed=0).sizes()
    report(7, worst < 1e-9 and abs(offset - 48.1308) < 1e-3 and ssim_ok and sizes == (70, 15, 15),
           f"psnr formula max err {worst:.1e} (< 1e-9), offset psnr {offset:.4f} dB (48.1308 +- 1e-3), "
           f"ssim(a,a)=1 on 100 images {ssim_ok}, split {sizes}")


def test_criterion_8_determinism():
    with tempfile.TemporaryDirectory() as d1, tempfile.TemporaryDirectory() as d2:
        codes1, p1 = run_pipeline(Path(d1) / "run")
        codes2, p2 = run_pipeline(Path(d2) / "run")
        stages = ("train-cpc", "train-distill", "train-composer")
        m1 = json.loads((p1["out"] / "manifest.json").read_text())["stages"]
        m2 = json.loads((p2["out"] / "manifest.json").read_text())["stages"]
        diffs = {s: abs(m1[s]["final_loss"] - m2[s]["final_loss"]) for s in stages}
        pngs1 = sorted(p1["generated"].glob("frame_*.png"))
        pngs2 = sorted(p2["generated"].glob("frame_*.png"))
        same_frames = len(pngs1) == len(pngs2) > 0 and all(a.read_bytes() == b.read_bytes()
                                                           for a, b in zip(pngs1, pngs2))
    ok = codes1 == codes2 == [0] * 6 and max(diffs.values()) <= 1e-6 and same_frames
    report(8, ok, "final loss differences " + ", ".join(f"{k} {v:.1e}" for k, v in diffs.items())
           + f" (<= 1e-6), {len(pngs1)} generated frames bit-identical {same_frames}")
