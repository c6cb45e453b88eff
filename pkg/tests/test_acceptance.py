"""Acceptance criteria, each reported as one PASS/FAIL line in the pytest summary."""
import hashlib
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from s2i import data as D
from s2i import loss as L
from s2i import metrics
from s2i import model as M
from s2i import training as TR
from s2i.gabor import make_gabor_bank, make_grating
from s2i.tensor import Tensor

import gradsuite
from helpers import empty_like, overfit_data, overfit_model
from oracles import mse_loop, psnr_scalar, ssim_loop
from test_gabor import preferred_orientation


def test_c1_gradient_suite(criterion):
    t = time.perf_counter()
    worst = gradsuite.run_suite(n_instances=100, seed=0)
    elapsed = time.perf_counter() - t
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-3 and elapsed < 60
    criterion("C1 gradient suite", ok,
              f"{len(worst)} ops x 100 instances, max rel err {err:.2e} ({name}), {elapsed:.1f} s")


def test_c2_metric_oracles(criterion):
    rng = np.random.default_rng(2)
    e_ssim = e_mse = e_psnr = 0.0
    for _ in range(100):
        x, y = rng.random((16, 16)), rng.random((16, 16))
        e_ssim = max(e_ssim, abs(metrics.ssim(x, y) - ssim_loop(x, y)[3].mean()))
        ref_mse = mse_loop(x, y)
        e_mse = max(e_mse, abs(metrics.mse(x, y) - ref_mse))
        e_psnr = max(e_psnr, abs(metrics.psnr(x, y) - psnr_scalar(ref_mse, 1.0)))
    x = rng.random((16, 16))
    self_ssim = abs(metrics.ssim(x, x) - 1)
    big = rng.random((64, 64))
    self_vif = max(abs(metrics.vifp(big, big) - 1), abs(metrics.vifp(x, x, levels=2) - 1))
    zero_db = metrics.psnr_from_mse(1.0, 1.0) == 0.0 and metrics.psnr_from_mse(255.0 ** 2, 255.0) == 0.0
    ok = e_ssim < 1e-6 and e_mse < 1e-7 and e_psnr < 1e-3 and self_ssim < 1e-6 and self_vif < 1e-6 and zero_db
    criterion("C2 metric oracles", ok,
              f"ssim {e_ssim:.1e}, mse {e_mse:.1e}, psnr {e_psnr:.1e}, |ssim(x,x)-1| {self_ssim:.1e}, "
              f"|vifp(x,x)-1| {self_vif:.1e}, psnr(mse=L^2)==0: {zero_db}")


def test_c3_component_product_equals_closed_form(criterion):
    rng = np.random.default_rng(3)
    p = L.SSIMParams()
    assert p.alpha == p.beta == p.gamma_exp == 1 and p.c3 == p.c2 / 2
    worst = max(abs(L.ssim_from_components(x, y, p) - L.ssim(Tensor(x), Tensor(y), p).item())
                for x, y in ((rng.random((16, 16)), rng.random((16, 16))) for _ in range(100)))
    criterion("C3 product vs closed-form SSIM", worst < 1e-6, f"max |diff| {worst:.1e} over 100 pairs")


def test_c4_gabor_orientation_selectivity(criterion):
    bank = make_gabor_bank()
    hits = sum(preferred_orientation(bank, make_grating(32, o * math.pi / 4, wavelength=6.0)) == o
               for o in range(4))
    criterion("C4 Gabor orientation selectivity", hits == 4, f"{hits}/4 gratings matched")


def test_c5_overfit_smoke(criterion):
    ds, cfg = overfit_data()
    model = overfit_model(cfg)
    weight = TR.rf_weight(ds)
    state = TR.AdamState(lr=1e-3)
    t = time.perf_counter()
    best, steps = -1.0, 0
    while steps < 2000:
        for _ in range(50):
            state, _ = TR.step(model, (ds.spikes, ds.targets), "weighted_composite", state, weight=weight)
        steps += 50
        best = metrics.evaluate(TR.predict(model, ds.spikes), ds.targets).ssim
        if best >= 0.95:
            break
    elapsed = time.perf_counter() - t
    ok = best >= 0.95 and elapsed < 300
    criterion("C5 overfit smoke test", ok, f"train SSIM {best:.4f} after {steps} steps, {elapsed:.1f} s")


def ablation_setup():
    imgs = D.stimulus_images(240, 32, seed=7)
    cfg = D.SynthConfig(n_neurons=64, image_size=(32, 32), rf_region=(0.3, 0.3, 0.7, 0.7), gain=100.0,
                        rf_sigma=32 / 6, seed=3)
    train, test = D.split(D.synth_generate(imgs, cfg), 0.8, seed=0)
    return cfg, train, test


def test_c6_ablation_ordering(criterion):
    cfg, train, test = ablation_setup()
    weight = TR.rf_weight(train)
    t = time.perf_counter()
    res = TR.run_ablation(
        lambda s: M.build(M.default_config(64, cfg.n_bins, 32, 32, stem_width=256, seed=s)),
        train, test, TR.TrainConfig(epochs=100, batch_size=16, eval_every=10 ** 6), weight, seeds=(0, 1, 2))
    elapsed = time.perf_counter() - t
    print(TR.ablation_table(res))
    ordered = [res[s]["weighted_composite"]["region_ssim"] >= res[s]["ssim"]["region_ssim"]
               >= res[s]["mse"]["region_ssim"] for s in res]
    ok = sum(ordered) >= 2 and elapsed <= 1800
    per_seed = "; ".join(
        f"seed {s}: " + "/".join(f"{res[s][m]['region_ssim']:.4f}" for m in ("weighted_composite", "ssim", "mse"))
        for s in res)
    criterion("C6 ablation ordering", ok,
              f"{sum(ordered)}/3 seeds ordered (proposed/ssim/mse RF-region SSIM: {per_seed}), "
              f"{len(train)}+{len(test)} samples, {elapsed:.0f} s")


def _cli_pipeline(root: Path) -> str:
    env = {**os.environ, "S2I_THREADS": "1"}
    cmds = [
        ["make-stimuli", "--out", "imgs", "--n", "12", "--size", "32", "--seed", "5"],
        ["gen-synth", "--images", "imgs", "--out", "ds", "--seed", "5"],
        ["train", "--data", "ds/manifest.json", "--loss", "weighted", "--out", "run", "--epochs", "3",
         "--seed", "5"],
        ["eval", "--model", "run/best.ckpt", "--data", "ds/manifest.json", "--out", "report.json"],
        ["reconstruct", "--model", "run/model.ckpt", "--data", "ds/manifest.json", "--ids", "g00000,g00004",
         "--out", "panels"],
        ["gabor", "dump", "--out", "sheet.pgm"],
    ]
    for c in cmds:
        subprocess.run([sys.executable, "-m", "s2i", *c], cwd=root, env=env, check=True,
                       stdout=subprocess.DEVNULL)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_c7_cli_determinism(criterion, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    da, db = _cli_pipeline(tmp_path / "a"), _cli_pipeline(tmp_path / "b")
    n_files = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())
    criterion("C7 CLI determinism", da == db, f"{n_files} artifacts, digests {da[:12]} vs {db[:12]}")


def test_c8_conservation_and_split(criterion):
    rng = np.random.default_rng(8)
    stamps = [np.sort(rng.uniform(0, 5.0, 1000)) for _ in range(100)]
    ev = D.SpikeEventFile(list(range(100)), stamps, 5.0)
    total = int(D.bin_spikes(ev, 10, 5000).sum(dtype=np.int64))
    ds = D.PairedDataset(np.zeros((1800, 1, 1), np.float32), np.zeros((1800, 1, 1)),
                         [f"f{i}" for i in range(1800)])
    train, test = D.split(ds, 0.8, seed=0)
    ok = total == ev.n_events == 100_000 and (len(train), len(test)) == (1440, 360)
    criterion("C8 data conservation and split", ok,
              f"{total}/{ev.n_events} events binned, split {len(train)}/{len(test)}")
