"""Adam training loop for the three compared loss regimes, with checkpoint/resume."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import loss as L
from . import metrics
from .config import ConfigError, canonical_json
from .data import PairedDataset
from .loss import LossConfig, WeightMatrix
from .model import DecoderModel, load, read_records, save, write_records
from .tensor import Tensor

log = logging.getLogger(__name__)

MODE_LABELS = {"mse": "Method 1 (MSE)", "ssim": "Method 2 (SSIM)", "weighted_composite": "Proposed"}


class NonFiniteLossError(FloatingPointError):
    """Loss or activations became NaN/Inf; carries the offending batch ids."""


@dataclass
class TrainConfig:
    loss_mode: str = "weighted_composite"
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    checkpoint_dir: Optional[str] = None
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.loss_mode not in L.LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {', '.join(L.LOSS_MODES)}, got {self.loss_mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    best_ssim: float = -math.inf
    best_epoch: int = -1

    def records(self) -> list[dict]:
        return list(self.epochs)

    def to_jsonl(self) -> str:
        return "".join(canonical_json(r) + "\n" for r in self.epochs)


def adam_update(params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam step over the gradient buffers already on ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr:
            p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


def dropout_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def step(model: DecoderModel, batch, loss_mode: str, state: AdamState,
         loss_cfg: LossConfig | None = None, weight: WeightMatrix | None = None,
         seed: int = 0, batch_ids=None):
    """Forward, backward and one Adam update on ``batch = (spikes, targets)``.

    Returns ``(state, loss value)``. Fixed (non-trainable) parameters are untouched.
    """
    spikes, targets = batch
    dtype = np.dtype(model.config.dtype)
    y = Tensor(np.asarray(targets, dtype=dtype).reshape(len(targets), 1, *np.shape(targets)[-2:]), dtype=dtype)
    model.train()
    model.zero_grad()
    try:
        out = model(Tensor(np.asarray(spikes), dtype=dtype), dropout_seed(seed, state.t))
        value = L.loss_for_mode(loss_mode, out, y, loss_cfg, weight)
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"non-finite values for batch {list(batch_ids or [])}: {exc}") from None
    if not math.isfinite(value.item()):
        raise NonFiniteLossError(f"non-finite loss {value.item()} for batch {list(batch_ids or [])}")
    value.backward()
    adam_update(model.trainable(), state)
    return state, value.item()


def predict(model: DecoderModel, spikes: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode reconstructions, shape (n, H, W)."""
    model.eval()
    dtype = np.dtype(model.config.dtype)
    outs = []
    for start in range(0, len(spikes), batch_size):
        chunk = Tensor(np.asarray(spikes[start:start + batch_size]), dtype=dtype)
        outs.append(model(chunk).data[:, 0])
    return np.concatenate(outs) if outs else np.zeros((0, *model.config.output))


def weight_for(cfg: TrainConfig, dataset: PairedDataset) -> WeightMatrix:
    H, W = dataset.targets.shape[1:]
    return L.weight_from_spec(cfg.loss.weight, H, W)


def rf_weight(dataset: PairedDataset, spec: L.WeightSpec | None = None) -> WeightMatrix:
    """W from the receptive fields recorded in ``dataset.meta``.

    Explicit ``spec.centers`` win; without either, W sits at the image centre.
    """
    spec = spec or L.WeightSpec()
    H, W = dataset.targets.shape[1:]
    centers = dataset.meta.get("rf_centers") or []
    if spec.centers or not centers:
        return L.weight_from_spec(spec, H, W)
    sigmas = dataset.meta.get("rf_sigmas") or []
    sigma = spec.sigma_rf if spec.sigma_rf is not None else (float(np.mean(sigmas)) if sigmas else None)
    return L.make_weight_matrix(H, W, [tuple(c) for c in centers], sigma, spec.combine, spec.normalize)


def _state_arrays(state: AdamState) -> "OrderedDict[str, np.ndarray]":
    arrays = OrderedDict()
    for name in sorted(state.m):
        arrays[f"m.{name}"] = state.m[name]
        arrays[f"v.{name}"] = state.v[name]
    return arrays


def save_training_state(path, state: AdamState, epoch: int, log_: TrainLog) -> None:
    header = {"kind": "adam", "version": 1, "t": state.t, "epoch": epoch, "lr": state.lr,
              "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
              "best_ssim": log_.best_ssim if math.isfinite(log_.best_ssim) else None,
              "best_epoch": log_.best_epoch, "epochs": log_.epochs}
    write_records(path, header, _state_arrays(state))


def load_training_state(path):
    header, arrays = read_records(path)
    if header.get("kind") != "adam":
        raise ConfigError(f"{path}: not an optimizer state file")
    state = AdamState(header["lr"], header["beta1"], header["beta2"], header["eps"], header["t"])
    for key, arr in arrays.items():
        which, name = key.split(".", 1)
        (state.m if which == "m" else state.v)[name] = arr.copy()
    log_ = TrainLog(epochs=header["epochs"], best_epoch=header["best_epoch"],
                    best_ssim=-math.inf if header["best_ssim"] is None else header["best_ssim"])
    return state, header["epoch"], log_


def fit(model: DecoderModel, train: PairedDataset, test: PairedDataset, cfg: TrainConfig,
        weight: WeightMatrix | None = None, resume: bool = False, max_epoch: int | None = None):
    """Train for ``cfg.epochs`` epochs; returns ``(model, TrainLog)``.

    With ``cfg.checkpoint_dir`` set, writes ``last.ckpt`` + ``last.adam`` every
    epoch, ``best.ckpt`` whenever test SSIM improves, and ``train_log.jsonl``.
    ``resume=True`` continues from ``last.ckpt`` bit-exactly. ``max_epoch``
    stops early (used to simulate an interrupted run).
    """
    cfg.validate()
    if set(train.ids) & set(test.ids):
        raise ConfigError("train and test splits share ids")
    weight = weight if weight is not None else weight_for(cfg, train)
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    tlog = TrainLog()
    start_epoch = 0
    if resume:
        if ckdir is None:
            raise ConfigError("resume needs a checkpoint_dir")
        model = load(ckdir / "last.ckpt")
        state, start_epoch, tlog = load_training_state(ckdir / "last.adam")
    t_start = time.perf_counter()
    n = len(train)
    end_epoch = cfg.epochs if max_epoch is None else min(cfg.epochs, max_epoch)
    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            state, value = step(model, (train.spikes[idx], train.targets[idx]), cfg.loss_mode, state,
                                cfg.loss, weight, cfg.seed, [train.ids[i] for i in idx])
            losses.append(value * len(idx))
        record = {"epoch": epoch + 1, "step": state.t, "train_loss": float(np.sum(losses) / n)}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if len(test):
                rep = metrics.evaluate(predict(model, test.spikes), test.targets, ids=test.ids)
                record["test"] = {k: metrics._json_float(v) for k, v in rep.as_row().items()}
                if rep.ssim > tlog.best_ssim:
                    tlog.best_ssim, tlog.best_epoch = rep.ssim, epoch + 1
                    if ckdir:
                        save(model, ckdir / "best.ckpt", {"epoch": epoch + 1, "test_ssim": rep.ssim})
        tlog.epochs.append(record)
        log.info("epoch %d loss %.6f", epoch + 1, record["train_loss"])
        if ckdir:
            save(model, ckdir / "last.ckpt", {"epoch": epoch + 1})
            save_training_state(ckdir / "last.adam", state, epoch + 1, tlog)
            (ckdir / "train_log.jsonl").write_text(tlog.to_jsonl())
    tlog.wall_time = time.perf_counter() - t_start
    return model, tlog


def region_ssim(x_hat: np.ndarray, y: np.ndarray, weight: WeightMatrix, params=None,
                n_sigma: float = 1.0) -> float:
    """Mean SSIM over window positions whose centre lies within ``n_sigma`` RF radii."""
    p = params or L.SSIMParams()
    smap = L.ssim_map(Tensor(np.asarray(x_hat, np.float64)), Tensor(np.asarray(y, np.float64)), p).data
    half = p.window_size // 2
    H, W = weight.shape
    mask = weight.region_mask(n_sigma)[half:H - half, half:W - half]
    if not mask.any():
        raise ValueError("receptive-field region contains no complete SSIM window")
    return float(smap[:, 0][:, mask].mean())


def run_ablation(build_model, train: PairedDataset, test: PairedDataset, cfg: TrainConfig,
                 weight: WeightMatrix, seeds=(0, 1, 2), modes=L.LOSS_MODES):
    """Train every loss mode on identical data for each seed.

    ``build_model(seed)`` returns a freshly initialized model. Returns
    ``{seed: {mode: {"report": MetricsReport, "region_ssim": float}}}``.
    """
    results: dict = {}
    for seed in seeds:
        results[seed] = {}
        for mode in modes:
            run_cfg = TrainConfig(**{**cfg.__dict__, "loss_mode": mode, "seed": seed, "checkpoint_dir": None})
            model, _ = fit(build_model(seed), train, test, run_cfg, weight)
            recon = predict(model, test.spikes)
            rep = metrics.evaluate(recon, test.targets, ids=test.ids, label=MODE_LABELS[mode])
            results[seed][mode] = {"report": rep, "region_ssim": region_ssim(recon, test.targets, weight)}
            log.info("seed %d %s: ssim %.4f region %.4f", seed, mode, rep.ssim, results[seed][mode]["region_ssim"])
    return results


def ablation_table(results) -> str:
    """Per-mode metric means over seeds, then each seed's RF-region SSIM."""
    seeds = list(results)
    modes = list(results[seeds[0]])
    lines = []
    reports = []
    for mode in modes:
        reps = [results[s][mode]["report"] for s in seeds]
        reports.append(metrics.MetricsReport(
            mse=float(np.mean([r.mse for r in reps])), psnr=float(np.mean([r.psnr for r in reps])),
            vifp=float(np.mean([r.vifp for r in reps])), ssim=float(np.mean([r.ssim for r in reps])),
            data_range=reps[0].data_range, label=MODE_LABELS[mode]))
    lines.append(metrics.format_table(reports))
    for mode in modes:
        vals = [results[s][mode]["region_ssim"] for s in seeds]
        lines.append(f"{MODE_LABELS[mode]:<18} RF-region SSIM " + " ".join(f"{v:.4f}" for v in vals))
    return "\n".join(lines) + "\n"


def dump_log(tlog: TrainLog, path) -> None:
    Path(path).write_text(tlog.to_jsonl())


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
