"""Command-line pipeline: synthesize data, train, evaluate, reconstruct, inspect filters.

Exit status is 0 on success, 2 for usage or configuration problems and 1 for
failures at run time. Messages go to standard error; tables go to standard
output. ``S2I_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics
from . import model as M
from . import training as TR
from .config import ConfigError, canonical_json, load_json_config, to_dict
from .gabor import GaborConfig, bank_from_config, contact_sheet

log = logging.getLogger("s2i")

LOSS_CHOICES = {"mse": "mse", "ssim": "ssim", "weighted": "weighted_composite"}
SEPARATOR_PX = 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit status 2."""


@dataclass
class TrainSettings:
    """``train --config`` file: optimizer/loss settings plus the model trunk knobs."""

    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    stem_width: int = 256
    latent_channels: int = 8
    dropout_p: float = 0.25
    gabor: GaborConfig = field(default_factory=GaborConfig)


def _image_files(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise UsageError(f"image directory {folder} does not exist")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise UsageError(f"no .pgm images in {folder}")
    return files


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} {path} not found")
    return path


def _load_manifest(path: Path, splits=("train", "test")):
    _require_file(path, "manifest")
    return D.load_manifest(path, splits)


def cmd_make_stimuli(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(D.stimulus_images(args.n, args.size, seed=args.seed)):
        D.save_pgm(img, out / f"g{i:05d}.pgm")
    print(f"wrote {args.n} stimuli to {out}")
    return 0


def cmd_gen_synth(args) -> int:
    files = _image_files(Path(args.images))
    cfg = load_json_config(D.SynthConfig, _require_file(Path(args.config), "config")) if args.config \
        else D.SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    H, W = cfg.image_size
    images = [D.prepare_image(D.load_pgm(f), H, W) for f in files]
    ds = D.synth_generate(images, cfg, ids=[f.stem for f in files])
    path = D.write_dataset(ds, cfg, args.out)
    print(f"wrote {len(ds)} items ({ds.spikes.sum():.0f} spikes) to {path}")
    return 0


def cmd_train(args) -> int:
    settings = load_json_config(TrainSettings, _require_file(Path(args.config), "config")) if args.config \
        else TrainSettings()
    tc = settings.train
    tc.loss_mode = LOSS_CHOICES[args.loss]
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.seed is not None:
        tc.seed = args.seed
    if args.batch_size is not None:
        tc.batch_size = args.batch_size
    if args.lr is not None:
        tc.lr = args.lr
    out = Path(args.out)
    tc.checkpoint_dir = str(out)
    tc.validate()
    parts = _load_manifest(Path(args.data))
    train, test = parts["train"], parts["test"]
    if not len(train):
        raise UsageError(f"{args.data}: no training items")
    _, n_neurons, n_bins = train.spikes.shape
    H, W = train.targets.shape[1:]
    mcfg = M.default_config(n_neurons, n_bins, H, W, stem_width=settings.stem_width,
                            latent_channels=settings.latent_channels, seed=tc.seed,
                            dropout_p=settings.dropout_p, gabor=settings.gabor)
    model = M.build(mcfg)
    weight = TR.rf_weight(train, tc.loss.weight)
    model, tlog = TR.fit(model, train, test, tc, weight)
    M.save(model, out / "model.ckpt", {"epochs": tc.epochs, "loss_mode": tc.loss_mode, "seed": tc.seed})
    saved = to_dict(settings)
    saved["train"]["checkpoint_dir"] = None  # keep artifacts independent of where they were written
    (out / "train_config.json").write_text(canonical_json(saved) + "\n")
    if len(test):
        rep = metrics.evaluate(TR.predict(model, test.spikes), test.targets, ids=test.ids,
                               label=TR.MODE_LABELS[tc.loss_mode])
        (out / "report.json").write_text(rep.to_json())
        sys.stdout.write(rep.to_table())
    log.info("trained %d epochs in %.1f s", tc.epochs, tlog.wall_time)
    return 0


def _load_model(path: Path) -> M.DecoderModel:
    return M.load(_require_file(path, "checkpoint"))


def cmd_eval(args) -> int:
    splits = ("train", "test") if args.split == "all" else (args.split,)
    parts = _load_manifest(Path(args.data), splits)
    ds = parts[splits[0]] if len(splits) == 1 else _concat(parts["train"], parts["test"])
    if not len(ds):
        raise UsageError(f"{args.data}: split '{args.split}' is empty")
    if args.identity:
        recon, label = ds.targets, "identity"
    else:
        if not args.model:
            raise UsageError("eval needs --model unless --identity is given")
        model = _load_model(Path(args.model))
        _check_compatible(model, ds)
        recon, label = TR.predict(model, ds.spikes), Path(args.model).stem
    rep = metrics.evaluate(recon, ds.targets, ids=ds.ids, label=label)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rep.to_json())
    sys.stdout.write(rep.to_table())
    return 0


def _concat(a: D.PairedDataset, b: D.PairedDataset) -> D.PairedDataset:
    return D.PairedDataset(np.concatenate([a.spikes, b.spikes]), np.concatenate([a.targets, b.targets]),
                           a.ids + b.ids, "all", dict(a.meta))


def _check_compatible(model: M.DecoderModel, ds: D.PairedDataset) -> None:
    cfg = model.config
    if ds.spikes.shape[1:] != (cfg.n_neurons, cfg.n_bins) or ds.targets.shape[1:] != tuple(cfg.output):
        raise UsageError(f"checkpoint expects {cfg.n_neurons}x{cfg.n_bins} spikes and {cfg.output} images, "
                         f"data has {ds.spikes.shape[1:]} and {ds.targets.shape[1:]}")


def panel(target: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """target | white separator | reconstruction."""
    sep = np.ones((target.shape[0], SEPARATOR_PX))
    return np.concatenate([target, sep, recon], axis=1)


def cmd_reconstruct(args) -> int:
    parts = _load_manifest(Path(args.data))
    ds = _concat(parts["train"], parts["test"])
    ids = [s for s in args.ids.split(",") if s]
    if not ids:
        raise UsageError("--ids is empty")
    unknown = [i for i in ids if i not in set(ds.ids)]
    if unknown:
        raise UsageError(f"ids not in manifest: {', '.join(unknown)}")
    model = _load_model(Path(args.model))
    _check_compatible(model, ds)
    sub = ds.by_ids(ids)
    recon = TR.predict(model, sub.spikes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item_id, target, rec in zip(sub.ids, sub.targets, recon):
        D.save_pgm(panel(target, rec), out / f"{item_id}.pgm")
    print(f"wrote {len(ids)} panels to {out}")
    return 0


def cmd_gabor_dump(args) -> int:
    cfg = load_json_config(GaborConfig, _require_file(Path(args.config), "config")) if args.config \
        else GaborConfig()
    sheet = contact_sheet(bank_from_config(cfg))
    D.save_pgm(sheet, args.out)
    print(f"wrote {cfg.n_scales}x{cfg.n_orientations} contact sheet to {args.out}")
    return 0


def cmd_weight_dump(args) -> int:
    parts = _load_manifest(Path(args.data), ("train",))
    w = TR.rf_weight(parts["train"]).w
    D.save_pgm(w / w.max(), args.out)
    print(f"wrote {w.shape[0]}x{w.shape[1]} weight map to {args.out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2i", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-stimuli", help="write circular grating PGMs")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_stimuli)

    s = sub.add_parser("gen-synth", help="simulate a spiking population viewing a folder of PGMs")
    s.add_argument("--images", required=True)
    s.add_argument("--config", help="SynthConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", help="fit the decoder on a manifest")
    s.add_argument("--data", required=True, help="manifest.json")
    s.add_argument("--loss", required=True, choices=sorted(LOSS_CHOICES))
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--config", help="training settings JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MSE, PSNR, VIFP and SSIM of a checkpoint on a manifest")
    s.add_argument("--model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--identity", action="store_true", help="score the targets against themselves")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("reconstruct", help="target | reconstruction PGM panels")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ids", required=True, help="comma-separated item ids")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    g = sub.add_parser("gabor", help="Gabor bank utilities")
    gsub = g.add_subparsers(dest="gabor_command", required=True, parser_class=_Parser)
    s = gsub.add_parser("dump", help="contact sheet: scales as rows, orientations as columns")
    s.add_argument("--config", help="GaborConfig JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gabor_dump)

    w = sub.add_parser("weight", help="receptive-field loss weight utilities")
    wsub = w.add_subparsers(dest="weight_command", required=True, parser_class=_Parser)
    s = wsub.add_parser("dump", help="W of a manifest's receptive fields as a PGM scaled to its peak")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weight_dump)
    return p


def _thread_limit():
    raw = os.environ.get("S2I_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"S2I_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"S2I_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _thread_limit()
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, D.ParseError, M.CheckpointError) as exc:
        print(f"s2i: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"s2i: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
