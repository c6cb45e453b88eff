"""Spike-raster to image decoder network.

Layout: the flattened (neurons x bins) raster passes a dense stem and is
reshaped into a latent feature map; a convolutional encoder (first stage uses
the Gabor bank) with max-pooling follows, then transposed convolutions
upsample to the target image. The last stage ends in a sigmoid so pixels lie
in [0, 1].
"""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ConfigError, canonical_json, from_dict, to_dict
from .gabor import GaborConfig, bank_from_config, init_first_layer
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

MAGIC = b"S2I1"


class CheckpointError(ValueError):
    """Unreadable, truncated or foreign checkpoint file."""


@dataclass
class ConvStage:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None  # None keeps the spatial size ("same")
    pool: int = 2  # 1 disables pooling
    gabor: bool = False


@dataclass
class DeconvStage:
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1


@dataclass
class ModelConfig:
    n_neurons: int
    n_bins: int
    output: tuple[int, int]
    latent: tuple[int, int, int]
    encoder: list[ConvStage]
    decoder: list[DeconvStage]
    stem_width: int = 0  # 0: one dense layer straight to the latent map
    dropout_p: float = 0.25
    gabor: GaborConfig = field(default_factory=GaborConfig)
    seed: int = 0
    dtype: str = "float32"

    def shape_chain(self) -> list[tuple[str, tuple[int, int, int]]]:
        """(stage name, output C x H x W) after every stage; raises ConfigError on a break."""
        if self.n_neurons < 1 or self.n_bins < 1:
            raise ConfigError("stem: n_neurons and n_bins must be >= 1")
        if self.stem_width < 0:
            raise ConfigError("stem: stem_width must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"stem: dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        c, h, w = self.latent
        if min(c, h, w) < 1:
            raise ConfigError(f"latent: extents must be positive, got {self.latent}")
        chain = [("latent", (c, h, w))]
        for i, st in enumerate(self.encoder):
            name = f"encoder[{i}]"
            if st.gabor:
                if i != 0:
                    raise ConfigError(f"{name}: only the first encoder stage may use the Gabor bank")
                n_bank = self.gabor.n_orientations * self.gabor.n_scales
                if st.out_channels != n_bank:
                    raise ConfigError(f"{name}: Gabor stage must have {n_bank} output channels, "
                                      f"got {st.out_channels}")
                if st.kernel != self.gabor.size:
                    raise ConfigError(f"{name}: Gabor stage kernel {st.kernel} != bank size {self.gabor.size}")
            pad = st.kernel // 2 if st.padding is None else st.padding
            if st.kernel > h + 2 * pad or st.kernel > w + 2 * pad:
                raise ConfigError(f"{name}: kernel {st.kernel} larger than padded input {h}x{w}")
            h = T.conv_output_size(h, st.kernel, st.stride, pad)
            w = T.conv_output_size(w, st.kernel, st.stride, pad)
            if st.pool > 1:
                if st.pool > h or st.pool > w:
                    raise ConfigError(f"{name}: pool {st.pool} larger than feature map {h}x{w}")
                h, w = (h - st.pool) // st.pool + 1, (w - st.pool) // st.pool + 1
            c = st.out_channels
            chain.append((name, (c, h, w)))
        for i, st in enumerate(self.decoder):
            name = f"decoder[{i}]"
            h = T.conv_transpose_output_size(h, st.kernel, st.stride, st.padding)
            w = T.conv_transpose_output_size(w, st.kernel, st.stride, st.padding)
            if h < 1 or w < 1:
                raise ConfigError(f"{name}: output extent not positive ({h}x{w})")
            c = st.out_channels
            chain.append((name, (c, h, w)))
        if not self.decoder:
            raise ConfigError("decoder: at least one stage is required")
        if (c, h, w) != (1, *self.output):
            raise ConfigError(f"{chain[-1][0]}: produces {c}x{h}x{w}, config output is 1x{self.output[0]}x{self.output[1]}")
        return chain

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return from_dict(cls, data)


def default_config(n_neurons: int, n_bins: int, height: int, width: int, stem_width: int = 0,
                   latent_channels: int = 8, seed: int = 0, **overrides) -> ModelConfig:
    """Two encoder stages (Gabor then learned) and four 2x transposed-conv stages.

    Needs height and width divisible by 16; the latent map is a quarter of the output size.
    """
    if height % 16 or width % 16:
        raise ConfigError(f"default layout needs sides divisible by 16, got {height}x{width}")
    gabor = overrides.pop("gabor", GaborConfig())
    n_bank = gabor.n_orientations * gabor.n_scales
    cfg = ModelConfig(
        n_neurons=n_neurons, n_bins=n_bins, output=(height, width),
        latent=(latent_channels, height // 4, width // 4),
        encoder=[ConvStage(n_bank, kernel=gabor.size, gabor=True), ConvStage(16, kernel=3)],
        decoder=[DeconvStage(16), DeconvStage(16), DeconvStage(8), DeconvStage(1)],
        stem_width=stem_width, gabor=gabor, seed=seed, **overrides)
    cfg.shape_chain()
    return cfg


def macaque_config(bin_ms: float = 5.0, seed: int = 0) -> ModelConfig:
    """100 neurons over a 105 ms window, 80x80 target."""
    return default_config(100, int(round(105 / bin_ms)), 80, 80, stem_width=4096, seed=seed)


def salamander_config(n_bins: int = 10, seed: int = 0) -> ModelConfig:
    """49 retinal ganglion cells, 10 ms bins, 64x64 frames."""
    return default_config(49, n_bins, 64, 64, stem_width=1024, seed=seed)


def tiny_config(seed: int = 0, dtype: str = "float32", dropout_p: float = 0.0) -> ModelConfig:
    """8 neurons x 4 bins to 16x16, small enough for finite-difference checks."""
    return ModelConfig(
        n_neurons=8, n_bins=4, output=(16, 16), latent=(2, 8, 8),
        encoder=[ConvStage(8, kernel=7, gabor=True, pool=2), ConvStage(4, kernel=3, pool=1)],
        decoder=[DeconvStage(4), DeconvStage(1)],
        stem_width=16, dropout_p=dropout_p, seed=seed, dtype=dtype)


def _uniform(rng, shape, fan_in, gain, dtype):
    bound = np.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class DecoderModel:
    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params
        self.training = False

    def train(self) -> "DecoderModel":
        self.training = True
        return self

    def eval(self) -> "DecoderModel":
        self.training = False
        return self

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if p.requires_grad]

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, spikes, dropout_seed: int = 0) -> Tensor:
        return forward(self, spikes, dropout_seed)


def build(config: ModelConfig) -> DecoderModel:
    """Initialize every parameter deterministically from ``config.seed``."""
    chain = config.shape_chain()
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    n_in = config.n_neurons * config.n_bins
    n_latent = int(np.prod(config.latent))
    if config.stem_width:
        params["stem.0.weight"] = _uniform(rng, (n_in, config.stem_width), n_in, 6.0, dtype)
        params["stem.0.bias"] = Tensor(np.zeros(config.stem_width), requires_grad=True, dtype=dtype)
        n_in = config.stem_width
    params["stem.1.weight"] = _uniform(rng, (n_in, n_latent), n_in, 3.0, dtype)
    params["stem.1.bias"] = Tensor(np.zeros(n_latent), requires_grad=True, dtype=dtype)

    c_in = config.latent[0]
    for i, st in enumerate(config.encoder):
        if st.gabor:
            bank = bank_from_config(config.gabor)
            params[f"encoder.{i}.weight"] = init_first_layer(
                bank, config.gabor.trainable, in_channels=c_in, expected_size=st.kernel, dtype=dtype)
        else:
            fan_in = c_in * st.kernel * st.kernel
            params[f"encoder.{i}.weight"] = _uniform(rng, (st.out_channels, c_in, st.kernel, st.kernel),
                                                     fan_in, 6.0, dtype)
        params[f"encoder.{i}.bias"] = Tensor(np.zeros(st.out_channels), requires_grad=True, dtype=dtype)
        c_in = st.out_channels
    for i, st in enumerate(config.decoder):
        last = i == len(config.decoder) - 1
        fan_in = c_in * st.kernel * st.kernel / (st.stride * st.stride)
        params[f"decoder.{i}.weight"] = _uniform(rng, (c_in, st.out_channels, st.kernel, st.kernel),
                                                 fan_in, 3.0 if last else 6.0, dtype)
        params[f"decoder.{i}.bias"] = Tensor(np.zeros(st.out_channels), requires_grad=True, dtype=dtype)
        c_in = st.out_channels
    model = DecoderModel(config, params)
    log.info("built decoder: %d parameters, shape chain %s", model.n_parameters(),
             " -> ".join(f"{name}{shape}" for name, shape in chain))
    return model


def _channel_bias(b: Tensor) -> Tensor:
    return b.reshape(1, b.shape[0], 1, 1)


def forward(model: DecoderModel, spikes, dropout_seed: int = 0) -> Tensor:
    """Map spike counts (B, N, T) to images (B, 1, H, W) in [0, 1].

    Dropout is active only in training mode; its mask derives from ``dropout_seed``.
    """
    cfg = model.config
    p = model.params
    x = spikes if isinstance(spikes, Tensor) else Tensor(np.asarray(spikes), dtype=np.dtype(cfg.dtype))
    if x.ndim != 3 or x.shape[1:] != (cfg.n_neurons, cfg.n_bins):
        raise DimensionError(f"spikes must be (B, {cfg.n_neurons}, {cfg.n_bins}), got {x.shape}")
    B = x.shape[0]
    h = x.reshape(B, cfg.n_neurons * cfg.n_bins)
    if cfg.stem_width:
        h = T.relu(T.dense(h, p["stem.0.weight"], p["stem.0.bias"]))
        h = T.dropout(h, cfg.dropout_p, model.training, dropout_seed)
    h = T.dense(h, p["stem.1.weight"], p["stem.1.bias"])
    h = h.reshape(B, *cfg.latent)
    for i, st in enumerate(cfg.encoder):
        pad = st.kernel // 2 if st.padding is None else st.padding
        h = T.conv2d(h, p[f"encoder.{i}.weight"], st.stride, pad) + _channel_bias(p[f"encoder.{i}.bias"])
        h = T.relu(h)
        if st.pool > 1:
            h = T.maxpool2d(h, st.pool, st.pool)
    for i, st in enumerate(cfg.decoder):
        h = T.conv_transpose2d(h, p[f"decoder.{i}.weight"], st.stride, st.padding) \
            + _channel_bias(p[f"decoder.{i}.bias"])
        h = T.sigmoid(h) if i == len(cfg.decoder) - 1 else T.relu(h)
    return h


# ---------------------------------------------------------------- checkpoints

def write_records(path, header: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """Magic, length-prefixed canonical JSON header, then one record per array.

    Record: u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 LE payload.
    """
    blob = canonical_json(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    for name, arr in arrays.items():
        enc = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_records(path):
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an S2I1 checkpoint")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(raw):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return header, arrays


def save(model: DecoderModel, path, meta: dict | None = None) -> None:
    header = {"kind": "model", "version": 1, "config": model.config.to_dict(), "meta": meta or {}}
    write_records(path, header, OrderedDict((n, p.data) for n, p in model.params.items()))


def load(path) -> DecoderModel:
    header, arrays = read_records(path)
    if header.get("kind") != "model" or header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint kind/version {header.get('kind')}/{header.get('version')}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from None
    model = build(config)
    missing = [n for n in model.params if n not in arrays]
    extra = [n for n in arrays if n not in model.params]
    if missing or extra:
        raise CheckpointError(f"{path}: parameter mismatch, missing {missing}, unexpected {extra}")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data[...] = arrays[name]
    return model


def checkpoint_meta(path) -> dict:
    header, _ = read_records(path)
    return header.get("meta", {})
