"""Spike ingestion, image targets, splits and the synthetic retina generator.

Interchange formats:

* events CSV: header ``neuron_id,timestamp_s``, one spike per row
* targets: binary PGM (P5, 8-bit)
* manifest: JSON listing item ids, file paths, split assignment and seed
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, canonical_json
from .gabor import make_grating

MANIFEST_FORMAT = "s2i-manifest-1"
CSV_HEADER = ("neuron_id", "timestamp_s")


class ParseError(ValueError):
    """Malformed input file; the message carries the file and line number."""


# ---------------------------------------------------------------- spike events

@dataclass
class SpikeEventFile:
    neuron_ids: list[int]
    timestamps: list[np.ndarray]  # seconds, one non-decreasing array per neuron
    duration: float

    def __post_init__(self):
        if len(self.neuron_ids) != len(self.timestamps):
            raise ValueError("one timestamp array per neuron id is required")
        for nid, ts in zip(self.neuron_ids, self.timestamps):
            if ts.size and (np.any(np.diff(ts) < 0) or ts[0] < 0 or ts[-1] > self.duration):
                raise ValueError(f"neuron {nid}: timestamps must be non-decreasing within [0, duration]")

    @property
    def n_events(self) -> int:
        return int(sum(ts.size for ts in self.timestamps))


def bin_edges(t0: float, bin_ms: float, n_bins: int) -> np.ndarray:
    """Left-closed bin boundaries t0 + b * bin in seconds."""
    return t0 + np.arange(n_bins + 1) * (bin_ms / 1000.0)


def bin_spikes(events: SpikeEventFile, bin_ms: float, window_ms: float, t0: float = 0.0) -> np.ndarray:
    """Count spikes per neuron in [t0 + b*bin, t0 + (b+1)*bin); returns (N, n_bins) float32.

    ``t0`` is in seconds, bin and window widths in milliseconds.
    """
    if bin_ms <= 0:
        raise ConfigError(f"bin_ms must be positive, got {bin_ms}")
    n_bins = window_ms / bin_ms
    if window_ms <= 0 or abs(n_bins - round(n_bins)) > 1e-9:
        raise ConfigError(f"window {window_ms} ms is not a positive multiple of the {bin_ms} ms bin")
    n_bins = int(round(n_bins))
    if t0 < 0 or t0 + window_ms / 1000.0 > events.duration + 1e-12:
        raise IndexError(f"window [{t0}, {t0 + window_ms / 1000.0}] s exceeds the {events.duration} s recording")
    edges = bin_edges(t0, bin_ms, n_bins)
    counts = np.zeros((len(events.neuron_ids), n_bins), dtype=np.float32)
    for n, ts in enumerate(events.timestamps):
        idx = np.searchsorted(edges, ts, side="right") - 1
        idx = idx[(idx >= 0) & (idx < n_bins)]
        counts[n] = np.bincount(idx, minlength=n_bins)
    return counts


def load_csv_events(path, duration: float | None = None, neuron_ids=None) -> SpikeEventFile:
    """Read ``neuron_id,timestamp_s`` rows.

    ``neuron_ids`` fixes the neuron order (neurons without spikes stay empty);
    otherwise the sorted ids present in the file are used. ``duration``
    defaults to the last timestamp.
    """
    path = Path(path)
    per: dict[int, list[float]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"{path}:1: expected header 'neuron_id,timestamp_s', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                nid, ts = int(row[0]), float(row[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if not math.isfinite(ts) or ts < 0:
                raise ParseError(f"{path}:{lineno}: timestamp must be finite and non-negative")
            per.setdefault(nid, []).append(ts)
    ids = sorted(per) if neuron_ids is None else list(neuron_ids)
    unknown = sorted(set(per) - set(ids))
    if unknown:
        raise ParseError(f"{path}: neuron ids {unknown} not in the expected id list")
    stamps = [np.sort(np.asarray(per.get(i, []), dtype=np.float64)) for i in ids]
    if duration is None:
        duration = max((s[-1] for s in stamps if s.size), default=0.0)
    return SpikeEventFile(ids, stamps, float(duration))


def save_csv_events(events: SpikeEventFile, path) -> None:
    rows = sorted((ts, nid) for nid, arr in zip(events.neuron_ids, events.timestamps) for ts in arr)
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for ts, nid in rows:
            fh.write(f"{nid},{ts:.9f}\n")


def counts_to_events(counts: np.ndarray, bin_ms: float, rng: np.random.Generator,
                     neuron_ids=None) -> SpikeEventFile:
    """Place each binned spike at a random time strictly inside its bin."""
    n_neurons, n_bins = counts.shape
    bin_s = bin_ms / 1000.0
    stamps = []
    for n in range(n_neurons):
        c = counts[n].astype(np.int64)
        bins = np.repeat(np.arange(n_bins), c)
        offsets = rng.uniform(0.01, 0.99, size=bins.size)
        # round to the CSV resolution up front so a reload bins identically
        stamps.append(np.sort(np.round((bins + offsets) * bin_s, 9)))
    ids = list(range(n_neurons)) if neuron_ids is None else list(neuron_ids)
    return SpikeEventFile(ids, stamps, n_bins * bin_s)


# ---------------------------------------------------------------- images

def load_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) into a float64 image in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed PGM header {tokens!r}") from None
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise ParseError(f"{path}: raster truncated ({len(data)} of {width * height} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pgm(image: np.ndarray, path) -> None:
    """Write a [0, 1] image as 8-bit P5; values are clipped then rounded."""
    img = to_uint8(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return _bilinear_matrix(img.shape[0], out_h) @ img @ _bilinear_matrix(img.shape[1], out_w).T


def prepare_image(raw, out_h: int, out_w: int) -> np.ndarray:
    """Grayscale (channel average), bilinear resize, scale to [0, 1].

    Integer inputs are divided by their dtype maximum; float inputs are taken
    to be on [0, 1] already.
    """
    arr = np.asarray(raw)
    if np.issubdtype(arr.dtype, np.integer):
        img = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    else:
        img = arr.astype(np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d or HxWxC image, got shape {arr.shape}")
    return np.clip(resize_bilinear(img, out_h, out_w), 0.0, 1.0)


# ---------------------------------------------------------------- datasets

@dataclass
class PairedDataset:
    spikes: np.ndarray  # (n, N, T) float32 counts
    targets: np.ndarray  # (n, H, W) float in [0, 1]
    ids: list[str]
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.spikes) != len(self.targets) or len(self.spikes) != len(self.ids):
            raise ValueError("spikes, targets and ids must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("dataset ids must be unique")
        if self.spikes.size and self.spikes.min() < 0:
            raise ValueError("spike counts must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index, split: str | None = None) -> "PairedDataset":
        index = np.asarray(index, dtype=np.int64)
        return PairedDataset(self.spikes[index], self.targets[index], [self.ids[i] for i in index],
                             split or self.split, dict(self.meta))

    def by_ids(self, ids) -> "PairedDataset":
        pos = {k: i for i, k in enumerate(self.ids)}
        return self.subset([pos[i] for i in ids])


def split(dataset: PairedDataset, fraction: float = 0.8, seed: int = 0):
    """Seeded permutation; the first floor(n * fraction) items train, the rest test."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * fraction))
    return dataset.subset(perm[:n_train], "train"), dataset.subset(perm[n_train:], "test")


def shuffle_frames(dataset: PairedDataset, seed: int = 0) -> PairedDataset:
    """Permute items (keeping each spike raster with its frame) to break temporal order."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(perm)


# ---------------------------------------------------------------- synthetic retina

@dataclass
class SynthConfig:
    """Linear-nonlinear-Poisson population with Gabor receptive fields.

    Empty ``rf_centers`` places neurons on a jittered grid spanning
    ``rf_region`` (fractions of the image: row0, col0, row1, col1).
    Orientation, wavelength and phase lists, when empty, are drawn per neuron.
    """

    n_neurons: int = 64
    image_size: tuple[int, int] = (32, 32)
    rf_centers: list[tuple[float, float]] = field(default_factory=list)
    rf_sigmas: list[float] = field(default_factory=list)
    rf_sigma: Optional[float] = None  # default: image height / 6
    rf_region: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    rf_jitter: float = 0.25
    orientations: list[float] = field(default_factory=list)
    wavelengths: list[float] = field(default_factory=list)
    phases: list[float] = field(default_factory=list)
    wavelength_range: tuple[float, float] = (4.0, 12.0)
    gamma: float = 1.0
    gain: float = 40.0
    baseline: float = 2.0
    bin_ms: float = 10.0
    window_ms: float = 50.0
    split_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        H, W = self.image_size
        if self.n_neurons < 1:
            raise ConfigError("n_neurons must be >= 1")
        if H < 1 or W < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if self.gain < 0 or self.baseline < 0:
            raise ConfigError("gain and baseline rates must be non-negative")
        if self.bin_ms <= 0 or abs(self.window_ms / self.bin_ms - round(self.window_ms / self.bin_ms)) > 1e-9:
            raise ConfigError("window_ms must be a positive multiple of bin_ms")
        for name in ("rf_centers", "rf_sigmas", "orientations", "wavelengths", "phases"):
            vals = getattr(self, name)
            if vals and len(vals) != self.n_neurons:
                raise ConfigError(f"{name} must list one entry per neuron ({self.n_neurons}), got {len(vals)}")
        for r, c in self.rf_centers:
            if not (0 <= r <= H - 1 and 0 <= c <= W - 1):
                raise ConfigError(f"RF centre ({r}, {c}) outside the {H}x{W} image")
        if any(s <= 0 for s in self.rf_sigmas) or (self.rf_sigma is not None and self.rf_sigma <= 0):
            raise ConfigError("RF sigmas must be positive")
        r0, c0, r1, c1 = self.rf_region
        if not (0 <= r0 < r1 <= 1 and 0 <= c0 < c1 <= 1):
            raise ConfigError(f"rf_region must be an ordered box inside [0, 1], got {self.rf_region}")

    @property
    def n_bins(self) -> int:
        return int(round(self.window_ms / self.bin_ms))


@dataclass
class Population:
    centers: np.ndarray  # (N, 2) row, col
    sigmas: np.ndarray
    orientations: np.ndarray
    wavelengths: np.ndarray
    phases: np.ndarray
    filters: np.ndarray  # (N, H, W) zero-mean receptive fields


def jittered_grid(n: int, height: int, width: int, region, jitter: float, rng) -> np.ndarray:
    """n centres on a near-square grid over ``region`` with uniform jitter (fraction of cell)."""
    r0, c0, r1, c1 = region
    rows = int(math.ceil(math.sqrt(n)))
    cols = int(math.ceil(n / rows))
    cell_h = (r1 - r0) * (height - 1) / rows
    cell_w = (c1 - c0) * (width - 1) / cols
    pts = []
    for k in range(n):
        i, j = divmod(k, cols)
        y = r0 * (height - 1) + (i + 0.5 + rng.uniform(-jitter, jitter)) * cell_h
        x = c0 * (width - 1) + (j + 0.5 + rng.uniform(-jitter, jitter)) * cell_w
        pts.append((min(max(y, 0.0), height - 1.0), min(max(x, 0.0), width - 1.0)))
    return np.asarray(pts)


def rf_filter(height: int, width: int, center, sigma: float, theta: float, wavelength: float,
              phase: float, gamma: float = 1.0) -> np.ndarray:
    """Full-image Gabor receptive field centred at ``center`` (sub-pixel allowed), zero mean, unit norm."""
    cr, cc = center
    r, c = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = r - cr, c - cc
    xr = dx * math.cos(theta) + dy * math.sin(theta)
    yr = -dx * math.sin(theta) + dy * math.cos(theta)
    env = np.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2.0 * sigma ** 2))
    f = env * np.cos(2.0 * math.pi * xr / wavelength + phase)
    f = f - f.mean()
    norm = np.sqrt((f ** 2).sum())
    return f / norm if norm > 0 else f


def make_population(cfg: SynthConfig) -> Population:
    cfg.validate()
    H, W = cfg.image_size
    rng = np.random.default_rng([cfg.seed, 0])
    n = cfg.n_neurons
    if cfg.rf_centers:
        centers = np.asarray(cfg.rf_centers, dtype=np.float64)
    else:
        centers = jittered_grid(n, H, W, cfg.rf_region, cfg.rf_jitter, rng)
    sigma = H / 6.0 if cfg.rf_sigma is None else cfg.rf_sigma
    sigmas = np.asarray(cfg.rf_sigmas, dtype=np.float64) if cfg.rf_sigmas else np.full(n, sigma)
    ori = np.asarray(cfg.orientations) if cfg.orientations else rng.uniform(0, math.pi, n)
    lam = np.asarray(cfg.wavelengths) if cfg.wavelengths else rng.uniform(*cfg.wavelength_range, n)
    # alternate ON/OFF phases so rectification keeps both contrast polarities
    ph = np.asarray(cfg.phases) if cfg.phases else (np.arange(n) % 4) * (math.pi / 2)
    filters = np.stack([rf_filter(H, W, centers[k], sigmas[k], ori[k], lam[k], ph[k], cfg.gamma)
                        for k in range(n)])
    return Population(centers, sigmas, ori, lam, ph, filters)


def expected_rates(images: np.ndarray, pop: Population, cfg: SynthConfig) -> np.ndarray:
    """Firing rates (Hz) for a stack of images, shape (n_images, N)."""
    drive = np.tensordot(np.asarray(images, dtype=np.float64), pop.filters, axes=([1, 2], [1, 2]))
    return cfg.baseline + cfg.gain * np.maximum(drive, 0.0)


def synth_generate(images, cfg: SynthConfig, ids=None) -> PairedDataset:
    """Paired (spike counts, image) data from the synthetic population.

    Counts per bin are Poisson(rate * bin); everything derives from ``cfg.seed``.
    """
    cfg.validate()
    images = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if images.shape[1:] != tuple(cfg.image_size):
        raise ConfigError(f"images are {images.shape[1:]}, config expects {tuple(cfg.image_size)}")
    pop = make_population(cfg)
    rates = expected_rates(images, pop, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    lam = np.repeat(rates[:, :, None] * (cfg.bin_ms / 1000.0), cfg.n_bins, axis=2)
    counts = rng.poisson(lam).astype(np.float32)
    ids = [f"s{i:05d}" for i in range(len(images))] if ids is None else list(ids)
    meta = {"rf_centers": pop.centers.tolist(), "rf_sigmas": pop.sigmas.tolist(),
            "bin_ms": cfg.bin_ms, "window_ms": cfg.window_ms, "seed": cfg.seed}
    return PairedDataset(counts, images, ids, "all", meta)


def stimulus_images(n: int, size: int = 32, seed: int = 0, n_orientations: int = 4) -> np.ndarray:
    """Circular grating patches: 4 orientations, varied diameter, wavelength, phase and contrast."""
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2.0
    dist = np.hypot(r, c)
    out = np.empty((n, size, size))
    for i in range(n):
        theta = (rng.integers(n_orientations) * math.pi) / n_orientations
        g = make_grating(size, theta, wavelength=rng.uniform(5.0, 10.0), phase=rng.uniform(0, 2 * math.pi),
                         contrast=rng.uniform(0.6, 1.0))
        radius = rng.uniform(0.2, 0.5) * size
        aperture = np.clip(radius - dist + 0.5, 0.0, 1.0)
        out[i] = 0.5 + (g - 0.5) * aperture
    return out


# ---------------------------------------------------------------- manifests

def write_dataset(dataset: PairedDataset, cfg: SynthConfig, out_dir, train_ids=None) -> Path:
    """Write CSV events, PGM targets and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "events").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(parents=True, exist_ok=True)
    if train_ids is None:
        train, _ = split(dataset, cfg.split_fraction, cfg.seed)
        train_ids = set(train.ids)
    rng = np.random.default_rng([cfg.seed, 2])
    items = []
    for k, item_id in enumerate(dataset.ids):
        ev = counts_to_events(dataset.spikes[k], cfg.bin_ms, rng)
        save_csv_events(ev, out / "events" / f"{item_id}.csv")
        save_pgm(dataset.targets[k], out / "targets" / f"{item_id}.pgm")
        items.append({"id": item_id, "events": f"events/{item_id}.csv", "target": f"targets/{item_id}.pgm",
                      "split": "train" if item_id in train_ids else "test"})
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": cfg.seed,
        "n_neurons": cfg.n_neurons,
        "bin_ms": cfg.bin_ms,
        "window_ms": cfg.window_ms,
        "image_shape": list(cfg.image_size),
        "rf_centers": dataset.meta.get("rf_centers", []),
        "rf_sigmas": dataset.meta.get("rf_sigmas", []),
        "items": items,
    }
    path = out / "manifest.json"
    path.write_text(canonical_json(manifest) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    for key in ("n_neurons", "bin_ms", "window_ms", "image_shape", "items"):
        if key not in manifest:
            raise ParseError(f"{path}: manifest lacks '{key}'")
    return manifest


def load_manifest(path, splits=("train", "test")) -> dict[str, PairedDataset]:
    """Load and re-bin every item; returns one dataset per requested split."""
    path = Path(path)
    manifest = read_manifest(path)
    root = path.parent
    n = manifest["n_neurons"]
    H, W = manifest["image_shape"]
    meta = {k: manifest.get(k) for k in ("rf_centers", "rf_sigmas", "bin_ms", "window_ms", "seed")}
    meta["image_shape"] = [H, W]
    out = {}
    for name in splits:
        items = [it for it in manifest["items"] if it["split"] == name]
        spikes = np.zeros((len(items), n, int(round(manifest["window_ms"] / manifest["bin_ms"]))), np.float32)
        targets = np.zeros((len(items), H, W))
        for k, it in enumerate(items):
            ev = load_csv_events(root / it["events"], duration=manifest["window_ms"] / 1000.0,
                                 neuron_ids=range(n))
            spikes[k] = bin_spikes(ev, manifest["bin_ms"], manifest["window_ms"], 0.0)
            img = load_pgm(root / it["target"])
            targets[k] = img if img.shape == (H, W) else prepare_image(img, H, W)
        out[name] = PairedDataset(spikes, targets, [it["id"] for it in items], name, dict(meta))
    return out
