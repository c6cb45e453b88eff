"""Training objective: SSIM term plus receptive-field weighted MSE.

``composite_loss = mu * (1 - SSIM) + (1 - mu) * mean(W * (x_hat - y)^2)``

The SSIM here is the single implementation used by both the training loss
and the evaluation metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import DimensionError, Tensor

LOSS_MODES = ("mse", "ssim", "weighted_composite")


@dataclass
class SSIMParams:
    """Stability constants default to (0.01 L)^2 and (0.03 L)^2, with c3 = c2 / 2."""

    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window_size: int = 11
    window_sigma: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma_exp: float = 1.0
    c1: Optional[float] = None
    c2: Optional[float] = None
    c3: Optional[float] = None

    def __post_init__(self):
        if self.c1 is None:
            self.c1 = (self.k1 * self.data_range) ** 2
        if self.c2 is None:
            self.c2 = (self.k2 * self.data_range) ** 2
        if self.c3 is None:
            self.c3 = self.c2 / 2.0
        if not (self.c1 > 0 and self.c2 > 0):
            raise ConfigError("SSIM constants c1 and c2 must be positive")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError(f"SSIM window size must be odd, got {self.window_size}")
        if self.window_sigma <= 0:
            raise ConfigError("SSIM window sigma must be positive")


@dataclass
class WeightSpec:
    """How to build W for an image size. Empty centers means the image centre."""

    centers: list[tuple[float, float]] = field(default_factory=list)
    sigma_rf: Optional[float] = None  # default: H / 6
    combine: str = "max"
    normalize: str = "mean"


@dataclass
class LossConfig:
    mu: float = 0.5
    ssim: SSIMParams = field(default_factory=SSIMParams)
    weight: WeightSpec = field(default_factory=WeightSpec)

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")


@dataclass
class WeightMatrix:
    w: np.ndarray
    centers: list[tuple[float, float]]
    sigma_rf: float
    combine: str = "max"
    normalize: str = "mean"

    @property
    def shape(self):
        return self.w.shape

    def region_mask(self, n_sigma: float = 1.0) -> np.ndarray:
        """Pixels within ``n_sigma`` RF radii of some centre."""
        H, W = self.w.shape
        r, c = np.mgrid[0:H, 0:W].astype(np.float64)
        mask = np.zeros((H, W), dtype=bool)
        for cr, cc in self.centers:
            mask |= (r - cr) ** 2 + (c - cc) ** 2 <= (n_sigma * self.sigma_rf) ** 2
        return mask


# ---------------------------------------------------------------- helpers

def as_batch(x) -> Tensor:
    """Lift (H, W), (B, H, W) or (B, 1, H, W) input to a (B, 1, H, W) tensor."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 2:
        return t.reshape(1, 1, *t.shape)
    if t.ndim == 3:
        return t.reshape(t.shape[0], 1, *t.shape[1:])
    if t.ndim == 4 and t.shape[1] == 1:
        return t
    raise DimensionError(f"expected a single-channel image or batch, got shape {t.shape}")


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized separable 2-d Gaussian window (float64)."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def local_stats(x: Tensor, y: Tensor, p: SSIMParams):
    """Gaussian-windowed means, variances and covariance over valid windows."""
    H, W = x.shape[2:]
    if p.window_size > H or p.window_size > W:
        raise DimensionError(f"SSIM window {p.window_size} larger than image {H}x{W}")
    win = Tensor(gaussian_window(p.window_size, p.window_sigma)[None, None], dtype=x.dtype)
    mu_x = T.conv2d(x, win)
    mu_y = T.conv2d(y, win)
    var_x = T.conv2d(T.square(x), win) - T.square(mu_x)
    var_y = T.conv2d(T.square(y), win) - T.square(mu_y)
    cov = T.conv2d(x * y, win) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


# ---------------------------------------------------------------- SSIM

def ssim_map(x, y, p: SSIMParams | None = None) -> Tensor:
    """Closed-form SSIM per window position, shape (B, 1, H - w + 1, W - w + 1)."""
    p = p or SSIMParams()
    x, y = as_batch(x), as_batch(y)
    _check_pair(x, y)
    mu_x, mu_y, var_x, var_y, cov = local_stats(x, y, p)
    num = (2.0 * mu_x * mu_y + p.c1) * (2.0 * cov + p.c2)
    den = (T.square(mu_x) + T.square(mu_y) + p.c1) * (var_x + var_y + p.c2)
    return num / den


def ssim(x, y, p: SSIMParams | None = None) -> Tensor:
    """Mean SSIM over all window positions (and batch items)."""
    return T.mean(ssim_map(x, y, p))


def ssim_components(x, y, p: SSIMParams | None = None):
    """Luminance, contrast and structure maps as float64 arrays."""
    p = p or SSIMParams()
    x = as_batch(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    y = as_batch(np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64))
    _check_pair(x, y)
    mu_x, mu_y, var_x, var_y, cov = (t.data for t in local_stats(x, y, p))
    sd_x = np.sqrt(np.maximum(var_x, 0.0))
    sd_y = np.sqrt(np.maximum(var_y, 0.0))
    lum = (2 * mu_x * mu_y + p.c1) / (mu_x ** 2 + mu_y ** 2 + p.c1)
    con = (2 * sd_x * sd_y + p.c2) / (var_x + var_y + p.c2)
    struct = (cov + p.c3) / (sd_x * sd_y + p.c3)
    return lum, con, struct


def ssim_from_components(x, y, p: SSIMParams | None = None) -> float:
    """Mean of l^alpha * c^beta * s^gamma; matches :func:`ssim` when exponents are 1 and c3 = c2/2."""
    p = p or SSIMParams()
    lum, con, struct = ssim_components(x, y, p)
    # signed powers keep negative structure terms meaningful for non-integer exponents
    val = (np.sign(lum) * np.abs(lum) ** p.alpha) * (np.sign(con) * np.abs(con) ** p.beta) \
        * (np.sign(struct) * np.abs(struct) ** p.gamma_exp)
    return float(val.mean())


# ---------------------------------------------------------------- MSE family

def mse(x, y) -> Tensor:
    x, y = as_batch(x), as_batch(y)
    _check_pair(x, y)
    return T.mean(T.square(x - y))


def _weight_array(w, dtype) -> np.ndarray:
    arr = w.w if isinstance(w, WeightMatrix) else np.asarray(w)
    return arr.astype(dtype)


def weighted_mse(x, y, w) -> Tensor:
    """Mean over pixels of w(i, j) * (x - y)^2; ``w`` is a WeightMatrix or (H, W) array."""
    x, y = as_batch(x), as_batch(y)
    _check_pair(x, y)
    warr = _weight_array(w, x.dtype)
    if warr.shape != x.shape[2:]:
        raise DimensionError(f"weight matrix shape {warr.shape} does not match image {x.shape[2:]}")
    return T.mean(T.square(x - y) * Tensor(warr, dtype=x.dtype))


def make_weight_matrix(height: int, width: int, center=None, sigma_rf: float | None = None,
                       combine: str = "max", normalize: str = "mean") -> WeightMatrix:
    """Gaussian receptive-field importance map.

    ``center`` is one (row, col) pair or a list of them (default: image centre).
    Several centres are merged by pointwise ``max`` or ``sum`` before
    normalization; ``normalize="mean"`` rescales to mean 1, ``"none"`` keeps a unit peak.
    """
    if center is None or (isinstance(center, (list, tuple)) and len(center) == 0):
        centers = [((height - 1) / 2.0, (width - 1) / 2.0)]
    elif np.ndim(center) == 1:
        centers = [tuple(float(v) for v in center)]
    else:
        centers = [tuple(float(v) for v in c) for c in center]
    for cr, cc in centers:
        if not (0 <= cr <= height - 1 and 0 <= cc <= width - 1):
            raise ConfigError(f"RF centre ({cr}, {cc}) lies outside the {height}x{width} image")
    sigma_rf = height / 6.0 if sigma_rf is None else float(sigma_rf)
    if sigma_rf <= 0:
        raise ConfigError(f"sigma_rf must be positive, got {sigma_rf}")
    if combine not in ("max", "sum"):
        raise ConfigError(f"combine must be 'max' or 'sum', got {combine!r}")
    if normalize not in ("mean", "none"):
        raise ConfigError(f"normalize must be 'mean' or 'none', got {normalize!r}")
    r, c = np.mgrid[0:height, 0:width].astype(np.float64)
    maps = [np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2.0 * sigma_rf ** 2)) for cr, cc in centers]
    w = np.max(maps, axis=0) if combine == "max" else np.sum(maps, axis=0)
    if normalize == "mean":
        w = w / w.mean()
    return WeightMatrix(w, centers, sigma_rf, combine, normalize)


def weight_from_spec(spec: WeightSpec, height: int, width: int) -> WeightMatrix:
    return make_weight_matrix(height, width, spec.centers or None, spec.sigma_rf, spec.combine, spec.normalize)


# ---------------------------------------------------------------- objectives

def composite_loss(x_hat, y, cfg: LossConfig | None = None, weight=None) -> Tensor:
    """mu * (1 - SSIM) + (1 - mu) * weighted MSE, differentiable in ``x_hat``."""
    cfg = cfg or LossConfig()
    x_hat, y = as_batch(x_hat), as_batch(y)
    _check_pair(x_hat, y)
    if weight is None:
        weight = weight_from_spec(cfg.weight, *y.shape[2:])
    terms = []
    if cfg.mu > 0:
        terms.append(cfg.mu * (1.0 - ssim(x_hat, y, cfg.ssim)))
    if cfg.mu < 1:
        terms.append((1.0 - cfg.mu) * weighted_mse(x_hat, y, weight))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def loss_for_mode(mode: str, x_hat, y, cfg: LossConfig | None = None, weight=None) -> Tensor:
    """Objective for one of the three compared training regimes."""
    cfg = cfg or LossConfig()
    if mode == "mse":
        return mse(x_hat, y)
    if mode == "ssim":
        return 1.0 - ssim(x_hat, y, cfg.ssim)
    if mode == "weighted_composite":
        return composite_loss(x_hat, y, cfg, weight)
    raise ConfigError(f"unknown loss mode {mode!r}; expected one of {', '.join(LOSS_MODES)}")
