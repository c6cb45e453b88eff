"""Analytic Gabor kernels and the multi-orientation, multi-scale bank."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .tensor import Tensor

# sigma/lambda ratio giving a one-octave bandwidth
BANDWIDTH_1_OCTAVE = 0.56


@dataclass(frozen=True)
class GaborParams:
    theta: float
    wavelength: float
    sigma: float
    gamma: float = 0.5
    psi: float = 0.0
    size: int = 7

    def validate(self) -> None:
        if self.size < 3 or self.size % 2 == 0:
            raise ConfigError(f"gabor size must be odd and >= 3, got {self.size}")
        for name in ("wavelength", "sigma", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"gabor {name} must be positive, got {getattr(self, name)}")


@dataclass
class GaborConfig:
    """Bank layout plus whether the first layer is fine-tuned."""

    n_orientations: int = 4
    n_scales: int = 2
    size: int = 7
    base_lambda: float = 4.0
    lambda_ratio: float = 2.0
    gamma: float = 0.5
    psi: float = 0.0
    trainable: bool = False


@dataclass
class GaborBank:
    n_orientations: int
    n_scales: int
    kernels: np.ndarray  # (n_orientations * n_scales, 1, size, size)
    params: list[GaborParams] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.kernels.shape[-1]

    def __len__(self) -> int:
        return self.kernels.shape[0]


def _rotated_coords(size: int, theta: float):
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    return xr, yr


def gabor_raw(p: GaborParams) -> np.ndarray:
    """Real Gabor exp(-(x'^2 + gamma^2 y'^2) / 2 sigma^2) cos(2 pi x' / lambda + psi), unnormalized.

    x is the column offset and y the row offset from the kernel centre.
    """
    p.validate()
    xr, yr = _rotated_coords(p.size, p.theta)
    envelope = np.exp(-(xr ** 2 + (p.gamma ** 2) * yr ** 2) / (2.0 * p.sigma ** 2))
    return envelope * np.cos(2.0 * math.pi * xr / p.wavelength + p.psi)


def make_gabor_kernel(p: GaborParams) -> np.ndarray:
    """Gabor kernel with its DC component removed and unit L2 norm (float64)."""
    k = gabor_raw(p)
    k = k - k.mean()
    norm = np.sqrt((k ** 2).sum())
    if norm == 0:
        raise ConfigError(f"gabor kernel vanishes after DC removal for {p}")
    return k / norm


def make_gabor_bank(n_orientations: int = 4, n_scales: int = 2, size: int = 7,
                    base_lambda: float = 4.0, lambda_ratio: float = 2.0,
                    gamma: float = 0.5, psi: float = 0.0) -> GaborBank:
    """Scale-major, orientation-minor stack of kernels.

    Orientations are k*pi/n_orientations; scale s has
    wavelength base_lambda * lambda_ratio**s and sigma = 0.56 * wavelength.
    """
    if n_orientations < 1 or n_scales < 1:
        raise ConfigError(f"gabor bank needs >= 1 orientation and scale, got {n_orientations}, {n_scales}")
    if base_lambda <= 0 or lambda_ratio <= 0:
        raise ConfigError("gabor base_lambda and lambda_ratio must be positive")
    params = []
    for s in range(n_scales):
        lam = base_lambda * lambda_ratio ** s
        for o in range(n_orientations):
            params.append(GaborParams(theta=o * math.pi / n_orientations, wavelength=lam,
                                      sigma=BANDWIDTH_1_OCTAVE * lam, gamma=gamma, psi=psi, size=size))
    kernels = np.stack([make_gabor_kernel(p) for p in params])[:, None]
    return GaborBank(n_orientations, n_scales, kernels.astype(np.float32), params)


def bank_from_config(cfg: GaborConfig) -> GaborBank:
    return make_gabor_bank(cfg.n_orientations, cfg.n_scales, cfg.size, cfg.base_lambda,
                           cfg.lambda_ratio, cfg.gamma, cfg.psi)


def init_first_layer(bank: GaborBank, trainable: bool = False, in_channels: int = 1,
                     expected_size: int | None = None, dtype=np.float32) -> Tensor:
    """First-layer weight (n_kernels, in_channels, size, size) built from the bank.

    Output channel o reads input channel ``o % in_channels`` through bank
    kernel o; other input taps start at zero. A non-trainable weight carries
    no gradient buffer, so optimizers skip it.
    """
    if expected_size is not None and expected_size != bank.size:
        raise ConfigError(f"gabor bank kernel size {bank.size} does not match layer kernel size {expected_size}")
    if in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
    k = len(bank)
    w = np.zeros((k, in_channels, bank.size, bank.size), dtype=dtype)
    for o in range(k):
        w[o, o % in_channels] = bank.kernels[o, 0]
    return Tensor(w, requires_grad=trainable, dtype=dtype)


def make_grating(size: int, theta: float, wavelength: float, phase: float = 0.0,
                 contrast: float = 1.0, mean: float = 0.5) -> np.ndarray:
    """Sinusoidal grating in [0, 1] whose wave vector points along ``theta``.

    Uses the same axis convention as :func:`gabor_raw`, so a grating at theta
    drives the bank kernel with the same theta hardest.
    """
    half = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) - half
    xr = x * math.cos(theta) + y * math.sin(theta)
    g = mean + 0.5 * contrast * np.cos(2.0 * math.pi * xr / wavelength + phase)
    return np.clip(g, 0.0, 1.0)


def contact_sheet(bank: GaborBank, pad: int = 1) -> np.ndarray:
    """Tile the bank into an image in [0, 1]: one row per scale, one column per orientation.

    Zero maps to mid-gray; the scale is shared across kernels so their
    amplitudes stay comparable.
    """
    s = bank.size
    rows, cols = bank.n_scales, bank.n_orientations
    sheet = np.ones((rows * s + (rows + 1) * pad, cols * s + (cols + 1) * pad))
    peak = float(np.abs(bank.kernels).max()) or 1.0
    for idx in range(len(bank)):
        r, c = divmod(idx, cols)
        y0 = pad + r * (s + pad)
        x0 = pad + c * (s + pad)
        sheet[y0:y0 + s, x0:x0 + s] = 0.5 + 0.5 * bank.kernels[idx, 0] / peak
    return sheet
