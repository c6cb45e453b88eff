"""Full-reference quality metrics: MSE, PSNR, VIFP and SSIM.

All metrics run in float64 on images scaled to ``[0, data_range]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

from .loss import SSIMParams, as_batch, gaussian_window, ssim_map
from .tensor import DimensionError, Tensor

COLUMNS = ("MSE", "PSNR", "VIFP", "SSIM")

# noise variance of the VIF channel model, on the 8-bit scale
VIF_SIGMA_NSQ = 2.0
_VIF_EPS = 1e-10


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _pair(x, y):
    x, y = _as_array(x), _as_array(y)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(err: float, data_range: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def psnr(x, y, data_range: float = 1.0) -> float:
    """10 log10(L^2 / MSE) in dB; identical images give ``inf``."""
    return psnr_from_mse(mse(x, y), data_range)


def ssim(x, y, params: SSIMParams | None = None) -> float:
    """Mean SSIM, evaluated through the same code path as the training loss."""
    x, y = _pair(x, y)
    return float(ssim_map(Tensor(x), Tensor(y), params).data.mean())


def _vif_window(scale: int, levels: int) -> np.ndarray:
    n = 2 ** (levels - scale + 1) + 1
    return gaussian_window(n, n / 5.0)


def vifp_min_size(levels: int = 4) -> int:
    """Smallest square side that leaves every scale at least one valid window."""
    side = 1
    while True:
        h = side
        ok = True
        for scale in range(1, levels + 1):
            n = _vif_window(scale, levels).shape[0]
            if scale > 1:
                h = h - n + 1
                if h < 1:
                    ok = False
                    break
                h = (h + 1) // 2
            if h - n + 1 < 1:
                ok = False
                break
        if ok:
            return side
        side += 1


def max_vif_levels(shape, cap: int = 4) -> int:
    """Deepest pyramid (up to ``cap``) that fits an image of ``shape``; 0 if none does."""
    side = min(shape)
    for levels in range(cap, 0, -1):
        if side >= vifp_min_size(levels):
            return levels
    return 0


def vifp(ref, dist, levels: int = 4, data_range: float = 1.0) -> float:
    """Pixel-domain visual information fidelity of ``dist`` against ``ref``.

    Multi-scale Gaussian pyramid with windows 2^(levels-s+1)+1 wide
    (17, 9, 5, 3 for four levels), 2x decimation between scales and a GSM
    channel with noise variance 2 on the 8-bit scale. Images are rescaled to
    [0, 255] internally, so any ``data_range`` gives the same score.

    Not symmetric: the first argument is the reference.

    >>> r = np.linspace(0, 1, 64 * 64).reshape(64, 64) ** 2
    >>> d = np.clip(r + 0.1 * np.sin(np.arange(64)), 0, 1)
    >>> vifp(r, d) == vifp(d, r)
    False
    """
    ref, dist = _pair(ref, dist)
    if ref.ndim != 2:
        raise DimensionError(f"vifp expects a 2-d image, got shape {ref.shape}")
    need = vifp_min_size(levels)
    if min(ref.shape) < need:
        raise DimensionError(f"image {ref.shape} too small for {levels} VIF levels (need side >= {need})")
    scale_to_8bit = 255.0 / data_range
    ref = ref * scale_to_8bit
    dist = dist * scale_to_8bit
    num = den = 0.0
    for scale in range(1, levels + 1):
        win = _vif_window(scale, levels)
        if scale > 1:
            ref = correlate2d(ref, win, mode="valid")[::2, ::2]
            dist = correlate2d(dist, win, mode="valid")[::2, ::2]
        mu1 = correlate2d(ref, win, mode="valid")
        mu2 = correlate2d(dist, win, mode="valid")
        s1 = np.maximum(correlate2d(ref * ref, win, mode="valid") - mu1 * mu1, 0.0)
        s2 = np.maximum(correlate2d(dist * dist, win, mode="valid") - mu2 * mu2, 0.0)
        s12 = correlate2d(ref * dist, win, mode="valid") - mu1 * mu2

        g = s12 / (s1 + _VIF_EPS)
        sv = s2 - g * s12
        flat1 = s1 < _VIF_EPS
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0.0
        flat2 = s2 < _VIF_EPS
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, _VIF_EPS)

        num += np.log10(1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).sum()
        den += np.log10(1.0 + s1 / VIF_SIGMA_NSQ).sum()
    if den == 0.0:
        # flat reference carries no information; only an exact copy is faithful
        return 1.0 if np.array_equal(ref, dist) else 0.0
    return float(num / den)


@dataclass
class MetricsReport:
    mse: float
    psnr: float
    vifp: float
    ssim: float
    per_item: list[dict] = field(default_factory=list)
    data_range: float = 1.0
    vif_levels: int = 4
    label: str = ""

    def as_row(self) -> dict:
        return {"MSE": self.mse, "PSNR": self.psnr, "VIFP": self.vifp, "SSIM": self.ssim}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "data_range": self.data_range,
            "vif_levels": self.vif_levels,
            "columns": list(COLUMNS),
            "mean": {k: _json_float(v) for k, v in self.as_row().items()},
            "per_item": [{k: _json_float(v) if isinstance(v, float) else v for k, v in item.items()}
                         for item in self.per_item],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        return format_table([self])


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return round(float(v), 10)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned text table, columns MSE, PSNR, VIFP, SSIM."""
    labels = [r.label or "-" for r in reports]
    width = max(8, *(len(s) for s in labels))
    lines = [f"{'Method':<{width}}" + "".join(f"{c:>10}" for c in COLUMNS)]
    for label, r in zip(labels, reports):
        lines.append(f"{label:<{width}}" + "".join(f"{_fmt(v):>10}" for v in r.as_row().values()))
    if reports:
        lines.append(f"pixel scale [0, {reports[0].data_range:g}]")
    return "\n".join(lines) + "\n"


def evaluate(x_hat, y, data_range: float = 1.0, ssim_params: SSIMParams | None = None,
             vif_levels: int | None = None, ids=None, label: str = "") -> MetricsReport:
    """Per-item metrics and their batch means; ``x_hat`` and ``y`` are aligned batches.

    ``vif_levels=None`` picks the deepest pyramid (at most 4) the image size allows.
    """
    xb = as_batch(_as_array(x_hat)).data
    yb = as_batch(_as_array(y)).data
    if xb.shape != yb.shape:
        raise DimensionError(f"batches are misaligned: {xb.shape} vs {yb.shape}")
    if vif_levels is None:
        vif_levels = max_vif_levels(xb.shape[2:])
        if vif_levels == 0:
            raise DimensionError(f"images {xb.shape[2:]} too small for VIFP")
    p = ssim_params or SSIMParams(data_range=data_range)
    if ids is None:
        ids = list(range(xb.shape[0]))
    if len(ids) != xb.shape[0]:
        raise DimensionError(f"{len(ids)} ids for a batch of {xb.shape[0]}")
    items = []
    for i, item_id in enumerate(ids):
        a, b = xb[i, 0], yb[i, 0]
        e = mse(a, b)
        items.append({"id": item_id, "MSE": e, "PSNR": psnr_from_mse(e, data_range),
                      "VIFP": vifp(b, a, vif_levels, data_range), "SSIM": ssim(a, b, p)})
    means = {c: float(np.mean([it[c] for it in items])) for c in COLUMNS}
    return MetricsReport(mse=means["MSE"], psnr=means["PSNR"], vifp=means["VIFP"], ssim=means["SSIM"],
                         per_item=items, data_range=data_range, vif_levels=vif_levels, label=label)
