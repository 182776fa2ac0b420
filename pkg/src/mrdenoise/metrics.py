"""Full-reference quality metrics: PSNR and slice-wise SSIM."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from mrdenoise.errors import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
INF_SENTINEL = "inf"


def _pair(test, reference):
    t = np.asarray(test, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if t.shape != r.shape:
        raise DimensionError(f"test {t.shape} and reference {r.shape} differ in shape")
    return t, r


def psnr(test, reference, peak=None):
    """``10 log10(peak^2 / MSE)`` in dB, with ``peak = max(reference)`` by default.

    Identical inputs give ``math.inf``.
    """
    t, r = _pair(test, reference)
    if peak is None:
        peak = float(r.max())
    if peak == 0:
        raise ValueError("PSNR undefined for an all-zero reference")
    mse = float(np.mean((t - r) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, win):
    # separable filtering over the in-plane axes; interior only ("valid")
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:-r, r:-r]


def ssim_per_slice(test, reference, data_range=None):
    """SSIM of each in-plane slice of two (H, W, C) volumes.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, mean over valid
    window positions. ``data_range`` defaults to ``max(ref) - min(ref)`` over
    the whole reference volume.
    """
    t, r = _pair(test, reference)
    if t.ndim == 2:
        t, r = t[..., None], r[..., None]
    if t.ndim != 3:
        raise DimensionError(f"expected (H, W, C) volumes, got {t.shape}")
    if t.shape[0] < SSIM_WINDOW or t.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"slices {t.shape[:2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = float(r.max() - r.min())
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    win = gaussian_window()
    mu_t = _filter_valid(t, win)
    mu_r = _filter_valid(r, win)
    var_t = _filter_valid(t * t, win) - mu_t * mu_t
    var_r = _filter_valid(r * r, win) - mu_r * mu_r
    cov = _filter_valid(t * r, win) - mu_t * mu_r
    num = (2 * mu_t * mu_r + c1) * (2 * cov + c2)
    den = (mu_t * mu_t + mu_r * mu_r + c1) * (var_t + var_r + c2)
    return (num / den).mean(axis=(0, 1))


def ssim(test, reference, data_range=None):
    return float(np.mean(ssim_per_slice(test, reference, data_range)))


def psnr_per_slice(test, reference):
    """PSNR of each slice, all using the whole-volume reference peak."""
    t, r = _pair(test, reference)
    peak = float(r.max())
    return np.array([psnr(t[..., k], r[..., k], peak=peak) for k in range(t.shape[-1])])


def _finite_mean(values):
    vals = [v for v in values]
    if any(math.isinf(v) for v in vals):
        return math.inf
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricRow:
    volume: str
    psnr: float
    ssim: float
    psnr_slice_mean: float
    ssim_slices: list = field(default_factory=list)


@dataclass
class MetricReport:
    """Per-volume PSNR / SSIM rows plus their means."""

    rows: list = field(default_factory=list)
    peak: str = "reference-max"

    def add(self, volume_id, test, reference):
        ps = psnr_per_slice(test, reference)
        ss = ssim_per_slice(test, reference)
        row = MetricRow(volume_id, psnr(test, reference), float(ss.mean()), _finite_mean(ps), [float(v) for v in ss])
        self.rows.append(row)
        return row

    @property
    def mean_psnr(self):
        return _finite_mean(r.psnr for r in self.rows)

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def to_dict(self):
        def enc(v):
            return INF_SENTINEL if isinstance(v, float) and math.isinf(v) else v

        rows = [
            {"volume": r.volume, "psnr": enc(r.psnr), "ssim": r.ssim,
             "psnr_slice_mean": enc(r.psnr_slice_mean), "ssim_slices": r.ssim_slices}
            for r in self.rows
        ]
        mean = {
            "volume": "mean",
            "psnr": enc(self.mean_psnr),
            "ssim": self.mean_ssim,
            "psnr_slice_mean": enc(_finite_mean(r.psnr_slice_mean for r in self.rows)),
        }
        return {"peak": self.peak, "ssim_window": {"size": SSIM_WINDOW, "sigma": SSIM_SIGMA,
                                                    "K1": SSIM_K1, "K2": SSIM_K2},
                "rows": rows, "mean": mean}


def decode_metric(value):
    return math.inf if value == INF_SENTINEL else float(value)
