"""PSNR and SSIM for projections and volumes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    r = len(taps) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects single-channel 2D images")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over all fully-inside window positions."""
    return float(np.mean(ssim_map(a, b, data_range)))


def ssim_volume(a, b, data_range: float = 1.0) -> float:
    """Mean of 2D SSIM over axial (constant-z) slices."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"expected two equal 3D volumes, got {a.shape} and {b.shape}")
    return float(np.mean([ssim(a[:, :, k], b[:, :, k], data_range) for k in range(a.shape[2])]))


@dataclass
class MetricReport:
    view_psnr: list = field(default_factory=list)
    view_ssim: list = field(default_factory=list)
    volume_psnr: list = field(default_factory=list)
    volume_ssim: list = field(default_factory=list)
    volume_times: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.view_psnr)) if self.view_psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.view_ssim)) if self.view_ssim else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        if self.volume_psnr:
            d["mean_volume_psnr"] = float(np.mean(self.volume_psnr))
            d["mean_volume_ssim"] = float(np.mean(self.volume_ssim))
        return d

    def to_json(self) -> str:
        def fix(v):
            if isinstance(v, float) and math.isinf(v):
                return "identical"
            if isinstance(v, list):
                return [fix(x) for x in v]
            return v
        return json.dumps({k: fix(v) for k, v in self.to_dict().items()}, indent=2)

    def to_text(self) -> str:
        lines = []
        if self.view_psnr:
            lines.append(f"{'view':>6} {'PSNR(dB)':>10} {'SSIM':>8}")
            for i, (p, s) in enumerate(zip(self.view_psnr, self.view_ssim)):
                lines.append(f"{i:>6} {p:>10.3f} {s:>8.4f}")
            lines.append(f"{'mean':>6} {self.mean_psnr:>10.3f} {self.mean_ssim:>8.4f}")
        if self.volume_psnr:
            lines.append(f"{'time':>6} {'3D PSNR':>10} {'3D SSIM':>8}")
            for t, p, s in zip(self.volume_times, self.volume_psnr, self.volume_ssim):
                lines.append(f"{t:>6.3f} {p:>10.3f} {s:>8.4f}")
        return "\n".join(lines)


def evaluate_views(predicted, reference) -> MetricReport:
    report = MetricReport()
    for p, r in zip(predicted, reference):
        report.view_psnr.append(psnr(p, r, 1.0))
        report.view_ssim.append(ssim(p, r, 1.0))
    return report


def evaluate_volumes(predicted, reference, times) -> MetricReport:
    """3D scores; the peak and SSIM range are the ground-truth maximum at each time."""
    report = MetricReport()
    for p, r, t in zip(predicted, reference, times):
        peak = float(np.max(r))
        peak = peak if peak > 0 else 1.0
        report.volume_psnr.append(psnr(p, r, peak))
        report.volume_ssim.append(ssim_volume(p, r, peak))
        report.volume_times.append(float(t))
    return report
