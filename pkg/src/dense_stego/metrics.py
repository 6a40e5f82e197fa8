"""Image quality and capacity metrics on 8-bit images.

All statistics are accumulated in float64 over every sample of the
``(H, W, 3)`` arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .image_io import check_image


def _pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"image dimensions differ: {x.shape} vs {y.shape}")
    return x.astype(np.float64), y.astype(np.float64)


def mse_images(x: np.ndarray, y: np.ndarray) -> float:
    xf, yf = _pair(x, y)
    d = xf - yf
    return float(np.mean(d * d))


def psnr_from_mse(mse: float, bits: int = 8) -> float:
    """PSNR in dB; identical images (MSE 0) give ``math.inf``."""
    if mse == 0:
        return math.inf
    peak = (2 ** bits - 1) ** 2
    return 10.0 * math.log10(peak / mse)


def psnr(x: np.ndarray, y: np.ndarray, bits: int = 8) -> float:
    return psnr_from_mse(mse_images(x, y), bits)


def ssim(x: np.ndarray, y: np.ndarray, k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 255.0,
         unsquared_constants: bool = False) -> float:
    """Whole-image structural similarity from global means, variances and covariance.

    The stabilizers are ``(k1*R)**2`` and ``(k2*R)**2``. ``unsquared_constants=True``
    uses the un-squared ``k1*R`` / ``k2*R`` instead, for comparison only.
    """
    xf, yf = _pair(x, y)
    mx, my = xf.mean(), yf.mean()
    dx, dy = xf - mx, yf - my
    vx = np.mean(dx * dx)
    vy = np.mean(dy * dy)
    cov = np.mean(dx * dy)
    if unsquared_constants:
        c1, c2 = k1 * dynamic_range, k2 * dynamic_range
    else:
        c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def relative_capacity(absolute_bytes: float, width: int, height: int) -> float:
    """Hidden bytes per pixel."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image area must be positive, got {width}x{height}")
    return absolute_bytes / (width * height)


def histogram256(img: np.ndarray) -> np.ndarray:
    """Per-channel bin counts, shape ``(3, 256)``."""
    check_image(img)
    return np.stack([np.bincount(img[:, :, ch].ravel(), minlength=256) for ch in range(3)])


def write_histogram_csv(hist: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "r", "g", "b"])
        for v in range(256):
            w.writerow([v, *(int(hist[ch, v]) for ch in range(3))])
    return path


def render_histograms(images: dict, path) -> Path:
    """Draw per-channel histograms of several images side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 2.5), squeeze=False)
    for ax, (title, img) in zip(axes[0], images.items()):
        hist = histogram256(img)
        for ch, colour in enumerate("rgb"):
            ax.plot(hist[ch], color=colour, linewidth=0.8)
        ax.set_title(title, fontsize=8)
        ax.set_xlim(0, 255)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


# -- reports -------------------------------------------------------------------


@dataclass
class MetricsRow:
    pair_id: str
    carrier_psnr: float
    carrier_ssim: float
    secret_psnr: float
    secret_ssim: float
    baseline_psnr: float = math.nan  # carrier vs secret, the no-information reference


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, pair_id: str, carrier, stego, secret, recovered) -> MetricsRow:
        row = MetricsRow(
            pair_id=pair_id,
            carrier_psnr=psnr(carrier, stego),
            carrier_ssim=ssim(carrier, stego),
            secret_psnr=psnr(secret, recovered),
            secret_ssim=ssim(secret, recovered),
            baseline_psnr=psnr(carrier, secret),
        )
        self.rows.append(row)
        return row

    def averages(self) -> MetricsRow:
        if not self.rows:
            raise ValueError("no rows to average")
        cols = ("carrier_psnr", "carrier_ssim", "secret_psnr", "secret_ssim", "baseline_psnr")
        means = {c: float(np.mean(np.array([getattr(r, c) for r in self.rows], dtype=np.float64)))
                 for c in cols}
        return MetricsRow(pair_id="average", **means)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "carrier_vs_stego_psnr", "carrier_vs_stego_ssim",
                        "secret_vs_recovered_psnr", "secret_vs_recovered_ssim", "carrier_vs_secret_psnr"])
            for r in [*self.rows, self.averages()]:
                w.writerow([r.pair_id, *(repr(float(v)) for v in (
                    r.carrier_psnr, r.carrier_ssim, r.secret_psnr, r.secret_ssim, r.baseline_psnr))])
        return path


@dataclass
class CapacityRow:
    scheme: str
    absolute: str
    size: str
    relative: str


def _fmt(v: float) -> str:
    return f"{v:.2e}"


def capacity_table(width: int, height: int, include_reference: bool = True) -> list[CapacityRow]:
    """Capacity comparison; full-size hiding embeds one byte per pixel."""
    rows = []
    if include_reference:
        rows.append(CapacityRow("[37]", "1.125", "512x512", _fmt(relative_capacity(1.125, 512, 512))))
        rows.append(CapacityRow("[38]", "3.72", ">=512x512", _fmt(relative_capacity(3.72, 512, 512))))
        lo = relative_capacity(1533, 1024, 1024)
        hi = relative_capacity(4300, 1024, 1024)
        rows.append(CapacityRow("[39]", "1533~4300", "1024x1024", f"{_fmt(lo)}~{_fmt(hi)}"))
    absolute = width * height
    rel = relative_capacity(absolute, width, height)
    rows.append(CapacityRow("Ours", str(absolute), f"{width}x{height}", repr(rel)))
    return rows


def write_capacity_csv(rows: Sequence[CapacityRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "absolute_capacity_bytes_per_image", "stego_image_size",
                    "relative_capacity_bytes_per_pixel"])
        for r in rows:
            w.writerow([r.scheme, r.absolute, r.size, r.relative])
    return path


def format_quality_table(report: MetricsReport, reference: Optional[tuple] = (40.451, 0.985, 37.321, 0.981)) -> str:
    avg = report.averages()
    lines = [f"{'':<12}{'carrier vs stego':>22}{'secret vs recovered':>24}"]
    for r in [*report.rows, avg]:
        lines.append(f"{r.pair_id:<12}{r.carrier_psnr:>12.3f}, {r.carrier_ssim:.3f}"
                     f"{r.secret_psnr:>14.3f}, {r.secret_ssim:.3f}")
    if reference:
        lines.append(f"{'reference':<12}{reference[0]:>12.3f}, {reference[1]:.3f}"
                     f"{reference[2]:>14.3f}, {reference[3]:.3f}  (large-scale reference, not reproduced here)")
    return "\n".join(lines)
