"""PSNR / SSIM and the evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractViolation
from .volume import Volume

CSV_COLUMNS = ("dataset", "scale", "variant", "psnr_mean", "ssim_mean", "n_volumes")


def _array(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {y.shape}")
    if not data_range > 0:
        raise ContractViolation("data_range must be positive")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all window positions that fit inside the image."""
    x, y = _array(a), _array(b)
    if x.shape != y.shape or x.ndim != 2:
        raise ContractViolation(f"ssim needs two 2D images of equal shape, got {x.shape} and {y.shape}")
    if min(x.shape) < win_size:
        raise ContractViolation(f"image {x.shape} is smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def volume_metrics(sr, gt, mode: str = "axial", data_range: float = 1.0) -> tuple[float, float]:
    """Volume PSNR over all voxels and SSIM averaged over 2D slices.

    ``mode='axial'`` averages SSIM over axial slices; ``mode='sagittal'``
    over sagittal ones.
    """
    x, y = _array(sr), _array(gt)
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {y.shape}")
    axis = {"axial": 2, "sagittal": 0}.get(mode)
    if axis is None:
        raise ContractViolation(f"unknown metric mode {mode!r}")
    xs, ys = np.moveaxis(x, axis, 0), np.moveaxis(y, axis, 0)
    s = float(np.mean([ssim(p, q, data_range) for p, q in zip(xs, ys)]))
    return psnr(x, y, data_range), s


def _num(v):
    return "inf" if isinstance(v, float) and math.isinf(v) and v > 0 else v


def _unnum(v):
    return math.inf if v == "inf" else v


def _finite_mean(values) -> float:
    return float(np.mean(values)) if len(values) else math.nan


@dataclass
class ReportRow:
    dataset: str
    scale: int
    variant: str
    psnr_per_volume: list = field(default_factory=list)
    ssim_per_volume: list = field(default_factory=list)
    seed_set: list = field(default_factory=list)
    psnr_sagittal: list = field(default_factory=list)
    ssim_sagittal: list = field(default_factory=list)
    volume_hashes: list = field(default_factory=list)
    bundle_lineage: list = field(default_factory=list)
    absent: bool = False

    @property
    def psnr_mean(self) -> float:
        return _finite_mean(self.psnr_per_volume)

    @property
    def ssim_mean(self) -> float:
        return _finite_mean(self.ssim_per_volume)

    @property
    def n_volumes(self) -> int:
        return len(self.psnr_per_volume)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_mean"] = self.psnr_mean
        d["ssim_mean"] = self.ssim_mean
        d["psnr_sagittal_mean"] = _finite_mean(self.psnr_sagittal)
        d["ssim_sagittal_mean"] = _finite_mean(self.ssim_sagittal)
        d["n_volumes"] = self.n_volumes
        for k in ("psnr_per_volume", "psnr_sagittal"):
            d[k] = [_num(v) for v in d[k]]
        return {k: _num(v) for k, v in d.items()}


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def row(self, dataset: str, scale: int, variant: str) -> ReportRow:
        for r in self.rows:
            if (r.dataset, r.scale, r.variant) == (dataset, scale, variant):
                return r
        r = ReportRow(dataset, scale, variant)
        self.rows.append(r)
        return r

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows], "provenance": self.provenance},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        names = set(ReportRow.__dataclass_fields__)
        rows = []
        for d in doc["rows"]:
            r = ReportRow(**{k: v for k, v in d.items() if k in names})
            r.psnr_per_volume = [_unnum(v) for v in r.psnr_per_volume]
            r.psnr_sagittal = [_unnum(v) for v in r.psnr_sagittal]
            rows.append(r)
        return cls(rows, doc.get("provenance", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.dataset, r.scale, r.variant, _num(r.psnr_mean), r.ssim_mean, r.n_volumes])
        return buf.getvalue()
