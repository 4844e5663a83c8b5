"""Composite SSIM + MSE loss and depth-benchmark metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, as_tensor
from .decoder import DepthMap

CSV_HEADER = ("alpha", "rmse", "abs_rel", "sq_rel", "rmse_log")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.8
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window: int = 0  # 0 = global statistics over the whole image

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _values(x) -> Tensor:
    return x.values if isinstance(x, DepthMap) else as_tensor(x)


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    return p, t


def _image_axes(x: Tensor) -> tuple[int, ...]:
    # B×1×H×W batches reduce per image; anything else is one image
    return (1, 2, 3) if x.ndim == 4 else tuple(range(x.ndim))


def mse(pred, target) -> Tensor:
    """Mean of squared differences over every pixel."""
    p, t = _pair(pred, target)
    d = p - t
    return ops.mean(d * d)


def ssim(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Structural similarity; batched inputs give the mean over images.

    Global mode uses whole-image means, (n-1)-normalised variances and the
    covariance. ``cfg.window > 0`` switches to a Gaussian-windowed mean map.
    """
    p, t = _pair(pred, target)
    if cfg.window:
        return _ssim_windowed(p, t, cfg)
    axes = _image_axes(p)
    n = math.prod(p.shape[a] for a in axes)
    if n < 2:
        raise ShapeError("ssim needs at least two pixels")
    mu_p = ops.mean(p, axis=axes, keepdims=True)
    mu_t = ops.mean(t, axis=axes, keepdims=True)
    dp, dt = p - mu_p, t - mu_t
    var_p = ops.sum(dp * dp, axis=axes) / (n - 1)
    var_t = ops.sum(dt * dt, axis=axes) / (n - 1)
    cov = ops.sum(dp * dt, axis=axes) / (n - 1)
    mu_p = mu_p.reshape(var_p.shape)
    mu_t = mu_t.reshape(var_t.shape)
    num = (2.0 * mu_p * mu_t + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_p * mu_p + mu_t * mu_t + cfg.c1) * (var_p + var_t + cfg.c2)
    return ops.mean(num / den)


def _gaussian_kernel(size: int, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return (k / k.sum()).reshape(1, 1, size, size)


def _ssim_windowed(p: Tensor, t: Tensor, cfg: LossConfig) -> Tensor:
    if p.ndim == 2:
        p, t = p.reshape(1, 1, *p.shape), t.reshape(1, 1, *t.shape)
    elif p.ndim == 3:
        p, t = p.reshape(1, *p.shape), t.reshape(1, *t.shape)
    if p.shape[1] != 1:
        raise ShapeError("windowed ssim expects single-channel depth")
    k = Tensor(_gaussian_kernel(cfg.window))
    blur = lambda x: ops.conv2d(x, k)  # noqa: E731
    mu_p, mu_t = blur(p), blur(t)
    var_p = blur(p * p) - mu_p * mu_p
    var_t = blur(t * t) - mu_t * mu_t
    cov = blur(p * t) - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_p * mu_p + mu_t * mu_t + cfg.c1) * (var_p + var_t + cfg.c2)
    return ops.mean(num / den)


def composite_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """(1 - alpha) * MSE + alpha * (1 - SSIM)."""
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    return (1.0 - cfg.alpha) * mse(pred, target) + cfg.alpha * (1.0 - ssim(pred, target, cfg))


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    n_valid: int

    def csv_row(self, alpha: float) -> list[str]:
        return [f"{alpha:.6f}", f"{self.rmse:.6f}", f"{self.abs_rel:.6f}",
                f"{self.sq_rel:.6f}", f"{self.rmse_log:.6f}"]

    def as_dict(self) -> dict:
        return asdict(self)


def metric_errors(pred_m: np.ndarray, target_m: np.ndarray, min_valid: float = 1e-3) -> MetricsReport:
    """Abs Rel, Sq Rel, RMSE and RMSE log over pixels with target > min_valid (metric depth)."""
    pred_m = np.asarray(pred_m, dtype=np.float64).ravel()
    target_m = np.asarray(target_m, dtype=np.float64).ravel()
    if pred_m.shape != target_m.shape:
        raise ShapeError(f"prediction {pred_m.shape} and target {target_m.shape} differ in size")
    mask = target_m > min_valid
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"no valid target pixels (all <= {min_valid})")
    d_hat, d = pred_m[mask], target_m[mask]
    diff = d_hat - d
    floor = max(min_valid, 1e-9)
    log_diff = np.log(np.maximum(d_hat, floor)) - np.log(d)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / d)),
        sq_rel=float(np.mean(diff ** 2 / d)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean(log_diff ** 2))),
        n_valid=n,
    )


def depth_metrics(pred: DepthMap, target: DepthMap, min_valid: float = 1e-3) -> MetricsReport:
    """Metrics in meters: normalised depth times each map's depth_scale."""
    if pred.values.shape != target.values.shape:
        raise ShapeError(f"prediction {pred.values.shape} and target {target.values.shape} differ in shape")
    return metric_errors(pred.metric(), target.metric(), min_valid)


def write_report(rows: list[tuple[float, MetricsReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for alpha, report in rows:
        writer.writerow(report.csv_row(alpha))
    return buf.getvalue()


def read_report(text: str) -> list[dict[str, float]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected report header {reader.fieldnames}")
    return [{k: float(v) for k, v in row.items()} for row in reader]
