"""Full-reference image metrics (MAE, MSE, PSNR, SSIM) and head-pose RMSE."""

import json
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsReport:
    mae: float
    mse: float
    psnr_db: float
    ssim: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) or (H, W) image, got {img.shape}")
    return img


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def psnr(mse, data_range=1.0) -> float:
    """10 log10(range^2 / mse), capped at 99 dB once mse < 1e-10."""
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim(a, b, data_range=1.0) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use Gaussian-weighted population moments over every
    fully contained window position (no padding); constants
    C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW} px on each side")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    filt = lambda x: np.einsum("chwij,ij->chw", sliding_window_view(x, win.shape, axis=(1, 2)), win)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(ssim_map.mean(axis=(1, 2))))


def image_metrics(a, b) -> MetricsReport:
    """MAE, MSE, PSNR (range 1) and SSIM between two images in [0, 1]."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff ** 2))
    return MetricsReport(
        mae=float(np.mean(np.abs(diff))),
        mse=mse,
        psnr_db=psnr(mse),
        ssim=ssim(a, b),
    )


def prmse(poses_a, poses_b) -> float:
    """RMSE over all Euler-angle entries (degrees) of two pose sequences."""
    a = np.asarray(poses_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(poses_b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape or not len(a):
        raise ShapeError("pose lists must be non-empty and of equal length")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def load_image(path) -> np.ndarray:
    """Read an 8-bit image file as a (3, H, W) float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{path}: not a readable image ({exc})") from exc
    return rgb.transpose(2, 0, 1)
