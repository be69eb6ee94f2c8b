"""Image reconstruction losses: L1 plus windowed structural similarity."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .scene import DTYPE

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Normalized 2D Gaussian filter window."""
    coords = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _windowed_mean(img: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    # img (C, H, W) -> valid-window local means (C, H', W')
    kernel = window.reshape(1, 1, *window.shape)
    return F.conv2d(img.unsqueeze(1), kernel).squeeze(1)


def ssim(img_a: torch.Tensor, img_b: torch.Tensor, window_size: int = 11,
         sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM over valid windows, averaged across channels (data range 1)."""
    if img_a.shape != img_b.shape:
        raise ValueError("images must share one shape")
    if img_a.dim() == 2:
        img_a = img_a.unsqueeze(-1)
        img_b = img_b.unsqueeze(-1)
    h, w = img_a.shape[:2]
    if h < window_size or w < window_size:
        raise ValueError(f"images must be at least {window_size} pixels per side")
    a = img_a.permute(2, 0, 1)
    b = img_b.permute(2, 0, 1)
    window = gaussian_window(window_size, sigma)
    mu_a = _windowed_mean(a, window)
    mu_b = _windowed_mean(b, window)
    var_a = _windowed_mean(a * a, window) - mu_a**2
    var_b = _windowed_mean(b * b, window) - mu_b**2
    cov = _windowed_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor,
                     ssim_weight: float = 0.2, window_size: int = 11,
                     sigma: float = 1.5) -> torch.Tensor:
    """(1 - w) * L1 + w * (1 - SSIM) between a rendered image and its target."""
    if rendered.shape != target.shape:
        raise ValueError(
            f"rendered shape {tuple(rendered.shape)} does not match target {tuple(target.shape)}")
    l1 = torch.abs(rendered - target).mean()
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(rendered, target, window_size, sigma))
