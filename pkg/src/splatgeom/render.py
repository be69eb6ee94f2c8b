"""Forward splat rasterizer: projection, depth-sorted alpha compositing, buffers.

The compositing path is written entirely in differentiable torch ops over
dense (gaussian, pixel) tensors, so gradients flow from every buffer back to
the Gaussian parameters. Per-pixel contribution records reuse the exact alpha
and transmittance values of the compositing pass, which downstream visibility
weights depend on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import torch

from .scene import DTYPE, CameraView, Gaussian3D, GaussianCloud, Scene


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer knobs; defaults follow common splatting practice."""

    near_clip: float = 0.05
    alpha_max: float = 0.99
    alpha_cut: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    cov_reg: float = 0.3  # low-pass term added to cov2d, px^2
    footprint_sigma: float = 3.0


DEFAULT_RENDER_CONFIG = RenderConfig()


@dataclass(frozen=True)
class Projected2D:
    mean2d: torch.Tensor  # (2,)
    cov2d: torch.Tensor  # (2, 2)
    center_depth: float
    gaussian_index: int


@dataclass
class ProjectedBatch:
    """Image-plane footprints of the surviving Gaussians (unsorted)."""

    mean2d: torch.Tensor  # (M, 2)
    cov2d: torch.Tensor  # (M, 2, 2)
    depths: torch.Tensor  # (M,)
    indices: torch.Tensor  # (M,) rows into the source cloud

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class ContributionRecord:
    """Depth-ordered compositing trace shared by visibility computations.

    ``alpha`` holds the effective alphas actually composited (zero where a
    contribution was cut or skipped by early termination), ``transmittance``
    the matching front-to-back transmittance before each contribution.
    """

    order: torch.Tensor  # (M,) cloud rows, sorted by (center depth, row)
    depths: torch.Tensor  # (M,) camera-space center depths in order
    alpha: torch.Tensor  # (M, H, W)
    transmittance: torch.Tensor  # (M, H, W)

    def at(self, row: int, col: int) -> list[tuple[int, float, float]]:
        """Ordered (gaussian_index, alpha, transmittance) list for one pixel."""
        a = self.alpha[:, row, col]
        t = self.transmittance[:, row, col]
        out = []
        for k in range(a.shape[0]):
            if a[k] > 0:
                out.append((int(self.order[k]), float(a[k]), float(t[k])))
        return out


@dataclass
class RenderBuffers:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), alpha-blended, 0 where uncovered
    acc_alpha: torch.Tensor  # (H, W)
    normal: torch.Tensor  # (H, W, 3), unit or zero
    transmittance: torch.Tensor  # (H, W), final T
    contribs: Optional[ContributionRecord] = None


def _cloud_of(scene: Union[Scene, GaussianCloud]) -> GaussianCloud:
    return scene.gaussians if isinstance(scene, Scene) else scene


def project_cloud(cloud: GaussianCloud, cam: CameraView,
                  config: RenderConfig = DEFAULT_RENDER_CONFIG) -> ProjectedBatch:
    """Project every Gaussian, culling near-clip failures and footprints that miss the image."""
    rot_wc = cam.rotation_tensor()
    cam_pts = cloud.centers @ rot_wc.T + cam.translation_tensor()
    z = cam_pts[..., 2]
    front = z > config.near_clip
    idx = torch.nonzero(front, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        empty = torch.zeros((0,), dtype=DTYPE)
        return ProjectedBatch(empty.reshape(0, 2), empty.reshape(0, 2, 2), empty, idx)

    cam_pts = cam_pts[idx]
    z = cam_pts[..., 2]
    x = cam_pts[..., 0]
    y = cam_pts[..., 1]
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)

    # first-order projection Jacobian at the center
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / z**2], dim=-1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / z**2], dim=-1),
    ], dim=-2)  # (M, 2, 3)

    sigma = _covariances(cloud, idx)
    jw = jac @ rot_wc
    cov2d = jw @ sigma @ jw.transpose(-1, -2)
    reg = config.cov_reg * torch.eye(2, dtype=DTYPE)
    cov2d = cov2d + reg

    # conservative bounding box from the dominant eigenvalue
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    mid = 0.5 * (a + c)
    dev = torch.sqrt(torch.clamp((0.5 * (a - c))**2 + b**2, min=0.0))
    radius = config.footprint_sigma * torch.sqrt(torch.clamp(mid + dev, min=0.0))
    on_image = (
        (mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= cam.width - 0.5)
        & (mean2d[:, 1] + radius >= -0.5) & (mean2d[:, 1] - radius <= cam.height - 0.5)
    )
    keep = torch.nonzero(on_image, as_tuple=False).squeeze(-1)
    return ProjectedBatch(mean2d[keep], cov2d[keep], z[keep], idx[keep])


def _covariances(cloud: GaussianCloud, idx: torch.Tensor) -> torch.Tensor:
    rot = cloud.rotation_matrices()[idx]
    s2 = cloud.scales[idx] ** 2
    return rot @ (s2.unsqueeze(-1) * rot.transpose(-1, -2))


def project(g: Gaussian3D, cam: CameraView,
            config: RenderConfig = DEFAULT_RENDER_CONFIG) -> Optional[Projected2D]:
    """Single-Gaussian projection; None when culled."""
    batch = project_cloud(GaussianCloud.from_gaussians([g]), cam, config)
    if len(batch) == 0:
        return None
    return Projected2D(
        mean2d=batch.mean2d[0],
        cov2d=batch.cov2d[0],
        center_depth=float(batch.depths[0]),
        gaussian_index=0,
    )


def _shortest_axis_normals(cloud: GaussianCloud, idx: torch.Tensor,
                           cam: CameraView) -> torch.Tensor:
    """World-space unit normals (shortest covariance axis), flipped toward the camera."""
    rot = cloud.rotation_matrices()[idx]  # (M, 3, 3), columns are local axes
    scales = cloud.scales[idx]
    shortest = torch.argmin(scales.detach(), dim=-1)
    normals = rot[torch.arange(rot.shape[0]), :, shortest]
    to_cam = torch.as_tensor(cam.camera_center(), dtype=DTYPE) - cloud.centers[idx]
    sign = torch.sign((normals * to_cam).sum(dim=-1)).detach()
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return normals * sign.unsqueeze(-1)


def render(scene: Union[Scene, GaussianCloud], cam: CameraView,
           config: RenderConfig = DEFAULT_RENDER_CONFIG,
           record_contribs: bool = False) -> RenderBuffers:
    """Front-to-back alpha compositing of the projected cloud into image buffers."""
    cloud = _cloud_of(scene)
    h, w = cam.height, cam.width
    batch = project_cloud(cloud, cam, config)
    if len(batch) == 0:
        zero = torch.zeros((h, w), dtype=DTYPE)
        return RenderBuffers(
            color=torch.zeros((h, w, 3), dtype=DTYPE),
            depth=zero.clone(),
            acc_alpha=zero.clone(),
            normal=torch.zeros((h, w, 3), dtype=DTYPE),
            transmittance=torch.ones((h, w), dtype=DTYPE),
            contribs=ContributionRecord(
                order=torch.zeros((0,), dtype=torch.long),
                depths=torch.zeros((0,), dtype=DTYPE),
                alpha=torch.zeros((0, h, w), dtype=DTYPE),
                transmittance=torch.zeros((0, h, w), dtype=DTYPE),
            ) if record_contribs else None,
        )

    # global per-view depth sort; ties broken by cloud row for determinism
    order = np.lexsort((batch.indices.numpy(), batch.depths.detach().numpy()))
    order = torch.as_tensor(order, dtype=torch.long)
    mean2d = batch.mean2d[order]
    cov2d = batch.cov2d[order]
    depths = batch.depths[order]
    rows = batch.indices[order]

    grid = cam.pixel_grid()  # (H, W, 2)
    diff = grid.reshape(1, h, w, 2) - mean2d.reshape(-1, 1, 1, 2)
    a = cov2d[:, 0, 0].reshape(-1, 1, 1)
    b = cov2d[:, 0, 1].reshape(-1, 1, 1)
    c = cov2d[:, 1, 1].reshape(-1, 1, 1)
    det = a * c - b * b
    dx = diff[..., 0]
    dy = diff[..., 1]
    quad = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    footprint = torch.exp(-0.5 * torch.clamp(quad, min=0.0))

    opac = cloud.opacities[rows].reshape(-1, 1, 1)
    alpha = torch.clamp(opac * footprint, max=config.alpha_max)
    alpha = alpha * (alpha.detach() >= config.alpha_cut)

    # early termination: drop contributions once transmittance falls below the stop
    if config.transmittance_stop > 0:
        t_pre = _exclusive_cumprod(1.0 - alpha)
        alpha = alpha * (t_pre.detach() >= config.transmittance_stop)

    trans = _exclusive_cumprod(1.0 - alpha)
    weight = alpha * trans
    acc = weight.sum(dim=0)
    t_final = trans[-1] * (1.0 - alpha[-1])

    colors = torch.clamp(cloud.colors[rows], 0.0, 1.0)
    color = (weight.unsqueeze(-1) * colors.reshape(-1, 1, 1, 3)).sum(dim=0)

    zblend = (weight * depths.reshape(-1, 1, 1)).sum(dim=0)
    covered = acc > 0
    depth = torch.where(covered, zblend / torch.clamp(acc, min=1e-30), torch.zeros_like(acc))

    normals = _shortest_axis_normals(cloud, rows, cam)
    nmap = (weight.unsqueeze(-1) * normals.reshape(-1, 1, 1, 3)).sum(dim=0)
    nnorm = torch.linalg.norm(nmap, dim=-1, keepdim=True)
    normal = torch.where(nnorm > 1e-12, nmap / torch.clamp(nnorm, min=1e-30), torch.zeros_like(nmap))

    contribs = None
    if record_contribs:
        contribs = ContributionRecord(order=rows, depths=depths, alpha=alpha, transmittance=trans)
    return RenderBuffers(
        color=color, depth=depth, acc_alpha=acc, normal=normal,
        transmittance=t_final, contribs=contribs,
    )


def _exclusive_cumprod(factors: torch.Tensor) -> torch.Tensor:
    """Exclusive front-to-back product along dim 0: out[i] = prod(factors[:i])."""
    prod = torch.cumprod(factors, dim=0)
    ones = torch.ones_like(factors[:1])
    return torch.cat([ones, prod[:-1]], dim=0)
