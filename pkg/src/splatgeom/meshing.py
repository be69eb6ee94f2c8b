"""TSDF fusion of rendered depth maps and triangle extraction.

Depth observations are integrated into a voxel grid as truncated projective
signed distances (positive in free space in front of the surface) with
weight-one running averages; the surface is the zero level set, extracted by
marching cubes restricted to observed voxels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from skimage import measure

from .render import DEFAULT_RENDER_CONFIG, RenderConfig, render
from .scene import CameraView, GaussianCloud

FUSION_ALPHA_THRESHOLD = 0.5
_SLAB = 32  # z-slab height for chunked voxel updates


@dataclass
class TsdfVolume:
    """Voxel grid of (normalized signed distance, observation weight).

    Values live on grid points ``origin + index * voxel_size``; distances are
    stored normalized by the truncation band into [-1, 1].
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    sdf: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least two voxels")
        if self.sdf.shape != tuple(self.dims) or self.weights.shape != tuple(self.dims):
            raise ValueError("sdf/weights shapes must match dims")

    @classmethod
    def create(cls, bbox_min, bbox_max, resolution: int = 256,
               truncation_voxels: float = 4.0, padding: float = 0.05) -> "TsdfVolume":
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        span = bbox_max - bbox_min
        pad = padding * span.max()
        origin = bbox_min - pad
        extent = span + 2 * pad
        voxel = float(extent.max()) / (resolution - 1)
        dims = tuple(int(np.ceil(e / voxel)) + 1 for e in extent)
        return cls(
            origin=origin, voxel_size=voxel, dims=dims,
            truncation=truncation_voxels * voxel,
            sdf=np.ones(dims, dtype=np.float32),
            weights=np.zeros(dims, dtype=np.float32),
        )

    def grid_points(self, z0: int, z1: int) -> np.ndarray:
        xs = self.origin[0] + np.arange(self.dims[0]) * self.voxel_size
        ys = self.origin[1] + np.arange(self.dims[1]) * self.voxel_size
        zs = self.origin[2] + np.arange(z0, z1) * self.voxel_size
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0


def integrate(volume: TsdfVolume, depth: torch.Tensor, cam: CameraView,
              mask: Optional[torch.Tensor] = None) -> TsdfVolume:
    """Fold one depth map into the volume (in place) and return it.

    Standard projective update: each voxel is projected into the view, the
    depth at that pixel is looked up, and the truncated distance
    ``depth - voxel_z`` is averaged in with weight one. Voxels more than one
    truncation band behind the surface, masked-out pixels, and sentinel
    depths contribute nothing.
    """
    depth_np = depth.detach().numpy() if isinstance(depth, torch.Tensor) else np.asarray(depth)
    mask_np = None
    if mask is not None:
        mask_np = mask.numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    h, w = depth_np.shape
    rot = cam.rotation
    trans = cam.translation
    for z0 in range(0, volume.dims[2], _SLAB):
        z1 = min(z0 + _SLAB, volume.dims[2])
        pts = volume.grid_points(z0, z1)
        cam_pts = pts @ rot.T + trans
        z = cam_pts[..., 2]
        ok = z > 1e-6
        z_safe = np.where(ok, z, 1.0)
        u = np.rint(cam.fx * cam_pts[..., 0] / z_safe + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * cam_pts[..., 1] / z_safe + cam.cy).astype(np.int64)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        u_safe = np.clip(u, 0, w - 1)
        v_safe = np.clip(v, 0, h - 1)
        d = depth_np[v_safe, u_safe]
        ok &= d > 0
        if mask_np is not None:
            ok &= mask_np[v_safe, u_safe]
        signed = d - z
        ok &= signed > -volume.truncation  # beyond-truncation voxels stay untouched
        obs = np.clip(signed / volume.truncation, -1.0, 1.0).astype(np.float32)

        sdf_slab = volume.sdf[:, :, z0:z1]
        w_slab = volume.weights[:, :, z0:z1]
        new_w = w_slab + ok.astype(np.float32)
        updated = np.where(ok, (w_slab * sdf_slab + ok * obs) / np.maximum(new_w, 1.0), sdf_slab)
        volume.sdf[:, :, z0:z1] = updated
        volume.weights[:, :, z0:z1] = new_w
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero level set of the fused volume over observed voxels."""
    if not (volume.weights > 0).any():
        warnings.warn("extracting a mesh from an empty volume", stacklevel=2)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume.sdf.astype(np.float64), level=0.0,
            spacing=(volume.voxel_size,) * 3,
            mask=volume.weights > 0,
        )
    except (ValueError, RuntimeError):
        warnings.warn("volume contains no zero crossing; returning an empty mesh",
                      stacklevel=2)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(verts + volume.origin, faces.astype(np.int64))


def fuse_views(cloud: GaussianCloud, views: Sequence[CameraView], *,
               resolution: int = 256, truncation_voxels: float = 4.0,
               padding: float = 0.05,
               render_config: RenderConfig = DEFAULT_RENDER_CONFIG,
               alpha_threshold: float = FUSION_ALPHA_THRESHOLD) -> tuple[TsdfVolume, TriangleMesh]:
    """Render every view, fuse the depths, and extract the surface mesh.

    Only pixels whose accumulated opacity clears ``alpha_threshold`` are
    fused, to keep unsupported background depths out of the volume. The grid
    covers the Gaussian centers' bounding box with proportional padding.
    """
    centers = cloud.centers.detach().numpy()
    volume = TsdfVolume.create(centers.min(axis=0), centers.max(axis=0),
                               resolution=resolution,
                               truncation_voxels=truncation_voxels, padding=padding)
    with torch.no_grad():
        for cam in views:
            buf = render(cloud, cam, render_config)
            integrate(volume, buf.depth, cam, mask=buf.acc_alpha > alpha_threshold)
    return volume, extract_mesh(volume)
