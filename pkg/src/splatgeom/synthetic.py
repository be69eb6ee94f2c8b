"""Deterministic synthetic scenes with closed-form ray-cast ground truth.

Three scene families are provided:

* ``textured-plane`` -- a single textured rectangle observed by a camera ring.
* ``sphere`` -- a Gaussian-shelled sphere observed by a camera ring.
* ``two-planes-occluder`` -- a large far plane plus a small opaque near patch
  placed so the patch occludes part of the far plane in exactly one of the
  two views.

Every generator is a pure function of its descriptor: the same
:class:`SceneSpec` always yields a bitwise-identical scene. Surface geometry
stays analytic, so per-view depth and pairwise co-visibility can be ray cast
exactly and used as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .scene import DTYPE, CameraView, Gaussian3D, GaussianCloud, Scene, quat_from_axis_angle

SCENE_KINDS = ("textured-plane", "sphere", "two-planes-occluder")

_RAY_NEAR = 1e-3


@dataclass(frozen=True)
class SceneSpec:
    """Descriptor for a synthetic scene; every field participates in the RNG seed path."""

    kind: str
    seed: int = 0
    n_views: int = 4
    image_size: tuple[int, int] = (64, 64)  # (H, W)
    focal: float = 70.0
    gaussians_per_axis: int = 14
    thickness: float = 0.012
    opacity: float = 0.92
    plane_extent: float = 1.1
    ring_radius: float = 0.55
    ring_height: float = 2.6
    sphere_radius: float = 0.8

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")


@dataclass(frozen=True)
class _Rect:
    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float


@dataclass(frozen=True)
class _Sphere:
    center: np.ndarray
    radius: float


# two-planes-occluder geometry: the near patch is placed toward the far
# plane's +x edge so that, seen from the laterally offset second camera, its
# shadow misses the far rectangle entirely.
_FAR_HALF = 1.5
_NEAR_CENTER = np.array([0.85, 0.0, 1.15])
_NEAR_HALF = 0.38
_OCCLUDER_CAM0_POS = np.array([0.85, 0.0, 3.2])
_OCCLUDER_CAM0_TARGET = np.array([0.85, 0.0, 0.0])
_OCCLUDER_CAM1_POS = np.array([-1.35, 0.0, 3.0])
_OCCLUDER_CAM1_TARGET = np.array([0.1, 0.0, 0.0])


def _surfaces(spec: SceneSpec) -> list:
    ez = np.array([0.0, 0.0, 1.0])
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    if spec.kind == "textured-plane":
        e = spec.plane_extent
        return [_Rect(np.zeros(3), ez, ex, ey, e, e)]
    if spec.kind == "sphere":
        return [_Sphere(np.zeros(3), spec.sphere_radius)]
    return [
        _Rect(np.zeros(3), ez, ex, ey, _FAR_HALF, _FAR_HALF),
        _Rect(_NEAR_CENTER, ez, ex, ey, _NEAR_HALF, _NEAR_HALF),
    ]


def cast_rays(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """First-hit ray parameter for world-space rays ``origin + s * dirs``.

    Returns an array shaped like ``dirs[..., 0]`` with 0 where nothing is hit.
    When ``dirs`` are camera rays with unit z in camera coordinates, the
    returned parameter equals the camera-space depth of the hit.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best = np.full(dirs.shape[:-1], np.inf)
    for surf in _surfaces(spec):
        if isinstance(surf, _Rect):
            denom = dirs @ surf.normal
            offset = float(surf.normal @ (surf.center - origin))
            with np.errstate(divide="ignore", invalid="ignore"):
                s = offset / denom
            hit = origin + s[..., None] * dirs - surf.center
            inside = (
                (np.abs(denom) > 1e-12)
                & (s > _RAY_NEAR)
                & (np.abs(hit @ surf.axis_u) <= surf.half_u)
                & (np.abs(hit @ surf.axis_v) <= surf.half_v)
            )
            best = np.where(inside & (s < best), s, best)
        else:
            rel = origin - surf.center
            a = np.sum(dirs * dirs, axis=-1)
            b = 2.0 * (dirs @ rel)
            c = float(rel @ rel) - surf.radius**2
            disc = b * b - 4 * a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            s0 = (-b - sq) / (2 * a)
            s1 = (-b + sq) / (2 * a)
            s = np.where(s0 > _RAY_NEAR, s0, s1)
            good = ok & (s > _RAY_NEAR)
            best = np.where(good & (s < best), s, best)
    return np.where(np.isinf(best), 0.0, best)


def _camera_dirs_world(cam: CameraView, pixels: np.ndarray) -> np.ndarray:
    """World directions with unit camera-space z for (..., 2) pixel coords."""
    dx = (pixels[..., 0] - cam.cx) / cam.fx
    dy = (pixels[..., 1] - cam.cy) / cam.fy
    d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    return d_cam @ cam.rotation  # R^T applied row-wise


def ray_cast_depth(spec: SceneSpec, cam: CameraView) -> torch.Tensor:
    """Exact camera-space depth of the first surface hit per pixel (0 = miss)."""
    grid = cam.pixel_grid().numpy()
    dirs = _camera_dirs_world(cam, grid)
    depth = cast_rays(spec, cam.camera_center(), dirs)
    return torch.as_tensor(depth, dtype=DTYPE)


def ray_cast_covisibility(spec: SceneSpec, cam_r: CameraView, cam_n: CameraView,
                          tol: float = 1e-4) -> torch.Tensor:
    """True where the surface point seen by ``cam_r`` is also the first hit in ``cam_n``."""
    depth_r = ray_cast_depth(spec, cam_r)
    grid = cam_r.pixel_grid()
    points = cam_r.unproject(grid, depth_r)
    pix_n, z_n = cam_n.project_points(points)
    hit = depth_r > 0
    in_image = (
        (pix_n[..., 0] >= 0) & (pix_n[..., 0] <= cam_n.width - 1)
        & (pix_n[..., 1] >= 0) & (pix_n[..., 1] <= cam_n.height - 1)
        & (z_n > _RAY_NEAR)
    )
    dirs_n = _camera_dirs_world(cam_n, pix_n.numpy())
    first_hit = cast_rays(spec, cam_n.camera_center(), dirs_n)
    first_hit_t = torch.as_tensor(first_hit, dtype=DTYPE)
    unoccluded = (first_hit_t > 0) & (first_hit_t >= z_n - tol)
    return hit & in_image & unoccluded


def _ring_cameras(spec: SceneSpec, target, radius: float, height: float,
                  phase: float = 0.0) -> list[CameraView]:
    h, w = spec.image_size
    cams = []
    for i in range(spec.n_views):
        theta = 2 * np.pi * i / spec.n_views + phase
        pos = np.array([radius * np.cos(theta), radius * np.sin(theta), height])
        cams.append(CameraView.look_at(
            i, pos, target, width=w, height=h, fx=spec.focal,
        ))
    return cams


def _texture(rng: np.random.Generator, points_uv: np.ndarray) -> np.ndarray:
    """Smooth deterministic RGB texture over 2D surface coordinates."""
    colors = np.empty((points_uv.shape[0], 3))
    for c in range(3):
        base = rng.uniform(0.35, 0.6)
        val = np.full(points_uv.shape[0], base)
        for _ in range(3):
            freq = rng.uniform(1.5, 5.0, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            amp = rng.uniform(0.08, 0.22)
            val += amp * np.sin(freq[0] * points_uv[:, 0] + phase[0]) * np.cos(
                freq[1] * points_uv[:, 1] + phase[1])
        colors[:, c] = val
    return np.clip(colors, 0.05, 0.95)


def _plane_patch_gaussians(rng, center, half_u, half_v, per_axis, thickness, opacity,
                           scale_factor=0.8, jitter=0.25, layers=1):
    """Jittered grid of thin Gaussians tiling an axis-aligned z-normal rectangle."""
    cell_u = 2 * half_u / per_axis
    cell_v = 2 * half_v / per_axis
    gaussians = []
    for _ in range(layers):
        us = (np.arange(per_axis) + 0.5) * cell_u - half_u
        vs = (np.arange(per_axis) + 0.5) * cell_v - half_v
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        uu = uu.ravel() + rng.uniform(-jitter, jitter, uu.size) * cell_u
        vv = vv.ravel() + rng.uniform(-jitter, jitter, vv.size) * cell_v
        pts = np.stack([center[0] + uu, center[1] + vv, np.full(uu.size, center[2])], axis=1)
        colors = _texture(rng, np.stack([uu, vv], axis=1) * (2.0 / max(half_u, half_v)))
        opac = np.clip(opacity + rng.uniform(-0.02, 0.02, uu.size), 0.05, 0.99)
        for p, col, o in zip(pts, colors, opac):
            gaussians.append(Gaussian3D(
                center=p,
                scale=np.array([scale_factor * cell_u, scale_factor * cell_v, thickness]),
                rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                opacity=float(o),
                color=col,
            ))
    return gaussians


def _make_textured_plane(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    gaussians = _plane_patch_gaussians(
        rng, np.zeros(3), spec.plane_extent, spec.plane_extent,
        spec.gaussians_per_axis, spec.thickness, spec.opacity,
    )
    views = _ring_cameras(spec, np.zeros(3), spec.ring_radius, spec.ring_height)
    return Scene(GaussianCloud.from_gaussians(gaussians), views)


def _make_sphere(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussians_per_axis**2
    golden = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r_xy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = golden * i
    dirs = np.stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z], axis=1)
    radius = spec.sphere_radius
    spacing = np.sqrt(4 * np.pi * radius**2 / n)
    colors = _texture(rng, np.stack([np.arctan2(dirs[:, 1], dirs[:, 0]), np.arcsin(np.clip(dirs[:, 2], -1, 1))], axis=1) * 2.0)
    opac = np.clip(spec.opacity + rng.uniform(-0.02, 0.02, n), 0.05, 0.99)
    gaussians = []
    ez = np.array([0.0, 0.0, 1.0])
    for k in range(n):
        d = dirs[k]
        axis = np.cross(ez, d)
        angle = float(np.arccos(np.clip(d @ ez, -1.0, 1.0)))
        quat = quat_from_axis_angle(axis, angle)
        gaussians.append(Gaussian3D(
            center=radius * d,
            scale=np.array([0.8 * spacing, 0.8 * spacing, spec.thickness]),
            rotation=quat,
            opacity=float(opac[k]),
            color=colors[k],
        ))
    views = _ring_cameras(spec, np.zeros(3), 2.4 * radius, spec.ring_height * radius / 2.0)
    return Scene(GaussianCloud.from_gaussians(gaussians), views)


def _make_two_planes(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    gaussians = _plane_patch_gaussians(
        rng, np.zeros(3), _FAR_HALF, _FAR_HALF,
        spec.gaussians_per_axis, spec.thickness, spec.opacity,
    )
    n_far = len(gaussians)
    # the occluding patch gets two dense, strongly overlapping layers so its
    # transmittance residue stays far below the visibility threshold
    per_axis_near = max(6, int(round(spec.gaussians_per_axis * _NEAR_HALF / _FAR_HALF * 2)))
    gaussians += _plane_patch_gaussians(
        rng, _NEAR_CENTER, _NEAR_HALF, _NEAR_HALF, per_axis_near,
        spec.thickness, 0.97, scale_factor=1.1, jitter=0.2, layers=2,
    )
    h, w = spec.image_size
    views = [
        CameraView.look_at(0, _OCCLUDER_CAM0_POS, _OCCLUDER_CAM0_TARGET, width=w, height=h, fx=spec.focal),
        CameraView.look_at(1, _OCCLUDER_CAM1_POS, _OCCLUDER_CAM1_TARGET, width=w, height=h, fx=spec.focal),
    ]
    assert n_far == far_plane_gaussian_count(spec)
    return Scene(GaussianCloud.from_gaussians(gaussians), views)


def far_plane_gaussian_count(spec: SceneSpec) -> int:
    """Rows [0, count) of a two-planes-occluder cloud belong to the far plane."""
    return spec.gaussians_per_axis**2


def make_synthetic_scene(spec: SceneSpec) -> Scene:
    """Build the scene named by ``spec.kind``; deterministic in the descriptor."""
    if spec.kind == "textured-plane":
        return _make_textured_plane(spec)
    if spec.kind == "sphere":
        return _make_sphere(spec)
    return _make_two_planes(spec)


def synthetic_mono_depth(depth: torch.Tensor, *, seed: int = 0, scale: float = 1.06,
                         offset: float = -0.08, bias_amplitude: float = 0.03,
                         inverse: bool = False) -> torch.Tensor:
    """Monocular-style depth: affine-distorted true depth plus a smooth bias field.

    Pixels without geometry (zero sentinel) are filled with the farthest
    distorted value so the map is dense like a real single-image prediction.
    """
    d = depth.numpy() if isinstance(depth, torch.Tensor) else np.asarray(depth, dtype=np.float64)
    rng = np.random.default_rng(seed)
    h, w = d.shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    bias = np.zeros_like(d)
    for _ in range(2):
        fu, fv = rng.integers(1, 3, size=2)
        pu, pv = rng.uniform(0, 2 * np.pi, size=2)
        bias += np.sin(2 * np.pi * fu * xx + pu) * np.sin(2 * np.pi * fv * yy + pv)
    bias *= bias_amplitude / 2.0
    base = 1.0 / np.maximum(d, 1e-9) if inverse else d
    mono = scale * base + offset + bias
    valid = d > 0
    if valid.any():
        fill = mono[valid].max()
        mono = np.where(valid, mono, fill)
    return torch.as_tensor(mono, dtype=DTYPE)
