"""Domain types: anisotropic Gaussian primitives, pinhole cameras, and scenes.

Covariances are stored factored (axis scales + unit quaternion) so that
``sigma = R diag(scale^2) R^T`` is symmetric positive definite by
construction. A :class:`GaussianCloud` keeps the batched storage-domain
tensors (log scales, logit opacities, DC color features) that the optimizer
updates; :class:`Gaussian3D` is the activated per-primitive value object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
import torch

DTYPE = torch.float64

# DC basis constant mapping color <-> stored feature: color = 0.5 + SH_C0 * f
SH_C0 = 0.28209479177387814

OPACITY_EPS = 1e-7
UNIT_QUAT_TOL = 1e-6
ROT_ORTHO_TOL = 1e-6

ViewId = Union[str, int]


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized internally, so raw optimizer-domain values
    are accepted.
    """
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a proper rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def factor_covariance(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor an SPD covariance into (scale, quaternion) with scale ascending.

    Inverse of ``R diag(scale^2) R^T``; the rotation sign is fixed so the
    eigenbasis is proper (det +1).
    """
    eigvals, eigvecs = np.linalg.eigh(np.asarray(sigma, dtype=np.float64))
    if np.any(eigvals <= 0):
        raise ValueError("covariance is not positive definite")
    if np.linalg.det(eigvecs) < 0:
        eigvecs = eigvecs.copy()
        eigvecs[:, 0] = -eigvecs[:, 0]
    return np.sqrt(eigvals), rotmat_to_quat(eigvecs)


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian primitive in activated (world) domain."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))
        if not np.all(self.scale > 0):
            raise ValueError("scale components must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > UNIT_QUAT_TOL:
            raise ValueError("rotation quaternion must have unit norm")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must lie in [0, 1]")

    def covariance(self) -> np.ndarray:
        rot = quat_to_rotmat(torch.as_tensor(self.rotation, dtype=DTYPE)).numpy()
        return rot @ np.diag(self.scale**2) @ rot.T


class GaussianCloud:
    """Batched Gaussians in storage domain (log scale, logit opacity, DC feature).

    Row order is the stable primitive index used by visibility records and
    gate vectors; operations never reorder rows.
    """

    def __init__(self, centers, log_scales, rotations, logit_opacities, features_dc):
        self.centers = torch.as_tensor(centers, dtype=DTYPE)
        self.log_scales = torch.as_tensor(log_scales, dtype=DTYPE)
        self.rotations = torch.as_tensor(rotations, dtype=DTYPE)
        self.logit_opacities = torch.as_tensor(logit_opacities, dtype=DTYPE)
        self.features_dc = torch.as_tensor(features_dc, dtype=DTYPE)
        n = self.centers.shape[0]
        if self.centers.shape != (n, 3) or self.log_scales.shape != (n, 3):
            raise ValueError("centers and log_scales must be (N, 3)")
        if self.rotations.shape != (n, 4):
            raise ValueError("rotations must be (N, 4)")
        if self.logit_opacities.shape != (n,):
            raise ValueError("logit_opacities must be (N,)")
        if self.features_dc.shape != (n, 3):
            raise ValueError("features_dc must be (N, 3)")

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianCloud":
        gs = list(gaussians)
        centers = np.stack([g.center for g in gs]) if gs else np.zeros((0, 3))
        scales = np.stack([g.scale for g in gs]) if gs else np.ones((0, 3))
        rots = np.stack([g.rotation for g in gs]) if gs else np.zeros((0, 4))
        opac = np.array([g.opacity for g in gs]) if gs else np.zeros((0,))
        colors = np.stack([g.color for g in gs]) if gs else np.zeros((0, 3))
        opac = np.clip(opac, OPACITY_EPS, 1.0 - OPACITY_EPS)
        return cls(
            centers,
            np.log(scales),
            rots,
            np.log(opac / (1.0 - opac)),
            (colors - 0.5) / SH_C0,
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, index: int) -> Gaussian3D:
        q = self.rotations[index]
        q = q / torch.linalg.norm(q)
        return Gaussian3D(
            center=self.centers[index].numpy(),
            scale=self.scales[index].numpy(),
            rotation=q.numpy(),
            opacity=float(self.opacities[index]),
            color=np.clip(self.colors[index].numpy(), 0.0, 1.0),
        )

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.logit_opacities)

    @property
    def colors(self) -> torch.Tensor:
        return 0.5 + SH_C0 * self.features_dc

    def rotation_matrices(self) -> torch.Tensor:
        return quat_to_rotmat(self.rotations)

    def covariances(self) -> torch.Tensor:
        rot = self.rotation_matrices()
        s2 = self.scales**2
        return rot @ (s2.unsqueeze(-1) * rot.transpose(-1, -2))

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(
            self.centers.detach().clone(),
            self.log_scales.detach().clone(),
            self.rotations.detach().clone(),
            self.logit_opacities.detach().clone(),
            self.features_dc.detach().clone(),
        )

    def with_parameters(self, params: dict) -> "GaussianCloud":
        """Cloud view over a parameter dict (shared tensors, e.g. autograd leaves)."""
        return GaussianCloud(
            params["center"],
            params["log_scale"],
            params["rotation"],
            params["logit_opacity"],
            params["color"],
        )

    def parameters(self) -> dict:
        return {
            "center": self.centers,
            "log_scale": self.log_scales,
            "rotation": self.rotations,
            "logit_opacity": self.logit_opacities,
            "color": self.features_dc,
        }


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid pose.

    The camera looks along +z in its own frame; image x is right, image y is
    down, and pixel centers sit at integer coordinates.
    """

    view_id: ViewId
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-to-camera, (3, 3)
    translation: np.ndarray  # world-to-camera, (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > ROT_ORTHO_TOL:
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROT_ORTHO_TOL:
            raise ValueError("pose rotation must have determinant +1")

    @classmethod
    def look_at(cls, view_id: ViewId, position, target, up=(0.0, 0.0, 1.0), *,
                width: int, height: int, fx: float, fy: float | None = None,
                cx: float | None = None, cy: float | None = None) -> "CameraView":
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-12:
            # viewing direction parallel to up: pick an arbitrary right axis
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            if np.linalg.norm(right) < 1e-12:
                right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot_c2w = np.stack([right, down, forward], axis=1)
        rotation = rot_c2w.T
        translation = -rotation @ position
        return cls(
            view_id=view_id, width=width, height=height,
            fx=fx, fy=fx if fy is None else fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            rotation=rotation, translation=translation,
        )

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def view_direction(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def rotation_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.rotation, dtype=DTYPE)

    def translation_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.translation, dtype=DTYPE)

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation_tensor().T + self.translation_tensor()

    def project_points(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """World points -> (pixel coords (..., 2), camera-space depth (...))."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        u = self.fx * cam[..., 0] / z + self.cx
        v = self.fy * cam[..., 1] / z + self.cy
        return torch.stack([u, v], dim=-1), z

    def unproject(self, pixels: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """Pixel coords (..., 2) + camera-space depth (...) -> world points."""
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        cam = torch.stack([x, y, depth], dim=-1)
        return (cam - self.translation_tensor()) @ self.rotation_tensor()

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def pixel_grid(self) -> torch.Tensor:
        """(H, W, 2) tensor of pixel-center coordinates (x, y)."""
        ys = torch.arange(self.height, dtype=DTYPE)
        xs = torch.arange(self.width, dtype=DTYPE)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx, gy], dim=-1)


@dataclass
class Scene:
    """A Gaussian cloud plus the camera views observing it."""

    gaussians: GaussianCloud
    views: list[CameraView] = field(default_factory=list)

    def view(self, view_id: ViewId) -> CameraView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"no view with id {view_id!r}")

    def __len__(self) -> int:
        return len(self.gaussians)


def eval_gaussian(g: Gaussian3D, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    rot = quat_to_rotmat(torch.as_tensor(g.rotation, dtype=DTYPE)).numpy()
    local = rot.T @ (x - g.center)
    quad = np.sum((local / g.scale) ** 2)
    return float(np.exp(-0.5 * quad))
