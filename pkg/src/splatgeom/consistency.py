"""Multi-view geometric supervision over rendered depth, normal, and image buffers.

The central quantity is the forward-backward reprojection error: a reference
pixel is lifted by its rendered depth, dropped into the neighbor view, lifted
again by the neighbor's depth, and projected back; the returned pixel
displacement measures cross-view geometric agreement. Supervision is applied
over the union of pixels that pass this depth check and pixels deemed
co-visible by the gated opacity map, with the opacity map additionally acting
as a detached confidence weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .scene import DTYPE, CameraView
from .visibility import OpacityMap

DEFAULT_PHI_MAX = 1.0
_TINY = 1e-30


class EmptySupervisionError(RuntimeError):
    """Raised when a view pair offers no supervised pixels at all."""


@dataclass
class ReprojectionField:
    """Per-pixel forward-backward reprojection error in pixels.

    ``phi`` is NaN wherever ``valid`` is False; reductions must go through
    the mask.
    """

    phi: torch.Tensor  # (H, W)
    valid: torch.Tensor  # (H, W) bool


@dataclass
class SupervisionMask:
    depth_ok: torch.Tensor  # (H, W) bool, reprojection error within threshold
    covis: torch.Tensor  # (H, W) bool, from the gated opacity map
    union_v: torch.Tensor  # (H, W) bool, depth_ok | covis


@dataclass
class PatchLoss:
    value: torch.Tensor  # scalar
    used: int
    skipped: int


def grayscale(image: torch.Tensor) -> torch.Tensor:
    """Rec.601 luma of an (H, W, 3) image (pass-through for single channel)."""
    if image.dim() == 2:
        return image
    w = torch.tensor([0.299, 0.587, 0.114], dtype=image.dtype)
    return image @ w


def bilinear_sample(values: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of an (H, W) map at (..., 2) pixel coordinates.

    Coordinates are clamped to the valid rectangle; callers track validity
    separately.
    """
    h, w = values.shape
    x = coords[..., 0].clamp(0.0, w - 1.0)
    y = coords[..., 1].clamp(0.0, h - 1.0)
    x0 = x.floor().long().clamp(0, w - 2)
    y0 = y.floor().long().clamp(0, h - 2)
    fx = x - x0
    fy = y - y0
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def _bilinear_corner_min(values: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Minimum of the four interpolation corners (sentinel detection)."""
    h, w = values.shape
    x0 = coords[..., 0].clamp(0.0, w - 1.0).floor().long().clamp(0, w - 2)
    y0 = coords[..., 1].clamp(0.0, h - 1.0).floor().long().clamp(0, h - 2)
    stack = torch.stack([values[y0, x0], values[y0, x0 + 1],
                         values[y0 + 1, x0], values[y0 + 1, x0 + 1]])
    return stack.min(dim=0).values


def reprojection_error(depth_r: torch.Tensor, depth_n: torch.Tensor,
                       cam_r: CameraView, cam_n: CameraView) -> ReprojectionField:
    """Forward-backward reprojection error of the reference view against a neighbor."""
    if depth_r.shape != (cam_r.height, cam_r.width):
        raise ValueError("reference depth map does not match its camera size")
    if depth_n.shape != (cam_n.height, cam_n.width):
        raise ValueError("neighbor depth map does not match its camera size")

    grid = cam_r.pixel_grid()
    valid = depth_r > 0
    depth_safe = torch.where(valid, depth_r, torch.ones_like(depth_r))
    points = cam_r.unproject(grid, depth_safe)

    cam_pts = cam_n.world_to_camera(points)
    z_n = cam_pts[..., 2]
    valid = valid & (z_n > _TINY)
    z_div = torch.where(valid, cam_pts[..., 2], torch.ones_like(z_n))
    pix_n = torch.stack([
        cam_n.fx * cam_pts[..., 0] / z_div + cam_n.cx,
        cam_n.fy * cam_pts[..., 1] / z_div + cam_n.cy,
    ], dim=-1)
    valid = valid & (
        (pix_n[..., 0] >= 0) & (pix_n[..., 0] <= cam_n.width - 1)
        & (pix_n[..., 1] >= 0) & (pix_n[..., 1] <= cam_n.height - 1)
    )
    pix_n = torch.where(valid.unsqueeze(-1), pix_n, torch.zeros_like(pix_n))

    sampled = bilinear_sample(depth_n, pix_n)
    valid = valid & (_bilinear_corner_min(depth_n, pix_n) > 0)
    sampled = torch.where(valid, sampled, torch.ones_like(sampled))

    points_back = cam_n.unproject(pix_n, sampled)
    back_pts = cam_r.world_to_camera(points_back)
    z_r = back_pts[..., 2]
    valid = valid & (z_r > _TINY)
    z_div_r = torch.where(valid, z_r, torch.ones_like(z_r))
    pix_back = torch.stack([
        cam_r.fx * back_pts[..., 0] / z_div_r + cam_r.cx,
        cam_r.fy * back_pts[..., 1] / z_div_r + cam_r.cy,
    ], dim=-1)

    delta = pix_back - grid
    phi = torch.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + _TINY)
    nan = torch.full_like(phi, float("nan"))
    return ReprojectionField(phi=torch.where(valid, phi, nan), valid=valid)


def build_supervision_mask(field: ReprojectionField, covis: torch.Tensor,
                           phi_max: float = DEFAULT_PHI_MAX) -> SupervisionMask:
    depth_ok = field.valid & (torch.nan_to_num(field.phi, nan=float("inf")) <= phi_max)
    return SupervisionMask(depth_ok=depth_ok, covis=covis, union_v=depth_ok | covis)


def multi_view_geometric_loss(field: ReprojectionField, opacity: OpacityMap,
                              mask: SupervisionMask, vis_weight: float = 0.5
                              ) -> tuple[torch.Tensor, torch.Tensor]:
    """Confidence-weighted mean reprojection error over the supervision set.

    Each supervised pixel contributes ``(exp(-phi) + vis_weight * opacity) * phi``;
    the weight factor is detached so gradients flow only through the error
    itself. Pixels of the supervision set lacking a valid error are excluded
    from both the sum and the normalizer.
    """
    if vis_weight < 0:
        raise ValueError("vis_weight must be non-negative")
    if not bool(mask.union_v.any()):
        raise EmptySupervisionError("supervision set is empty for this view pair")
    sel = mask.union_v & field.valid
    count = int(sel.sum())
    if count == 0:
        raise EmptySupervisionError("no valid reprojection errors inside the supervision set")
    phi_sel = field.phi[sel]
    weight = (torch.exp(-phi_sel) + vis_weight * opacity.values[sel]).detach()
    contrib = weight * phi_sel
    loss = contrib.sum() / count
    loss_map = torch.zeros_like(field.valid, dtype=DTYPE)
    loss_map[sel] = contrib.detach()
    return loss, loss_map


def _patch_offsets(patch_size: int) -> torch.Tensor:
    half = patch_size // 2
    r = torch.arange(-half, half + 1, dtype=DTYPE)
    oy, ox = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([ox.reshape(-1), oy.reshape(-1)], dim=-1)  # (k^2, 2)


def multi_view_photometric_loss(img_r: torch.Tensor, img_n: torch.Tensor,
                                depth_r: torch.Tensor, normal_r: torch.Tensor,
                                cam_r: CameraView, cam_n: CameraView,
                                mask: torch.Tensor, patch_size: int = 7,
                                ncc_eps: float = 1e-8) -> PatchLoss:
    """Patch NCC between the reference image and the neighbor image warped
    through each pixel's local plane (rendered depth + normal).

    Patches whose NCC denominator falls below ``ncc_eps`` are skipped and
    counted. Returns the mean of ``1 - NCC`` over used pixels.
    """
    if img_r.dim() != 2 or img_n.dim() != 2:
        raise ValueError("images must be grayscale (H, W)")
    h, w = img_r.shape
    half = patch_size // 2

    candidates = mask & (depth_r > 0)
    candidates = candidates & (torch.linalg.norm(normal_r, dim=-1) > 0.5)
    border = torch.zeros_like(candidates)
    border[half:h - half, half:w - half] = True
    candidates = candidates & border
    pix_idx = torch.nonzero(candidates, as_tuple=False)  # (P, 2) as (row, col)
    if pix_idx.shape[0] == 0:
        return PatchLoss(torch.zeros((), dtype=DTYPE), used=0, skipped=0)

    rows = pix_idx[:, 0]
    cols = pix_idx[:, 1]
    d = depth_r[rows, cols]
    # local plane in the reference camera frame
    x_c = (cols.to(DTYPE) - cam_r.cx) / cam_r.fx * d
    y_c = (rows.to(DTYPE) - cam_r.cy) / cam_r.fy * d
    p_c = torch.stack([x_c, y_c, d], dim=-1)  # (P, 3)
    n_world = normal_r[rows, cols]
    n_c = n_world @ cam_r.rotation_tensor().T
    dist = (n_c * p_c).sum(dim=-1)
    plane_ok = dist.detach().abs() > 1e-9
    dist_safe = torch.where(plane_ok, dist, torch.ones_like(dist))

    rot_r = cam_r.rotation_tensor()
    rot_n = cam_n.rotation_tensor()
    r_rel = rot_n @ rot_r.T
    t_rel = cam_n.translation_tensor() - r_rel @ cam_r.translation_tensor()
    k_n = torch.as_tensor(cam_n.intrinsic_matrix(), dtype=DTYPE)
    k_r_inv = torch.linalg.inv(torch.as_tensor(cam_r.intrinsic_matrix(), dtype=DTYPE))
    outer = t_rel.reshape(1, 3, 1) * (n_c / dist_safe.unsqueeze(-1)).reshape(-1, 1, 3)
    homog = k_n @ (r_rel.reshape(1, 3, 3) + outer) @ k_r_inv  # (P, 3, 3)

    offs = _patch_offsets(patch_size)  # (k2, 2)
    k2 = offs.shape[0]
    centers = torch.stack([cols.to(DTYPE), rows.to(DTYPE)], dim=-1)
    ref_xy = centers.reshape(-1, 1, 2) + offs.reshape(1, -1, 2)  # (P, k2, 2)
    ones = torch.ones((ref_xy.shape[0], k2, 1), dtype=DTYPE)
    ref_h = torch.cat([ref_xy, ones], dim=-1)  # (P, k2, 3)
    warped = torch.einsum("pij,pkj->pki", homog, ref_h)
    wz = warped[..., 2]
    wz_ok = wz.detach() > 1e-9
    wz_safe = torch.where(wz_ok, wz, torch.ones_like(wz))
    uv = warped[..., :2] / wz_safe.unsqueeze(-1)

    in_bounds = (
        wz_ok & (uv[..., 0] >= 0) & (uv[..., 0] <= cam_n.width - 1)
        & (uv[..., 1] >= 0) & (uv[..., 1] <= cam_n.height - 1)
    ).all(dim=-1)
    geom_ok = plane_ok & in_bounds

    ref_patch = img_r[ref_xy[..., 1].long(), ref_xy[..., 0].long()]  # (P, k2)
    warp_patch = bilinear_sample(img_n, uv)

    mean_r = ref_patch.mean(dim=-1, keepdim=True)
    mean_w = warp_patch.mean(dim=-1, keepdim=True)
    dr = ref_patch - mean_r
    dw = warp_patch - mean_w
    var_r = (dr * dr).mean(dim=-1)
    var_w = (dw * dw).mean(dim=-1)
    cov = (dr * dw).mean(dim=-1)
    denom_sq = var_r * var_w
    textured = denom_sq.detach() >= ncc_eps**2
    used_mask = geom_ok & textured
    skipped = int((geom_ok & ~textured).sum())
    used = int(used_mask.sum())
    if used == 0:
        return PatchLoss(torch.zeros((), dtype=DTYPE), used=0, skipped=skipped)
    ncc = cov[used_mask] / torch.sqrt(denom_sq[used_mask] + _TINY)
    return PatchLoss((1.0 - ncc).mean(), used=used, skipped=skipped)


def single_view_geometric_loss(depth: torch.Tensor, normal: torch.Tensor,
                               cam: CameraView, acc_alpha: torch.Tensor,
                               alpha_threshold: float = 0.5) -> tuple[torch.Tensor, int]:
    """Angular agreement between rendered normals and normals of local depth planes.

    For each sufficiently opaque pixel, the 3x3 depth neighborhood is
    unprojected into the camera frame and a plane is fit by eigendecomposition
    of the scatter; the loss is the mean of ``1 - cos`` against the rendered
    normal. Returns the loss and the number of contributing pixels.
    """
    h, w = depth.shape
    covered = (acc_alpha > alpha_threshold) & (depth > 0)
    # plane fit needs the full 3x3 depth neighborhood
    ok = torch.ones_like(covered)
    ok[0, :] = ok[-1, :] = False
    ok[:, 0] = ok[:, -1] = False
    has_depth = depth > 0
    neigh_ok = torch.ones_like(covered)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            neigh_ok[1:-1, 1:-1] &= has_depth[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
    candidates = covered & ok & neigh_ok
    pix = torch.nonzero(candidates, as_tuple=False)
    if pix.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE), 0
    rows = pix[:, 0]
    cols = pix[:, 1]

    pts = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            r = rows + dy
            c = cols + dx
            d = depth[r, c]
            x = (c.to(DTYPE) - cam.cx) / cam.fx * d
            y = (r.to(DTYPE) - cam.cy) / cam.fy * d
            pts.append(torch.stack([x, y, d], dim=-1))
    pts = torch.stack(pts, dim=1)  # (P, 9, 3)
    centered = pts - pts.mean(dim=1, keepdim=True)
    scatter = centered.transpose(1, 2) @ centered / pts.shape[1]
    eigvals, eigvecs = torch.linalg.eigh(scatter)
    n_fit = eigvecs[..., 0]  # smallest-eigenvalue direction

    center_pts = pts[:, 4]
    facing = -torch.sign((n_fit * center_pts).sum(dim=-1)).detach()
    facing = torch.where(facing == 0, torch.ones_like(facing), facing)
    n_fit = n_fit * facing.unsqueeze(-1)

    n_rend = normal[rows, cols] @ cam.rotation_tensor().T
    norm = torch.linalg.norm(n_rend, dim=-1, keepdim=True)
    n_rend = n_rend / torch.clamp(norm, min=_TINY)
    cos = (n_fit * n_rend).sum(dim=-1)
    return (1.0 - cos).mean(), pix.shape[0]
