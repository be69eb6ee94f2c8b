"""Total training objective, gradient evaluation, and the descent loop.

The objective combines the photometric reconstruction term with single-view
normal agreement, multi-view patch photometric consistency, the
visibility-weighted multi-view geometric term, and the calibrated monocular
depth term. Detachment contract: confidence weights inside the geometric
term, gate indicators, block calibration parameters, and the monocular map
itself are all constants for autograd; gradients reach the Gaussians only
through rendered buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .calibration import (DepthPair, QuadtreeCalibrator, calibrated_depth_loss,
                          schedule_level)
from .consistency import (EmptySupervisionError, build_supervision_mask, grayscale,
                          multi_view_geometric_loss, multi_view_photometric_loss,
                          reprojection_error, single_view_geometric_loss)
from .losses import photometric_loss
from .render import DEFAULT_RENDER_CONFIG, RenderConfig, render
from .scene import DTYPE, CameraView, GaussianCloud, Scene, ViewId
from .visibility import (OpacityMap, selective_opacity_from_contribs,
                         visibility_from_contribs)

TERM_NAMES = ("rgb", "single_view", "mv_photo", "mv_geom", "depth_calib")

PARAM_GROUPS = ("center", "log_scale", "rotation", "logit_opacity", "color")


class GradientError(RuntimeError):
    """Non-finite gradient, annotated with the loss term and parameter group."""

    def __init__(self, term: str, group: str):
        super().__init__(f"non-finite gradient in term {term!r} for parameter group {group!r}")
        self.term = term
        self.group = group


class DivergenceError(RuntimeError):
    """Training aborted because the total loss stayed far above its initial value."""


@dataclass(frozen=True)
class LossWeights:
    """Objective weights and schedule knobs."""

    lambda1: float = 0.1  # single-view normal agreement
    lambda2: float = 0.2  # multi-view patch photometric
    lambda3: float = 0.05  # visibility-weighted multi-view geometric
    lambda4: float = 0.05  # calibrated monocular depth
    lambda_vis: float = 0.5  # opacity weight inside the geometric term
    tau: float = 0.01
    qdc_window: tuple[int, int] = (7000, 25000)
    quadtree_milestones: tuple[int, ...] = (10000, 15000, 20000)
    phi_max: float = 1.0
    covis_threshold: float = 0.5
    ssim_weight: float = 0.2
    patch_size: int = 7

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda_vis", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.qdc_window[0] >= self.qdc_window[1]:
            raise ValueError("qdc_window start must precede its end")

    def term_weight(self, term: str) -> float:
        return {
            "rgb": 1.0,
            "single_view": self.lambda1,
            "mv_photo": self.lambda2,
            "mv_geom": self.lambda3,
            "depth_calib": self.lambda4,
        }[term]


@dataclass
class TrainingData:
    """Per-view supervision: target images, optional monocular and true depth."""

    targets: dict[ViewId, torch.Tensor]
    mono_depth: dict[ViewId, torch.Tensor] = field(default_factory=dict)
    gt_depth: dict[ViewId, torch.Tensor] = field(default_factory=dict)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, torch.Tensor]  # raw (unweighted) differentiable terms
    flags: list[str]
    level: int
    qdc_active: bool

    def term_values(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.terms.items()}


@dataclass
class GradientReport:
    term_values: dict[str, float]
    gradients: dict[str, torch.Tensor]
    group_norms: dict[str, float]
    fd_max_rel_error: Optional[float] = None


class CalibrationCache:
    """Per-view calibrators, refreshed only when the schedule level rises."""

    def __init__(self):
        self._entries: dict[ViewId, tuple[int, QuadtreeCalibrator]] = {}

    def get(self, view_id: ViewId, level: int) -> Optional[QuadtreeCalibrator]:
        entry = self._entries.get(view_id)
        if entry is not None and entry[0] == level:
            return entry[1]
        return None

    def put(self, view_id: ViewId, level: int, calibrator: QuadtreeCalibrator) -> None:
        self._entries[view_id] = (level, calibrator)


def select_neighbors(views: Sequence[CameraView], n_neighbors: int = 2,
                     max_angle_deg: float = 60.0) -> dict[ViewId, list[ViewId]]:
    """Nearest views by camera-center distance with a viewing-angle guard."""
    centers = {v.view_id: v.camera_center() for v in views}
    dirs = {v.view_id: v.view_direction() for v in views}
    out: dict[ViewId, list[ViewId]] = {}
    cos_max = math.cos(math.radians(max_angle_deg))
    for v in views:
        scored = []
        for other in views:
            if other.view_id == v.view_id:
                continue
            cos = float(dirs[v.view_id] @ dirs[other.view_id])
            if cos < cos_max:
                continue
            dist = float(np.linalg.norm(centers[v.view_id] - centers[other.view_id]))
            scored.append((dist, str(other.view_id), other.view_id))
        scored.sort()
        out[v.view_id] = [vid for _, _, vid in scored[:n_neighbors]]
    return out


def _zeros() -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def total_loss(cloud: GaussianCloud, views: Sequence[CameraView],
               batch: Sequence[ViewId], data: TrainingData, weights: LossWeights,
               iteration: int, *, neighbors: Optional[dict[ViewId, list[ViewId]]] = None,
               calib_cache: Optional[CalibrationCache] = None,
               render_config: RenderConfig = DEFAULT_RENDER_CONFIG,
               depth_supervision: str = "calibrated",
               force_terms: Optional[Sequence[str]] = None) -> LossBreakdown:
    """Evaluate the full objective over reference views in ``batch``.

    The monocular term contributes only inside its activation window, with
    the block level following the milestone schedule and block parameters
    served from ``calib_cache``. A pair with an empty supervision set
    contributes zero and is flagged rather than failing the step.
    """
    if not batch:
        raise ValueError("batch must name at least one reference view")
    view_map = {v.view_id: v for v in views}
    if neighbors is None:
        neighbors = select_neighbors(views)
    if calib_cache is None:
        calib_cache = CalibrationCache()
    if depth_supervision not in ("calibrated", "raw"):
        raise ValueError("depth_supervision must be 'calibrated' or 'raw'")

    level = schedule_level(iteration, weights.quadtree_milestones)
    qdc_active = weights.qdc_window[0] <= iteration < weights.qdc_window[1]

    active = set(force_terms) if force_terms is not None else {
        t for t in TERM_NAMES if weights.term_weight(t) > 0 or t == "rgb"}
    need_pairs = bool({"mv_photo", "mv_geom"} & active) or (
        "depth_calib" in active and qdc_active)

    terms = {t: _zeros() for t in TERM_NAMES}
    flags: list[str] = []

    for ref_id in batch:
        cam_r = view_map[ref_id]
        target_r = data.targets[ref_id]
        buf_r = render(cloud, cam_r, render_config, record_contribs=need_pairs)

        if "rgb" in active:
            terms["rgb"] = terms["rgb"] + photometric_loss(
                buf_r.color, target_r, weights.ssim_weight)
        if "single_view" in active:
            sv, _ = single_view_geometric_loss(buf_r.depth, buf_r.normal, cam_r, buf_r.acc_alpha)
            terms["single_view"] = terms["single_view"] + sv

        union_v = torch.zeros((cam_r.height, cam_r.width), dtype=torch.bool)
        nbr_ids = neighbors.get(ref_id, [])
        if need_pairs and nbr_ids:
            gray_r = grayscale(target_r)
            mv_geom = _zeros()
            mv_photo = _zeros()
            for nbr_id in nbr_ids:
                cam_n = view_map[nbr_id]
                buf_n = render(cloud, cam_n, render_config, record_contribs=True)
                record = visibility_from_contribs(
                    buf_n.contribs, len(cloud), nbr_id, weights.tau)
                if buf_r.contribs is None or buf_r.contribs.order.numel() == 0:
                    flags.append(f"empty_reference_render:{ref_id}")
                    continue
                o_r = selective_opacity_from_contribs(buf_r.contribs, record.indicators)
                opacity = OpacityMap(o_r, reference_view=ref_id, neighbor_view=nbr_id)
                fld = reprojection_error(buf_r.depth, buf_n.depth, cam_r, cam_n)
                mask = build_supervision_mask(
                    fld, o_r > weights.covis_threshold, weights.phi_max)
                union_v = union_v | mask.union_v
                if "mv_geom" in active:
                    try:
                        lg, _ = multi_view_geometric_loss(
                            fld, opacity, mask, weights.lambda_vis)
                        mv_geom = mv_geom + lg
                    except EmptySupervisionError:
                        flags.append(f"empty_supervision:{ref_id}->{nbr_id}")
                if "mv_photo" in active:
                    patch = multi_view_photometric_loss(
                        gray_r, grayscale(data.targets[nbr_id]), buf_r.depth,
                        buf_r.normal, cam_r, cam_n, mask.union_v, weights.patch_size)
                    mv_photo = mv_photo + patch.value
            terms["mv_geom"] = terms["mv_geom"] + mv_geom / len(nbr_ids)
            terms["mv_photo"] = terms["mv_photo"] + mv_photo / len(nbr_ids)

        if "depth_calib" in active and qdc_active:
            mono = data.mono_depth.get(ref_id)
            if mono is None:
                flags.append(f"no_mono_depth:{ref_id}")
            else:
                qdc_mask = union_v & (buf_r.depth.detach() > 0)
                if depth_supervision == "raw":
                    aligned = mono
                else:
                    calibrator = calib_cache.get(ref_id, level)
                    if calibrator is None:
                        calibrator = QuadtreeCalibrator(level)
                        pair = DepthPair(mono, buf_r.depth.detach(), qdc_mask)
                        calibrator.fit(pair, source_view=ref_id)
                        calib_cache.put(ref_id, level, calibrator)
                    aligned = calibrator.transform(mono, qdc_mask)
                res = calibrated_depth_loss(aligned, buf_r.depth, qdc_mask)
                if res.empty_mask:
                    flags.append(f"empty_qdc_mask:{ref_id}")
                terms["depth_calib"] = terms["depth_calib"] + res.value

    n = len(batch)
    terms = {k: v / n for k, v in terms.items()}
    total = _zeros()
    for t in TERM_NAMES:
        w = weights.term_weight(t)
        if t == "depth_calib" and not qdc_active:
            w = 0.0
        total = total + w * terms[t]
    return LossBreakdown(total=total, terms=terms, flags=flags, level=level,
                         qdc_active=qdc_active)


def make_parameters(cloud: GaussianCloud) -> dict[str, torch.Tensor]:
    """Leaf copies of the cloud's storage tensors, ready for autograd."""
    params = {k: v.detach().clone().requires_grad_(True)
              for k, v in cloud.parameters().items()}
    return params


def compute_gradients(scene: Scene, data: TrainingData, weights: LossWeights,
                      iteration: int = 0, *, batch: Optional[Sequence[ViewId]] = None,
                      render_config: RenderConfig = DEFAULT_RENDER_CONFIG,
                      neighbors: Optional[dict[ViewId, list[ViewId]]] = None,
                      fd_checker: Optional[Callable[..., float]] = None) -> GradientReport:
    """Per-term gradients of the total objective, assembled by linearity.

    Each loss term is differentiated separately so a non-finite gradient can
    be attributed to its term and parameter group. ``fd_checker`` (see
    ``gradcheck``) optionally records a finite-difference agreement figure.
    """
    params = make_parameters(scene.gaussians)
    cloud = scene.gaussians.with_parameters(params)
    if batch is None:
        batch = [v.view_id for v in scene.views]
    totals = {g: torch.zeros_like(p) for g, p in params.items()}
    term_values: dict[str, float] = {}
    for term in TERM_NAMES:
        w = weights.term_weight(term)
        if term != "rgb" and w == 0:
            term_values[term] = 0.0
            continue
        breakdown = total_loss(cloud, scene.views, batch, data, weights, iteration,
                               neighbors=neighbors, render_config=render_config,
                               force_terms=[term])
        raw = breakdown.terms[term]
        term_values[term] = float(raw)
        if raw.grad_fn is None:  # term inactive or degenerate: nothing to differentiate
            continue
        grads = torch.autograd.grad(raw, list(params.values()), allow_unused=True)
        for group, grad in zip(params.keys(), grads):
            if grad is None:
                continue
            if not torch.isfinite(grad).all():
                raise GradientError(term, group)
            totals[group] = totals[group] + w * grad
    report = GradientReport(
        term_values=term_values,
        gradients=totals,
        group_norms={g: float(torch.linalg.norm(v)) for g, v in totals.items()},
    )
    if fd_checker is not None:
        report.fd_max_rel_error = fd_checker(scene, data, weights, iteration, report)
    return report


@dataclass(frozen=True)
class TrainSettings:
    iterations: int = 500
    lr: dict = field(default_factory=lambda: {
        "center": 2e-4, "log_scale": 2e-3, "rotation": 1e-3,
        "logit_opacity": 5e-2, "color": 1e-2,
    })
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" | "adam"
    n_neighbors: int = 2
    max_neighbor_angle: float = 60.0
    depth_supervision: str = "calibrated"
    init_center_noise: float = 0.0  # stddev as a fraction of scene extent
    log_every: int = 1
    render: RenderConfig = DEFAULT_RENDER_CONFIG
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class TrainResult:
    scene: Scene
    metrics: list[dict]

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


METRIC_COLUMNS = ("iteration", "loss_rgb", "loss_single_view", "loss_mv_photo",
                  "loss_mv_geom", "loss_depth_calib", "loss_total", "depth_rmse", "level")


def metrics_to_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for col in METRIC_COLUMNS:
            v = row[col]
            cells.append(str(v) if isinstance(v, int) else repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def depth_rmse(cloud: GaussianCloud, views: Sequence[CameraView],
               gt_depth: dict[ViewId, torch.Tensor],
               render_config: RenderConfig = DEFAULT_RENDER_CONFIG) -> float:
    """RMSE of rendered depth against reference depth over its covered pixels."""
    sq = 0.0
    count = 0
    with torch.no_grad():
        for cam in views:
            gt = gt_depth.get(cam.view_id)
            if gt is None:
                continue
            buf = render(cloud, cam, render_config)
            sel = gt > 0
            diff = buf.depth[sel] - gt[sel]
            sq += float((diff**2).sum())
            count += int(sel.sum())
    if count == 0:
        return float("nan")
    return math.sqrt(sq / count)


class _Adam:
    def __init__(self, params: dict[str, torch.Tensor], lr: dict[str, float],
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict[str, torch.Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad**2
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data -= self.lr[k] * m_hat / (torch.sqrt(v_hat) + self.eps)


def train(scene: Scene, data: TrainingData, settings: TrainSettings) -> TrainResult:
    """First-order descent over all Gaussian parameter groups.

    Deterministic for a fixed seed and settings; emits one metrics row per
    ``log_every`` iterations plus the final state. Raises
    :class:`DivergenceError` when the total loss exceeds its initial value by
    a large factor for many consecutive iterations.
    """
    params = make_parameters(scene.gaussians)
    if settings.init_center_noise > 0:
        gen = torch.Generator().manual_seed(settings.seed)
        extent = float(scene.gaussians.centers.max() - scene.gaussians.centers.min()) or 1.0
        noise = torch.randn(params["center"].shape, generator=gen, dtype=DTYPE)
        with torch.no_grad():
            params["center"] += settings.init_center_noise * extent * noise
    cloud = scene.gaussians.with_parameters(params)
    neighbors = select_neighbors(scene.views, settings.n_neighbors,
                                 settings.max_neighbor_angle)
    cache = CalibrationCache()
    adam = _Adam(params, settings.lr) if settings.optimizer == "adam" else None
    if settings.optimizer not in ("sgd", "adam"):
        raise ValueError("optimizer must be 'sgd' or 'adam'")

    metrics: list[dict] = []
    initial_total: Optional[float] = None
    runaway = 0

    def log_row(iteration: int, breakdown: Optional[LossBreakdown]) -> None:
        row = {"iteration": iteration, "level": schedule_level(
            iteration, settings.weights.quadtree_milestones)}
        if breakdown is None:
            for t in TERM_NAMES:
                row[f"loss_{t}"] = float("nan")
            row["loss_total"] = float("nan")
        else:
            for t in TERM_NAMES:
                row[f"loss_{t}"] = float(breakdown.terms[t])
            row["loss_total"] = float(breakdown.total)
            row["level"] = breakdown.level
        row["depth_rmse"] = depth_rmse(cloud, scene.views, data.gt_depth, settings.render)
        metrics.append(row)

    for it in range(settings.iterations):
        ref = scene.views[it % len(scene.views)].view_id
        breakdown = total_loss(cloud, scene.views, [ref], data, settings.weights, it,
                               neighbors=neighbors, calib_cache=cache,
                               render_config=settings.render,
                               depth_supervision=settings.depth_supervision)
        for p in params.values():
            p.grad = None
        breakdown.total.backward()
        with torch.no_grad():
            if adam is not None:
                adam.step(params)
            else:
                for k, p in params.items():
                    if p.grad is not None:
                        p.data -= settings.lr[k] * p.grad
            q = params["rotation"]
            q.data /= torch.linalg.norm(q.data, dim=-1, keepdim=True).clamp(min=1e-12)

        total = float(breakdown.total)
        if initial_total is None:
            initial_total = total
        if initial_total > 0 and total > settings.divergence_factor * initial_total:
            runaway += 1
            if runaway >= settings.divergence_patience:
                raise DivergenceError(
                    f"loss {total:.4g} exceeded {settings.divergence_factor} x initial "
                    f"({initial_total:.4g}) for {runaway} consecutive iterations")
        else:
            runaway = 0
        if it % settings.log_every == 0 or it == settings.iterations - 1:
            log_row(it, breakdown)

    final_cloud = GaussianCloud(*[params[k].detach().clone() for k in PARAM_GROUPS])
    return TrainResult(scene=Scene(final_cloud, scene.views), metrics=metrics)
