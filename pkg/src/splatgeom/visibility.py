"""Cross-view visibility from compositing traces.

A Gaussian's visibility weight in a view is the total alpha-compositing mass
it contributes to that view's render. Thresholded weights act as gates in a
second compositing pass over the reference view, producing a per-pixel map of
how much of the reference ray's opacity comes from primitives that the
neighbor view actually sees. The transmittance factors in that gated pass are
deliberately left ungated so the compositing structure stays intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch

from .render import DEFAULT_RENDER_CONFIG, ContributionRecord, RenderConfig, render
from .scene import DTYPE, CameraView, GaussianCloud, Scene, ViewId

DEFAULT_TAU = 0.01
DEFAULT_COVIS_THRESHOLD = 0.5


@dataclass
class VisibilityRecord:
    """Per-Gaussian visibility of one view: raw weights and thresholded gates."""

    neighbor_view: ViewId
    weights: torch.Tensor  # (N,), >= 0; culled Gaussians carry 0
    indicators: torch.Tensor  # (N,) bool, weights > tau
    tau: float


@dataclass
class OpacityMap:
    """Gate-filtered accumulated opacity in the reference view."""

    values: torch.Tensor  # (H, W) in [0, 1]
    reference_view: ViewId
    neighbor_view: Optional[ViewId] = None


def visibility_from_contribs(contribs: ContributionRecord, n_gaussians: int,
                             neighbor_view: ViewId, tau: float = DEFAULT_TAU) -> VisibilityRecord:
    """Aggregate a render's compositing trace into per-Gaussian weights."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    weights = torch.zeros(n_gaussians, dtype=DTYPE)
    if contribs.order.numel():
        per_gaussian = (contribs.alpha * contribs.transmittance).sum(dim=(1, 2))
        weights.index_add_(0, contribs.order, per_gaussian)
    return VisibilityRecord(
        neighbor_view=neighbor_view,
        weights=weights,
        indicators=weights > tau,
        tau=tau,
    )


def gaussian_visibility(scene: Union[Scene, GaussianCloud], neighbor: CameraView,
                        tau: float = DEFAULT_TAU,
                        config: RenderConfig = DEFAULT_RENDER_CONFIG) -> VisibilityRecord:
    """Render the neighbor view and accumulate each Gaussian's compositing mass."""
    cloud = scene.gaussians if isinstance(scene, Scene) else scene
    with torch.no_grad():
        buffers = render(cloud, neighbor, config, record_contribs=True)
    return visibility_from_contribs(buffers.contribs, len(cloud), neighbor.view_id, tau)


def selective_opacity_from_contribs(contribs: ContributionRecord,
                                    indicators: torch.Tensor) -> torch.Tensor:
    """Gated opacity sum over an existing compositing trace.

    Each term is switched by its Gaussian's gate while the transmittance
    product still runs over all preceding contributors.
    """
    if contribs.order.numel() == 0:
        raise ValueError("contribution record is empty")
    gates = indicators.to(DTYPE)[contribs.order].reshape(-1, 1, 1)
    return (gates * contribs.alpha.detach() * contribs.transmittance.detach()).sum(dim=0)


def selective_opacity(scene: Union[Scene, GaussianCloud], reference: CameraView,
                      indicators: torch.Tensor,
                      config: RenderConfig = DEFAULT_RENDER_CONFIG,
                      neighbor_view: Optional[ViewId] = None) -> OpacityMap:
    """Re-run the reference view's compositing order with per-Gaussian gates."""
    cloud = scene.gaussians if isinstance(scene, Scene) else scene
    indicators = torch.as_tensor(indicators)
    if indicators.shape != (len(cloud),):
        raise ValueError(
            f"indicators length {tuple(indicators.shape)} does not match "
            f"gaussian count {len(cloud)}")
    with torch.no_grad():
        buffers = render(cloud, reference, config, record_contribs=True)
    if buffers.contribs.order.numel() == 0:
        values = torch.zeros((reference.height, reference.width), dtype=DTYPE)
    else:
        values = selective_opacity_from_contribs(buffers.contribs, indicators)
    return OpacityMap(values=values, reference_view=reference.view_id, neighbor_view=neighbor_view)


def covis_mask(opacity: OpacityMap, threshold: float = DEFAULT_COVIS_THRESHOLD) -> torch.Tensor:
    """Binary co-visibility mask from the gated opacity map."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    return opacity.values > threshold
