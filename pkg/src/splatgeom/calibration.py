"""Progressive block-wise robust affine alignment of monocular depth.

A monocular depth map carries an arbitrary affine scale per region. Each
calibration level splits the image into a uniform 2^L x 2^L grid and fits,
per block, ``rendered ~ a * mono + b`` using robust statistics: ``a`` is the
ratio of the two dispersions, ``b`` the median residual. Degenerate blocks
(too few supervised pixels, or flat mono depth) inherit their parent block's
parameters, with the global level-0 fit as the root.

The calibrator follows the fit/transform idiom: ``fit`` estimates the block
grid against the rendered reference, ``transform`` applies it to a monocular
map. Fitted parameters are meant to be cached and reused until the schedule
raises the level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .scene import DTYPE, ViewId

SCALE_ESTIMATORS = ("mean_abs_dev", "median_abs_dev")
DEFAULT_N_MIN = 64
DEFAULT_SIGMA_MIN = 1e-6


@dataclass(frozen=True)
class BlockFit:
    a: float
    b: float
    valid_count: int
    fallback: bool


@dataclass
class DepthPair:
    """Monocular + rendered depth with the supervision mask restriction.

    The mask is automatically cleared wherever the rendered map carries the
    zero sentinel.
    """

    mono: torch.Tensor
    rendered: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.mono.shape != self.rendered.shape or self.mono.shape != self.mask.shape:
            raise ValueError("mono, rendered, and mask must share one shape")
        self.mask = self.mask & (self.rendered > 0)


@dataclass
class QuadtreeCalibration:
    level: int
    blocks: list[list[BlockFit]]  # (2^level, 2^level)
    source_view: Optional[ViewId] = None


def _median(values: torch.Tensor) -> torch.Tensor:
    return torch.quantile(values, 0.5)


def _robust_scale(values: torch.Tensor, estimator: str) -> torch.Tensor:
    dev = torch.abs(values - _median(values))
    if estimator == "mean_abs_dev":
        return dev.mean()
    return _median(dev)


def block_edges(size: int, n_blocks: int) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges; the last block absorbs the remainder."""
    step = size // n_blocks
    if step < 1:
        raise ValueError(f"cannot split {size} pixels into {n_blocks} blocks")
    return [(i * step, (i + 1) * step if i < n_blocks - 1 else size) for i in range(n_blocks)]


def fit_block_affine(pair: DepthPair, block: tuple[int, int, int, int],
                     n_min: int = DEFAULT_N_MIN, sigma_min: float = DEFAULT_SIGMA_MIN,
                     scale_estimator: str = "mean_abs_dev") -> BlockFit:
    """Robust affine fit of one pixel rectangle (r0, r1, c0, c1)."""
    if scale_estimator not in SCALE_ESTIMATORS:
        raise ValueError(f"scale_estimator must be one of {SCALE_ESTIMATORS}")
    r0, r1, c0, c1 = block
    sel = pair.mask[r0:r1, c0:c1]
    count = int(sel.sum())
    if count < n_min:
        return BlockFit(a=1.0, b=0.0, valid_count=count, fallback=True)
    mono = pair.mono[r0:r1, c0:c1][sel].to(DTYPE)
    rend = pair.rendered[r0:r1, c0:c1][sel].to(DTYPE)
    sigma_mono = _robust_scale(mono, scale_estimator)
    if float(sigma_mono) < sigma_min:
        return BlockFit(a=1.0, b=0.0, valid_count=count, fallback=True)
    a = _robust_scale(rend, scale_estimator) / sigma_mono
    b = _median(rend - a * mono)
    a_f = float(a)
    b_f = float(b)
    if not (a_f != 0.0 and torch.isfinite(a).item() and torch.isfinite(b).item()):
        return BlockFit(a=1.0, b=0.0, valid_count=count, fallback=True)
    return BlockFit(a=a_f, b=b_f, valid_count=count, fallback=False)


class QuadtreeCalibrator:
    """Estimator-style interface: fit block parameters, transform monocular maps."""

    def __init__(self, level: int, n_min: int = DEFAULT_N_MIN,
                 sigma_min: float = DEFAULT_SIGMA_MIN,
                 scale_estimator: str = "mean_abs_dev"):
        if level < 0:
            raise ValueError("level must be non-negative")
        if scale_estimator not in SCALE_ESTIMATORS:
            raise ValueError(f"scale_estimator must be one of {SCALE_ESTIMATORS}")
        self.level = level
        self.n_min = n_min
        self.sigma_min = sigma_min
        self.scale_estimator = scale_estimator
        self.grids_: Optional[list[list[list[BlockFit]]]] = None
        self.shape_: Optional[tuple[int, int]] = None
        self.source_view_: Optional[ViewId] = None

    def fit(self, pair: DepthPair, source_view: Optional[ViewId] = None) -> "QuadtreeCalibrator":
        h, w = pair.mono.shape
        n_leaf = 2**self.level
        if n_leaf > min(h, w):
            raise ValueError(f"level {self.level} needs at least {n_leaf} pixels per side")
        grids: list[list[list[BlockFit]]] = []
        for lv in range(self.level + 1):
            n = 2**lv
            row_edges = block_edges(h, n)
            col_edges = block_edges(w, n)
            grid = []
            for i, (r0, r1) in enumerate(row_edges):
                row = []
                for j, (c0, c1) in enumerate(col_edges):
                    raw = fit_block_affine(pair, (r0, r1, c0, c1), self.n_min,
                                           self.sigma_min, self.scale_estimator)
                    if raw.fallback:
                        if lv == 0:
                            # identity root: nothing above to inherit from
                            resolved = raw
                        else:
                            parent = grids[lv - 1][i // 2][j // 2]
                            resolved = BlockFit(a=parent.a, b=parent.b,
                                                valid_count=raw.valid_count, fallback=True)
                    else:
                        resolved = raw
                    row.append(resolved)
                grid.append(row)
            grids.append(grid)
        self.grids_ = grids
        self.shape_ = (h, w)
        self.source_view_ = source_view
        return self

    def calibration(self) -> QuadtreeCalibration:
        if self.grids_ is None:
            raise RuntimeError("calibrator is not fitted")
        return QuadtreeCalibration(level=self.level, blocks=self.grids_[self.level],
                                   source_view=self.source_view_)

    def parameter_maps(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-pixel (a, b) maps of the finest fitted level."""
        if self.grids_ is None or self.shape_ is None:
            raise RuntimeError("calibrator is not fitted")
        h, w = self.shape_
        n = 2**self.level
        a_map = torch.empty((h, w), dtype=DTYPE)
        b_map = torch.empty((h, w), dtype=DTYPE)
        for i, (r0, r1) in enumerate(block_edges(h, n)):
            for j, (c0, c1) in enumerate(block_edges(w, n)):
                blk = self.grids_[self.level][i][j]
                a_map[r0:r1, c0:c1] = blk.a
                b_map[r0:r1, c0:c1] = blk.b
        return a_map, b_map

    def transform(self, mono: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Apply the fitted block affines on masked pixels; others pass through untouched."""
        if self.shape_ is not None and mono.shape != self.shape_:
            raise ValueError("map shape differs from the fitted shape")
        a_map, b_map = self.parameter_maps()
        out = mono.clone()
        out[mask] = a_map[mask] * mono[mask] + b_map[mask]
        return out

    def fit_transform(self, pair: DepthPair, source_view: Optional[ViewId] = None) -> torch.Tensor:
        return self.fit(pair, source_view).transform(pair.mono, pair.mask)


def calibrate(pair: DepthPair, level: int, n_min: int = DEFAULT_N_MIN,
              sigma_min: float = DEFAULT_SIGMA_MIN,
              scale_estimator: str = "mean_abs_dev",
              source_view: Optional[ViewId] = None
              ) -> tuple[torch.Tensor, QuadtreeCalibration]:
    """One-shot block calibration of a depth pair at the given level."""
    calib = QuadtreeCalibrator(level, n_min, sigma_min, scale_estimator)
    out = calib.fit_transform(pair, source_view)
    return out, calib.calibration()


def schedule_level(iteration: int, milestones: Sequence[int],
                   l_max: Optional[int] = None) -> int:
    """Number of schedule milestones reached by ``iteration``, capped at ``l_max``."""
    ms = list(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ValueError("milestones must be strictly increasing")
    if l_max is None:
        l_max = len(ms)
    return min(sum(1 for m in ms if m <= iteration), l_max)


@dataclass
class MaskedL1:
    value: torch.Tensor  # scalar, differentiable
    pixel_count: int
    empty_mask: bool = False


def calibrated_depth_loss(calibrated: torch.Tensor, rendered: torch.Tensor,
                          mask: torch.Tensor) -> MaskedL1:
    """Mean absolute difference between calibrated and rendered depth over the mask.

    The mean (rather than a sum) keeps the magnitude resolution independent.
    An empty mask yields a zero loss flagged with a warning.
    """
    count = int(mask.sum())
    if count == 0:
        warnings.warn("calibrated depth loss evaluated on an empty mask", stacklevel=2)
        return MaskedL1(torch.zeros((), dtype=DTYPE), pixel_count=0, empty_mask=True)
    value = torch.abs(calibrated[mask] - rendered[mask]).mean()
    return MaskedL1(value=value, pixel_count=count, empty_mask=False)
