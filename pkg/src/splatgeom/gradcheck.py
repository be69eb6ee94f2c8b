"""Finite-difference verification of analytic gradients.

Runs in a dedicated verification mode only: every coordinate of every
parameter group is perturbed centrally and the resulting loss slope is
compared against the autograd value with a relative criterion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


@dataclass
class GradientAgreement:
    max_rel_error: float
    fraction_ok: float
    n_coordinates: int


def finite_difference_gradients(loss_fn: Callable[[], torch.Tensor],
                                params: dict[str, torch.Tensor],
                                rel_step: float = 1e-4) -> dict[str, torch.Tensor]:
    """Central-difference gradients, perturbing parameters in place.

    ``loss_fn`` must recompute the loss from the current parameter values;
    the step for each coordinate is ``rel_step * max(1, |value|)``.
    """
    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = rel_step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            grads[name] = g.reshape(p.shape)
    return grads


def compare_gradients(analytic: dict[str, torch.Tensor],
                      numeric: dict[str, torch.Tensor],
                      rel_tol: float = 1e-3,
                      floor: float = 1e-7) -> GradientAgreement:
    """Fraction of coordinates whose analytic and numeric slopes agree.

    A coordinate passes when |a - n| <= rel_tol * max(|a|, |n|, floor); the
    floor keeps near-zero gradients from being judged on finite-difference
    noise alone.
    """
    errs = []
    ok = 0
    n = 0
    for name in analytic:
        a = analytic[name].reshape(-1)
        b = numeric[name].reshape(-1)
        denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                              torch.full_like(a, floor))
        rel = (a - b).abs() / denom
        errs.append(rel)
        ok += int((rel <= rel_tol).sum())
        n += rel.numel()
    all_rel = torch.cat(errs) if errs else torch.zeros(0)
    return GradientAgreement(
        max_rel_error=float(all_rel.max()) if n else 0.0,
        fraction_ok=ok / n if n else 1.0,
        n_coordinates=n,
    )
