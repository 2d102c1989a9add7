"""Training objectives on rendered buffers and layer stacks.

All reductions are per-pixel means so the weights do not depend on image
resolution. Masks are plain boolean numpy arrays and carry no gradient.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np
import torch

from .raster import LayerStack, blend_weights

COMPONENTS = ("pho", "ainv", "dist", "depth", "normal")


@dataclass
class LossWeights:
    pho: float = 1.0
    ainv: float = 1.0
    dist: float = 20.0
    depth: float = 4.0
    normal: float = 4.0

    def __post_init__(self):
        if any(w < 0 for w in astuple(self)):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        return cls(*[float(v) for v in values])

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


def _as_tensor(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def masked_mean(values: torch.Tensor, mask) -> tuple[torch.Tensor, bool]:
    """Mean of ``values`` over ``mask``; returns ``(0, True)`` for an empty mask."""
    mask = np.asarray(mask, dtype=bool).reshape(values.shape)
    if not mask.any():
        return values.sum() * 0.0, True
    m = torch.as_tensor(mask)
    return values[m].mean(), False


def photometric_loss(rendered, observed, valid=None) -> torch.Tensor:
    """Mean over valid pixels of the squared RGB distance."""
    rendered = _as_tensor(rendered)
    observed = _as_tensor(observed, rendered.dtype)
    if valid is None:
        valid = np.ones(rendered.shape[:-1], dtype=bool)
    sq = ((rendered - observed) ** 2).sum(-1)
    return masked_mean(sq, valid)[0]


def alpha_inverse_loss(stack: LayerStack) -> torch.Tensor:
    """Mean residual transmittance ``prod_l (1 - a_l)`` over pixels hit by geometry."""
    _, _, residual = blend_weights(stack.alpha)
    covered = stack.occupied.any(axis=1)
    return masked_mean(residual, covered)[0]


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def distortion_loss(stack: LayerStack, mode: str = "transmittance") -> torch.Tensor:
    """Penalty on consecutive semi-transparent surfaces along each pixel ray.

    ``sum_i T_i T_{i+1} |p_i - p_{i+1}|`` over consecutive layers with alpha > 0,
    averaged over all pixels. ``mode="transmittance"`` uses the front-to-back
    transmittance for ``T``; ``mode="weight"`` uses the blending weight ``T a``.
    """
    if mode not in ("transmittance", "weight"):
        raise ValueError(f"unknown distortion mode {mode!r}")
    P, L = stack.tri.shape
    trans, weights, _ = blend_weights(stack.alpha)
    t = trans if mode == "transmittance" else weights
    pos = (stack.alpha.detach().cpu().numpy() > 0) & stack.occupied
    flat = np.nonzero(pos.reshape(-1))[0]
    if flat.size < 2:
        return stack.alpha.sum() * 0.0
    pix = flat // L
    same = pix[1:] == pix[:-1]
    i = torch.as_tensor(flat[:-1][same])
    j = torch.as_tensor(flat[1:][same])
    if i.numel() == 0:
        return stack.alpha.sum() * 0.0
    tf = t.reshape(-1)
    pts = stack.point.reshape(-1, 3)
    return (tf[i] * tf[j] * _safe_norm(pts[i] - pts[j])).sum() / P


def depth_loss(rendered, target, valid=None) -> torch.Tensor:
    rendered = _as_tensor(rendered)
    target = _as_tensor(target, rendered.dtype)
    if valid is None:
        valid = np.ones(rendered.shape, dtype=bool)
    return masked_mean((rendered - target) ** 2, valid)[0]


def normal_loss(rendered, target, valid=None) -> torch.Tensor:
    rendered = _as_tensor(rendered)
    target = _as_tensor(target, rendered.dtype)
    if valid is None:
        valid = np.ones(rendered.shape[:-1], dtype=bool)
    return masked_mean(((rendered - target) ** 2).sum(-1), valid)[0]


def total_loss(components, weights: LossWeights | None = None):
    """Weighted sum of the five components (mapping by name or 5-sequence)."""
    weights = weights or LossWeights()
    if isinstance(components, dict):
        values = [components.get(name, 0.0) for name in COMPONENTS]
    else:
        values = list(components)
    return sum(w * v for w, v in zip(weights.as_tuple(), values))


class LossLog:
    """Append-only CSV of per-step loss components."""

    header = ("step", "L_pho", "L_ainv", "L_dist", "L_depth", "L_normal", "total")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(self.header)

    def write(self, step: int, components: dict, total: float) -> None:
        row = [step] + [f"{float(components.get(n, 0.0)):.9g}" for n in COMPONENTS] + [f"{float(total):.9g}"]
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow(row)
