"""Gradients of the training objective and the Adam update.

Gradients come from torch's reverse mode through the continuous half of the
renderer. Visibility (fragment lists, coverage, edge partners and loss
masks) is held fixed within a step; ``FrozenState`` captures it so the
finite-difference oracle can evaluate exactly the function being
differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NonFiniteGradient
from .losses import (
    COMPONENTS,
    LossWeights,
    alpha_inverse_loss,
    depth_loss,
    distortion_loss,
    normal_loss,
    photometric_loss,
    total_loss,
)
from .raster import (
    DEFAULT_LAYERS,
    Fragments,
    TabletBatch,
    TextureAtlas,
    rasterize_fragments,
    rasterize_peeled,
    render_view,
    sample_atlas,
)
from .tablet import CameraView

PARAM_NAMES = ("texture", "alpha", "normal", "distance")


@dataclass
class LearningRates:
    texture: float = 0.01
    alpha: float = 0.03
    normal: float = 1e-4
    distance: float = 5e-4


@dataclass
class RenderSettings:
    layers: int = DEFAULT_LAYERS
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    min_opacity: float = 0.05
    distortion_mode: str = "transmittance"
    antialiasing: bool = True
    naive_aa: bool = False


@dataclass
class FrozenState:
    fragments: Fragments
    masks: dict[str, np.ndarray]


def leaves(batch: TabletBatch) -> dict[str, torch.Tensor]:
    return {
        "texture": batch.atlas.color,
        "alpha": batch.atlas.alpha,
        "normal": batch.normal,
        "distance": batch.distance,
    }


def evaluate_view(
    batch: TabletBatch,
    view: CameraView,
    weights: LossWeights,
    settings: RenderSettings | None = None,
    frozen: FrozenState | None = None,
):
    """Render one view and evaluate the weighted objective.

    Returns:
        ``(total, components, frozen_state, render_output)``; ``total`` is a
        scalar tensor attached to the autograd graph.
    """
    s = settings or RenderSettings()
    out = render_view(
        batch,
        view,
        s.layers,
        background=s.background,
        naive_aa=s.naive_aa,
        antialiasing=s.antialiasing,
        fragments=frozen.fragments if frozen else None,
    )
    if frozen is None:
        opacity = out.opacity.detach().cpu().numpy()
        seen = opacity >= s.min_opacity
        masks = {"pho": seen}
        if view.depth is not None:
            dm = np.asarray(view.depth)
            masks["depth"] = seen & out.valid & np.isfinite(dm) & (dm > 0)
        if view.normal is not None:
            nm = np.asarray(view.normal)
            masks["normal"] = seen & out.valid & (np.linalg.norm(np.nan_to_num(nm), axis=-1) > 0.5)
        frozen = FrozenState(out.stack.frags, masks)
    masks = frozen.masks
    dtype = batch.dtype
    zero = out.color.sum() * 0.0
    comps = {
        "pho": zero,
        "ainv": alpha_inverse_loss(out.stack),
        "dist": distortion_loss(out.stack, s.distortion_mode),
        "depth": zero,
        "normal": zero,
    }
    if view.image is not None:
        obs = torch.as_tensor(np.asarray(view.image), dtype=dtype)
        comps["pho"] = photometric_loss(out.color, obs, masks["pho"])
    if "depth" in masks:
        dm = torch.as_tensor(np.nan_to_num(np.asarray(view.depth)), dtype=dtype)
        comps["depth"] = depth_loss(out.depth, dm, masks["depth"])
    if "normal" in masks:
        nm = torch.as_tensor(np.nan_to_num(np.asarray(view.normal)), dtype=dtype)
        comps["normal"] = normal_loss(out.normal, nm, masks["normal"])
    total = total_loss(comps, weights)
    return total, {k: float(v.detach()) for k, v in comps.items()}, frozen, out


def _tablet_of_texel(batch: TabletBatch, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    owner = np.full(rows.size, -1, dtype=np.int64)
    for i, (r0, c0, h, w) in enumerate(batch.atlas.tiles):
        hit = (rows >= r0) & (rows < r0 + h) & (cols >= c0) & (cols < c0 + w)
        owner[hit] = i
    return owner


def check_finite(batch: TabletBatch, grads: dict[str, torch.Tensor]) -> None:
    for name in ("normal", "distance"):
        g = grads[name].reshape(len(batch), -1)
        bad = ~torch.isfinite(g).all(dim=1)
        if bad.any():
            tid = int(torch.nonzero(bad)[0, 0])
            raise NonFiniteGradient(f"non-finite {name} gradient on tablet {tid}", tid)
    for name in ("texture", "alpha"):
        g = grads[name]
        if torch.isfinite(g.sum()):  # a NaN or inf anywhere poisons the sum
            continue
        bad = ~torch.isfinite(g.reshape(g.shape[0], g.shape[1], -1)).all(dim=2)
        if bad.any():
            r, c = (x.cpu().numpy() for x in torch.nonzero(bad, as_tuple=True))
            tid = int(_tablet_of_texel(batch, r[:1], c[:1])[0])
            raise NonFiniteGradient(f"non-finite {name} gradient on tablet {tid}", tid)


def backward_render(
    batch: TabletBatch,
    views: list[CameraView],
    weights: LossWeights | None = None,
    settings: RenderSettings | None = None,
    check: bool = True,
):
    """Mean objective over ``views`` and its gradient for every learnable leaf.

    With ``check`` set, non-finite gradients raise ``NonFiniteGradient``;
    callers that want to inspect the loss first pass ``check=False`` and call
    ``check_finite`` themselves.

    Returns:
        ``(loss, grads, components)`` where ``grads`` maps parameter names to
        tensors shaped like the leaves and ``components`` holds mean loss terms.
    """
    weights = weights or LossWeights()
    params = leaves(batch)
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    total = 0.0
    comps = {k: 0.0 for k in COMPONENTS}
    for view in views:
        loss, c, _, _ = evaluate_view(batch, view, weights, settings)
        loss = loss / len(views)
        if loss.requires_grad:
            loss.backward()
        total += float(loss.detach())
        for k in COMPONENTS:
            comps[k] += c[k] / len(views)
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad.detach() if p.grad is not None else torch.zeros_like(p)
        p.grad = None
        p.requires_grad_(False)
    if check:
        check_finite(batch, grads)
    return total, grads, comps


@dataclass
class ParamSet:
    """Learnable tensors of a ``TabletBatch`` with per-kind rates and Adam moments."""

    batch: TabletBatch
    lr: LearningRates = field(default_factory=LearningRates)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        return leaves(self.batch)


def adam_step(params: ParamSet, grads: dict[str, torch.Tensor], step: int | None = None) -> ParamSet:
    """One bias-corrected Adam update, then the tablet constraints.

    Alpha and texture are clamped to [0, 1], distances stay positive, normals
    are renormalized and the up references follow the minimal rotation of
    their normal.
    """
    params.step = params.step + 1 if step is None else int(step)
    t = params.step
    b1, b2 = params.betas
    tensors = params.tensors()
    with torch.no_grad():
        raw_before = params.batch.normal.clone()
        n_before = raw_before / torch.linalg.norm(raw_before, dim=1, keepdim=True)
        for name in PARAM_NAMES:
            g = grads.get(name)
            if g is None:
                continue
            p = tensors[name]
            if name not in params.moments:
                params.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = params.moments[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            # in-place form of lr * m_hat / (sqrt(v_hat) + eps)
            denom = v.sqrt().div_(math.sqrt(1 - b2**t)).add_(params.eps)
            p.addcdiv_(m, denom, value=-getattr(params.lr, name) / (1 - b1**t))
        params.batch.atlas.alpha.clamp_(0.0, 1.0)
        params.batch.atlas.color.clamp_(0.0, 1.0)
        params.batch.distance.clamp_(min=1e-4)
    moved = torch.nonzero((params.batch.normal != raw_before).any(dim=1)).reshape(-1)
    params.batch.rotate_up(n_before, moved)
    return params


def _frozen_loss(batch, views, weights, settings, frozen_states):
    with torch.no_grad():
        total = 0.0
        for view, fr in zip(views, frozen_states):
            loss, _, _, _ = evaluate_view(batch, view, weights, settings, fr)
            total += float(loss) / len(views)
    return total


def _fragments_now(batch, views, settings):
    layers = (settings or RenderSettings()).layers
    with torch.no_grad():
        verts = batch.vertices().cpu().numpy()
    return [rasterize_fragments(verts, v, layers) for v in views]


def _edge_only_texels(batch: TabletBatch, views, frozen_states, layers: int) -> np.ndarray:
    """Atlas texels whose bilinear footprint is read only by silhouette pixels."""
    shape = batch.atlas.alpha.shape
    interior = torch.zeros(shape, dtype=batch.dtype)
    edge = torch.zeros(shape, dtype=batch.dtype)
    with torch.no_grad():
        verts = batch.vertices()
    for view, fr in zip(views, frozen_states):
        f = fr.fragments
        if f.count == 0:
            continue
        stack = rasterize_peeled(verts, view, layers, f)
        occ = stack.occupied
        on_edge = np.repeat(f.edge_mask().reshape(-1, 1), f.layers, axis=1)
        for sel, acc in ((occ & ~on_edge, interior), (occ & on_edge, edge)):
            if not sel.any():
                continue
            probe = torch.zeros(shape, dtype=batch.dtype, requires_grad=True)
            atlas = TextureAtlas(batch.atlas.color.detach(), probe + 1.0, batch.atlas.tiles)
            _, a = sample_atlas(atlas, stack.tri[sel], stack.bary[torch.as_tensor(sel)])
            a.sum().backward()
            acc += probe.grad.abs()
    return ((edge > 0) & (interior == 0)).cpu().numpy()


def finite_difference_check(
    batch: TabletBatch,
    views,
    selector,
    weights: LossWeights | None = None,
    settings: RenderSettings | None = None,
    eps: dict[str, float] | float | None = None,
    floor: float = 1e-8,
    exclude_edge_texels: bool = True,
):
    """Compare analytic gradients with central differences of the objective.

    Args:
        batch: tablets to check (modified in place during the check, restored after).
        views: a view or list of views.
        selector: iterable of ``(name, index)`` pairs; ``index`` indexes the leaf tensor.
        eps: step per parameter kind; defaults 1e-4 for geometry, 1e-3 for texture/alpha.
        floor: absolute floor of the relative-error denominator.
        exclude_edge_texels: skip texels read only by silhouette pixels.

    Returns:
        ``(max_rel_error, records)``; each record is
        ``(name, index, analytic, numeric, rel_error)`` and parameters whose
        perturbation changes a discrete rasterization decision are skipped.
        Geometry perturbations are re-rasterized to detect such flips; the
        objective itself is evaluated with the unperturbed coverage and masks.
    """
    if isinstance(views, CameraView):
        views = [views]
    weights = weights or LossWeights()
    steps = {"texture": 1e-3, "alpha": 1e-3, "normal": 1e-4, "distance": 1e-4}
    if isinstance(eps, dict):
        steps.update(eps)
    elif eps is not None:
        steps = {k: float(eps) for k in steps}

    _, grads, _ = backward_render(batch, views, weights, settings)
    frozen = []
    with torch.no_grad():
        for view in views:
            frozen.append(evaluate_view(batch, view, weights, settings)[2])
    base_frags = [fr.fragments for fr in frozen]
    layers = (settings or RenderSettings()).layers
    edge_only = _edge_only_texels(batch, views, frozen, layers) if exclude_edge_texels else None
    tensors = leaves(batch)
    records = []
    worst = 0.0
    for name, index in selector:
        if edge_only is not None and name in ("texture", "alpha"):
            texel = index[:2] if isinstance(index, tuple) else index
            if edge_only[texel]:
                continue
        p = tensors[name]
        h = steps[name]
        with torch.no_grad():
            orig = p[index].clone()
            p[index] = orig + h
            plus_frags = _fragments_now(batch, views, settings) if name in ("normal", "distance") else None
            f_plus = _frozen_loss(batch, views, weights, settings, frozen)
            p[index] = orig - h
            minus_frags = _fragments_now(batch, views, settings) if name in ("normal", "distance") else None
            f_minus = _frozen_loss(batch, views, weights, settings, frozen)
            p[index] = orig
        if plus_frags is not None:
            flips = not all(
                b.same_decisions(q) and b.same_decisions(m) for b, q, m in zip(base_frags, plus_frags, minus_frags)
            )
            if flips:
                continue
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grads[name][index])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
        records.append((name, index, analytic, numeric, rel))
    return worst, records
