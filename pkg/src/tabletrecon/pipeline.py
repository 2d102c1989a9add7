"""End-to-end reconstruction: superpixel initialization, keyframe fragments,
interleaved optimization and merging, and texture editing of the result."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from skimage.segmentation import slic

from .errors import EmptySuperpixel, InvalidDistance, NonFiniteLoss, SingleFragment
from .losses import LossLog, LossWeights
from .merge import MergeConfig, MergeLog, merge_scene, weight_check
from .optim import LearningRates, ParamSet, RenderSettings, adam_step, backward_render, check_finite
from .raster import TabletBatch, render_view
from .scene import PlaneSet, Scene
from .tablet import CameraView, Tablet, backproject_superpixel

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    keyframes_per_fragment: int = 9
    epochs_separate: int = 32
    epochs_joint: int = 9
    merge_epochs: tuple[int, ...] = (8, 16, 24)
    distance_lr_late: float = 2e-4
    lr_drop_after_merges: int = 2
    weight_threshold: float = 0.3
    min_points: int = 8
    superpixel_block: int = 12
    compactness: float = 10.0
    translation_threshold: float = 0.1
    rotation_threshold_deg: float = 15.0
    layers: int = 13
    min_opacity: float = 0.05
    distortion_mode: str = "transmittance"
    seed: int = 0

    def __post_init__(self):
        self.merge_epochs = tuple(int(e) for e in self.merge_epochs)
        if self.keyframes_per_fragment < 1:
            raise ValueError("keyframes_per_fragment must be positive")
        if self.epochs_separate < 0 or self.epochs_joint < 0:
            raise ValueError("epoch counts must be non-negative")


# ----------------------------------------------------------------------------
# configuration file


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    return value.strip()


def load_config(path: str | Path | None = None, overrides: dict | None = None):
    """Read ``key = value`` lines into ``(Schedule, MergeConfig, LossWeights)``.

    Keys are ``schedule.<field>``, ``merge.<field>`` or ``loss.<field>``; a
    bare key is looked up in the schedule. ``#`` starts a comment.
    """
    values: dict[str, str] = {}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key if "." in key else f"schedule.{key}"] = value
    for key, value in (overrides or {}).items():
        values[key if "." in key else f"schedule.{key}"] = str(value)
    out = []
    for prefix, cls in (("schedule", Schedule), ("merge", MergeConfig), ("loss", LossWeights)):
        defaults = cls()
        kwargs = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key in values:
                kwargs[f.name] = _coerce(values.pop(key), getattr(defaults, f.name))
        out.append(cls(**kwargs))
    if values:
        raise ValueError(f"unknown configuration keys: {', '.join(sorted(values))}")
    return tuple(out)


# ----------------------------------------------------------------------------
# initialization


def slic_superpixels(image: np.ndarray, n_segments: int, compactness: float = 10.0) -> np.ndarray:
    """SLIC label map (labels 0..K-1, every region connected)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    labels = slic(
        img,
        n_segments=max(1, int(n_segments)),
        compactness=compactness,
        start_label=0,
        channel_axis=-1,
        enforce_connectivity=True,
    )
    _, dense = np.unique(labels, return_inverse=True)
    return dense.reshape(labels.shape)


def _label_sums(labels, keep, values, k):
    return np.stack([np.bincount(labels[keep], weights=values[keep, c], minlength=k) for c in range(values.shape[1])], 1)


def _median_inliers(labels, n, ok, k, inlier_cos):
    """Pixels whose normal lies within ``inlier_cos`` of their label's component-wise median normal."""
    seed = np.stack([ndimage.median(n[ok, c], labels[ok], np.arange(k)) for c in range(3)], 1)
    seed = np.nan_to_num(seed)
    seed /= np.maximum(np.linalg.norm(seed, axis=1, keepdims=True), 1e-12)
    return ok & (np.einsum("ij,ij->i", np.nan_to_num(n), seed[labels]) >= inlier_cos)


def split_mixed_superpixels(labels: np.ndarray, normal: np.ndarray, inlier_cos: float = 0.93, rounds: int = 2):
    """Give pixels that disagree with their label's dominant normal a fresh label.

    Repeated ``rounds`` times so a superpixel covering a three-plane corner
    ends up as three labels. Pixels with non-finite normals keep their label.
    """
    out = np.asarray(labels).copy()
    n = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    ok = np.isfinite(n).all(1)
    for _ in range(rounds):
        flat = out.reshape(-1)
        k = int(flat.max()) + 1
        outlier = ok & ~_median_inliers(flat, n, ok, k, inlier_cos)
        if not outlier.any():
            break
        _, fresh = np.unique(flat[outlier], return_inverse=True)
        flat[outlier] = k + fresh.reshape(-1)
    return out


def pool_superpixel_geometry(
    labels: np.ndarray,
    depth: np.ndarray,
    normal: np.ndarray,
    view: CameraView | None = None,
    inlier_cos: float = 0.93,
):
    """Per-label mean depth and renormalized mean normal over valid pixels.

    A superpixel straddling a crease mixes two orientations, and its plain
    mean normal is tilted away from both. Only pixels whose normal is within
    ``inlier_cos`` of the label's component-wise median normal are averaged;
    on single-orientation labels that is every pixel.

    With ``view`` given, the returned depth is where the ray through the
    label's pixel centroid meets the plane fitted to the inlier pixels, which
    is the anchor that backprojection uses.

    Returns:
        ``(depth, normal, valid)`` indexed by label; labels with no valid depth
        or a near-zero mean normal are marked invalid.
    """
    shape = np.shape(labels)
    labels = np.asarray(labels).reshape(-1)
    k = int(labels.max()) + 1 if labels.size else 0
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    n = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    ok = np.isfinite(d) & (d > 0) & np.isfinite(n).all(1)
    cnt = np.bincount(labels[ok], minlength=k).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_n = _label_sums(labels, ok, n, k) / cnt[:, None]
    valid = (cnt > 0) & (np.linalg.norm(np.nan_to_num(mean_n), axis=1) >= 1e-3)

    keep = ok
    if ok.any():
        inlier = _median_inliers(labels, n, ok, k, inlier_cos)
        # a label without inliers keeps its plain mean
        lost = np.bincount(labels[inlier], minlength=k) == 0
        keep = inlier | (ok & lost[labels])
    cnt = np.bincount(labels[keep], minlength=k).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_d = np.bincount(labels[keep], weights=d[keep], minlength=k) / cnt
        mean_n = _label_sums(labels, keep, n, k) / cnt[:, None]
    norm = np.linalg.norm(np.nan_to_num(mean_n), axis=1)
    mean_n = np.where(valid[:, None], mean_n / np.where(norm > 0, norm, 1.0)[:, None], 0.0)

    if view is not None and keep.any():
        ys, xs = np.divmod(np.arange(labels.size), shape[-1] if len(shape) > 1 else labels.size)
        rays = np.stack([(xs - view.cx) / view.fx, (ys - view.cy) / view.fy, np.ones(labels.size)], 1)
        every = np.ones(labels.size, dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            centroid_ray = _label_sums(labels, every, rays, k) / np.bincount(labels, minlength=k)[:, None]
            mean_p = _label_sums(labels, keep, rays * d[:, None], k) / cnt[:, None]
            denom = np.einsum("ij,ij->i", centroid_ray, mean_n)
            hit = np.einsum("ij,ij->i", mean_p, mean_n) / denom
        usable = valid & np.isfinite(hit) & (np.abs(denom) > 1e-3) & (hit > 0)
        mean_d = np.where(usable, hit, mean_d)

    return np.where(cnt > 0, mean_d, np.nan), mean_n, valid


def _rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    c = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def keyframe_indices(views: list[CameraView], t_thresh: float = 0.1, r_thresh: float = 15.0) -> list[int]:
    """Views that moved far enough from the previous keyframe; raises ``SingleFragment`` below two."""
    if not views:
        raise SingleFragment("no views")
    keys = [0]
    for i in range(1, len(views)):
        last = views[keys[-1]]
        moved = np.linalg.norm(views[i].center - last.center) > t_thresh
        turned = _rotation_angle(last.rotation, views[i].rotation) > r_thresh
        if moved or turned:
            keys.append(i)
    if len(keys) < 2:
        raise SingleFragment(f"only {len(keys)} keyframe selected")
    return keys


def select_keyframes(
    views: list[CameraView], per_fragment: int = 9, t_thresh: float = 0.1, r_thresh: float = 15.0
) -> list[list[int]]:
    """Keyframe indices grouped into fragments; a near-static sequence becomes one fragment of all views."""
    try:
        keys = keyframe_indices(views, t_thresh, r_thresh)
    except SingleFragment:
        return [list(range(len(views)))] if views else []
    return [keys[i : i + per_fragment] for i in range(0, len(keys), per_fragment)]


def initial_tablets(view: CameraView, camera_index: int, schedule: Schedule) -> list[Tablet]:
    """One tablet per superpixel of ``view`` with usable depth and normal."""
    if view.image is None or view.depth is None or view.normal is None:
        raise ValueError("initialization needs an image, a depth map and a normal map")
    h, w = view.height, view.width
    target = max(1, round(h * w / schedule.superpixel_block**2))
    labels = split_mixed_superpixels(slic_superpixels(view.image, target, schedule.compactness), view.normal)
    depth, normal, valid = pool_superpixel_geometry(labels, view.depth, view.normal, view)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None or not valid[k]:
            continue
        mask = np.zeros((h, w), dtype=bool)
        mask[sl] = labels[sl] == k
        try:
            out.append(backproject_superpixel(mask, float(depth[k]), normal[k], view, camera_index))
        except (EmptySuperpixel, InvalidDistance) as err:
            log.debug("superpixel %d of view %d skipped: %s", k, camera_index, err)
    return out


# ----------------------------------------------------------------------------
# optimization / merging loop


@dataclass
class Trainer:
    views: list[CameraView]
    schedule: Schedule
    merge_config: MergeConfig
    weights: LossWeights
    loss_log: LossLog | None = None
    merge_log: MergeLog | None = None
    step: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.schedule.seed)
        s = self.schedule
        self.settings = RenderSettings(layers=s.layers, min_opacity=s.min_opacity, distortion_mode=s.distortion_mode)

    def record(self, stage, epoch, event, before, after, dropped=0):
        if self.merge_log is not None:
            self.merge_log.record(stage, epoch, event, before, after, dropped)
        log.info("%s epoch %d %s: %d -> %d tablets", stage, epoch, event, before, after)

    def merge(self, scene: Scene, stage: str, epoch: int) -> Scene:
        before = len(scene.tablets)
        scene, _ = merge_scene(scene, self.merge_config)
        self.record(stage, epoch, "merge", before, len(scene.tablets))
        return scene

    def check_and_merge(self, scene: Scene, view_ids: list[int], stage: str, epoch: int) -> Scene:
        before = len(scene.tablets)
        scene, dropped = weight_check(
            scene, [self.views[i] for i in view_ids], self.schedule.weight_threshold, self.schedule.min_points, self.schedule.layers
        )
        self.record(stage, epoch, "weight_check", before, len(scene.tablets), dropped)
        return self.merge(scene, stage, epoch)

    def optimize(self, scene: Scene, view_ids: list[int], epochs: int, merge_at, stage: str, merges_done: int = 0) -> Scene:
        """Adam over ``view_ids`` (one view per step) with weight checks and merges at ``merge_at`` epochs."""
        s = self.schedule
        lr = LearningRates()
        if merges_done >= s.lr_drop_after_merges:
            lr.distance = s.distance_lr_late
        params = ParamSet(TabletBatch.from_tablets(scene.tablets), lr)
        for epoch in range(epochs):
            if epoch in merge_at and epoch > 0:
                scene.tablets = params.batch.to_tablets()
                scene = self.check_and_merge(scene, view_ids, stage, epoch)
                merges_done += 1
                if merges_done >= s.lr_drop_after_merges:
                    lr.distance = s.distance_lr_late
                params = ParamSet(TabletBatch.from_tablets(scene.tablets), lr)
            if not scene.tablets:
                break
            for vi in self.rng.permutation(view_ids):
                view = self.views[int(vi)]
                loss, grads, comps = backward_render(params.batch, [view], self.weights, self.settings, check=False)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(
                        f"non-finite loss at step {self.step} (view {int(vi)})",
                        {"step": self.step, "view": int(vi), "components": comps, "tablets": len(scene.tablets)},
                    )
                check_finite(params.batch, grads)
                adam_step(params, grads)
                if self.loss_log is not None:
                    self.loss_log.write(self.step, comps, loss)
                self.step += 1
        scene.tablets = params.batch.to_tablets()
        return scene


def reconstruct(
    views: list[CameraView],
    schedule: Schedule | None = None,
    merge_config: MergeConfig | None = None,
    weights: LossWeights | None = None,
    loss_log: str | Path | None = None,
    merge_log: MergeLog | str | Path | None = None,
) -> PlaneSet:
    """Reconstruct planar tablets from posed RGB views with depth and normal supervision.

    ``merge_log`` may be a path (CSV telemetry) or a ``MergeLog`` to collect
    tablet counts around every merge and weight check in memory.
    """
    if not views:
        raise ValueError("reconstruct needs at least one view")
    s = schedule or Schedule()
    torch.manual_seed(s.seed)
    trainer = Trainer(
        views,
        s,
        merge_config or MergeConfig(),
        weights or LossWeights(),
        LossLog(loss_log) if loss_log else None,
        merge_log if isinstance(merge_log, MergeLog) else MergeLog(merge_log),
    )
    centers = np.array([v.center for v in views])
    fragments = select_keyframes(views, s.keyframes_per_fragment, s.translation_threshold, s.rotation_threshold_deg)
    parts = []
    for f, ids in enumerate(fragments):
        stage = f"fragment{f}"
        tablets = [t for i in ids for t in initial_tablets(views[i], i, s)]
        scene = Scene.from_initial(tablets, centers)
        trainer.record(stage, 0, "init", 0, len(tablets))
        if not tablets:
            continue
        scene = trainer.merge(scene, stage, 0)
        scene = trainer.optimize(scene, ids, s.epochs_separate, s.merge_epochs, stage)
        parts.append(scene)
    if not parts:
        return PlaneSet([])
    scene = parts[0]
    for other in parts[1:]:
        scene = scene.concat(other)
    all_ids = [i for ids in fragments for i in ids]
    scene = trainer.merge(scene, "joint", 0)
    scene = trainer.optimize(scene, all_ids, s.epochs_joint, (), "joint", merges_done=s.lr_drop_after_merges)
    scene = trainer.check_and_merge(scene, all_ids, "joint", s.epochs_joint)
    return PlaneSet(scene.tablets)


# ----------------------------------------------------------------------------
# results


def render_planes(planes: PlaneSet, view: CameraView, layers: int = 13, background=(0.0, 0.0, 0.0)):
    """Render a plane set (no gradients)."""
    batch = TabletBatch.from_tablets(planes.tablets)
    with torch.no_grad():
        return render_view(batch, view, layers, background=background)


def instance_mask(planes: PlaneSet, view: CameraView, layers: int = 13, threshold: float = 0.5) -> np.ndarray:
    """Per-pixel instance id of the tablet carrying the largest blending weight, -1 where none exceeds ``threshold``."""
    out = render_planes(planes, view, layers)
    w = out.weights.cpu().numpy().reshape(out.stack.tri.shape)
    best = np.argmax(w, axis=1)
    rows = np.arange(w.shape[0])
    tri = out.stack.tri[rows, best]
    ids = np.asarray(planes.instance_ids, dtype=np.int64)
    label = np.where((w[rows, best] > threshold) & (tri >= 0), ids[np.maximum(tri, 0) // 2] if len(ids) else -1, -1)
    return label.reshape(view.height, view.width)


def edit_plane_texture(planes: PlaneSet, instance_id: int, texture=None, transform=None, tint=None) -> PlaneSet:
    """Replace or transform the texture of one plane; geometry and alpha stay untouched.

    Args:
        texture: new (H, W, 3) tile or a single RGB color.
        transform: callable mapping the old (H, W, 3) texture to a new one.
        tint: per-channel multiplicative scale.
    """
    if sum(x is not None for x in (texture, transform, tint)) != 1:
        raise ValueError("give exactly one of texture, transform or tint")
    idx = planes.index_of(instance_id)
    out = PlaneSet(list(planes.tablets), list(planes.instance_ids))
    old = planes.tablets[idx]
    shape = old.texture.shape
    if texture is not None:
        tex = np.asarray(texture, dtype=np.float64)
        new = np.broadcast_to(tex, shape).copy() if tex.ndim == 1 else tex
        if new.shape != shape:
            raise ValueError(f"texture must have shape {shape}, got {new.shape}")
    elif tint is not None:
        new = old.texture * np.asarray(tint, dtype=np.float64).reshape(1, 1, 3)
    else:
        new = np.asarray(transform(old.texture.copy()), dtype=np.float64)
    out.tablets[idx] = old.copy(texture=np.clip(new, 0.0, 1.0))
    return out
