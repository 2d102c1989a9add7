"""Bottom-up merging of tablets into larger planes.

Every initial tablet is projected onto the current tablet that owns it; these
unit tablets are the fixed-size elements that a KD-tree neighborhood search
and a union-find forest group into coplanar, similarly colored sets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .raster import DEFAULT_LAYERS, TRI_CORNERS, TabletBatch, render_view
from .scene import Scene
from .tablet import CameraView, Tablet, update_up_vector


@dataclass
class UnitTablet:
    center: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    owner: int
    initial: int
    camera: int


@dataclass
class MergeConfig:
    k: int = 16
    cos_pair: float = 0.93
    cos_set: float = 0.93
    d_merge: float = 0.05
    c_merge: float = 0.12

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        for name in ("cos_pair", "cos_set"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a cosine in [-1, 1]")
        if self.d_merge < 0 or self.c_merge < 0:
            raise ValueError("merge thresholds must be non-negative")


class MergeForest:
    """Union-find over unit tablets with per-set running sums.

    Sums (not means) are stored so set statistics stay exact under any union
    order; ``mean_*`` divide on demand.
    """

    def __init__(self, units: list[UnitTablet]):
        n = len(units)
        self.units = units
        self.parent = np.arange(n, dtype=np.int64)
        self.rank = np.zeros(n, dtype=np.int64)
        self.count = np.ones(n, dtype=np.int64)
        self.sum_center = np.array([u.center for u in units], dtype=np.float64).reshape(n, 3)
        self.sum_normal = np.array([u.normal for u in units], dtype=np.float64).reshape(n, 3)
        self.sum_color = np.array([u.color for u in units], dtype=np.float64).reshape(n, 3)
        self.sweeps = 0
        self.unions = 0

    def __len__(self) -> int:
        return len(self.parent)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return int(root)

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb] or (self.rank[ra] == self.rank[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.count[ra] += self.count[rb]
        self.sum_center[ra] += self.sum_center[rb]
        self.sum_normal[ra] += self.sum_normal[rb]
        self.sum_color[ra] += self.sum_color[rb]
        self.unions += 1
        return ra

    def mean_center(self, root: int) -> np.ndarray:
        return self.sum_center[root] / self.count[root]

    def mean_color(self, root: int) -> np.ndarray:
        return self.sum_color[root] / self.count[root]

    def mean_normal(self, root: int) -> np.ndarray:
        s = self.sum_normal[root]
        norm = np.linalg.norm(s)
        return s / norm if norm > 0 else s

    def labels(self) -> np.ndarray:
        """Dense set labels numbered by each set's lowest member index."""
        roots = np.array([self.find(i) for i in range(len(self))], dtype=np.int64)
        _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return order[inverse]

    def sets(self) -> list[np.ndarray]:
        labels = self.labels()
        return [np.nonzero(labels == k)[0] for k in range(labels.max() + 1 if len(labels) else 0)]

    @property
    def set_count(self) -> int:
        return len({self.find(i) for i in range(len(self))})


def _footprint_color(initial: Tablet, current: Tablet) -> np.ndarray:
    """Alpha-weighted mean color of ``current`` over the projected footprint of ``initial``."""
    a, b, _ = current.local_coords(initial.corners())
    h, w = current.alpha.shape
    ai = current.half_u - (np.arange(h) + 0.5) / current.lam_u
    bj = -current.half_r + (np.arange(w) + 0.5) / current.lam_v
    rows = np.nonzero((ai >= a.min()) & (ai <= a.max()))[0]
    cols = np.nonzero((bj >= b.min()) & (bj <= b.max()))[0]
    if rows.size == 0 or cols.size == 0:
        ac, bc, _ = current.local_coords(initial.center[None])
        rows = np.array([int(np.clip((current.half_u - ac[0]) * current.lam_u, 0, h - 1))])
        cols = np.array([int(np.clip((bc[0] + current.half_r) * current.lam_v, 0, w - 1))])
    tex = current.texture[np.ix_(rows, cols)].reshape(-1, 3)
    wgt = current.alpha[np.ix_(rows, cols)].reshape(-1)
    if wgt.sum() <= 1e-9:
        return tex.mean(0)
    return (tex * wgt[:, None]).sum(0) / wgt.sum()


def project_units(scene: Scene) -> list[UnitTablet]:
    """One unit tablet per initial tablet, lying in its owner's plane."""
    units = []
    for k, (init, owner) in enumerate(zip(scene.initial, scene.affiliation)):
        cur = scene.tablets[owner]
        offset = float(np.dot(init.center - cur.center, cur.normal))
        units.append(
            UnitTablet(
                center=init.center - offset * cur.normal,
                normal=cur.normal.copy(),
                color=_footprint_color(init, cur),
                owner=int(owner),
                initial=k,
                camera=int(init.source_camera),
            )
        )
    return units


def _set_compatible(forest: MergeForest, ra: int, rb: int, cfg: MergeConfig) -> bool:
    na, nb = forest.mean_normal(ra), forest.mean_normal(rb)
    if float(np.dot(na, nb)) < cfg.cos_set:
        return False
    navg = na + nb
    norm = np.linalg.norm(navg)
    if norm <= 0:
        return False
    gap = float(np.dot(forest.mean_center(ra) - forest.mean_center(rb), navg / norm))
    if abs(gap) > cfg.d_merge:
        return False
    return float(np.max(np.abs(forest.mean_color(ra) - forest.mean_color(rb)))) <= cfg.c_merge


def merge_pass(units: list[UnitTablet], config: MergeConfig | None = None, group_owners: bool = True) -> MergeForest:
    """Group unit tablets until a full sweep performs no union.

    Units already owned by the same current tablet start in one set when
    ``group_owners`` is true, so earlier merges are never undone.
    """
    cfg = config or MergeConfig()
    if not units:
        raise ValueError("merge_pass needs at least one unit tablet")
    forest = MergeForest(units)
    if group_owners:
        first: dict[int, int] = {}
        for i, u in enumerate(units):
            if u.owner in first:
                forest.union(first[u.owner], i)
            else:
                first[u.owner] = i
        forest.unions = 0
    n = len(units)
    centers = np.array([u.center for u in units], dtype=np.float64)
    normals = np.array([u.normal for u in units], dtype=np.float64)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    k = min(cfg.k + 1, n)
    _, nbr = cKDTree(centers).query(centers, k=k)
    nbr = np.asarray(nbr).reshape(n, k)
    candidates = []
    for i in range(n):
        js = [int(j) for j in nbr[i] if j != i and j < n]
        candidates.append([j for j in js if float(np.dot(normals[i], normals[j])) >= cfg.cos_pair])
    while True:
        merged = False
        forest.sweeps += 1
        for i in range(n):
            for j in candidates[i]:
                ri, rj = forest.find(i), forest.find(j)
                if ri != rj and _set_compatible(forest, ri, rj, cfg):
                    forest.union(ri, rj)
                    merged = True
        if not merged:
            break
    return forest


def assign_camera(cameras) -> int:
    """Most frequent camera index; ties go to the lowest index."""
    cams = np.asarray(cameras, dtype=np.int64).reshape(-1)
    if cams.size == 0:
        raise ValueError("no cameras to choose from")
    return int(np.argmax(np.bincount(cams)))


def _resample(members: list[Tablet], target: Tablet) -> tuple[np.ndarray, np.ndarray]:
    """Per texel of ``target``, copy color and alpha from the member with the highest alpha there.

    Each member only visits the target texels inside its own bounding window.
    """
    H, W = target.alpha.shape
    best = np.full((H, W), -1.0)
    color = np.zeros((H, W, 3))
    for m in members:
        a, b, _ = target.local_coords(m.corners())
        r0 = int(np.clip(np.floor((target.half_u - a.max()) * target.lam_u) - 1, 0, H))
        r1 = int(np.clip(np.ceil((target.half_u - a.min()) * target.lam_u) + 1, 0, H))
        c0 = int(np.clip(np.floor((b.min() + target.half_r) * target.lam_v) - 1, 0, W))
        c1 = int(np.clip(np.ceil((b.max() + target.half_r) * target.lam_v) + 1, 0, W))
        if r0 >= r1 or c0 >= c1:
            continue
        ai = target.half_u - (np.arange(r0, r1) + 0.5) / target.lam_u
        bj = -target.half_r + (np.arange(c0, c1) + 0.5) / target.lam_v
        pts = target.center + ai[:, None, None] * target.up + bj[None, :, None] * target.right
        ma, mb, _ = m.local_coords(pts)
        h, w = m.alpha.shape
        fy = (m.half_u - ma) * m.lam_u
        fx = (mb + m.half_r) * m.lam_v
        inside = (fy >= 0) & (fy <= h) & (fx >= 0) & (fx <= w)
        iy = np.clip(np.floor(fy).astype(np.int64), 0, h - 1)
        ix = np.clip(np.floor(fx).astype(np.int64), 0, w - 1)
        cand = np.where(inside, m.alpha[iy, ix], -1.0)
        win = best[r0:r1, c0:c1]
        better = cand > win
        win[better] = cand[better]
        color[r0:r1, c0:c1][better] = m.texture[iy[better], ix[better]]
    empty = best < 0
    if empty.any():
        color[empty] = color[~empty].mean(0) if (~empty).any() else 0.5
    return color, np.where(empty, 0.0, best)


def _merged_tablet(scene: Scene, owners: list[int], initials: np.ndarray, center, normal) -> Tablet:
    tabs = [scene.tablets[o] for o in owners]
    largest = max(tabs, key=lambda t: t.area)
    if float(np.dot(normal, largest.normal)) < 0:
        normal = -normal
    up = update_up_vector(largest.normal, normal, largest.up)
    right = np.cross(normal, up)
    corners = np.concatenate([t.corners() for t in tabs]) - center
    a, b = corners @ up, corners @ right
    lam_u = float(np.mean([scene.initial[k].lam_u for k in initials]))
    lam_v = float(np.mean([scene.initial[k].lam_v for k in initials]))
    ru = max(1, math.ceil((a.max() - a.min()) * lam_u / 2 - 1e-9))
    rv = max(1, math.ceil((b.max() - b.min()) * lam_v / 2 - 1e-9))
    mid = center + 0.5 * (a.max() + a.min()) * up + 0.5 * (b.max() + b.min()) * right
    cam = assign_camera([scene.initial[k].source_camera for k in initials])
    shell = Tablet.from_center(
        mid,
        normal,
        up,
        np.zeros((2 * ru, 2 * rv, 3)),
        np.zeros((2 * ru, 2 * rv)),
        lam_u,
        lam_v,
        cam,
        scene.camera_centers[cam],
    )
    texture, alpha = _resample(tabs, shell)
    shell.texture, shell.alpha = texture, alpha
    return shell


def rebuild_tablets(forest: MergeForest, scene: Scene) -> Scene:
    """One tablet per forest set; sets equal to an existing tablet keep it unchanged."""
    units = forest.units
    tablets: list[Tablet] = []
    affiliation = np.empty(len(scene.initial), dtype=np.int64)
    for members in forest.sets():
        owners = sorted({units[m].owner for m in members})
        initials = np.array([units[m].initial for m in members], dtype=np.int64)
        if len(owners) == 1:
            tablets.append(scene.tablets[owners[0]].copy())
        else:
            root = forest.find(int(members[0]))
            tablets.append(
                _merged_tablet(scene, owners, initials, forest.mean_center(root), forest.mean_normal(root))
            )
        affiliation[initials] = len(tablets) - 1
    return Scene(tablets, [t.copy() for t in scene.initial], affiliation, scene.camera_centers)


def merge_scene(scene: Scene, config: MergeConfig | None = None) -> tuple[Scene, MergeForest]:
    """Project units, run the merge sweeps and rebuild the tablets."""
    if not scene.tablets:
        return scene, MergeForest([])
    forest = merge_pass(project_units(scene), config)
    return rebuild_tablets(forest, scene), forest


def _crop(tablet: Tablet, rows: tuple[int, int], cols: tuple[int, int], camera_center) -> Tablet:
    r0, r1 = rows
    c0, c1 = cols
    h, w = tablet.alpha.shape
    if (r0, r1, c0, c1) == (0, h, 0, w):
        return tablet.copy()
    a_mid = tablet.half_u - 0.5 * (r0 + r1) / tablet.lam_u
    b_mid = -tablet.half_r + 0.5 * (c0 + c1) / tablet.lam_v
    center = tablet.center + a_mid * tablet.up + b_mid * tablet.right
    return Tablet.from_center(
        center,
        tablet.normal,
        tablet.up,
        tablet.texture[r0:r1, c0:c1],
        tablet.alpha[r0:r1, c0:c1],
        tablet.lam_u,
        tablet.lam_v,
        tablet.source_camera,
        camera_center,
    )


def visible_texel_ranges(
    tablets: list[Tablet],
    views: list[CameraView],
    threshold: float = 0.3,
    layers: int = DEFAULT_LAYERS,
):
    """Per tablet: number of pixels with blending weight above ``threshold`` and the texel box they read.

    Returns ``(counts, boxes)`` with ``boxes[i] = (row_min, row_max, col_min, col_max)`` in
    continuous texel units, or ``None`` when the tablet never qualifies.
    """
    n = len(tablets)
    counts = np.zeros(n, dtype=np.int64)
    lo = np.full((n, 2), np.inf)
    hi = np.full((n, 2), -np.inf)
    if n == 0:
        return counts, []
    batch = TabletBatch.from_tablets(tablets)
    corner_uv = batch.atlas.corner_uv()
    tiles = batch.atlas.tiles
    with torch.no_grad():
        for view in views:
            out = render_view(batch, view, layers)
            sel = (out.weights.cpu().numpy().reshape(out.stack.tri.shape) > threshold) & out.stack.occupied
            if not sel.any():
                continue
            tri = out.stack.tri[sel]
            bary = out.stack.bary.cpu().numpy()[sel]
            tab = tri // 2
            uv = (bary[:, :, None] * corner_uv[tab[:, None], TRI_CORNERS[tri % 2]]).sum(1)
            col = uv[:, 0] - tiles[tab, 1]
            row = uv[:, 1] - tiles[tab, 0]
            np.add.at(counts, tab, 1)
            np.minimum.at(lo, (tab, 0), row)
            np.minimum.at(lo, (tab, 1), col)
            np.maximum.at(hi, (tab, 0), row)
            np.maximum.at(hi, (tab, 1), col)
    boxes = [
        (lo[i, 0], hi[i, 0], lo[i, 1], hi[i, 1]) if counts[i] else None for i in range(n)
    ]
    return counts, boxes


def weight_check(
    scene: Scene,
    views: list[CameraView],
    threshold: float = 0.3,
    min_points: int = 8,
    layers: int = DEFAULT_LAYERS,
) -> tuple[Scene, int]:
    """Drop rarely visible tablets and shrink the rest to their visible texel range.

    Returns the pruned scene and the number of dropped tablets. Bounds only
    ever shrink.
    """
    counts, boxes = visible_texel_ranges(scene.tablets, views, threshold, layers)
    survivors = [i for i in range(len(scene.tablets)) if counts[i] >= min_points]
    out = scene.keep(survivors)
    for new_i, old_i in enumerate(survivors):
        t = scene.tablets[old_i]
        h, w = t.alpha.shape
        rmin, rmax, cmin, cmax = boxes[old_i]
        r0 = int(np.clip(np.floor(rmin), 0, h - 1))
        r1 = int(np.clip(np.floor(rmax) + 1, r0 + 1, h))
        c0 = int(np.clip(np.floor(cmin), 0, w - 1))
        c1 = int(np.clip(np.floor(cmax) + 1, c0 + 1, w))
        out.tablets[new_i] = _crop(t, (r0, r1), (c0, c1), scene.camera_centers[t.source_camera])
    return out, len(scene.tablets) - len(survivors)


class MergeLog:
    """CSV telemetry of tablet counts around every merge or weight-check event."""

    header = ("stage", "epoch", "event", "tablets_before", "tablets_after", "dropped")

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def record(self, stage: str, epoch: int, event: str, before: int, after: int, dropped: int = 0) -> None:
        row = (stage, int(epoch), event, int(before), int(after), int(dropped))
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(row)
