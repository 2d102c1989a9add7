"""Synthetic planar scenes with exact depth, normals and plane labels.

Images are point-sampled: every pixel takes the color of the surface hit by
the ray through its center, so the ground truth has no blur.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tablet import CameraView

WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass
class PlanePatch:
    """Rectangle ``origin + s * edge_s + t * edge_t`` for s, t in [0, 1]."""

    label: int
    origin: np.ndarray
    edge_s: np.ndarray
    edge_t: np.ndarray
    normal: np.ndarray  # facing the observer side
    color: np.ndarray
    ripple: float = 0.04
    frequency: float = 0.5
    phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def offset(self) -> float:
        return float(self.normal @ self.origin)

    def shade(self, points: np.ndarray) -> np.ndarray:
        """Base color plus a smooth world-space ripple."""
        rel = points - self.origin
        s = rel @ self.edge_s / np.linalg.norm(self.edge_s)
        t = rel @ self.edge_t / np.linalg.norm(self.edge_t)
        k = 2 * np.pi * self.frequency
        ripple = np.stack(
            [np.sin(k * (s + 0.7 * t) + self.phase[c]) * np.cos(k * (0.6 * s - t) + 2 * self.phase[c]) for c in range(3)],
            axis=-1,
        )
        return np.clip(self.color + self.ripple * ripple, 0.0, 1.0)


@dataclass
class SyntheticScene:
    name: str
    views: list[CameraView]
    planes: list[PlanePatch]
    labels: list[np.ndarray]  # per view (H, W), -1 where no plane is hit
    points: np.ndarray  # ground-truth surface samples
    point_labels: np.ndarray
    scale: float


def look_rotation(forward, up=WORLD_UP) -> np.ndarray:
    """World-from-camera rotation for a camera looking along ``forward`` (x right, y down)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def ray_cast(planes: list[PlanePatch], view: CameraView):
    """Nearest plane hit per pixel.

    Returns:
        ``(depth, normal, label, color)``: z-depth (H, W), camera-frame normal
        facing the camera (H, W, 3), plane label (H, W) and color (H, W, 3).
    """
    h, w = view.height, view.width
    d_cam = view.pixel_rays()
    d_world = d_cam @ view.rotation.T
    o = view.center
    best = np.full(h * w, np.inf)
    label = np.full(h * w, -1, dtype=np.int64)
    for plane in planes:
        denom = d_world @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane.offset - o @ plane.normal) / denom
        hit = np.isfinite(t) & (t > 1e-6)
        pts = o + t[:, None] * d_world
        rel = pts - plane.origin
        s = rel @ plane.edge_s / (plane.edge_s @ plane.edge_s)
        u = rel @ plane.edge_t / (plane.edge_t @ plane.edge_t)
        hit &= (s >= 0) & (s <= 1) & (u >= 0) & (u <= 1) & (t < best)
        best[hit] = t[hit]
        label[hit] = plane.label
    depth = np.where(label >= 0, best, 0.0)
    color = np.zeros((h * w, 3))
    normal = np.zeros((h * w, 3))
    pts = o + depth[:, None] * d_world
    for plane in planes:
        m = label == plane.label
        if not m.any():
            continue
        color[m] = plane.shade(pts[m])
        n_cam = view.rotation.T @ plane.normal
        n_cam = np.where((d_cam[m] @ n_cam)[:, None] > 0, -n_cam, n_cam)
        normal[m] = n_cam
    return depth.reshape(h, w), normal.reshape(h, w, 3), label.reshape(h, w), color.reshape(h, w, 3)


def render_views(planes, cameras, width, height, focal) -> tuple[list[CameraView], list[np.ndarray]]:
    views, labels = [], []
    for rot, pos in cameras:
        v = CameraView(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height, rot, pos)
        depth, normal, label, color = ray_cast(planes, v)
        v.image = color
        v.depth = np.where(label >= 0, depth, np.nan)
        v.normal = normal
        views.append(v)
        labels.append(label)
    return views, labels


def surface_samples(views, labels, spacing: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Back-projected visible pixels of every view, thinned to one per ``spacing`` voxel."""
    pts, lab = [], []
    for v, l in zip(views, labels):
        ok = l.reshape(-1) >= 0
        d = np.nan_to_num(v.depth).reshape(-1)[ok]
        pts.append(v.to_world(v.pixel_rays()[ok] * d[:, None]))
        lab.append(l.reshape(-1)[ok])
    pts = np.concatenate(pts)
    lab = np.concatenate(lab)
    vox = np.floor(pts / spacing).astype(np.int64) + (1 << 16)
    key = (((vox[:, 0] << 17) | vox[:, 1]) << 17 | vox[:, 2]) << 10 | (lab & 1023)
    _, first = np.unique(key, return_index=True)
    first.sort()
    return pts[first], lab[first]


ROOM_COLORS = {
    "floor": (0.55, 0.40, 0.25),
    "ceiling": (0.88, 0.86, 0.80),
    "wall_xneg": (0.30, 0.52, 0.75),
    "wall_xpos": (0.78, 0.35, 0.35),
    "wall_back": (0.40, 0.70, 0.42),
}


def box_room(
    n_views: int = 20,
    width: int = 320,
    height: int = 240,
    focal: float = 277.0,
    size=(4.0, 2.5, 5.0),
    seed: int = 0,
) -> SyntheticScene:
    """Open-front box room: floor, ceiling, two side walls and a back wall.

    The room spans x in [-sx/2, sx/2], y in [0, sy], z in [0, sz]; cameras sit
    near the open front looking in, so every pixel sees a wall.
    """
    sx, sy, sz = size
    rng = np.random.default_rng(seed)
    x0, x1 = -sx / 2, sx / 2

    def patch(label, name, origin, es, et, normal):
        return PlanePatch(
            label,
            np.array(origin, float),
            np.array(es, float),
            np.array(et, float),
            np.array(normal, float),
            np.array(ROOM_COLORS[name]),
            phase=rng.uniform(0, 2 * np.pi, 3),
        )

    planes = [
        patch(0, "floor", (x0, 0, 0), (sx, 0, 0), (0, 0, sz), (0, 1, 0)),
        patch(1, "ceiling", (x0, sy, 0), (sx, 0, 0), (0, 0, sz), (0, -1, 0)),
        patch(2, "wall_xneg", (x0, 0, 0), (0, sy, 0), (0, 0, sz), (1, 0, 0)),
        patch(3, "wall_xpos", (x1, 0, 0), (0, sy, 0), (0, 0, sz), (-1, 0, 0)),
        patch(4, "wall_back", (x0, 0, sz), (sx, 0, 0), (0, sy, 0), (0, 0, -1)),
    ]
    # stop-and-go sweep: long and short moves alternate, so every second view is a
    # keyframe and each skipped view sits between two keyframes, the last one included
    gaps = np.where(np.arange(1, n_views) % 2 == 1, 0.12, 0.04)
    path = np.concatenate([[0.0], np.cumsum(gaps)])
    cameras = []
    for k in range(n_views):
        s = path[k] / path[-1] if n_views > 1 else 0.0
        pos = np.array([path[k] - 0.5 * path[-1], 0.5 * sy + 0.1 * np.sin(2 * np.pi * s), 0.35 + 0.25 * s])
        yaw = np.radians(-12.0 + 24.0 * s)
        pitch = np.radians(-4.0 + 6.0 * np.sin(np.pi * s))
        fwd = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
        cameras.append((look_rotation(fwd), pos))
    views, labels = render_views(planes, cameras, width, height, focal)
    pts, lab = surface_samples(views, labels)
    return SyntheticScene("box", views, planes, labels, pts, lab, scale=float(max(size)))


def textured_quad(
    n_views: int = 6,
    width: int = 160,
    height: int = 120,
    focal: float = 140.0,
    distance: float = 2.0,
    seed: int = 0,
) -> SyntheticScene:
    """One large fronto-parallel wall filling every view."""
    rng = np.random.default_rng(seed)
    plane = PlanePatch(
        0,
        np.array([-3.0, -2.0, distance]),
        np.array([6.0, 0.0, 0.0]),
        np.array([0.0, 4.0, 0.0]),
        np.array([0.0, 0.0, -1.0]),
        np.array([0.5, 0.45, 0.4]),
        ripple=0.08,
        frequency=0.8,
        phase=rng.uniform(0, 2 * np.pi, 3),
    )
    cameras = []
    for k in range(n_views):
        s = k / max(n_views - 1, 1)
        # 0.12 m between neighbors keeps every view a keyframe
        pos = np.array([-0.3 + 0.6 * s, 0.05 * np.sin(2 * np.pi * s), 0.0])
        cameras.append((look_rotation(np.array([0.0, 0.0, 1.0])), pos))
    views, labels = render_views([plane], cameras, width, height, focal)
    pts, lab = surface_samples(views, labels)
    return SyntheticScene("quad", views, [plane], labels, pts, lab, scale=6.0)


PRESETS = {"box": box_room, "quad": textured_quad}
