"""Tablet primitive, camera model and frame maintenance.

A tablet is a textured rectangle with a per-texel alpha channel. Its texture
has ``2*ru`` rows running along the up axis (row 0 at ``+u``) and ``2*rv``
columns running along the right axis (column 0 at ``-r``). World half
extents are ``ru / lam_u`` and ``rv / lam_v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AntiparallelNormals, DegenerateBasis, EmptySuperpixel, InvalidDistance

FACES = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
WORLD_UP = np.array([0.0, 1.0, 0.0])


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class CameraView:
    """Pinhole camera with a world-from-camera pose (OpenCV axes: x right, y down, z forward).

    Pixel centers sit at integer coordinates, so pixel ``(row, col)`` looks
    along ``((col - cx) / fx, (row - cy) / fy, 1)`` in the camera frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def pose(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns ``(xy, z)`` with camera-frame depth ``z``."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * pc[..., 0] / z + self.cx
            y = self.fy * pc[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions (unit z component) for every pixel, shape (H*W, 3)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        d = np.empty((self.height * self.width, 3))
        d[:, 0] = (xs.ravel() - self.cx) / self.fx
        d[:, 1] = (ys.ravel() - self.cy) / self.fy
        d[:, 2] = 1.0
        return d


@dataclass
class Tablet:
    center: np.ndarray
    normal: np.ndarray
    up: np.ndarray
    texture: np.ndarray
    alpha: np.ndarray
    lam_u: float
    lam_v: float
    source_camera: int
    ray_dir: np.ndarray
    cam_distance: float

    @classmethod
    def from_center(
        cls,
        center,
        normal,
        up,
        texture,
        alpha,
        lam_u: float,
        lam_v: float,
        source_camera: int,
        camera_center,
    ) -> "Tablet":
        """Build a tablet whose center ray starts at ``camera_center``."""
        center = np.asarray(center, dtype=np.float64)
        offset = center - np.asarray(camera_center, dtype=np.float64)
        dist = float(np.linalg.norm(offset))
        if dist <= 0:
            raise InvalidDistance("tablet center coincides with its camera center")
        n, u, _ = orthonormalize_basis(normal, up)
        return cls(
            center=center,
            normal=n,
            up=u,
            texture=np.asarray(texture, dtype=np.float64),
            alpha=np.asarray(alpha, dtype=np.float64),
            lam_u=float(lam_u),
            lam_v=float(lam_v),
            source_camera=int(source_camera),
            ray_dir=offset / dist,
            cam_distance=dist,
        )

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.normal, self.up)

    @property
    def ru(self) -> float:
        return self.texture.shape[0] / 2.0

    @property
    def rv(self) -> float:
        return self.texture.shape[1] / 2.0

    @property
    def half_u(self) -> float:
        return self.ru / self.lam_u

    @property
    def half_r(self) -> float:
        return self.rv / self.lam_v

    @property
    def origin(self) -> np.ndarray:
        """Center of the camera this tablet's center ray starts from."""
        return self.center - self.cam_distance * self.ray_dir

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_r

    def copy(self, **changes) -> "Tablet":
        out = replace(self, **changes)
        for name in ("center", "normal", "up", "texture", "alpha", "ray_dir"):
            if name not in changes:
                setattr(out, name, getattr(self, name).copy())
        return out

    def local_coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coordinates of world points along (up, right, normal) relative to the center."""
        rel = np.asarray(points) - self.center
        return rel @ self.up, rel @ self.right, rel @ self.normal

    def texel_points(self) -> np.ndarray:
        """World positions of all texel centers, shape (H, W, 3)."""
        h, w = self.alpha.shape
        a = self.half_u - (np.arange(h) + 0.5) / self.lam_u
        b = -self.half_r + (np.arange(w) + 0.5) / self.lam_v
        return self.center + a[:, None, None] * self.up + b[None, :, None] * self.right

    def corners(self) -> np.ndarray:
        return pseudo_mesh(self).vertices


@dataclass
class PseudoMesh:
    vertices: np.ndarray  # (4, 3)
    faces: np.ndarray  # (2, 3)
    uv: np.ndarray  # (4, 2) atlas pixel coordinates (col, row)


def orthonormalize_basis(n, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return a right-handed frame ``(n, u, r)`` with ``r = n x u``.

    ``n`` is normalized and ``u`` is made orthogonal to it by Gram-Schmidt.
    """
    n = np.asarray(n, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    nn = np.linalg.norm(n)
    un = np.linalg.norm(u)
    if nn < 1e-9 or un < 1e-9:
        raise DegenerateBasis("zero-length basis vector")
    n = n / nn
    if abs(n @ u) / un > 1.0 - 1e-9:
        raise DegenerateBasis("up vector is parallel to the normal")
    u = u - (n @ u) * n
    u = u / np.linalg.norm(u)
    return n, u, np.cross(n, u)


def pseudo_mesh(tablet: Tablet, tile_origin: tuple[int, int] = (0, 0)) -> PseudoMesh:
    """Two-triangle mesh of a tablet.

    Vertex order is (-u,-r), (-u,+r), (+u,+r), (+u,-r). ``tile_origin`` is the
    (row, col) of the tablet's tile inside the atlas page.
    """
    hu = tablet.half_u * tablet.up
    hr = tablet.half_r * tablet.right
    p = tablet.center
    verts = np.stack([p - hu - hr, p - hu + hr, p + hu + hr, p + hu - hr])
    h, w = tablet.alpha.shape
    r0, c0 = tile_origin
    uv = np.array([[c0, r0 + h], [c0 + w, r0 + h], [c0 + w, r0], [c0, r0]], dtype=np.float64)
    return PseudoMesh(vertices=verts, faces=FACES.copy(), uv=uv)


def update_up_vector(n_old, n_new, u_old) -> np.ndarray:
    """Rotate ``u_old`` by the minimal rotation taking ``n_old`` to ``n_new``.

    Works on single vectors or stacks of shape (N, 3). The result is
    re-projected onto the plane orthogonal to ``n_new`` and normalized.
    """
    n_old = np.asarray(n_old, dtype=np.float64)
    n_new = np.asarray(n_new, dtype=np.float64)
    u_old = np.asarray(u_old, dtype=np.float64)
    single = n_old.ndim == 1
    n_old, n_new, u_old = np.atleast_2d(n_old, n_new, u_old)

    cos_t = np.clip(np.sum(n_old * n_new, axis=1), -1.0, 1.0)
    if np.any(cos_t <= -1.0 + 1e-6):
        raise AntiparallelNormals("normal update flips the tablet")
    axis = np.cross(n_old, n_new)
    sin_t = np.linalg.norm(axis, axis=1)
    safe = sin_t > 1e-12
    k = np.zeros_like(axis)
    k[safe] = axis[safe] / sin_t[safe, None]
    kdotu = np.sum(k * u_old, axis=1)
    u_new = (
        u_old * cos_t[:, None]
        + np.cross(k, u_old) * sin_t[:, None]
        + k * (kdotu * (1.0 - cos_t))[:, None]
    )
    # absorb float drift
    u_new = u_new - np.sum(u_new * n_new, axis=1)[:, None] * n_new
    u_new = _normalize(u_new)
    return u_new[0] if single else u_new


def center_on_ray(view: CameraView | np.ndarray, ray_dir, d: float) -> np.ndarray:
    """Tablet center at distance ``d`` along ``ray_dir`` from the camera center."""
    if d <= 0:
        raise InvalidDistance(f"distance along ray must be positive, got {d}")
    origin = view.center if isinstance(view, CameraView) else np.asarray(view, dtype=np.float64)
    return origin + d * np.asarray(ray_dir, dtype=np.float64)


def _bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def backproject_superpixel(
    mask: np.ndarray,
    depth: float,
    normal,
    view: CameraView,
    camera_index: int = 0,
    world_up=WORLD_UP,
) -> Tablet:
    """Lift one superpixel to an initial tablet.

    Args:
        mask: boolean image-sized mask of the superpixel.
        depth: pooled z-depth of the superpixel.
        normal: pooled camera-frame normal; flipped to face the camera if needed.
        view: the source view (its image seeds the texture).
        camera_index: index of ``view`` in the global view list.
        world_up: preferred up direction, projected into the tablet plane.

    Returns:
        A tablet whose texture is the image resampled on the tablet grid and
        whose alpha is 1 inside the mask and 0 elsewhere.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptySuperpixel("superpixel mask is empty")
    if not depth > 0:
        raise InvalidDistance(f"superpixel depth must be positive, got {depth}")

    ray_c = np.array([(xs.mean() - view.cx) / view.fx, (ys.mean() - view.cy) / view.fy, 1.0])
    anchor_c = depth * ray_c
    n_c = np.asarray(normal, dtype=np.float64)
    n_c = n_c / np.linalg.norm(n_c)
    if n_c @ ray_c > 0:
        n_c = -n_c
    R = view.rotation
    n_w = R @ n_c
    anchor = R @ anchor_c + view.translation

    world_up = np.asarray(world_up, dtype=np.float64)
    up = world_up if abs(n_w @ world_up) <= 0.99 else R @ np.array([0.0, -1.0, 0.0])
    n_w, u, r = orthonormalize_basis(n_w, up)

    rays = np.stack([(xs - view.cx) / view.fx, (ys - view.cy) / view.fy, np.ones(xs.size)], axis=1)
    denom = rays @ n_c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = (anchor_c @ n_c) / denom
    # grazing pixels would stretch the rectangle towards infinity
    ok = np.isfinite(t_hit) & (t_hit > 0.25 * depth) & (t_hit < 4.0 * depth)
    if ok.any():
        pts = (rays[ok] * t_hit[ok, None]) @ R.T + view.translation
    else:
        pts = anchor[None]
    a = (pts - anchor) @ u
    b = (pts - anchor) @ r

    lam = view.focal / depth
    pad = 0.5 / lam
    a0, a1 = a.min() - pad, a.max() + pad
    b0, b1 = b.min() - pad, b.max() + pad
    h = max(2, int(np.ceil((a1 - a0) * lam - 1e-9)))
    w = max(2, int(np.ceil((b1 - b0) * lam - 1e-9)))
    center = anchor + 0.5 * (a0 + a1) * u + 0.5 * (b0 + b1) * r

    tab = Tablet.from_center(
        center, n_w, u, np.zeros((h, w, 3)), np.zeros((h, w)), lam, lam, camera_index, view.center
    )
    texels = tab.texel_points().reshape(-1, 3)
    xy, z = view.project(texels)
    front = z > 1e-9
    xy = np.where(front[:, None], xy, -1.0)
    if view.image is not None:
        tab.texture = np.clip(_bilinear(view.image, xy[:, 0], xy[:, 1]), 0, 1).reshape(h, w, 3)
    else:
        tab.texture = np.full((h, w, 3), 0.5)
    px = np.rint(xy[:, 0]).astype(np.int64)
    py = np.rint(xy[:, 1]).astype(np.int64)
    inside = front & (px >= 0) & (px < mask.shape[1]) & (py >= 0) & (py < mask.shape[0])
    alpha = np.zeros(h * w)
    alpha[inside] = mask[py[inside], px[inside]]
    tab.alpha = alpha.reshape(h, w)
    return tab
