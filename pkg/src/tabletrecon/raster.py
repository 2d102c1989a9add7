"""Depth-peeled rasterization of tablet pseudo meshes.

Rendering is split in two halves. The discrete half (which triangle covers
which pixel, in which depth order, and how much of each silhouette pixel it
covers) runs in numpy with no gradient. The continuous half recomputes
barycentrics, depths and points from the vertex tensor in torch, so
gradients reach the tablet geometry while visibility stays fixed.

Triangles are rasterized with homogeneous edge functions: for a camera-frame
ray ``d`` and triangle ``(A, B, C)`` the functions ``d . (B x C)`` etc. are
linear in pixel coordinates and, normalized, give perspective-correct
barycentrics without near-plane clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tablet import CameraView, Tablet, update_up_vector

DEFAULT_LAYERS = 13
TRI_CORNERS = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
_CHUNK = 2_000_000
_HALF_DIAG = 0.5 * np.sqrt(2.0) + 1e-9


# ----------------------------------------------------------------------------
# atlas


@dataclass
class TextureAtlas:
    """Shelf-packed page holding every tablet's color and alpha tile.

    ``tiles[i] = (row0, col0, height, width)``; tiles never overlap.
    """

    color: torch.Tensor  # (Ah, Aw, 3)
    alpha: torch.Tensor  # (Ah, Aw)
    tiles: np.ndarray  # (N, 4) int

    @classmethod
    def pack(cls, textures, alphas, dtype=torch.float64) -> "TextureAtlas":
        n = len(textures)
        sizes = np.array([a.shape for a in alphas], dtype=np.int64).reshape(n, 2)
        tiles = np.zeros((n, 4), dtype=np.int64)
        if n == 0:
            return cls(torch.zeros(1, 1, 3, dtype=dtype), torch.zeros(1, 1, dtype=dtype), tiles)
        page_w = int(max(sizes[:, 1].max(), np.ceil(np.sqrt((sizes[:, 0] * sizes[:, 1]).sum()))))
        order = np.lexsort((np.arange(n), -sizes[:, 0]))
        row = col = shelf_h = 0
        for i in order:
            h, w = sizes[i]
            if col + w > page_w:
                row += shelf_h
                col = shelf_h = 0
            tiles[i] = (row, col, h, w)
            col += w
            shelf_h = max(shelf_h, h)
        page_h = row + shelf_h
        color = np.zeros((page_h, page_w, 3))
        alpha = np.zeros((page_h, page_w))
        for i, (r0, c0, h, w) in enumerate(tiles):
            color[r0 : r0 + h, c0 : c0 + w] = textures[i]
            alpha[r0 : r0 + h, c0 : c0 + w] = alphas[i]
        return cls(torch.tensor(color, dtype=dtype), torch.tensor(alpha, dtype=dtype), tiles)

    def tile(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        r0, c0, h, w = self.tiles[i]
        c = self.color.detach()[r0 : r0 + h, c0 : c0 + w].cpu().numpy().copy()
        a = self.alpha.detach()[r0 : r0 + h, c0 : c0 + w].cpu().numpy().copy()
        return c, a

    def corner_uv(self) -> np.ndarray:
        """Atlas (col, row) coordinates of each tablet's four corners, shape (N, 4, 2)."""
        r0, c0, h, w = (self.tiles[:, k].astype(np.float64) for k in range(4))
        return np.stack(
            [
                np.stack([c0, r0 + h], -1),
                np.stack([c0 + w, r0 + h], -1),
                np.stack([c0 + w, r0], -1),
                np.stack([c0, r0], -1),
            ],
            axis=1,
        )


# ----------------------------------------------------------------------------
# torch-side tablet parameters


@dataclass
class TabletBatch:
    """All tablets of a scene as tensors.

    ``normal`` (unnormalized), ``distance``, ``atlas.color`` and ``atlas.alpha``
    are the learnable leaves. The up vector is a constant reference that is
    Gram-Schmidt projected against the current normal on every use.
    """

    normal: torch.Tensor  # (N, 3)
    distance: torch.Tensor  # (N,)
    atlas: TextureAtlas
    origin: torch.Tensor  # (N, 3)
    ray_dir: torch.Tensor  # (N, 3)
    up_ref: torch.Tensor  # (N, 3)
    half_u: torch.Tensor  # (N,)
    half_r: torch.Tensor  # (N,)
    lam_u: np.ndarray
    lam_v: np.ndarray
    source_camera: np.ndarray

    def __len__(self) -> int:
        return int(self.normal.shape[0])

    @property
    def dtype(self):
        return self.normal.dtype

    @classmethod
    def from_tablets(cls, tablets: list[Tablet], dtype=torch.float64) -> "TabletBatch":
        atlas = TextureAtlas.pack([t.texture for t in tablets], [t.alpha for t in tablets], dtype)

        def stack(fn, shape):
            if not tablets:
                return torch.zeros(shape, dtype=dtype)
            return torch.tensor(np.array([fn(t) for t in tablets], dtype=np.float64), dtype=dtype)

        return cls(
            normal=stack(lambda t: t.normal, (0, 3)),
            distance=stack(lambda t: t.cam_distance, (0,)),
            atlas=atlas,
            origin=stack(lambda t: t.origin, (0, 3)),
            ray_dir=stack(lambda t: t.ray_dir, (0, 3)),
            up_ref=stack(lambda t: t.up, (0, 3)),
            half_u=stack(lambda t: t.half_u, (0,)),
            half_r=stack(lambda t: t.half_r, (0,)),
            lam_u=np.array([t.lam_u for t in tablets], dtype=np.float64),
            lam_v=np.array([t.lam_v for t in tablets], dtype=np.float64),
            source_camera=np.array([t.source_camera for t in tablets], dtype=np.int64),
        )

    def frame(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n = self.normal / torch.linalg.norm(self.normal, dim=1, keepdim=True)
        u = self.up_ref - (self.up_ref * n).sum(1, keepdim=True) * n
        u = u / torch.linalg.norm(u, dim=1, keepdim=True)
        return n, u, torch.cross(n, u, dim=1)

    def centers(self) -> torch.Tensor:
        return self.origin + self.distance[:, None] * self.ray_dir

    def vertices(self) -> torch.Tensor:
        """Pseudo-mesh vertices, shape (N, 4, 3), in the corner order of ``pseudo_mesh``."""
        _, u, r = self.frame()
        p = self.centers()
        hu = self.half_u[:, None] * u
        hr = self.half_r[:, None] * r
        return torch.stack([p - hu - hr, p - hu + hr, p + hu + hr, p + hu - hr], dim=1)

    def to_tablets(self) -> list[Tablet]:
        with torch.no_grad():
            n, u, _ = self.frame()
            p = self.centers()
        out = []
        for i in range(len(self)):
            tex, alpha = self.atlas.tile(i)
            out.append(
                Tablet(
                    center=p[i].cpu().numpy().astype(np.float64),
                    normal=n[i].cpu().numpy().astype(np.float64),
                    up=u[i].cpu().numpy().astype(np.float64),
                    texture=tex.astype(np.float64),
                    alpha=alpha.astype(np.float64),
                    lam_u=float(self.lam_u[i]),
                    lam_v=float(self.lam_v[i]),
                    source_camera=int(self.source_camera[i]),
                    ray_dir=self.ray_dir[i].cpu().numpy().astype(np.float64),
                    cam_distance=float(self.distance[i]),
                )
            )
        return out

    @torch.no_grad()
    def renormalize(self) -> None:
        """Unit-normalize normals and carry the up references along (no gradient)."""
        n, u, _ = self.frame()
        self.normal.copy_(n)
        self.up_ref.copy_(u)

    @torch.no_grad()
    def rotate_up(self, n_before: torch.Tensor, rows=None) -> None:
        """Apply the minimal rotation n_before -> current normal to the up references.

        ``rows`` restricts the update (and the renormalization) to those tablets.
        """
        idx = torch.arange(len(self)) if rows is None else torch.as_tensor(rows, dtype=torch.long).reshape(-1)
        if idx.numel() == 0:
            return
        n_now = self.normal[idx] / torch.linalg.norm(self.normal[idx], dim=1, keepdim=True)
        u_new = update_up_vector(
            n_before[idx].cpu().numpy().astype(np.float64),
            n_now.cpu().numpy().astype(np.float64),
            self.up_ref[idx].cpu().numpy().astype(np.float64),
        )
        self.normal[idx] = n_now
        self.up_ref[idx] = torch.as_tensor(u_new, dtype=self.dtype).reshape(-1, 3)


# ----------------------------------------------------------------------------
# discrete rasterization


@dataclass
class Fragments:
    """Discrete outcome of a peeled rasterization pass (no gradients).

    One entry per kept (pixel, layer) hit. ``partner`` points at the fragment
    in the same layer of the neighboring pixel across the nearest silhouette
    edge, or -1. ``coverage`` is the analytic fraction of the pixel square
    covered by the fragment's tablet (1 for interior pixels).
    """

    height: int
    width: int
    layers: int
    pix: np.ndarray
    tablet: np.ndarray
    tri: np.ndarray
    layer: np.ndarray
    coverage: np.ndarray
    partner: np.ndarray

    @property
    def count(self) -> int:
        return int(self.pix.size)

    @property
    def flat(self) -> np.ndarray:
        return self.pix * self.layers + self.layer

    def edge_mask(self) -> np.ndarray:
        m = np.zeros(self.height * self.width, dtype=bool)
        m[self.pix[self.coverage < 1.0]] = True
        return m.reshape(self.height, self.width)

    def same_decisions(self, other: "Fragments") -> bool:
        if self.count != other.count:
            return False
        return (
            np.array_equal(self.pix, other.pix)
            and np.array_equal(self.tablet, other.tablet)
            and np.array_equal(self.tri, other.tri)
            and np.array_equal(self.layer, other.layer)
            and np.array_equal(self.partner, other.partner)
        )


def _line_coeffs(m: np.ndarray, view: CameraView) -> np.ndarray:
    """Screen-space (A, B, C) of ``d(x, y) . m`` for camera-frame vectors ``m``."""
    a = m[..., 0] / view.fx
    b = m[..., 1] / view.fy
    c = m[..., 2] - m[..., 0] * view.cx / view.fx - m[..., 1] * view.cy / view.fy
    return np.stack([a, b, c], axis=-1)


def _clip_halfplane(poly, cnt, a, b, c):
    """Clip a batch of convex polygons to ``a*x + b*y + c >= 0``."""
    m, cap, _ = poly.shape
    out = np.zeros((m, cap + 1, 2))
    ocnt = np.zeros(m, dtype=np.int64)
    rows = np.arange(m)
    val = a[:, None] * poly[..., 0] + b[:, None] * poly[..., 1] + c[:, None]
    safe_cnt = np.maximum(cnt, 1)
    for i in range(cap):
        active = i < cnt
        j = (i + 1) % safe_cnt
        cur, nxt = poly[rows, i], poly[rows, j]
        vc, vn = val[rows, i], val[rows, j]
        cin, nin = vc >= 0, vn >= 0
        emit = active & cin
        out[rows[emit], ocnt[emit]] = cur[emit]
        ocnt += emit
        cross = active & (cin != nin)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = vc / (vc - vn)
            pt = cur + t[:, None] * (nxt - cur)
        out[rows[cross], ocnt[cross]] = pt[cross]
        ocnt += cross
    return out, ocnt


def _polygon_area(poly, cnt):
    m, cap, _ = poly.shape
    safe_cnt = np.maximum(cnt, 1)
    area = np.zeros(m)
    rows = np.arange(m)
    for i in range(cap):
        active = i < cnt
        j = (i + 1) % safe_cnt
        p, q = poly[rows, i], poly[rows, j]
        area += np.where(active, p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1], 0.0)
    return 0.5 * np.abs(area)


def pixel_coverage(x, y, lines) -> np.ndarray:
    """Area of each unit pixel square centered at ``(x, y)`` inside all half-planes.

    ``lines`` has shape (M, K, 3) with rows ``(A, B, C)`` meaning ``A x + B y + C >= 0``.
    """
    m = x.size
    k = lines.shape[1]
    poly = np.zeros((m, 4 + k, 2))
    poly[:, 0] = np.stack([x - 0.5, y - 0.5], 1)
    poly[:, 1] = np.stack([x + 0.5, y - 0.5], 1)
    poly[:, 2] = np.stack([x + 0.5, y + 0.5], 1)
    poly[:, 3] = np.stack([x - 0.5, y + 0.5], 1)
    cnt = np.full(m, 4, dtype=np.int64)
    for i in range(k):
        poly, cnt = _clip_halfplane(poly, cnt, lines[:, i, 0], lines[:, i, 1], lines[:, i, 2])
        poly = poly[:, : 4 + k]
    return _polygon_area(poly, cnt)


def rasterize_fragments(verts: np.ndarray, view: CameraView, layers: int = DEFAULT_LAYERS) -> Fragments:
    """Discrete peeled rasterization of tablet quads (two triangles each).

    Both sides of a tablet are rendered. Per pixel, hits are sorted by camera
    depth (ties by tablet index) and the nearest ``layers`` are kept.
    """
    if layers < 1:
        raise ValueError("need at least one layer")
    H, W = view.height, view.width
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 4, 3)
    vc = view.to_camera(verts)

    nxt = np.roll(vc, -1, axis=1)
    m_edge = np.cross(vc, nxt)  # (N, 4, 3): edges 0-1, 1-2, 2-3, 3-0
    m_diag = np.cross(vc[:, 2], vc[:, 0])  # tri 0's closing edge 2-0
    nq = np.cross(vc[:, 3] - vc[:, 0], vc[:, 1] - vc[:, 0])
    plane_off = np.einsum("ij,ij->i", nq, vc[:, 0])
    s_front = np.sign(plane_off)
    g = vc.mean(axis=1)
    sigma = np.sign(np.einsum("ij,ij->i", g, m_edge[:, 0]))
    usable = (s_front != 0) & (sigma != 0) & (np.linalg.norm(nq, axis=1) > 0)

    # screen bounding boxes
    z = vc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = view.fx * vc[..., 0] / z + view.cx
        sy = view.fy * vc[..., 1] / z + view.cy
    all_front = np.all(z > 1e-9, axis=1)
    any_front = np.any(z > 1e-9, axis=1)
    x0 = np.where(all_front, np.floor(np.nan_to_num(sx.min(1), nan=0, posinf=W, neginf=-1)), 0)
    x1 = np.where(all_front, np.ceil(np.nan_to_num(sx.max(1), nan=0, posinf=W, neginf=-1)), W - 1)
    y0 = np.where(all_front, np.floor(np.nan_to_num(sy.min(1), nan=0, posinf=H, neginf=-1)), 0)
    y1 = np.where(all_front, np.ceil(np.nan_to_num(sy.max(1), nan=0, posinf=H, neginf=-1)), H - 1)
    x0 = np.clip(x0, 0, W).astype(np.int64)
    x1 = np.clip(x1, -1, W - 1).astype(np.int64)
    y0 = np.clip(y0, 0, H).astype(np.int64)
    y1 = np.clip(y1, -1, H - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    bw[~(usable & any_front)] = 0
    area = bw * bh

    pieces = []
    todo = np.nonzero(area > 0)[0]
    start = 0
    while start < todo.size:
        csum = np.cumsum(area[todo[start:]])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK, side="right")))
        ids = todo[start:stop]
        start = stop
        counts = area[ids]
        tab = np.repeat(ids, counts)
        local = np.arange(tab.size) - np.repeat(np.cumsum(counts) - counts, counts)
        px = x0[tab] + local % bw[tab]
        py = y0[tab] + local // bw[tab]
        d = np.stack([(px - view.cx) / view.fx, (py - view.cy) / view.fy, np.ones(px.size)], 1)
        e = np.einsum("kj,kej->ke", d, m_edge[tab]) * sigma[tab, None]
        nd = np.einsum("kj,kj->k", d, nq[tab])
        inside = np.all(e >= 0, axis=1) & (nd * s_front[tab] > 0)
        if not inside.any():
            continue
        tab, px, py, d, e, nd = tab[inside], px[inside], py[inside], d[inside], e[inside], nd[inside]
        diag = np.einsum("kj,kj->k", d, m_diag[tab]) * sigma[tab]
        tri = np.where(diag >= 0, 0, 1)
        depth = plane_off[tab] / nd
        pieces.append((tab, px, py, tri, depth))

    if not pieces:
        empty = np.zeros(0, dtype=np.int64)
        return Fragments(H, W, 1, empty, empty, empty, empty, np.zeros(0), empty)

    tab, px, py, tri, depth = (np.concatenate(c) for c in zip(*pieces))
    pix = py * W + px
    order = np.lexsort((tab, depth, pix))
    tab, px, py, tri, depth, pix = tab[order], px[order], py[order], tri[order], depth[order], pix[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    group_start = np.maximum.accumulate(np.where(first, np.arange(pix.size), 0))
    layer = np.arange(pix.size) - group_start
    keep = layer < layers
    tab, px, py, tri, pix, layer = tab[keep], px[keep], py[keep], tri[keep], pix[keep], layer[keep]
    l_eff = int(layer.max()) + 1

    # silhouette coverage
    lines = np.concatenate(
        [
            _line_coeffs(m_edge, view) * sigma[:, None, None],
            (_line_coeffs(nq, view) * s_front[:, None])[:, None, :],
        ],
        axis=1,
    )  # (N, 5, 3), inside where >= 0
    fl = lines[tab]
    val = fl[..., 0] * px[:, None] + fl[..., 1] * py[:, None] + fl[..., 2]
    norm = np.hypot(fl[..., 0], fl[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(norm > 0, val / norm, np.inf)
    near = np.min(dist, axis=1) < _HALF_DIAG
    coverage = np.ones(pix.size)
    partner = np.full(pix.size, -1, dtype=np.int64)
    cand = np.nonzero(near)[0]
    if cand.size:
        cov = pixel_coverage(px[cand].astype(np.float64), py[cand].astype(np.float64), fl[cand])
        cov = np.clip(cov, 0.0, 1.0)
        edge = cov < 1.0 - 1e-12
        coverage[cand[edge]] = cov[edge]
        cand = cand[edge]
    if cand.size:
        nearest = np.argmin(dist[cand], axis=1)
        out_dir = -fl[cand, nearest, :2]
        horiz = np.abs(out_dir[:, 0]) >= np.abs(out_dir[:, 1])
        dx = np.where(horiz, np.sign(out_dir[:, 0]), 0).astype(np.int64)
        dy = np.where(horiz, 0, np.sign(out_dir[:, 1])).astype(np.int64)
        qx, qy = px[cand] + dx, py[cand] + dy
        ok = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H)
        lookup = np.full(H * W * l_eff, -1, dtype=np.int64)
        lookup[pix * l_eff + layer] = np.arange(pix.size)
        q = np.where(ok, (qy * W + qx) * l_eff + layer[cand], 0)
        partner[cand] = np.where(ok, lookup[q], -1)

    return Fragments(H, W, l_eff, pix, tab, tri, layer, coverage, partner)


# ----------------------------------------------------------------------------
# differentiable layer stack


@dataclass
class LayerStack:
    """Dense per-pixel, per-layer rasterization buffers (pixels flattened row-major)."""

    frags: Fragments
    tri: np.ndarray  # (P, L) global triangle id = 2 * tablet + local, -1 when empty
    bary: torch.Tensor  # (P, L, 3)
    depth: torch.Tensor  # (P, L)
    point: torch.Tensor  # (P, L, 3) world
    normal: torch.Tensor  # (P, L, 3) camera frame, facing the camera
    coverage: np.ndarray  # (P, L)
    partner: np.ndarray  # (P, L) flat index into (P*L) or -1
    color: torch.Tensor | None = None  # (P, L, 3)
    alpha: torch.Tensor | None = None  # (P, L)

    @property
    def occupied(self) -> np.ndarray:
        return self.tri >= 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frags.height, self.frags.width, self.frags.layers


def _scatter(flat, values, size, dtype):
    shape = (size,) + tuple(values.shape[1:])
    out = torch.zeros(shape, dtype=dtype)
    if flat.size == 0:
        return out
    return out.index_put((torch.as_tensor(flat),), values)


def rasterize_peeled(
    vertices: torch.Tensor,
    view: CameraView,
    layers: int = DEFAULT_LAYERS,
    fragments: Fragments | None = None,
) -> LayerStack:
    """Peeled rasterization of a pseudo-mesh batch.

    Args:
        vertices: (N, 4, 3) world-space tablet corners (may require grad).
        view: camera to render from.
        layers: maximum number of peeled layers.
        fragments: reuse these discrete decisions instead of re-rasterizing.

    Returns:
        A ``LayerStack`` whose barycentrics, depths, points and normals are
        differentiable functions of ``vertices``.
    """
    if fragments is None:
        fragments = rasterize_fragments(vertices.detach().cpu().numpy(), view, layers)
    f = fragments
    dtype = vertices.dtype
    P, L = f.height * f.width, f.layers
    flat = f.flat

    R = torch.as_tensor(view.rotation, dtype=dtype)
    t = torch.as_tensor(view.translation, dtype=dtype)
    vc = (vertices - t) @ R  # camera frame
    tab = torch.as_tensor(f.tablet)
    px = torch.as_tensor((f.pix % f.width).astype(np.float64), dtype=dtype)
    py = torch.as_tensor((f.pix // f.width).astype(np.float64), dtype=dtype)
    d = torch.stack([(px - view.cx) / view.fx, (py - view.cy) / view.fy, torch.ones_like(px)], 1)
    # edge normals are per triangle; each fragment only dots its ray against them
    tv_all = vc[:, TRI_CORNERS].reshape(-1, 3, 3)  # (2N, 3, 3)
    A, B, C = tv_all[:, 0], tv_all[:, 1], tv_all[:, 2]
    edges = torch.stack([torch.cross(B, C, dim=1), torch.cross(C, A, dim=1), torch.cross(A, B, dim=1)], 1)
    tid = torch.as_tensor(2 * f.tablet + f.tri)
    e = torch.bmm(edges[tid], d[:, :, None])[:, :, 0]
    bary = e / e.sum(1, keepdim=True)
    x_cam = torch.bmm(bary[:, None, :], tv_all[tid])[:, 0]
    depth = x_cam[:, 2]
    point = x_cam @ R.T + t

    nq = torch.cross(vc[:, 3] - vc[:, 0], vc[:, 1] - vc[:, 0], dim=1)
    nq = nq / torch.linalg.norm(nq, dim=1, keepdim=True)
    nf = nq[tab]
    facing = torch.where((nf * x_cam).sum(1) > 0, -1.0, 1.0).to(dtype).detach()
    nf = nf * facing[:, None]

    tri = np.full(P * L, -1, dtype=np.int64)
    tri[flat] = 2 * f.tablet + f.tri
    coverage = np.ones(P * L)
    coverage[flat] = f.coverage
    partner = np.full(P * L, -1, dtype=np.int64)
    has = f.partner >= 0
    partner[flat[has]] = flat[f.partner[has]]

    return LayerStack(
        frags=f,
        tri=tri.reshape(P, L),
        bary=_scatter(flat, bary, P * L, dtype).reshape(P, L, 3),
        depth=_scatter(flat, depth, P * L, dtype).reshape(P, L),
        point=_scatter(flat, point, P * L, dtype).reshape(P, L, 3),
        normal=_scatter(flat, nf, P * L, dtype).reshape(P, L, 3),
        coverage=coverage.reshape(P, L),
        partner=partner.reshape(P, L),
    )


def sample_atlas(atlas: TextureAtlas, tri: np.ndarray, bary: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear color/alpha lookup at barycentric positions inside atlas tiles.

    Lookups are clamped to the owning tile so neighboring tiles never bleed.
    """
    tri = np.asarray(tri, dtype=np.int64)
    tab = tri // 2
    corner_uv = atlas.corner_uv()[tab[:, None], TRI_CORNERS[tri % 2]]  # (K, 3, 2)
    uv = torch.bmm(bary[:, None, :], torch.as_tensor(corner_uv, dtype=bary.dtype))[:, 0]
    tiles = atlas.tiles[tab]
    r0 = torch.as_tensor(tiles[:, 0])
    c0 = torch.as_tensor(tiles[:, 1])
    h = torch.as_tensor(tiles[:, 2], dtype=bary.dtype)
    w = torch.as_tensor(tiles[:, 3], dtype=bary.dtype)
    fx = torch.minimum(torch.clamp(uv[:, 0] - c0.to(bary.dtype) - 0.5, min=0.0), w - 1)
    fy = torch.minimum(torch.clamp(uv[:, 1] - r0.to(bary.dtype) - 0.5, min=0.0), h - 1)
    ix0 = torch.floor(fx.detach()).long()
    iy0 = torch.floor(fy.detach()).long()
    ix1 = torch.minimum(ix0 + 1, w.long() - 1)
    iy1 = torch.minimum(iy0 + 1, h.long() - 1)
    wx = (fx - ix0.to(bary.dtype))[:, None]
    wy = (fy - iy0.to(bary.dtype))[:, None]

    # flat row-major lookups: index_select backpropagates through a fast index_add
    page_w = atlas.alpha.shape[1]
    corners = torch.cat([(r0 + iy) * page_w + (c0 + ix) for iy in (iy0, iy1) for ix in (ix0, ix1)])

    def interp(img):
        squeeze = img.dim() == 2
        flat = img.reshape(-1, 1 if squeeze else img.shape[-1])
        tl, tr, bl, br = flat.index_select(0, corners).chunk(4)
        top = tl * (1 - wx) + tr * wx
        bot = bl * (1 - wx) + br * wx
        out = top * (1 - wy) + bot * wy
        return out[:, 0] if squeeze else out

    return interp(atlas.color), interp(atlas.alpha)


def shade(stack: LayerStack, atlas: TextureAtlas) -> LayerStack:
    """Fill ``stack.color`` / ``stack.alpha`` from the atlas (empty layers get zeros)."""
    P, L = stack.tri.shape
    flat = stack.frags.flat
    dtype = stack.bary.dtype
    if flat.size:
        b = stack.bary.reshape(P * L, 3)[torch.as_tensor(flat)]
        c, a = sample_atlas(atlas, stack.tri.reshape(-1)[flat], b)
    else:
        c = torch.zeros(0, 3, dtype=dtype)
        a = torch.zeros(0, dtype=dtype)
    stack.color = _scatter(flat, c, P * L, dtype).reshape(P, L, 3)
    stack.alpha = _scatter(flat, a, P * L, dtype).reshape(P, L)
    return stack


def aa_color(c1, a1, c2, a2, w, eps: float = 1e-8):
    """Alpha-weighted coverage blend of an edge color with its runner-up.

    ``(a1 c1 w + a2 c2 (1 - w)) / (a1 w + a2 (1 - w))``; falls back to ``c1``
    where the denominator is at most ``eps``. Colors are (..., 3), the rest (...).
    """
    num = (a1 * w)[..., None] * c1 + (a2 * (1 - w))[..., None] * c2
    den = a1 * w + a2 * (1 - w)
    ok = den > eps
    return torch.where(ok[..., None], num / torch.where(ok, den, torch.ones_like(den))[..., None], c1)


def antialias(stack: LayerStack, naive: bool = False, eps: float = 1e-8) -> LayerStack:
    """Alpha-aware anti-aliasing of silhouette pixels, layer by layer.

    On an edge entry with own color/alpha ``(c1, a1)``, coverage ``w`` and the
    same-layer entry across the edge ``(c2, a2)``::

        c_aa = (a1 c1 w + a2 c2 (1 - w)) / (a1 w + a2 (1 - w)),   a_aa = a1

    The coverage ``w`` is a constant (no gradient). With ``naive=True`` both
    color and alpha are blended linearly by coverage instead, which lets a
    transparent primitive darken its neighbors.
    """
    P, L = stack.tri.shape
    w_np = stack.coverage.reshape(-1)
    edge = np.nonzero((w_np < 1.0) & (stack.tri.reshape(-1) >= 0))[0]
    if edge.size == 0:
        return stack
    color = stack.color.reshape(P * L, 3)
    alpha = stack.alpha.reshape(P * L)
    dtype = color.dtype
    partner = stack.partner.reshape(-1)[edge]
    has = partner >= 0
    idx = torch.as_tensor(edge)
    pidx = torch.as_tensor(np.where(has, partner, 0))
    hasm = torch.as_tensor(has, dtype=dtype)
    w = torch.as_tensor(w_np[edge], dtype=dtype)
    c1, a1 = color[idx], alpha[idx]
    c2 = color[pidx] * hasm[:, None]
    a2 = alpha[pidx] * hasm

    if naive:
        new_c = w[:, None] * c1 + (1 - w[:, None]) * c2
        new_a = w * a1 + (1 - w) * a2
        alpha = alpha.index_put((idx,), new_a)
    else:
        new_c = aa_color(c1, a1, c2, a2, w, eps)
    color = color.index_put((idx,), new_c)
    stack.color = color.reshape(P, L, 3)
    stack.alpha = alpha.reshape(P, L)
    return stack


def blend_weights(alpha: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Front-to-back transmittance, per-layer weights and residual transmittance."""
    one_minus = 1 - alpha
    ones = torch.ones_like(alpha[:, :1])
    trans_incl = torch.cumprod(torch.cat([ones, one_minus], dim=1), dim=1)
    trans = trans_incl[:, :-1]
    return trans, trans * alpha, trans_incl[:, -1]


def composite_color(stack: LayerStack, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """``sum_l T_l a_l c_l + T_{L+1} * background`` per pixel, shape (P, 3)."""
    _, weights, residual = blend_weights(stack.alpha)
    bg = torch.as_tensor(background, dtype=stack.color.dtype)
    return torch.bmm(weights[:, None, :], stack.color)[:, 0] + residual[:, None] * bg


def composite_geometry(stack: LayerStack, eps: float = 1e-6):
    """Opacity-normalized depth and normal buffers.

    Returns:
        ``(depth, normal, opacity, valid)`` with shapes (P,), (P, 3), (P,), (P,).
        ``valid`` is False where accumulated opacity is below ``eps``.
    """
    _, weights, residual = blend_weights(stack.alpha)
    opacity = 1 - residual
    valid = (opacity > eps).detach().cpu().numpy()
    safe = torch.clamp(opacity, min=eps)
    depth = (weights * stack.depth).sum(1) / safe
    n_r = torch.bmm(weights[:, None, :], stack.normal)[:, 0]
    norm = torch.linalg.norm(n_r, dim=1, keepdim=True)
    normal = n_r / torch.clamp(norm, min=1e-12)
    vmask = torch.as_tensor(valid)
    depth = torch.where(vmask, depth, torch.zeros_like(depth))
    normal = torch.where(vmask[:, None], normal, torch.zeros_like(normal))
    return depth, normal, opacity, valid


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    normal: torch.Tensor  # (H, W, 3)
    opacity: torch.Tensor  # (H, W)
    weights: torch.Tensor  # (H, W, L)
    points: torch.Tensor  # (H, W, L, 3)
    valid: np.ndarray  # (H, W)
    stack: LayerStack

    @property
    def edge_mask(self) -> np.ndarray:
        return self.stack.frags.edge_mask()


def render_view(
    batch: TabletBatch,
    view: CameraView,
    layers: int = DEFAULT_LAYERS,
    background=(0.0, 0.0, 0.0),
    naive_aa: bool = False,
    antialiasing: bool = True,
    fragments: Fragments | None = None,
) -> RenderOutput:
    """Rasterize, sample, anti-alias and composite one view."""
    H, W = view.height, view.width
    verts = batch.vertices()
    stack = rasterize_peeled(verts, view, layers, fragments)
    shade(stack, batch.atlas)
    if antialiasing:
        antialias(stack, naive=naive_aa)
    color = composite_color(stack, background)
    depth, normal, opacity, valid = composite_geometry(stack)
    _, weights, _ = blend_weights(stack.alpha)
    L = stack.tri.shape[1]
    return RenderOutput(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        opacity=opacity.reshape(H, W),
        weights=weights.reshape(H, W, L),
        points=stack.point.reshape(H, W, L, 3),
        valid=valid.reshape(H, W),
        stack=stack,
    )
