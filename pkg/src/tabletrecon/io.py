"""Scene directories in, plane sets out.

Scene directory layout::

    intrinsics.txt   fx fy cx cy width height
    manifest.txt     one frame per line: image, 16 pose floats (world-from-camera,
                     row-major), optional depth path, optional normal path ('-' = absent)

Paths in the manifest are relative to the scene directory. Depth maps are
PFM (meters) or 16-bit PNG (millimeters, 0 = invalid). Normal maps are
camera-frame (x right, y down, z forward), stored as 3-channel PFM or 8-bit
PNG mapped [0, 255] -> [-1, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneLoadError
from .raster import TextureAtlas
from .scene import PlaneSet
from .tablet import CameraView, Tablet

MANIFEST = "manifest.txt"
INTRINSICS = "intrinsics.txt"


def _num(x) -> str:
    """Shortest text that parses back to the same double."""
    return repr(float(x))


# ----------------------------------------------------------------------------
# raster formats


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM image (rows top to bottom in the returned array)."""
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise SceneLoadError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.fromfile(fh, dtype=dtype, count=width * height * channels)
    if data.size != width * height * channels:
        raise SceneLoadError(f"{path}: truncated PFM data")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Write a 1- or 3-channel float image as little-endian PFM."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise ValueError("PFM color images need 3 channels")
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Save a float RGB(A) image in [0, 1] as 8-bit PNG (round to nearest)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_depth(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        depth = read_pfm(path)
    else:
        with Image.open(path) as im:
            raw = np.asarray(im)
        if raw.dtype not in (np.uint16, np.int32) and im.mode not in ("I;16", "I"):
            raise SceneLoadError(f"{path}: depth PNG must be 16-bit")
        depth = raw.astype(np.float64) / 1000.0
    if depth.ndim != 2:
        raise SceneLoadError(f"{path}: depth map must have one channel")
    return np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)


def write_depth_png(path: str | Path, depth: np.ndarray) -> None:
    mm = np.rint(np.nan_to_num(np.asarray(depth), nan=0.0) * 1000.0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_normal(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        n = read_pfm(path)
    else:
        with Image.open(path) as im:
            n = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0 * 2.0 - 1.0
    if n.ndim != 3 or n.shape[2] != 3:
        raise SceneLoadError(f"{path}: normal map must have three channels")
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 1e-6, n / norm, 0.0)


# ----------------------------------------------------------------------------
# scenes


@dataclass
class FrameRecord:
    image: Path
    pose: np.ndarray
    depth: Path | None = None
    normal: Path | None = None


@dataclass
class SceneManifest:
    directory: Path
    intrinsics: tuple[float, float, float, float, int, int]
    frames: list[FrameRecord]
    units: str = "meters"


def _check_pose(pose: np.ndarray, where: str) -> None:
    rot = pose[:3, :3]
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=1e-9):
        raise SceneLoadError(f"{where}: last pose row must be 0 0 0 1")
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-3:
        raise SceneLoadError(f"{where}: pose rotation is not orthonormal")
    if np.linalg.det(rot) < 0:
        raise SceneLoadError(f"{where}: pose rotation has determinant -1 (reflection)")


def read_manifest(directory: str | Path) -> SceneManifest:
    root = Path(directory)
    intr_path, man_path = root / INTRINSICS, root / MANIFEST
    for p in (intr_path, man_path):
        if not p.is_file():
            raise SceneLoadError(f"missing {p}")
    tok = intr_path.read_text().split()
    if len(tok) != 6:
        raise SceneLoadError(f"{intr_path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(t) for t in tok[:4])
        width, height = int(tok[4]), int(tok[5])
    except ValueError as err:
        raise SceneLoadError(f"{intr_path}: {err}") from None
    frames = []
    for lineno, line in enumerate(man_path.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        where = f"{man_path}:{lineno}"
        if not 17 <= len(parts) <= 19:
            raise SceneLoadError(f"{where}: expected image path, 16 pose values and up to two map paths")
        try:
            pose = np.array([float(v) for v in parts[1:17]]).reshape(4, 4)
        except ValueError:
            raise SceneLoadError(f"{where}: malformed pose") from None
        _check_pose(pose, where)
        extra = [None if p == "-" else root / p for p in parts[17:]] + [None, None]
        frames.append(FrameRecord(root / parts[0], pose, extra[0], extra[1]))
    if not frames:
        raise SceneLoadError(f"{man_path}: no frames")
    return SceneManifest(root, (fx, fy, cx, cy, width, height), frames)


def load_scene(directory: str | Path) -> tuple[list[CameraView], SceneManifest]:
    """Validated views (image, optional depth and normals) of a scene directory."""
    manifest = read_manifest(directory)
    fx, fy, cx, cy, width, height = manifest.intrinsics
    views = []
    for rec in manifest.frames:
        for p in (rec.image, rec.depth, rec.normal):
            if p is not None and not p.is_file():
                raise SceneLoadError(f"missing file {p}")
        try:
            image = read_image(rec.image)
            depth = read_depth(rec.depth) if rec.depth else None
            normal = read_normal(rec.normal) if rec.normal else None
        except (OSError, ValueError) as err:
            raise SceneLoadError(f"cannot read frame {rec.image}: {err}") from None
        for name, arr in (("image", image), ("depth", depth), ("normal", normal)):
            if arr is not None and arr.shape[:2] != (height, width):
                raise SceneLoadError(f"{rec.image}: {name} is {arr.shape[1]}x{arr.shape[0]}, expected {width}x{height}")
        views.append(CameraView(fx, fy, cx, cy, width, height, rec.pose[:3, :3], rec.pose[:3, 3], image, depth, normal))
    return views, manifest


def write_scene(directory: str | Path, views: list[CameraView]) -> None:
    """Write views as a scene directory (PNG images, PFM depth and normals)."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    v0 = views[0]
    (root / INTRINSICS).write_text(" ".join(_num(x) for x in (v0.fx, v0.fy, v0.cx, v0.cy)) + f" {v0.width} {v0.height}\n")
    lines = []
    for i, v in enumerate(views):
        img = f"frames/{i:04d}_color.png"
        write_image(root / img, v.image)
        depth = normal = "-"
        if v.depth is not None:
            depth = f"frames/{i:04d}_depth.pfm"
            write_pfm(root / depth, np.nan_to_num(v.depth, nan=0.0))
        if v.normal is not None:
            normal = f"frames/{i:04d}_normal.pfm"
            write_pfm(root / normal, v.normal)
        pose = " ".join(_num(x) for x in v.pose.reshape(-1))
        lines.append(f"{img} {pose} {depth} {normal}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def write_cameras(path: str | Path, views: list[CameraView]) -> None:
    """Intrinsics and poses (no images) as JSON with full float precision."""
    cams = [
        {
            "fx": v.fx,
            "fy": v.fy,
            "cx": v.cx,
            "cy": v.cy,
            "width": v.width,
            "height": v.height,
            "pose": v.pose.tolist(),
        }
        for v in views
    ]
    Path(path).write_text(json.dumps({"cameras": cams}, indent=1))


def read_cameras(path: str | Path) -> list[CameraView]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise SceneLoadError(f"cannot read cameras from {path}: {err}") from None
    out = []
    for c in data["cameras"]:
        pose = np.array(c["pose"], dtype=np.float64)
        out.append(CameraView(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"], pose[:3, :3], pose[:3, 3]))
    return out


# ----------------------------------------------------------------------------
# point clouds


def write_ply(path: str | Path, points: np.ndarray, labels: np.ndarray) -> None:
    """ASCII PLY with ``x y z`` floats and an integer ``label`` per vertex."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nproperty int label\nend_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        for p, l in zip(pts, lab):
            fh.write(f"{_num(p[0])} {_num(p[1])} {_num(p[2])} {int(l)}\n")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise SceneLoadError(f"{path}: not a PLY file")
        count = None
        for line in fh:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise SceneLoadError(f"{path}: only ASCII PLY is supported")
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line == "end_header":
                break
        if count is None:
            raise SceneLoadError(f"{path}: no vertex element")
        data = np.loadtxt(fh, max_rows=count, ndmin=2) if count else np.zeros((0, 4))
    return data[:, :3].astype(np.float64), data[:, 3].astype(np.int64)


# ----------------------------------------------------------------------------
# plane sets


def _plane_record(t: Tablet, pid: int, tile) -> dict:
    return {
        "id": int(pid),
        "center": t.center.tolist(),
        "normal": t.normal.tolist(),
        "up": t.up.tolist(),
        "right": t.right.tolist(),
        "half_extents": [t.half_u, t.half_r],
        "texels_per_meter": [t.lam_u, t.lam_v],
        "texture_size": [int(t.alpha.shape[0]), int(t.alpha.shape[1])],
        "atlas_tile": [int(x) for x in tile],
        "source_camera": int(t.source_camera),
        "ray_dir": t.ray_dir.tolist(),
        "camera_distance": t.cam_distance,
    }


def export_planes(planes: PlaneSet, directory: str | Path) -> dict[str, Path]:
    """Write mesh, material, RGBA atlas, plane JSON, labeled points and a lossless archive."""
    from .metrics import sample_planes

    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {root}: {err}") from None
    atlas = TextureAtlas.pack([t.texture for t in planes.tablets], [t.alpha for t in planes.tablets])
    color = atlas.color.numpy()
    alpha = atlas.alpha.numpy()
    ah, aw = alpha.shape
    write_image(root / "atlas.png", np.concatenate([color, alpha[..., None]], axis=-1))

    mtl = []
    obj = ["# planar tablets: 4 vertices and 2 triangles per plane", "mtllib planes.mtl"]
    for i, (t, pid) in enumerate(zip(planes.tablets, planes.instance_ids)):
        r0, c0, h, w = atlas.tiles[i]
        mtl += [f"newmtl plane_{pid}", "Ka 1 1 1", "Kd 1 1 1", "d 1", "map_Kd atlas.png", "map_d atlas.png", ""]
        obj.append(f"o plane_{pid}")
        for v in t.corners():
            obj.append("v " + " ".join(_num(x) for x in v))
        for col, row in ((c0, r0 + h), (c0 + w, r0 + h), (c0 + w, r0), (c0, r0)):
            obj.append(f"vt {_num(col / aw)} {_num(1.0 - row / ah)}")
        obj.append("vn " + " ".join(_num(x) for x in t.normal))
        obj.append(f"usemtl plane_{pid}")
        b = 4 * i
        # corners run -r-u, +r-u, +r+u, -r+u; this order makes the face normals agree with n
        for tri in ((0, 2, 1), (0, 3, 2)):
            obj.append("f " + " ".join(f"{b + k + 1}/{b + k + 1}/{i + 1}" for k in tri))
    (root / "planes.obj").write_text("\n".join(obj) + "\n")
    (root / "planes.mtl").write_text("\n".join(mtl))

    records = [_plane_record(t, pid, atlas.tiles[i]) for i, (t, pid) in enumerate(zip(planes.tablets, planes.instance_ids))]
    (root / "planes.json").write_text(json.dumps({"atlas": [int(ah), int(aw)], "planes": records}, indent=1))

    pts, labels = sample_planes(planes)
    write_ply(root / "points.ply", pts, labels)

    arrays = {"instance_ids": np.asarray(planes.instance_ids, dtype=np.int64)}
    for i, t in enumerate(planes.tablets):
        for name in ("center", "normal", "up", "texture", "alpha", "ray_dir"):
            arrays[f"{i}_{name}"] = getattr(t, name)
        arrays[f"{i}_scalars"] = np.array([t.lam_u, t.lam_v, t.source_camera, t.cam_distance], dtype=np.float64)
    np.savez_compressed(root / "tablets.npz", **arrays)
    return {k: root / k for k in ("planes.obj", "planes.mtl", "atlas.png", "planes.json", "points.ply", "tablets.npz")}


def load_planes(directory: str | Path, lossless: bool = True) -> PlaneSet:
    """Read a plane set written by ``export_planes``.

    ``lossless`` reads the float64 archive; otherwise geometry comes from the
    JSON sidecar and texture/alpha from the 8-bit atlas.
    """
    root = Path(directory)
    try:
        if lossless:
            with np.load(root / "tablets.npz") as z:
                ids = [int(x) for x in z["instance_ids"]]
                tablets = []
                for i in range(len(ids)):
                    lam_u, lam_v, cam, dist = z[f"{i}_scalars"]
                    tablets.append(
                        Tablet(
                            z[f"{i}_center"],
                            z[f"{i}_normal"],
                            z[f"{i}_up"],
                            z[f"{i}_texture"],
                            z[f"{i}_alpha"],
                            float(lam_u),
                            float(lam_v),
                            int(cam),
                            z[f"{i}_ray_dir"],
                            float(dist),
                        )
                    )
            return PlaneSet(tablets, ids)
        meta = json.loads((root / "planes.json").read_text())
        with Image.open(root / "atlas.png") as im:
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    except (OSError, KeyError, ValueError) as err:
        raise SceneLoadError(f"cannot read plane set from {root}: {err}") from None
    tablets, ids = [], []
    for rec in meta["planes"]:
        r0, c0, h, w = rec["atlas_tile"]
        tile = rgba[r0 : r0 + h, c0 : c0 + w]
        tablets.append(
            Tablet(
                np.array(rec["center"]),
                np.array(rec["normal"]),
                np.array(rec["up"]),
                tile[..., :3].copy(),
                tile[..., 3].copy(),
                rec["texels_per_meter"][0],
                rec["texels_per_meter"][1],
                rec["source_camera"],
                np.array(rec["ray_dir"]),
                rec["camera_distance"],
            )
        )
        ids.append(rec["id"])
    return PlaneSet(tablets, ids)
