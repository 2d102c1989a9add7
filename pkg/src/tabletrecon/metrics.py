"""Geometry and plane-segmentation scores against ground-truth point clouds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene import PlaneSet


@dataclass
class GeometryScores:
    comp: float
    acc: float
    recall: float
    prec: float
    fscore: float


@dataclass
class SegmentationScores:
    voi: float
    ri: float
    sc: float


def _cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud has non-finite coordinates")
    return pts


def geometry_metrics(pred, gt, tau: float = 0.05) -> GeometryScores:
    """Accuracy/completeness distances and precision/recall/F-score at ``tau``.

    ``acc`` is the mean distance from predicted points to their nearest
    ground-truth point, ``comp`` the reverse.
    """
    pred, gt = _cloud(pred), _cloud(gt)
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    prec = float(np.mean(d_pred < tau))
    recall = float(np.mean(d_gt < tau))
    f = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return GeometryScores(float(d_gt.mean()), float(d_pred.mean()), recall, prec, f)


def sample_planes(planes: PlaneSet, alpha_min: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Texel-center points of every plane where alpha exceeds ``alpha_min``, with instance labels."""
    pts, labels = [], []
    for t, pid in zip(planes.tablets, planes.instance_ids):
        keep = t.alpha > alpha_min
        pts.append(t.texel_points()[keep])
        labels.append(np.full(int(keep.sum()), pid, dtype=np.int64))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(labels)


def transfer_labels(planes: PlaneSet, vertices, alpha_min: float = 0.5) -> np.ndarray:
    """Instance id of the nearest sampled plane point for each vertex, -1 when nothing was sampled."""
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    pts, labels = sample_planes(planes, alpha_min)
    if len(pts) == 0:
        return np.full(len(verts), -1, dtype=np.int64)
    _, idx = cKDTree(pts).query(verts)
    return labels[idx]


def _contingency(pred, gt) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in length: {pred.size} vs {gt.size}")
    if pred.size == 0:
        raise ValueError("label arrays are empty")
    _, p = np.unique(pred, return_inverse=True)
    _, g = np.unique(gt, return_inverse=True)
    table = np.zeros((p.max() + 1, g.max() + 1), dtype=np.float64)
    np.add.at(table, (p, g), 1.0)
    return table


def _entropy(counts: np.ndarray, n: float) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def segmentation_scores(pred, gt) -> SegmentationScores:
    """Variation of information (nats), Rand index and segmentation covering of ``pred`` w.r.t. ``gt``."""
    table = _contingency(pred, gt)
    n = table.sum()
    rows, cols = table.sum(1), table.sum(0)
    h_pred, h_gt = _entropy(rows, n), _entropy(cols, n)
    nz = table > 0
    pij = table[nz] / n
    mi = float((pij * np.log(pij / np.outer(rows / n, cols / n)[nz])).sum())
    voi = max(0.0, h_pred + h_gt - 2 * mi)

    def pairs(x):
        return (x * (x - 1) / 2).sum()

    total = n * (n - 1) / 2
    ri = 1.0 if total == 0 else float((total + 2 * pairs(table) - pairs(rows) - pairs(cols)) / total)

    union = rows[:, None] + cols[None, :] - table
    iou = table / union
    sc = float((cols / n * iou.max(axis=0)).sum())
    return SegmentationScores(voi, ri, sc)


def evaluate(planes: PlaneSet, gt_points, gt_labels, tau: float = 0.05) -> dict:
    """Geometry and segmentation scores of a plane set as one JSON-ready dict."""
    pred_pts, _ = sample_planes(planes)
    geo = geometry_metrics(pred_pts, gt_points, tau)
    seg = segmentation_scores(transfer_labels(planes, gt_points), gt_labels)
    return {
        "tau": tau,
        "planes": len(planes),
        "geometry": asdict(geo),
        "segmentation": asdict(seg),
    }


def write_metrics(metrics: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
