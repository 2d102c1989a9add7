"""End-to-end acceptance checks, one marked group per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line for every criterion.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from scipy.optimize import linear_sum_assignment

from tabletrecon.losses import LossWeights, distortion_loss
from tabletrecon.merge import MergeLog, UnitTablet, merge_pass, merge_scene, weight_check
from tabletrecon.metrics import evaluate, geometry_metrics, segmentation_scores
from tabletrecon.optim import ParamSet, adam_step, backward_render, finite_difference_check
from tabletrecon.pipeline import edit_plane_texture, instance_mask, reconstruct, render_planes
from tabletrecon.raster import TabletBatch, blend_weights, composite_color, render_view
from tabletrecon.scene import Scene
from tabletrecon.synth import box_room
from tabletrecon.tablet import CameraView, Tablet, update_up_vector

from scenes import fd_selector, random_scene

criterion = pytest.mark.criterion


def fronto(center, color, alpha, size=1.0, texels=4, camera=(0, 0, 0)):
    lam = texels / size
    return Tablet.from_center(center, (0, 0, -1), (0, -1, 0), np.full((texels, texels, 3), color, dtype=float),
                              np.full((texels, texels), alpha), lam, lam, 0, camera)


def psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((np.asarray(a) - np.asarray(b)) ** 2))


@pytest.fixture(scope="module")
def box():
    return box_room()


@pytest.fixture(scope="module")
def box_run(box):
    log = MergeLog()
    start = time.perf_counter()
    planes = reconstruct(box.views, merge_log=log)
    return SimpleNamespace(planes=planes, log=log, seconds=time.perf_counter() - start)


# 1 -------------------------------------------------------------------------


@criterion(1, "AA counterexample: transparent front plane")
def test_aa_counterexample():
    start = time.perf_counter()
    view = CameraView(24.0, 24.0, 11.5, 11.5, 24, 24)
    back = fronto((0, 0, 2.0), (0.9, 0.1, 0.2), 1.0, size=6.0)
    front = fronto((0.13, 0.07, 1.0), (0.05, 0.05, 0.05), 0.0, size=0.8)
    batch = TabletBatch.from_tablets([back, front])
    good = render_view(batch, view)
    edge = good.edge_mask
    assert edge.sum() > 10
    err = np.abs(good.color.numpy()[edge] - [0.9, 0.1, 0.2]).max()
    assert err <= 1e-6
    naive = render_view(batch, view, naive_aa=True)
    assert np.abs(naive.color.numpy()[edge] - [0.9, 0.1, 0.2]).max() > 1e-2
    assert time.perf_counter() - start < 5


# 2 -------------------------------------------------------------------------


@criterion(2, "compositing matches a sequential over-operator")
def test_compositing_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    P, L = 1000, 5
    counts = rng.integers(0, L + 1, P)
    alpha = rng.uniform(0, 1, (P, L)) * (np.arange(L) < counts[:, None])
    alpha[rng.uniform(size=(P, L)) < 0.1] = 1.0
    alpha *= np.arange(L) < counts[:, None]
    color = rng.uniform(0, 1, (P, L, 3))
    bg = np.array([0.2, 0.4, 0.6])
    stack = SimpleNamespace(alpha=torch.tensor(alpha), color=torch.tensor(color))
    got = composite_color(stack, bg).numpy()

    want = np.empty((P, 3))
    for p in range(P):
        acc, trans = np.zeros(3), 1.0
        for k in range(counts[p]):
            acc += trans * alpha[p, k] * color[p, k]
            trans *= 1 - alpha[p, k]
        want[p] = acc + trans * bg
    assert np.abs(got - want).max() <= 1e-6

    _, weights, residual = blend_weights(torch.tensor(alpha))
    assert (weights >= 0).all()
    assert np.abs(weights.sum(1).numpy() + residual.numpy() - 1).max() <= 1e-6
    assert time.perf_counter() - start < 5


# 3 -------------------------------------------------------------------------


@criterion(3, "analytic gradients match central differences")
def test_gradients_match_finite_differences():
    start = time.perf_counter()
    kinds = set()
    worst_all = 0.0
    for seed in range(10):
        batch, view = random_scene(100 + seed)
        assert len(batch) <= 5 and view.width == view.height == 32
        worst, records = finite_difference_check(batch, view, fd_selector(batch, np.random.default_rng(seed)))
        kinds |= {r[0] for r in records}
        worst_all = max(worst_all, worst)
    assert kinds == {"texture", "alpha", "normal", "distance"}
    assert worst_all < 1e-3
    assert time.perf_counter() - start < 120


# 4 -------------------------------------------------------------------------


def match_planes(planes, truth, scale):
    """Ground-truth plane index -> predicted tablet, one to one.

    Opposite walls share a normal up to sign, so the cost mixes normal
    disagreement with the signed offset gap.
    """
    cost = np.empty((len(truth), len(planes.tablets)))
    for g, patch in enumerate(truth):
        for j, t in enumerate(planes.tablets):
            cos = float(t.normal @ patch.normal)
            offset = np.sign(cos) * float(t.normal @ t.center)
            cost[g, j] = 1.0 - abs(cos) + abs(offset - patch.offset) / scale
    rows, cols = linear_sum_assignment(cost)
    return dict(zip(rows.tolist(), cols.tolist()))


@criterion(4, "synthetic box room end to end")
def test_box_room_planes(box, box_run):
    assert len(box.views) == 20 and (box.views[0].width, box.views[0].height) == (320, 240)
    assert len(box_run.planes) == 5
    pairs = match_planes(box_run.planes, box.planes, box.scale)
    assert sorted(pairs.values()) == list(range(5))
    for g, patch in enumerate(box.planes):
        t = box_run.planes.tablets[pairs[g]]
        cos = abs(float(t.normal @ patch.normal))
        assert np.degrees(np.arccos(min(cos, 1.0))) < 2.0
        sign = np.sign(t.normal @ patch.normal)
        assert abs(sign * float(t.normal @ t.center) - patch.offset) < 0.01 * box.scale


@criterion(4, "synthetic box room end to end")
def test_box_room_photometric(box, box_run):
    scores = [psnr(render_planes(box_run.planes, v).color.numpy().reshape(v.image.shape), v.image) for v in box.views]
    assert min(scores) > 30


@criterion(4, "synthetic box room end to end")
def test_box_room_metrics(box, box_run):
    out = evaluate(box_run.planes, box.points, box.point_labels, tau=0.05 * box.scale)
    assert out["geometry"]["fscore"] > 0.95
    seg = out["segmentation"]
    assert seg["voi"] < 0.2 and seg["ri"] > 0.98 and seg["sc"] > 0.95


@criterion(4, "synthetic box room end to end")
def test_box_room_runtime(box_run):
    assert box_run.seconds < 600


# 5 -------------------------------------------------------------------------


def layered_fixture(gap=0.1, size=32):
    view = CameraView(size, size, (size - 1) / 2, (size - 1) / 2, size, size)
    front = fronto((0, 0, 2.0), (0.5, 0.5, 0.5), 0.5, size=3.0, texels=8)
    back = fronto((0, 0, 2.0 + gap), (0.5, 0.5, 0.5), 0.5, size=3.0, texels=8)
    view.image = np.full((size, size, 3), 0.5)
    view.depth = np.full((size, size), 2.0)
    view.normal = np.tile([0.0, 0.0, -1.0], (size, size, 1))
    return TabletBatch.from_tablets([front, back]), view


@criterion(5, "distortion loss behaviour")
def test_distortion_zero_on_single_surface():
    view = CameraView(32, 32, 15.5, 15.5, 32, 32)
    for alpha in (0.3, 1.0):
        batch = TabletBatch.from_tablets([fronto((0, 0, 2.0), (0.4, 0.5, 0.6), alpha, size=3.0)])
        assert distortion_loss(render_view(batch, view).stack).item() == 0.0


@criterion(5, "distortion loss behaviour")
def test_distortion_positive_on_two_layers():
    batch, view = layered_fixture()
    assert distortion_loss(render_view(batch, view).stack).item() > 0.0


@criterion(5, "distortion loss behaviour")
def test_distortion_halves_under_optimization():
    batch, view = layered_fixture()
    weights = LossWeights()
    assert weights.dist == 20.0
    before = distortion_loss(render_view(batch, view).stack).item()
    params = ParamSet(batch)
    for _ in range(200):
        _, grads, _ = backward_render(batch, [view], weights)
        adam_step(params, grads)
    after = distortion_loss(render_view(batch, view).stack).item()
    assert after <= 0.5 * before


# 6 -------------------------------------------------------------------------


def unit(center, normal=(0, 0, -1), color=(0.5, 0.5, 0.5), owner=0):
    n = np.asarray(normal, float)
    return UnitTablet(np.asarray(center, float), n / np.linalg.norm(n), np.asarray(color, float), owner, owner, 0)


def random_units(rng, n=80):
    axes = np.eye(3)
    out = []
    for i in range(n):
        k = int(rng.integers(3))
        center = rng.uniform(-1, 1, 3)
        center[k] = rng.integers(0, 2) * 0.5 + rng.normal(0, 0.01)
        out.append(unit(center, axes[k] + rng.normal(0, 0.05, 3), rng.uniform(0.3, 0.4, 3) + 0.2 * k, owner=i))
    return out


@criterion(6, "merge properties")
def test_merge_deterministic_and_terminates():
    for seed in range(5):
        units = random_units(np.random.default_rng(seed))
        a, b = merge_pass(units), merge_pass(units)
        np.testing.assert_array_equal(a.parent, b.parent)
        assert a.sweeps <= len(units)
    tablets = [fronto((x, 0, 2.0), (0.5, 0.5, 0.5), 1.0, size=0.5) for x in np.arange(-1, 1.01, 0.5)]
    s1, f1 = merge_scene(Scene.from_initial(tablets, np.zeros((1, 3))))
    s2, f2 = merge_scene(Scene.from_initial(tablets, np.zeros((1, 3))))
    np.testing.assert_array_equal(f1.parent, f2.parent)
    assert len(s1.tablets) == len(s2.tablets) == 1


@criterion(6, "merge properties")
def test_merge_transitive_trio():
    a = unit((0, 0, 2), color=(0.0, 0.0, 0.0))
    b = unit((0.5, 0, 2), color=(0.10, 0.10, 0.10), owner=1)
    c = unit((1.0, 0, 2), color=(0.15, 0.15, 0.15), owner=2)
    assert merge_pass([a, c]).set_count == 2
    assert merge_pass([a, b, c]).set_count == 1


@criterion(6, "merge properties")
def test_merge_perpendicular_never():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        m = np.cross(n, rng.normal(size=3))
        m /= np.linalg.norm(m)
        c = rng.uniform(-1, 1, 3)
        assert merge_pass([unit(c, n), unit(c + 1e-3, m, owner=1)]).set_count == 2


@criterion(6, "merge properties")
def test_tablet_count_never_grows(box_run):
    events = [r for r in box_run.log.rows if r[2] != "init"]
    assert events
    assert all(after <= before for _, _, _, before, after, _ in events)
    view = CameraView(40, 40, 19.5, 19.5, 40, 40)
    tablets = [fronto((0, 0, 2.0), (0.5, 0.5, 0.5), 1.0, size=2.0), fronto((0, 0, 3.0), (0.2, 0.2, 0.2), 1.0, size=1.0)]
    scene = Scene.from_initial(tablets, np.zeros((1, 3)))
    counts = [len(scene.tablets)]
    for _ in range(3):
        scene, _ = weight_check(scene, [view])
        counts.append(len(scene.tablets))
        scene, _ = merge_scene(scene)
        counts.append(len(scene.tablets))
    assert all(b <= a for a, b in zip(counts, counts[1:]))


# 7 -------------------------------------------------------------------------


@criterion(7, "metric golden values and symmetry")
def test_metric_golden_values():
    s = segmentation_scores([4, 4, 2, 9], [4, 4, 2, 9])
    assert (s.voi, s.ri, s.sc) == (0.0, 1.0, 1.0)
    assert segmentation_scores([0, 0, 1, 1], [0, 1, 0, 1]).ri == pytest.approx(1 / 3, abs=1e-15)
    assert segmentation_scores([0, 0, 1, 1], [0, 0, 0, 0]).sc == pytest.approx(0.5, abs=1e-15)


@criterion(7, "metric golden values and symmetry")
def test_metric_pair_swap_symmetry():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = rng.uniform(size=(int(rng.integers(5, 60)), 3))
        b = rng.uniform(size=(int(rng.integers(5, 60)), 3))
        tau = rng.uniform(0.02, 0.3)
        ab, ba = geometry_metrics(a, b, tau), geometry_metrics(b, a, tau)
        assert ab.acc == ba.comp and ab.comp == ba.acc
        assert ab.prec == ba.recall and ab.recall == ba.prec
        assert ab.fscore == pytest.approx(ba.fscore, abs=1e-15)


# 8 -------------------------------------------------------------------------


def random_unit(rng, n=None):
    v = rng.normal(size=(n or 1, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v if n else v[0]


def tangent(rng, n):
    u = np.cross(n, rng.normal(size=3))
    return u / np.linalg.norm(u)


@criterion(8, "up-vector update invariants")
def test_up_vector_hand_cases():
    np.testing.assert_allclose(update_up_vector((0, 0, 1), (1, 0, 0), (0, 1, 0)), (0, 1, 0), atol=1e-12)
    np.testing.assert_allclose(update_up_vector((0, 0, 1), (0, 1, 0), (0, 1, 0)), (0, 0, -1), atol=1e-12)


@criterion(8, "up-vector update invariants")
def test_up_vector_orthogonality_over_chains():
    rng = np.random.default_rng(0)
    n = random_unit(rng)
    u = tangent(rng, n)
    worst = 0.0
    for _ in range(10_000):
        step = n + rng.normal(0, 0.3, 3)
        n_new = step / np.linalg.norm(step)
        if n @ n_new < -0.999:
            continue
        u = update_up_vector(n, n_new, u)
        n = n_new
        worst = max(worst, abs(n @ u), abs(np.linalg.norm(u) - 1))
    assert worst < 1e-5


@criterion(8, "up-vector update invariants")
def test_up_vector_composition():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10_000):
        axis = random_unit(rng)
        n0 = tangent(rng, axis)
        a, b = rng.uniform(-0.95 * np.pi, 0.95 * np.pi, 2)
        if abs(a + b) > 0.95 * np.pi:
            b = np.sign(b) * (0.95 * np.pi - abs(a)) * rng.uniform()
        rot = lambda v, t: v * np.cos(t) + np.cross(axis, v) * np.sin(t) + axis * (axis @ v) * (1 - np.cos(t))
        n1, n2 = rot(n0, a), rot(n0, a + b)
        u0 = tangent(rng, n0)
        two_step = update_up_vector(n1, n2, update_up_vector(n0, n1, u0))
        direct = update_up_vector(n0, n2, u0)
        worst = max(worst, np.abs(two_step - direct).max())
    assert worst < 1e-5


# 9 -------------------------------------------------------------------------


def influence(out, idx):
    """Pixels whose color reads the tablet ``idx``: a weighted layer or an anti-aliasing partner."""
    tri = out.stack.tri
    w = out.weights.numpy().reshape(tri.shape)
    own = (tri >= 0) & (tri // 2 == idx)
    partner = out.stack.partner
    flat_tri = tri.reshape(-1)
    via_partner = (partner >= 0) & (flat_tri[np.maximum(partner, 0)] // 2 == idx) & (tri >= 0)
    return ((own | via_partner) & (w > 0)).any(axis=1)


@criterion(9, "edit shows on exactly the target plane")
def test_edit_consistency(box, box_run):
    planes = box_run.planes
    magenta = np.array([255, 0, 255])
    for target in planes.instance_ids:
        idx = planes.index_of(target)
        edited = edit_plane_texture(planes, target, texture=magenta / 255.0)
        shown = 0
        for view in box.views:
            before = render_planes(planes, view)
            after = render_planes(edited, view)
            b = np.rint(before.color.numpy().reshape(-1, 3) * 255).astype(np.uint8)
            a = np.rint(after.color.numpy().reshape(-1, 3) * 255).astype(np.uint8)
            reads = influence(before, idx)
            assert np.array_equal(a[~reads], b[~reads])
            mask = instance_mask(planes, view).reshape(-1) == target
            solid = mask & (before.weights.numpy().reshape(len(mask), -1).max(1) > 0.999) & ~before.edge_mask.reshape(-1)
            assert np.abs(a[solid].astype(int) - magenta).max(initial=0) <= 1
            if mask.any():
                assert (a[mask] != b[mask]).any(axis=1).mean() > 0.99
            shown += solid.sum()
        assert shown > 0
