import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabletrecon.merge import (
    MergeForest,
    MergeLog,
    UnitTablet,
    assign_camera,
    merge_pass,
    merge_scene,
    project_units,
    rebuild_tablets,
    weight_check,
)
from tabletrecon.scene import Scene
from tabletrecon.tablet import CameraView, Tablet


def unit(center, normal=(0, 0, -1), color=(0.5, 0.5, 0.5), owner=0, camera=0):
    n = np.asarray(normal, float)
    return UnitTablet(np.asarray(center, float), n / np.linalg.norm(n), np.asarray(color, float), owner, owner, camera)


def square(center, color=(0.5, 0.5, 0.5), normal=(0, 0, -1), up=(0, -1, 0), size=1.0, texels=4, alpha=1.0, camera=0):
    lam = texels / size
    return Tablet.from_center(center, normal, up, np.full((texels, texels, 3), color, dtype=float),
                              np.full((texels, texels), alpha), lam, lam, camera, (0, 0, 0))


def scene_of(tablets, cameras=1):
    return Scene.from_initial(tablets, np.zeros((cameras, 3)))


def random_units(seed, n=60):
    rng = np.random.default_rng(seed)
    axes = np.eye(3)
    units = []
    for i in range(n):
        k = int(rng.integers(3))
        normal = axes[k] + rng.normal(0, 0.05, 3)
        center = rng.uniform(-1, 1, 3)
        center[k] = rng.integers(0, 2) * 0.5 + rng.normal(0, 0.01)
        units.append(unit(center, normal, rng.uniform(0.3, 0.4, 3) + 0.3 * k, owner=i))
    return units


class TestForest:
    def test_union_keeps_means(self):
        units = [unit((0, 0, 0), color=(0, 0, 0)), unit((2, 0, 0), color=(1, 1, 1)), unit((4, 0, 0))]
        f = MergeForest(units)
        r = f.union(0, 1)
        r = f.union(r, 2)
        np.testing.assert_allclose(f.mean_center(r), [2, 0, 0])
        np.testing.assert_allclose(f.mean_color(r), [0.5, 0.5, 0.5])
        assert f.set_count == 1 and f.unions == 2

    def test_labels_follow_first_member(self):
        f = MergeForest([unit((i, 0, 0)) for i in range(4)])
        f.union(3, 1)
        assert f.labels().tolist() == [0, 1, 2, 1]


class TestMergePass:
    def test_coplanar_same_color(self):
        f = merge_pass([unit((0, 0, 2)), unit((0.3, 0, 2), owner=1)])
        assert f.set_count == 1

    def test_perpendicular_never_merge(self):
        f = merge_pass([unit((0, 0, 2)), unit((0, 0, 2), normal=(1, 0, 0), owner=1)])
        assert f.set_count == 2

    def test_color_gap_blocks(self):
        f = merge_pass([unit((0, 0, 2), color=(0.2,) * 3), unit((0.3, 0, 2), color=(0.5,) * 3, owner=1)])
        assert f.set_count == 2

    def test_offset_blocks(self):
        f = merge_pass([unit((0, 0, 2)), unit((0.3, 0, 2.2), owner=1)])
        assert f.set_count == 2

    def test_transitive_trio(self):
        a = unit((0, 0, 2), color=(0.0, 0.0, 0.0))
        b = unit((0.5, 0, 2), color=(0.10, 0.10, 0.10), owner=1)
        c = unit((1.0, 0, 2), color=(0.15, 0.15, 0.15), owner=2)
        # A and C alone fail the color test
        assert merge_pass([a, c]).set_count == 2
        assert merge_pass([a, b, c]).set_count == 1

    def test_owner_groups_stay_together(self):
        units = [unit((0, 0, 2), owner=0), unit((5, 0, 2), normal=(1, 0, 0), owner=0)]
        assert merge_pass(units).set_count == 1
        assert merge_pass(units, group_owners=False).set_count == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            merge_pass([])

    @pytest.mark.parametrize("seed", range(3))
    def test_deterministic(self, seed):
        a = merge_pass(random_units(seed))
        b = merge_pass(random_units(seed))
        np.testing.assert_array_equal(a.parent, b.parent)
        np.testing.assert_array_equal(a.labels(), b.labels())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_set_statistics_and_termination(self, seed):
        units = random_units(seed, 40)
        f = merge_pass(units)
        assert f.sweeps <= len(units)
        for members in f.sets():
            root = f.find(int(members[0]))
            np.testing.assert_allclose(f.mean_center(root), np.mean([units[m].center for m in members], 0), atol=1e-9)
            np.testing.assert_allclose(f.mean_color(root), np.mean([units[m].color for m in members], 0), atol=1e-9)
            n = np.sum([units[m].normal for m in members], 0)
            np.testing.assert_allclose(f.mean_normal(root), n / np.linalg.norm(n), atol=1e-9)
        # units with perpendicular normals never share a set
        normals = np.array([u.normal for u in units])
        for members in f.sets():
            cos = normals[members] @ normals[members].T
            assert cos.min() > 0.5


class TestProjectUnits:
    def test_on_plane_unchanged(self):
        u = project_units(scene_of([square((0.2, 0.1, 2))]))
        np.testing.assert_allclose(u[0].center, [0.2, 0.1, 2])

    def test_off_plane_projected(self):
        current = square((0, 0, 2))
        initial = square((0.1, 0.2, 2.3))
        scene = Scene([current], [initial], [0], np.zeros((1, 3)))
        u = project_units(scene)[0]
        np.testing.assert_allclose(u.center, [0.1, 0.2, 2.0], atol=1e-12)
        np.testing.assert_allclose(u.normal, current.normal)

    def test_random_projection_property(self):
        rng = np.random.default_rng(0)
        current = [square(rng.normal(size=3) + [0, 0, 4], normal=rng.normal(size=3), size=3.0) for _ in range(3)]
        initial = [square(rng.normal(size=3) + [0, 0, 4]) for _ in range(12)]
        aff = rng.integers(0, 3, 12)
        aff[:3] = [0, 1, 2]
        units = project_units(Scene(current, initial, aff, np.zeros((1, 3))))
        for u, a in zip(units, aff):
            assert abs((u.center - current[a].center) @ current[a].normal) < 1e-9

    def test_color_from_footprint(self):
        tex = np.zeros((4, 8, 3))
        tex[:, 4:] = 1.0  # right half white
        current = Tablet.from_center((0, 0, 2), (0, 0, -1), (0, -1, 0), tex, np.ones((4, 8)), 4.0, 4.0, 0, (0, 0, 0))
        right = current.right
        left_sq = square(current.center - 0.5 * right)
        right_sq = square(current.center + 0.5 * right)
        units = project_units(Scene([current], [left_sq, right_sq], [0, 0], np.zeros((1, 3))))
        np.testing.assert_allclose(units[0].color, 0.0)
        np.testing.assert_allclose(units[1].color, 1.0)


class TestRebuild:
    def test_abutting_squares(self):
        a = square((0, 0, 2), color=(0.5, 0.5, 0.5))
        b = square((1, 0, 2), color=(0.55, 0.5, 0.5))
        merged, forest = merge_scene(scene_of([a, b]))
        assert len(merged.tablets) == 1 and forest.set_count == 1
        t = merged.tablets[0]
        assert sorted([2 * t.half_u, 2 * t.half_r]) == pytest.approx([1.0, 2.0])
        np.testing.assert_allclose(t.center, [0.5, 0, 2], atol=1e-12)
        assert t.area >= max(a.area, b.area)
        assert merged.affiliation.tolist() == [0, 0]
        # each half keeps its source color
        for src in (a, b):
            pts = src.texel_points().reshape(-1, 3)
            ua, ub, _ = t.local_coords(pts)
            rows = ((t.half_u - ua) * t.lam_u).astype(int)
            cols = ((ub + t.half_r) * t.lam_v).astype(int)
            np.testing.assert_allclose(t.texture[rows, cols], src.texture.reshape(-1, 3))
            np.testing.assert_allclose(t.alpha[rows, cols], 1.0)

    def test_singletons_unchanged(self):
        a = square((0, 0, 2))
        b = square((3, 0, 2), normal=(1, 0, 0), up=(0, 1, 0))
        merged, _ = merge_scene(scene_of([a, b]))
        assert len(merged.tablets) == 2
        for before, after in zip([a, b], merged.tablets):
            np.testing.assert_allclose(after.corners(), before.corners(), atol=1e-12)
            np.testing.assert_array_equal(after.texture, before.texture)

    def test_camera_is_mode(self):
        tabs = [square((i * 0.5, 0, 2), camera=c) for i, c in enumerate([2, 1, 2])]
        merged, _ = merge_scene(scene_of(tabs, cameras=3))
        assert len(merged.tablets) == 1 and merged.tablets[0].source_camera == 2

    def test_rebuild_idempotent(self):
        tabs = [square((i * 0.9, 0, 2)) for i in range(3)]
        once, _ = merge_scene(scene_of(tabs))
        twice, _ = merge_scene(once)
        assert len(twice.tablets) == 1
        np.testing.assert_allclose(twice.tablets[0].corners(), once.tablets[0].corners(), atol=1e-12)

    def test_count_never_grows(self):
        rng = np.random.default_rng(3)
        tabs = [square(rng.uniform(-2, 2, 3) + [0, 0, 5], normal=rng.normal(size=3)) for _ in range(15)]
        merged, forest = merge_scene(scene_of(tabs))
        assert len(merged.tablets) == forest.set_count <= 15
        again = rebuild_tablets(forest, scene_of(tabs))
        assert len(again.tablets) == len(merged.tablets)


class TestAssignCamera:
    @pytest.mark.parametrize("cams,expected", [([0, 0, 1], 0), ([4, 4, 4], 4), ([2, 5], 2), ([5, 2], 2)])
    def test_mode(self, cams, expected):
        assert assign_camera(cams) == expected


class TestWeightCheck:
    view = CameraView(40, 40, 19.5, 19.5, 40, 40)

    def test_occluded_dropped(self):
        front = square((0, 0, 1), size=2.0, texels=8)
        hidden = square((0, 0, 2), size=0.5, texels=4)
        out, dropped = weight_check(scene_of([front, hidden]), [self.view])
        assert dropped == 1 and len(out.tablets) == 1
        assert out.affiliation.tolist() == [0]

    def test_visible_unchanged(self):
        t = square((0, 0, 2), size=1.0, texels=8)
        out, dropped = weight_check(scene_of([t]), [self.view])
        assert dropped == 0
        np.testing.assert_allclose(out.tablets[0].corners(), t.corners(), atol=1.0 / 8 + 1e-9)

    def test_half_occluded_shrinks(self):
        back = square((0, 0, 2), size=1.0, texels=8)
        # an occluder over image x < 20 hides the back tablet's points with x < 0
        occluder = Tablet.from_center((-0.5, 0, 1), (0, 0, -1), (0, -1, 0), np.zeros((8, 8, 3)), np.ones((8, 8)),
                                      8.0, 8.0, 0, (0, 0, 0))
        out, dropped = weight_check(scene_of([back, occluder]), [self.view])
        assert dropped == 0
        shrunk = out.tablets[0]
        x = shrunk.corners()[:, 0]
        assert x.min() == pytest.approx(0.0, abs=1.0 / 8 + 1e-9)
        assert x.max() == pytest.approx(0.5, abs=1e-9)
        assert shrunk.area < back.area
        y = shrunk.corners()[:, 1]
        assert (y.min(), y.max()) == pytest.approx((-0.5, 0.5), abs=1.0 / 8 + 1e-9)

    def test_bounds_never_grow(self):
        rng = np.random.default_rng(4)
        tabs = [square(rng.uniform(-0.4, 0.4, 3) + [0, 0, 2], size=0.6, alpha=0.6) for _ in range(4)]
        out, _ = weight_check(scene_of(tabs), [self.view], threshold=0.3)
        assert len(out.tablets) <= 4
        for t in out.tablets:
            assert t.area <= 0.36 + 1e-9


def test_merge_log(tmp_path):
    log = MergeLog(tmp_path / "merges.csv")
    log.record("fragment0", 8, "merge", 10, 4)
    lines = (tmp_path / "merges.csv").read_text().splitlines()
    assert lines == ["stage,epoch,event,tablets_before,tablets_after,dropped", "fragment0,8,merge,10,4,0"]
    assert log.rows == [("fragment0", 8, "merge", 10, 4, 0)]
