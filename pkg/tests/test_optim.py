import numpy as np
import pytest
import torch

from tabletrecon.errors import NonFiniteGradient
from tabletrecon.losses import LossWeights
from tabletrecon.optim import (
    LearningRates,
    ParamSet,
    adam_step,
    backward_render,
    finite_difference_check,
    leaves,
)
from tabletrecon.raster import TabletBatch
from tabletrecon.tablet import CameraView, Tablet

from scenes import fd_selector, random_scene

PHOTO_ONLY = LossWeights(1.0, 0.0, 0.0, 0.0, 0.0)
NOTHING = LossWeights(0.0, 0.0, 0.0, 0.0, 0.0)


def wall_scene(color=0.6, target=0.4, alpha=1.0, size=16):
    """One fronto-parallel tablet filling the whole image."""
    view = CameraView(size, size, (size - 1) / 2, (size - 1) / 2, size, size)
    view.image = np.full((size, size, 3), target)
    view.depth = np.full((size, size), 2.0)
    view.normal = np.tile([0.0, 0.0, -1.0], (size, size, 1))
    t = Tablet.from_center((0, 0, 2), (0, 0, -1), (0, -1, 0), np.full((8, 8, 3), color), np.full((8, 8), alpha),
                           2.0, 2.0, 0, (0, 0, 0))
    return TabletBatch.from_tablets([t]), view


def snapshot(batch):
    return {k: v.detach().clone() for k, v in leaves(batch).items()} | {"up": batch.up_ref.clone()}


class TestBackward:
    def test_zero_weights_zero_gradients(self):
        batch, view = random_scene(0)
        loss, grads, _ = backward_render(batch, [view], NOTHING)
        assert loss == 0.0
        assert all((g == 0).all() for g in grads.values())

    def test_texture_gradient_sum(self):
        batch, view = wall_scene(0.6, 0.4)
        _, grads, comps = backward_render(batch, [view], PHOTO_ONLY)
        assert comps["pho"] == pytest.approx(3 * 0.2**2)
        # texel weights of each pixel sum to one, so the texture gradients add up to d(mean SE)/dc
        np.testing.assert_allclose(grads["texture"].sum((0, 1)).numpy(), 2 * 0.2, rtol=1e-10)

    def test_non_finite_gradient_names_tablet(self):
        batch, view = wall_scene()
        hidden = Tablet.from_center((0, 0, -3), (0, 0, 1), (0, 1, 0), np.full((4, 4, 3), 0.5), np.ones((4, 4)),
                                    2.0, 2.0, 0, (0, 0, 0))
        batch = TabletBatch.from_tablets([hidden, batch.to_tablets()[0]])
        view.image = np.full_like(view.image, np.nan)
        with pytest.raises(NonFiniteGradient) as err:
            backward_render(batch, [view], PHOTO_ONLY)
        assert err.value.tablet_id == 1


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", [0, 3, 7])
    def test_random_scene(self, seed):
        batch, view = random_scene(seed)
        worst, records = finite_difference_check(batch, view, fd_selector(batch, np.random.default_rng(seed)))
        assert records
        assert worst < 1e-3

    def test_constant_loss(self):
        batch, view = random_scene(1)
        worst, records = finite_difference_check(batch, view, fd_selector(batch, np.random.default_rng(1)), NOTHING)
        assert worst == 0.0
        assert all(r[2] == 0.0 and r[3] == 0.0 for r in records)

    def test_opaque_distance(self):
        batch, view = wall_scene()
        view.depth = np.full_like(view.depth, 2.3)
        worst, records = finite_difference_check(batch, view, [("distance", (0,))])
        assert len(records) == 1
        assert records[0][2] != 0.0
        assert worst < 1e-3

    def test_parameters_restored(self):
        batch, view = random_scene(2)
        before = snapshot(batch)
        finite_difference_check(batch, view, fd_selector(batch, np.random.default_rng(2), 2))
        after = snapshot(batch)
        for k in before:
            assert torch.equal(before[k], after[k])


class TestAdam:
    def test_zero_gradients_leave_parameters(self):
        batch, _ = random_scene(4)
        before = snapshot(batch)
        params = ParamSet(batch)
        zeros = {k: torch.zeros_like(v) for k, v in leaves(batch).items()}
        for _ in range(3):
            adam_step(params, zeros)
        after = snapshot(batch)
        for k in before:
            assert torch.equal(before[k], after[k]), k

    def test_first_step_is_lr_times_sign(self):
        batch, _ = random_scene(5)
        params = ParamSet(batch, LearningRates(distance=5e-4))
        g = torch.linspace(-2.0, 3.0, len(batch), dtype=torch.float64) + 0.1
        d0 = batch.distance.clone()
        adam_step(params, {"distance": g})
        step = (batch.distance - d0).numpy()
        # bias-corrected m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
        np.testing.assert_allclose(step, -5e-4 * g.numpy() / (np.abs(g.numpy()) + 1e-8), rtol=1e-9)

    def test_alpha_clamped(self):
        batch, _ = wall_scene(alpha=0.99)
        params = ParamSet(batch, LearningRates(alpha=0.5))
        adam_step(params, {"alpha": -torch.ones_like(batch.atlas.alpha)})
        assert batch.atlas.alpha.max().item() == 1.0
        params = ParamSet(batch, LearningRates(alpha=2.0))
        adam_step(params, {"alpha": torch.ones_like(batch.atlas.alpha)})
        assert batch.atlas.alpha.min().item() == 0.0

    def test_distance_stays_positive(self):
        batch, _ = wall_scene()
        params = ParamSet(batch, LearningRates(distance=100.0))
        adam_step(params, {"distance": torch.ones_like(batch.distance)})
        assert batch.distance.item() == pytest.approx(1e-4)

    def test_frame_stays_orthonormal(self):
        batch, _ = random_scene(6)
        params = ParamSet(batch, LearningRates(normal=0.05))
        rng = np.random.default_rng(6)
        for _ in range(20):
            adam_step(params, {"normal": torch.tensor(rng.normal(size=(len(batch), 3)))})
        n, u, r = batch.frame()
        np.testing.assert_allclose(torch.linalg.norm(batch.normal, dim=1).numpy(), 1.0, atol=1e-12)
        np.testing.assert_allclose((n * u).sum(1).numpy(), 0.0, atol=1e-12)
        np.testing.assert_allclose((u * r).sum(1).numpy(), 0.0, atol=1e-12)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            batch, view = random_scene(8)
            params = ParamSet(batch)
            for _ in range(3):
                _, grads, _ = backward_render(batch, [view])
                adam_step(params, grads)
            runs.append(snapshot(batch))
        for k in runs[0]:
            assert torch.equal(runs[0][k], runs[1][k])

    def test_descends(self):
        batch, view = random_scene(9)
        params = ParamSet(batch)
        first, _, _ = backward_render(batch, [view])
        for _ in range(30):
            _, grads, _ = backward_render(batch, [view])
            adam_step(params, grads)
        last, _, _ = backward_render(batch, [view])
        assert last < first
