import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advwb import ops
from advwb.attacks import (
    DEFAULT_SCHEDULE,
    AttackConfig,
    EpsilonSchedule,
    attack_sweep,
    fgsm,
    pgd_linf,
    project_linf,
)
from advwb.errors import GradientError
from advwb.tensor import Tensor


class LinearModel:
    """logits_k = <W_k, x> + b_k, written as a full-image convolution."""

    def __init__(self, w, b=None):
        self.w = np.asarray(w, np.float64)
        self.params = {"w": Tensor(self.w)}
        self.b = np.zeros(len(self.w)) if b is None else np.asarray(b, np.float64)

    def forward(self, x):
        z = ops.conv2d(x, Tensor(self.w))  # [N, K, 1, 1]
        return ops.add(ops.global_avg_pool(z), Tensor(self.b))

    def logits(self, x):
        return np.einsum("nchw,kchw->nk", x, self.w) + self.b


def ce(z, y):
    z = z - z.max(axis=1, keepdims=True)
    return -(z[np.arange(len(y)), y] - np.log(np.exp(z).sum(axis=1)))


@pytest.fixture
def linear():
    r = np.random.default_rng(0)
    w = r.standard_normal((2, 1, 3, 4))
    x = r.uniform(0.3, 0.7, (6, 1, 3, 4))
    y = np.array([0, 1, 0, 1, 1, 0])
    return LinearModel(w), x, y


class TestProjection:
    def test_inside_unchanged(self):
        o = np.array([0.5, 0.5])
        c = np.array([0.55, 0.45])
        np.testing.assert_array_equal(project_linf(c, o, 0.1), c)

    def test_clamps_to_ball(self):
        assert np.isclose(project_linf(np.array([0.9]), np.array([0.5]), 0.1)[0], 0.6)

    def test_then_bounds(self):
        assert project_linf(np.array([1.5]), np.array([0.95]), 0.1)[0] == 1.0

    @given(seed=st.integers(0, 2**16), eps=st.floats(0, 0.5))
    def test_idempotent(self, seed, eps):
        r = np.random.default_rng(seed)
        o, c = r.random(20), r.uniform(-0.5, 1.5, 20)
        once = project_linf(c, o, eps)
        np.testing.assert_array_equal(project_linf(once, o, eps), once)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project_linf(np.zeros(3), np.zeros(2), 0.1)


class TestSchedule:
    def test_default(self):
        assert EpsilonSchedule() == DEFAULT_SCHEDULE
        assert EpsilonSchedule.parse("default") == DEFAULT_SCHEDULE

    def test_parse_list(self):
        assert EpsilonSchedule.parse("0, 0.01,0.02") == (0.0, 0.01, 0.02)

    @pytest.mark.parametrize("bad", [(0.01, 0.02), (0.0, 0.02, 0.01), (0.0, 0.0), (0.0, 2.0), ()])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            EpsilonSchedule(bad)


class TestConfig:
    def test_default_step_size(self):
        assert AttackConfig(epsilon=0.04, steps=40).alpha == pytest.approx(2.5 * 0.04 / 40)

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=-0.1)

    def test_epsilon_above_one(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=1.5)


class TestLinearClosedForm:
    def test_fgsm_step_is_sign_of_weight_difference(self, linear):
        model, x, y = linear
        eps = 0.05
        res = fgsm(model, x, y, eps)
        dw = model.w[1] - model.w[0]
        expected = np.where(y[:, None, None, None] == 0, np.sign(dw), -np.sign(dw)) * eps
        np.testing.assert_allclose(res.x_adv - x, expected, atol=1e-15)
        np.testing.assert_allclose(res.linf, eps)

    def test_pgd_reaches_optimal_vertex(self, linear):
        model, x, y = linear
        eps = 0.05
        res = pgd_linf(model, x, y, AttackConfig(epsilon=eps, steps=10, random_start=False))
        dw = model.w[1] - model.w[0]
        corner = x + np.where(y[:, None, None, None] == 0, np.sign(dw), -np.sign(dw)) * eps
        np.testing.assert_allclose(res.x_adv, corner, atol=1e-12)
        np.testing.assert_allclose(res.loss, ce(model.logits(corner), y), atol=1e-12)

    def test_pgd_with_random_start_still_reaches_vertex(self, linear):
        model, x, y = linear
        res = pgd_linf(model, x, y, AttackConfig(epsilon=0.05, steps=10, seed=3))
        dw = model.w[1] - model.w[0]
        corner = x + np.where(y[:, None, None, None] == 0, np.sign(dw), -np.sign(dw)) * 0.05
        np.testing.assert_allclose(res.x_adv, corner, atol=1e-12)

    def test_unsaturated_pixels_move_exactly_eps(self):
        model = LinearModel(np.random.default_rng(1).standard_normal((2, 1, 4, 4)))
        x = np.random.default_rng(2).random((5, 1, 4, 4))
        x[:, :, 0, 0] = 1.0  # saturated pixel
        y = np.zeros(5, np.int64)
        res = fgsm(model, x, y, 0.1)
        moved = np.abs(res.x_adv - x)
        free = (x > 0.1) & (x < 0.9)
        np.testing.assert_allclose(moved[free], 0.1, atol=1e-15)

    def test_success_consistent_with_prediction(self, linear):
        model, x, y = linear
        res = pgd_linf(model, x, y, AttackConfig(epsilon=0.3, steps=5))
        pred = model.logits(res.x_adv).argmax(axis=1)
        np.testing.assert_array_equal(res.predictions, pred)
        np.testing.assert_array_equal(res.success, pred != y)


class TestDegenerateCases:
    def test_eps_zero(self, linear):
        model, x, y = linear
        clean_wrong = model.logits(x).argmax(axis=1) != y
        for res in (fgsm(model, x, y, 0.0), pgd_linf(model, x, y, AttackConfig(epsilon=0.0, steps=7))):
            np.testing.assert_array_equal(res.x_adv, x)
            np.testing.assert_array_equal(res.success, clean_wrong)

    def test_pgd_one_step_equals_fgsm_bitwise(self, micro_model):
        model, data = micro_model
        x, y = data.images[:40], data.labels[:40]
        for eps in (0.01, 0.05, 0.2):
            a = fgsm(model, x, y, eps)
            b = pgd_linf(model, x, y, AttackConfig(epsilon=eps, steps=1, step_size=eps, random_start=False))
            assert np.array_equal(a.x_adv, b.x_adv)
            assert np.array_equal(a.success, b.success)
            assert np.array_equal(a.loss, b.loss)

    def test_fgsm_rejects_negative(self, linear):
        model, x, y = linear
        with pytest.raises(ValueError):
            fgsm(model, x, y, -0.1)

    def test_non_finite_gradient(self):
        class Broken(LinearModel):
            def forward(self, x):
                return ops.mul(super().forward(x), Tensor(np.array([np.nan, 1.0])))

        model = Broken(np.ones((2, 1, 2, 2)))
        with pytest.raises(GradientError):
            with np.errstate(invalid="ignore"):
                fgsm(model, np.full((1, 1, 2, 2), 0.5), np.array([1]), 0.1)


class TestOnTrainedModel:
    def test_bounds_hold(self, micro_model):
        model, data = micro_model
        for eps in (0.001, 0.03, 0.3):
            res = pgd_linf(model, data.images, data.labels, AttackConfig(epsilon=eps, steps=5))
            assert np.all(res.linf <= eps + 1e-7)
            assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1

    def test_pgd_loss_at_least_fgsm(self, micro_model):
        model, data = micro_model
        x, y = data.images, data.labels
        for eps in (0.02, 0.1):
            f = fgsm(model, x, y, eps)
            p = pgd_linf(model, x, y, AttackConfig(epsilon=eps, steps=4, step_size=eps, random_start=False))
            assert np.all(p.loss >= f.loss)

    def test_seeded_determinism(self, micro_model):
        model, data = micro_model
        cfg = AttackConfig(epsilon=0.05, steps=3, seed=9)
        a = pgd_linf(model, data.images, data.labels, cfg)
        b = pgd_linf(model, data.images, data.labels, cfg)
        assert np.array_equal(a.x_adv, b.x_adv)

    def test_chunking_and_workers_do_not_change_results(self, micro_model):
        model, data = micro_model
        x, y = data.images[:40], data.labels[:40]
        cfg = AttackConfig(epsilon=0.05, steps=3, batch_size=16)
        a = pgd_linf(model, x, y, cfg)
        b = pgd_linf(model, x, y, cfg, workers=2)
        assert np.array_equal(a.x_adv, b.x_adv) and np.array_equal(a.loss, b.loss)
        sa = attack_sweep(model, x, y, (0.0, 0.02, 0.08), AttackConfig(steps=2, batch_size=16))
        sb = attack_sweep(model, x, y, (0.0, 0.02, 0.08), AttackConfig(steps=2, batch_size=16), workers=2)
        for ra, rb in zip(sa, sb):
            assert np.array_equal(ra.x_adv, rb.x_adv)

    def test_sweep_monotone_and_witness_preserved(self, micro_model):
        model, data = micro_model
        results = attack_sweep(model, data.images, data.labels, DEFAULT_SCHEDULE, AttackConfig(steps=3))
        acc = [r.accuracy for r in results]
        assert acc == sorted(acc, reverse=True)
        for lo, hi in zip(results, results[1:]):
            assert np.all(hi.success >= lo.success)
        for r in results:
            assert np.all(r.linf <= r.epsilon + 1e-7)
            assert r.x_adv.min() >= 0 and r.x_adv.max() <= 1

    def test_sweep_single_point_is_clean(self, micro_model):
        from advwb.model import predict

        model, data = micro_model
        (res,) = attack_sweep(model, data.images, data.labels, (0.0,))
        assert np.array_equal(res.predictions, predict(model, data.images))
        assert np.array_equal(res.x_adv, data.images)
