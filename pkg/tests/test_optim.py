import numpy as np
import pytest

from chestsep.errors import NonFiniteError
from chestsep.nn import AdamWAmsgrad, PlateauScheduler, Tensor, clip_grad_l2, global_grad_norm


def make_param(value, name="p"):
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
    return t


class TestAdamWAmsgrad:
    def test_first_step_hand_value(self):
        p = make_param([1.0])
        opt = AdamWAmsgrad([p], lr=1e-4, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        # m_hat = 1, v_hat_max = 1 -> update = lr / (1 + eps)
        expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8))
        assert abs(p.data[0] - expected) < 1e-12

    def test_decoupled_decay_with_zero_grad(self):
        p = make_param([1.0])
        opt = AdamWAmsgrad([p], lr=1e-4, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == 1.0 * (1.0 - 1e-4 * 0.1)

    def test_zero_decay_zero_grad_bit_identical(self):
        start = np.array([0.3, -2.0, 7.5])
        p = make_param(start.copy())
        opt = AdamWAmsgrad([p], lr=1e-3, weight_decay=0.0)
        for _ in range(5):
            p.grad = np.zeros(3)
            opt.step()
        np.testing.assert_array_equal(p.data, start)

    def test_vmax_never_decreases(self, rng):
        p = make_param(rng.standard_normal(8))
        opt = AdamWAmsgrad([p], lr=1e-3)
        previous = opt.v_max[0].copy()
        for _ in range(50):
            p.grad = rng.standard_normal(8)
            opt.step()
            assert np.all(opt.v_max[0] >= previous)
            previous = opt.v_max[0].copy()

    def test_nan_gradient_rejected(self):
        p = make_param([1.0])
        opt = AdamWAmsgrad([p])
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError):
            opt.step()

    def test_bad_hyperparameters_rejected(self):
        with pytest.raises(ValueError):
            AdamWAmsgrad([make_param([1.0])], lr=0.0)
        with pytest.raises(ValueError):
            AdamWAmsgrad([make_param([1.0])], beta1=1.0)


class TestClipGradL2:
    def test_clips_to_max_norm(self):
        p = make_param(np.zeros(4))
        p.grad = np.array([6.0, 0.0, 8.0, 0.0])  # norm 10
        pre = clip_grad_l2([p], 5.0)
        assert abs(pre - 10.0) < 1e-12
        assert abs(global_grad_norm([p]) - 5.0) < 1e-9
        np.testing.assert_allclose(p.grad, [3.0, 0.0, 4.0, 0.0])

    def test_below_threshold_untouched(self):
        p = make_param(np.zeros(2))
        grad = np.array([3.0, 0.0])
        p.grad = grad.copy()
        clip_grad_l2([p], 5.0)
        np.testing.assert_array_equal(p.grad, grad)

    def test_direction_preserved(self, rng):
        p = make_param(np.zeros(16))
        p.grad = 100.0 * rng.standard_normal(16)
        before = p.grad.copy()
        clip_grad_l2([p], 5.0)
        cosine = float(before @ p.grad) / (np.linalg.norm(before) * np.linalg.norm(p.grad))
        assert abs(cosine - 1.0) < 1e-12

    def test_invalid_max_norm(self):
        with pytest.raises(ValueError):
            clip_grad_l2([], 0.0)


class FakeOpt:
    def __init__(self, lr=1e-4):
        self.lr = lr


class TestPlateauScheduler:
    def test_improving_keeps_lr(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        for epoch in range(12):
            lr = sched.step(1.0 - 0.01 * epoch)
        assert lr == 1e-4

    def test_five_epoch_stagnation_halves(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        lrs = [sched.step(1.0) for _ in range(5)]
        assert lrs[:4] == [1e-4] * 4
        assert lrs[4] == 5e-5

    def test_stagnant_validation_halves_every_fifth_epoch(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        lrs = [sched.step(1.0) for _ in range(15)]
        assert lrs[4] == 5e-5
        assert lrs[9] == 2.5e-5
        assert lrs[14] == 1.25e-5

    def test_two_separated_plateaus_quarter_lr(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        metrics = [1.0, 1.0, 1.0, 1.0, 1.0]      # plateau one -> halve
        metrics += [0.5]                          # improvement resets the stall
        metrics += [0.5, 0.5, 0.5, 0.5, 0.5]      # plateau two -> halve again
        for m in metrics:
            lr = sched.step(m)
        assert lr == 2.5e-5

    def test_counter_resets_on_improvement(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        for m in (1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0):
            lr = sched.step(m)
        assert lr == 1e-4  # never 4 consecutive stalls

    def test_state_roundtrip(self):
        sched = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        for m in (1.0, 1.0, 1.0):
            sched.step(m)
        state = sched.state_dict()
        other = PlateauScheduler(FakeOpt(), factor=0.5, patience=4)
        other.load_state_dict(state)
        assert other.step(1.0) == sched.step(1.0)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            PlateauScheduler(FakeOpt(), factor=1.5)
