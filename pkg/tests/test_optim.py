import numpy as np
import pytest

from gcfdm.autodiff import Tensor
from gcfdm.errors import ShapeError
from gcfdm.optim import AdamW, MomentState, StepDecay, WarmRestarts, optimizer_step


def _state(shape):
    return MomentState(np.zeros(shape), np.zeros(shape))


class TestOptimizerStep:
    """Test cases for a single AdamW update"""

    def test_zero_gradient_without_decay(self):
        """Test that a zero gradient and no decay leave the parameters unchanged"""
        params = np.array([1.0, -2.0, 3.0])
        out = optimizer_step(params, np.zeros(3), _state(3), lr=0.1, weight_decay=0.0)
        assert np.array_equal(out, params)

    def test_first_step_moves_by_lr(self):
        """Test that the bias-corrected first step has magnitude lr"""
        params = np.zeros(3)
        grads = np.array([0.5, -3.0, 1e-3])
        out = optimizer_step(params, grads, _state(3), lr=0.01, weight_decay=0.0)
        assert np.allclose(out, -0.01 * np.sign(grads), rtol=1e-4)

    def test_decay_only(self):
        """Test that weight decay alone scales by 1 - lr * wd"""
        params = np.array([2.0, -4.0])
        out = optimizer_step(params, np.zeros(2), _state(2), lr=0.1, weight_decay=1e-4)
        assert np.allclose(out, params * (1.0 - 0.1 * 1e-4), rtol=0.0, atol=1e-15)

    def test_state_advances(self):
        state = _state(2)
        optimizer_step(np.zeros(2), np.ones(2), state, lr=0.1)
        optimizer_step(np.zeros(2), np.ones(2), state, lr=0.1)
        assert state.t == 2
        assert np.allclose(state.first_moment, 0.19)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            optimizer_step(np.zeros(2), np.zeros(3), _state(2), lr=0.1)


class TestAdamW:
    """Test cases for the tensor-level optimizer"""

    def test_skips_tensors_without_gradient(self):
        a = Tensor([1.0, 1.0], requires_grad=True)
        b = Tensor([1.0, 1.0], requires_grad=True)
        a.grad = np.array([1.0, -1.0])
        optimizer = AdamW([a, b], lr=0.1, weight_decay=0.0)
        optimizer.step()
        assert np.allclose(a.data, (0.9, 1.1))
        assert np.array_equal(b.data, (1.0, 1.0))

    def test_zero_grad(self):
        a = Tensor([1.0], requires_grad=True)
        a.grad = np.array([3.0])
        AdamW([a]).zero_grad()
        assert a.grad is None

    def test_lr_is_mutable(self):
        a = Tensor([0.0], requires_grad=True)
        optimizer = AdamW([a], lr=0.1, weight_decay=0.0)
        optimizer.lr = 0.5
        a.grad = np.array([2.0])
        optimizer.step()
        assert a.data[0] == pytest.approx(-0.5)


class TestSchedules:
    """Test cases for learning-rate schedules"""

    def test_step_decay(self):
        schedule = StepDecay(lr=1e-4, decay_epoch=10, factor=0.1)
        assert schedule(9) == 1e-4
        assert schedule(10) == pytest.approx(1e-5)
        assert schedule(500) == pytest.approx(1e-5)

    def test_warm_restarts_values(self):
        schedule = WarmRestarts(lr_max=1.0, lr_min=0.0, period=4, growth=2)
        assert schedule(0) == pytest.approx(1.0)
        assert schedule(2) == pytest.approx(0.5)
        assert schedule(4) == pytest.approx(1.0)
        assert schedule(8) == pytest.approx(0.5)
        assert schedule(11) < schedule(10)

    def test_restart_points(self):
        schedule = WarmRestarts(lr_max=1.0, period=4, growth=2)
        assert [k for k in range(30) if schedule.is_restart(k)] == [0, 4, 12, 28]
