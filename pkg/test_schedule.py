"""확산 스케줄 테스트"""
from dataclasses import replace

import numpy as np
import pytest

from csrecon.cs_operator import back_project, build_operator, sample
from csrecon.engine import Rng, Tensor, precision
from csrecon.errors import ScheduleError
from csrecon.schedule import ALPHA_FLOOR, DiffusionSchedule, alpha_bar, forward_noising, init_estimate


def test_alphas_stay_in_range():
    with precision("float64"):
        sched = DiffusionSchedule(steps=4)
        sched.alpha_logits.data = np.array([-50.0, -1.0, 2.0, 50.0])
        alphas = sched.alphas().data
    assert np.all(alphas >= ALPHA_FLOOR) and np.all(alphas <= 1.0)
    assert abs(alphas[0] - ALPHA_FLOOR) < 1e-12


def test_alpha_bar_is_running_product():
    with precision("float64"):
        sched = DiffusionSchedule(steps=3, init_alpha=0.5)
        assert alpha_bar(sched, 0) == 1.0
        assert abs(alpha_bar(sched, 1) - 0.5) < 1e-12
        assert abs(alpha_bar(sched, 3) - 0.125) < 1e-12
        bars = [alpha_bar(sched, t) for t in range(4)]
    assert all(a > b for a, b in zip(bars, bars[1:]))


def test_pinned_alphas():
    with precision("float64"):
        sched = DiffusionSchedule(steps=2)
        sched.pin([1.0, 0.25])
        assert alpha_bar(sched, 1) == 1.0
        assert alpha_bar(sched, 2) == 0.25
        sched.pin(None)
        assert abs(alpha_bar(sched, 1) - 0.5) < 1e-12
    with pytest.raises(ScheduleError):
        sched.pin([0.5])
    with pytest.raises(ScheduleError):
        sched.pin([0.0, 0.5])


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        DiffusionSchedule(steps=0)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(steps=13)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(steps=2, init_alpha=1.0)
    sched = DiffusionSchedule(steps=2)
    with pytest.raises(ScheduleError):
        alpha_bar(sched, 3)
    with pytest.raises(ScheduleError):
        alpha_bar(sched, -1)


def test_init_estimate_modes():
    op = build_operator(4, 0.5, seed=0)
    with precision("float64"):
        sched = DiffusionSchedule(steps=2, init_alpha=0.5)
        y = sample(op, Tensor(Rng(0).uniform((1, 8, 8))))
        start = init_estimate(sched, op, y, "backproj")
        assert np.allclose(start.data, 0.5 * back_project(op, y).data)
        a = init_estimate(sched, op, y, "noise", rng=Rng(3))
        b = init_estimate(sched, op, y, "noise", rng=Rng(3))
        assert a.shape == (1, 8, 8) and np.array_equal(a.data, b.data)
        with pytest.raises(ScheduleError):
            init_estimate(sched, op, y, "noise")
        with pytest.raises(ScheduleError):
            init_estimate(sched, op, y, "zeros")


def test_forward_noising():
    with precision("float64"):
        sched = DiffusionSchedule(steps=2, init_alpha=0.5)
        x0 = Tensor(np.ones((1, 4, 4)))
        eps = np.full((1, 4, 4), 2.0)
        assert forward_noising(sched, x0, 0) is x0
        xt = forward_noising(sched, x0, 2, eps=eps)
        expected = np.sqrt(0.25) + np.sqrt(0.75) * 2.0
        assert np.allclose(xt.data, expected)
        with pytest.raises(ScheduleError):
            forward_noising(sched, x0, 1)


def test_forward_noising_variance():
    """x_0 = 0, abar = 0.36 -> Var(x_t) = 0.64"""
    with precision("float64"):
        sched = DiffusionSchedule(steps=1)
        sched.pin([0.36])
        xt = forward_noising(sched, Tensor(np.zeros((1, 250, 400))), 1, rng=Rng(21))
    assert abs(float(xt.data.var()) - 0.64) < 0.01


def test_backprojection_init_is_linear_in_measurements():
    op = build_operator(4, 0.5, seed=1)
    with precision("float64"):
        sched = DiffusionSchedule(steps=3)
        y1 = sample(op, Tensor(Rng(4).uniform((1, 8, 8))))
        y2 = sample(op, Tensor(Rng(5).normal((1, 8, 8), dtype=np.float64)))
        y_sum = replace(y1, values=y1.values + y2.values)
        combined = init_estimate(sched, op, y_sum).data
        separate = init_estimate(sched, op, y1).data + init_estimate(sched, op, y2).data
    assert np.abs(combined - separate).max() < 1e-5
