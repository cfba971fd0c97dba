import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnaspp.optim import (
    AdamState, CosineSchedule, NumericalError, adam_step, cosine_lr, optimizer_state_entries,
    optimizer_state_from_entries,
)
from attnaspp.tensor import Tensor


def half_angle_oracle(eta_min, eta_max, t_cur, t_i):
    # (1 + cos a) / 2 == cos^2(a / 2)
    return eta_min + (eta_max - eta_min) * math.cos(math.pi * t_cur / (2 * t_i)) ** 2


def test_schedule_endpoints():
    assert cosine_lr(0.0, 1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-5, 1e-3, 100, 100) == 1e-5
    assert cosine_lr(0.0, 1e-3, 50, 100) == pytest.approx(5e-4, abs=1e-18)


def test_schedule_matches_oracle_on_random_tuples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        eta_max = float(rng.uniform(1e-6, 1.0))
        eta_min = float(rng.uniform(0, eta_max))
        t_i = int(rng.integers(1, 500))
        t_cur = int(rng.integers(0, t_i + 1))
        got = cosine_lr(eta_min, eta_max, t_cur, t_i)
        assert abs(got - half_angle_oracle(eta_min, eta_max, t_cur, t_i)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(t_i=st.integers(1, 200), eta_max=st.floats(1e-6, 1.0))
def test_schedule_non_increasing_within_cycle(t_i, eta_max):
    s = CosineSchedule(eta_max=eta_max, t_i=t_i)
    seq = []
    for _ in range(t_i + 1):
        seq.append(s.lr_at())
        s.epoch_tick()
    assert all(b <= a for a, b in zip(seq, seq[1:]))


def test_single_cycle_clamps_at_eta_min():
    s = CosineSchedule(eta_max=1e-3, eta_min=1e-6, t_i=100)
    for _ in range(150):
        s.epoch_tick()
    assert s.lr_at() == 1e-6


def test_restart_returns_to_eta_max():
    s = CosineSchedule(eta_max=1e-3, t_i=10, restart=True)
    seen = []
    for _ in range(12):
        seen.append(s.lr_at())
        s.epoch_tick()
    assert seen[0] == seen[10] == 1e-3
    assert seen[9] < seen[8]


def test_schedule_rejects_zero_cycle():
    with pytest.raises(ValueError):
        CosineSchedule(t_i=0)


def _param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def test_adam_first_step_hand_value():
    p = _param([1.0])
    p.grad = np.array([0.1])
    adam_step({"p": p}, AdamState(), lr=1e-3)
    expected = -1e-3 * 0.1 / (0.1 + 1e-8)
    assert p.data[0] - 1.0 == pytest.approx(expected, rel=1e-9)
    assert -1e-3 < p.data[0] - 1.0 < -9.9999e-4


def test_adam_zero_grad_keeps_params():
    p = _param([0.5, -2.0])
    st_ = AdamState()
    for _ in range(10):
        p.grad = np.zeros(2)
        adam_step({"p": p}, st_)
    assert p.data.tolist() == [0.5, -2.0]


def test_adam_parameters_are_independent():
    a, b = _param([1.0]), _param([1.0])
    st_ = AdamState()
    for g in (0.3, -0.1, 0.7):
        a.grad, b.grad = np.array([g]), np.array([g])
        adam_step({"a": a, "b": b}, st_)
    assert a.data[0] == b.data[0]


def test_adam_converges_on_quadratic():
    x = _param([1.0])
    st_ = AdamState(lr=1e-2)
    for _ in range(500):
        x.grad = 2 * x.data
        adam_step({"x": x}, st_)
    assert abs(x.data[0]) < 1e-2


def test_adam_nan_names_parameter_and_keeps_state():
    a, b = _param([1.0]), _param([2.0])
    a.grad, b.grad = np.array([0.1]), np.array([np.nan])
    st_ = AdamState()
    with pytest.raises(NumericalError, match="dec1.conv.weight"):
        adam_step({"enc": a, "dec1.conv.weight": b}, st_)
    assert st_.t == 0 and a.data[0] == 1.0


def test_optimizer_state_round_trip():
    p = _param([1.0, 2.0])
    p.grad = np.array([0.1, -0.2])
    st_ = AdamState()
    adam_step({"w": p}, st_)
    sched = CosineSchedule(t_i=7, restart=True)
    sched.epoch_tick()
    st2, sched2 = optimizer_state_from_entries(optimizer_state_entries(st_, sched))
    assert st2.t == 1 and np.array_equal(st2.m["w"], st_.m["w"])
    assert sched2 == sched
