import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from unimiss.config import DistillConfig, TrainSchedule
from unimiss.mit import DimTag
from unimiss.schedules import lr_for_step, modality_for_step, momentum_for_step

D2, D3 = DimTag.D2, DimTag.D3


def test_default_interval_pattern():
    assert [modality_for_step(s, 2) for s in range(8)] == [D2, D2, D3, D3, D2, D2, D3, D3]


def test_strict_alternation():
    assert [modality_for_step(s, 1) for s in range(4)] == [D2, D3, D2, D3]


def test_interval_three_step_ten():
    assert modality_for_step(10, 3) is D3


@given(st.integers(1, 20), st.integers(0, 10_000))
def test_modality_matches_circular_simulation(upsilon, step):
    # walk a circular buffer [2D]*u + [3D]*u
    cycle = [D2] * upsilon + [D3] * upsilon
    assert modality_for_step(step, upsilon) is cycle[step % len(cycle)]


@given(st.integers(1, 10), st.integers(1, 25))
def test_modality_balance(upsilon, k):
    steps = [modality_for_step(s, upsilon) for s in range(4 * upsilon * k)]
    assert steps.count(D2) == steps.count(D3) == 2 * upsilon * k


def test_modality_rejects_bad_args():
    with pytest.raises(ValueError):
        modality_for_step(-1, 2)
    with pytest.raises(ValueError):
        modality_for_step(0, 0)


def test_lr_endpoints():
    sched = TrainSchedule()
    assert sched.base_lr == 0.0008
    assert lr_for_step(0, sched) == 0.0
    assert lr_for_step(sched.warmup_steps, sched) == sched.base_lr
    increment = sched.base_lr * (1 - math.cos(math.pi / (sched.total_steps - sched.warmup_steps))) / 2
    assert 0 < lr_for_step(sched.total_steps - 1, sched) <= increment


@given(st.integers(0, 1999))
def test_lr_bounded_and_monotone_after_warmup(step):
    sched = TrainSchedule()
    lr = lr_for_step(step, sched)
    assert 0.0 <= lr <= sched.base_lr
    if sched.warmup_steps <= step < sched.total_steps - 1:
        assert lr_for_step(step + 1, sched) <= lr


def test_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_for_step(2000, TrainSchedule())


def test_momentum_endpoints_exact():
    assert momentum_for_step(0, 2000) == 0.996
    assert momentum_for_step(1999, 2000) == 1.0
    assert momentum_for_step(0, 1) == 1.0


@given(st.integers(2, 5000), st.data())
def test_momentum_monotone(total, data):
    step = data.draw(st.integers(0, total - 2))
    cfg = DistillConfig()
    assert cfg.lambda_base <= momentum_for_step(step, total) <= momentum_for_step(step + 1, total) <= 1.0
