"""SGD / Adam update rules and optimizer contracts."""

import numpy as np
import numpy.testing as npt
import pytest

from sidetune.autodiff import param
from sidetune.errors import ContractError
from sidetune.optim import init_optimizer, optimizer_step


def test_sgd_single_step():
    p = param(np.asarray([1.0]))
    p.grad = np.asarray([2.0])
    state = init_optimizer("sgd", [p], lr=0.1)
    optimizer_step(state, [p])
    npt.assert_allclose(p.data, [0.8])
    assert state.step_count == 1


def test_sgd_zero_grad_is_fixed_point():
    p = param(np.asarray([3.0, -1.0]))
    p.zero_grad()
    state = init_optimizer("sgd", [p], lr=0.5)
    optimizer_step(state, [p])
    npt.assert_array_equal(p.data, [3.0, -1.0])


def test_adam_first_step_moves_by_about_lr_times_sign():
    lr = 1e-2
    for g in (0.3, -4.0, 1e-5):
        p = param(np.asarray([1.0]))
        p.grad = np.asarray([g])
        state = init_optimizer("adam", [p], lr=lr)
        optimizer_step(state, [p])
        # bias-corrected first step: delta = lr * g / (|g| + eps')
        delta = 1.0 - p.data[0]
        npt.assert_allclose(delta, lr * np.sign(g), rtol=1e-3)


def test_adam_moments_track_shapes():
    p = param(np.ones((2, 3)))
    p.grad = np.ones((2, 3))
    state = init_optimizer("adam", [p], lr=0.1)
    optimizer_step(state, [p])
    assert state.m[0].shape == (2, 3)
    assert state.v[0].shape == (2, 3)


def test_missing_grad_is_contract_error():
    p = param(np.asarray([1.0]))
    state = init_optimizer("sgd", [p], lr=0.1)
    with pytest.raises(ContractError):
        optimizer_step(state, [p])


def test_unknown_kind_rejected():
    with pytest.raises(ContractError):
        init_optimizer("rmsprop", [], lr=0.1)


def test_adam_step_counter_monotone():
    p = param(np.asarray([0.0]))
    state = init_optimizer("adam", [p], lr=0.1)
    for expected in (1, 2, 3):
        p.grad = np.asarray([1.0])
        optimizer_step(state, [p])
        assert state.step_count == expected
