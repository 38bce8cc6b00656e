import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from shaperefine.autodiff import (
    PRIMITIVES, AdamState, ShapeError, Tape, adam_step, backward, check_coordinates,
    relative_error,
)


def test_record_shapes_and_unknown_op():
    tape = Tape()
    a = tape.leaf("a", np.ones((2, 3)))
    b = tape.leaf("b", np.ones((3, 4)))
    out = tape.record("matmul", a, b)
    assert out.shape == (2, 4)
    assert tape.nodes[-1].output_shape == (2, 4)
    assert tape.nodes[-1].input_shapes == ((2, 3), (3, 4))
    with pytest.raises(ShapeError):
        tape.record("matmul", a, a)
    with pytest.raises(KeyError):
        tape.record("tanh", a)


def test_backward_sum_is_ones():
    tape = Tape()
    x = tape.leaf("x", np.arange(6.0).reshape(2, 3))
    g = backward(tape, tape.record("sum", x))
    assert torch.equal(g["x"], torch.ones(2, 3, dtype=torch.float64))


def test_backward_quadratic_form(rng):
    W = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(3, 1))
    tape = Tape()
    w = tape.leaf("W", W)
    x = tape.leaf("x", x0, requires_grad=False)
    y = tape.record("matmul", w, x)
    loss = tape.record("mul", tape.record("sum", tape.record("square", y)), 0.5)
    g = backward(tape, loss)
    assert np.allclose(g["W"].numpy(), (W @ x0) @ x0.T, atol=1e-12)


def test_fan_out_accumulates_and_unused_leaf_gets_zero():
    tape = Tape()
    x = tape.leaf("x", np.array([1.5]))
    tape.leaf("unused", np.ones(4))
    y = tape.record("add", x, x)
    g = backward(tape, tape.record("sum", y))
    assert g["x"].item() == 2.0
    assert torch.equal(g["unused"], torch.zeros(4, dtype=torch.float64))


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf("x", np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, x * 2)


def test_constant_loss_gives_zero_gradients():
    tape = Tape()
    tape.leaf("x", np.ones(3))
    g = backward(tape, torch.tensor(3.0))
    assert torch.equal(g["x"], torch.zeros(3, dtype=torch.float64))


def test_min_argmin_lowest_index_on_ties():
    tape = Tape()
    x = tape.leaf("x", np.array([[3.0, 1.0, 1.0, 2.0], [0.5, 0.5, 0.5, 0.5]]))
    val, idx = tape.record("min_argmin", x)
    assert idx.tolist() == [1, 0]
    assert val.tolist() == [1.0, 0.5]
    g = backward(tape, tape.record("sum", val))
    assert g["x"].tolist() == [[0, 1, 0, 0], [1, 0, 0, 0]]


def test_gather_scatter_adjoint(rng):
    idx = np.array([0, 2, 2, 1, 0])
    x = torch.from_numpy(rng.normal(size=(3, 2)))
    y = torch.from_numpy(rng.normal(size=(5, 2)))
    lhs = (PRIMITIVES["gather"](x, idx) * y).sum()
    rhs = (x * PRIMITIVES["scatter_add"](y, idx, 3)).sum()
    assert torch.isclose(lhs, rhs, atol=1e-12)


def test_bilinear_sample_cell_center():
    fm = torch.arange(12.0, dtype=torch.float64).reshape(1, 3, 4)
    # the center of cell (row 1, col 2) in normalized coordinates
    xy = torch.tensor([[(2 + 0.5) / 4 * 2 - 1, (1 + 0.5) / 3 * 2 - 1]], dtype=torch.float64)
    assert PRIMITIVES["bilinear_sample"](fm, xy).item() == pytest.approx(6.0, abs=1e-12)


def _fn_for(op, rng):
    a = torch.tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    b = torch.tensor(rng.uniform(0.5, 2.0, size=(4, 2)), requires_grad=True)
    if op == "matmul":
        return a, lambda: (PRIMITIVES[op](a, b) ** 2).sum()
    if op in ("add", "mul"):
        c = torch.from_numpy(rng.normal(size=(3, 4)))
        return a, lambda: (PRIMITIVES[op](a, c) ** 2).sum()
    if op in ("sigmoid", "relu", "log", "square", "sqrt"):
        w = torch.from_numpy(rng.normal(size=(3, 4)))
        return a, lambda: (PRIMITIVES[op](a) * w).sum()
    if op in ("sum", "mean"):
        return a, lambda: PRIMITIVES[op](a ** 3)
    if op == "conv2d":
        img = torch.tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        k = torch.from_numpy(rng.normal(size=(3, 2, 3, 3)))
        return img, lambda: (F_conv(img, k) ** 2).sum()
    if op == "bilinear_sample":
        fm = torch.tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
        xy = torch.from_numpy(rng.uniform(-0.8, 0.8, size=(6, 2)))
        return fm, lambda: (PRIMITIVES[op](fm, xy) ** 2).sum()
    raise AssertionError(op)


def F_conv(x, k):
    return PRIMITIVES["conv2d"](x, k, padding=1)


@pytest.mark.parametrize("op", ["matmul", "add", "mul", "sigmoid", "relu", "log", "square",
                                "sqrt", "sum", "mean", "conv2d", "bilinear_sample"])
def test_primitive_gradcheck_float64(op, rng):
    x, fn = _fn_for(op, rng)
    (g,) = torch.autograd.grad(fn(), x)
    rep = check_coordinates(fn, x, g, range(x.numel()), h=1e-6, rtol=1e-6, floor=1.0)
    assert rep.failed == 0, rep.failures
    assert rep.checked >= 0.9 * x.numel()


def test_adam_zero_gradient_is_noop():
    p = {"w": torch.tensor([1.0, -2.0])}
    before = p["w"].clone()
    adam_step(p, {"w": torch.zeros(2)}, AdamState(), lr=0.1)
    assert torch.equal(p["w"], before)


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    adam_step(p, {"w": torch.tensor([3.0, -0.5], dtype=torch.float64)}, lr=0.01, eps=0.0)
    assert torch.allclose(p["w"], torch.tensor([0.99, -1.99], dtype=torch.float64), atol=1e-15)


def test_adam_converges_on_quadratic():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    state = AdamState()
    for _ in range(2000):
        loss = ((w - 3.0) ** 2).sum()
        (g,) = torch.autograd.grad(loss, w)
        adam_step({"w": w}, {"w": g}, state, lr=0.05)
    assert abs(w.item() - 3.0) < 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)})


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_relative_error_symmetric_and_bounded(a, b):
    e = relative_error(a, b)
    assert e == relative_error(b, a)
    assert 0 <= e <= 2


def test_record_relu_and_conv_shapes():
    tape = Tape()
    x = tape.leaf("x", np.array([-1.0, 2.0]))
    assert tape.record("relu", x).tolist() == [0.0, 2.0]
    img = tape.leaf("img", np.zeros((1, 1, 8, 8)))
    k = tape.leaf("k", np.zeros((1, 1, 3, 3)))
    assert tape.record("conv2d", img, k, stride=1, padding=1).shape == (1, 1, 8, 8)


def test_adam_zero_gradient_decays_moments():
    p = {"w": torch.tensor([1.0])}
    state = AdamState()
    adam_step(p, {"w": torch.tensor([2.0])}, state, lr=0.1)
    m, v = state.m["w"].clone(), state.v["w"].clone()
    before = p["w"].clone()
    adam_step(p, {"w": torch.zeros(1)}, state, lr=0.1)
    assert torch.allclose(state.m["w"], 0.9 * m) and torch.allclose(state.v["w"], 0.999 * v)
    # the decayed first moment still moves the parameter
    assert p["w"] < before


def test_adam_hundred_steps_lr_point_one():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    state = AdamState()
    for _ in range(100):
        (g,) = torch.autograd.grad(((w - 3.0) ** 2).sum(), w)
        adam_step({"w": w}, {"w": g}, state, lr=0.1)
    assert abs(w.item() - 3.0) < 0.2
