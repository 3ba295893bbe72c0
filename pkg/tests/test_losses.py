import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from earface.errors import ConfigError, DimensionError
from earface.losses import (
    CenterBank,
    center_term,
    multitask_loss,
    softmax_cross_entropy,
    task_loss,
    task_loss_grad,
    update_centers,
)


def bank(centers, alpha=0.5):
    return CenterBank(torch.tensor(centers, dtype=torch.float64), alpha)


def numpy_task_loss(z, x, y, c, lam):
    """Independent float64 reference for mean softmax CE plus summed center term."""
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = -logp[np.arange(len(y)), y].mean()
    return soft + 0.5 * lam * ((x - c[y]) ** 2).sum()


def central_diff(f, arr, h=1e-6):
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def random_instance(rng):
    m, n, d = rng.integers(1, 6), rng.integers(2, 6), rng.integers(1, 9)
    z = rng.normal(size=(m, n)) * 2
    x = rng.normal(size=(m, d))
    y = rng.integers(0, n, size=m)
    c = rng.normal(size=(n, d))
    return z, x, y, c, float(rng.uniform(0, 1))


def test_softmax_hand_values():
    assert float(softmax_cross_entropy(torch.zeros(5, dtype=torch.float64), 2)) == pytest.approx(math.log(5), abs=1e-12)
    assert float(softmax_cross_entropy(torch.tensor([1000.0, 0.0]), 0)) == pytest.approx(0.0, abs=1e-12)
    expected = math.log(1 + math.exp(-1))
    assert float(softmax_cross_entropy(torch.tensor([1.0, 0.0], dtype=torch.float64), 0)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.31326, abs=1e-5)


def test_softmax_errors():
    with pytest.raises(IndexError):
        softmax_cross_entropy(torch.zeros(3), 3)
    with pytest.raises(IndexError):
        softmax_cross_entropy(torch.zeros(3), -1)
    with pytest.raises(DimensionError):
        softmax_cross_entropy(torch.zeros(1), 0)


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3), st.data())
def test_softmax_shift_invariance(logits, shift, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    z = torch.tensor(logits, dtype=torch.float64)
    a = float(softmax_cross_entropy(z, label))
    b = float(softmax_cross_entropy(z + shift, label))
    assert a >= 0.0
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_center_term_hand_values():
    b = bank([[0.0, 0.0]])
    x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert float(center_term(x, [0], b, 0.1)) == pytest.approx(0.05, abs=1e-15)
    assert float(center_term(x, [0], b, 0.2)) == pytest.approx(0.1, abs=1e-15)
    at_center = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert float(center_term(at_center, [0], b, 0.1)) == 0.0
    with pytest.raises(DimensionError):
        center_term(torch.zeros(1, 3, dtype=torch.float64), [0], b)


def test_center_term_permutation_invariant():
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.normal(size=(7, 4)))
    y = torch.tensor(rng.integers(0, 3, 7))
    b = bank(rng.normal(size=(3, 4)))
    perm = torch.tensor(rng.permutation(7))
    assert float(center_term(x, y, b)) == pytest.approx(float(center_term(x[perm], y[perm], b)), rel=1e-12)


def test_task_loss_combined_example():
    b = bank([[0.0, 0.0], [5.0, 5.0]])
    out = task_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0], b, 0.1)
    assert float(out.total) == pytest.approx(0.36326, abs=1e-5)
    assert float(out.total) == pytest.approx(float(out.softmax_term) + float(out.center_term), abs=1e-15)
    no_center = task_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0], b, 0.0)
    assert float(no_center.total) == float(no_center.softmax_term)


def test_update_centers_rules():
    b = bank([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], alpha=1.0)
    x = torch.tensor([[2.0, 4.0]], dtype=torch.float64)
    new = update_centers(b, x, [0])
    np.testing.assert_allclose(new.centers[0].numpy(), [1.0, 2.0])
    assert torch.equal(new.centers[1:], b.centers[1:])
    assert torch.equal(b.centers[0], torch.zeros(2, dtype=torch.float64))
    same = update_centers(b, b.centers[[1, 2]], [1, 2])
    assert torch.equal(same.centers, b.centers)


def test_update_centers_matches_formula():
    rng = np.random.default_rng(5)
    c = rng.normal(size=(4, 3))
    x = rng.normal(size=(9, 3))
    y = rng.integers(0, 3, 9)
    new = update_centers(bank(c, alpha=0.5), torch.tensor(x), torch.tensor(y)).centers.numpy()
    for j in range(4):
        mask = y == j
        expected = c[j] + 0.5 * (x[mask] - c[j]).sum(axis=0) / (1 + mask.sum())
        np.testing.assert_allclose(new[j], expected, rtol=1e-12, atol=1e-12)


def test_center_bank_validation():
    with pytest.raises(ConfigError):
        CenterBank(torch.zeros(2, 2), alpha=0.0)
    with pytest.raises(DimensionError):
        CenterBank(torch.zeros(3))
    seeded = CenterBank.from_features(torch.tensor([[1.0], [3.0], [7.0]]), [0, 0, 2], 3)
    np.testing.assert_array_equal(seeded.centers.numpy().ravel(), [2.0, 0.0, 7.0])


def test_multitask_loss():
    assert multitask_loss(1.0, 2.0, 0.75) == pytest.approx(1.25)
    a, g = torch.tensor(0.123456789, dtype=torch.float64), torch.tensor(9.87654321, dtype=torch.float64)
    assert multitask_loss(a, g, 1.0) is a
    assert multitask_loss(a, g, 0.0) is g
    with pytest.raises(ConfigError):
        multitask_loss(1.0, 1.0, 1.5)


@settings(max_examples=50)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1))
def test_multitask_linear(a1, a2, g, beta):
    lhs = multitask_loss(a1 + a2, g, beta)
    rhs = multitask_loss(a1, g, beta) + multitask_loss(a2, 0.0, beta)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_task_loss_matches_numpy_reference():
    rng = np.random.default_rng(11)
    for _ in range(20):
        z, x, y, c, lam = random_instance(rng)
        out = task_loss(torch.tensor(z), torch.tensor(x), torch.tensor(y), bank(c), lam)
        assert float(out.total) == pytest.approx(numpy_task_loss(z, x, y, c, lam), rel=1e-12, abs=1e-12)


def test_closed_form_grad_matches_autograd_and_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        z, x, y, c, lam = random_instance(rng)
        dz, dx = task_loss_grad(z, x, y, bank(c), lam)
        zt = torch.tensor(z, requires_grad=True)
        xt = torch.tensor(x, requires_grad=True)
        task_loss(zt, xt, torch.tensor(y), bank(c), lam).total.backward()
        np.testing.assert_allclose(dz, zt.grad.numpy(), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(dx, xt.grad.numpy(), rtol=1e-10, atol=1e-12)
        fz = central_diff(lambda: numpy_task_loss(z, x, y, c, lam), z)
        fx = central_diff(lambda: numpy_task_loss(z, x, y, c, lam), x)
        assert rel_error(dz, fz) < 1e-4
        assert rel_error(dx, fx) < 1e-4 or np.linalg.norm(dx) < 1e-9
