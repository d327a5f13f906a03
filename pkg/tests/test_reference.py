"""Sanity checks on the naive reference implementations themselves."""

import math

import numpy as np
import pytest
import torch

from fusionprog.reference import (
    CheckResult,
    finite_difference_gradient,
    max_relative_gradient_error,
    naive_cross_entropy,
    naive_macro_f1,
    naive_supcon_pairwise,
    pairwise_auc,
    run_suites,
)


def test_naive_supcon_closed_form():
    v = np.ones(4) / 2.0
    x = np.tile(v, (4, 1))
    value, degenerate = naive_supcon_pairwise(x, x, [1, 1, 1, 1], 0.1, exclude_self=True)
    assert not degenerate
    assert value == pytest.approx(math.log(3), abs=1e-12)


def test_naive_supcon_degenerate():
    x = np.tile(np.ones(4) / 2.0, (2, 1))
    value, degenerate = naive_supcon_pairwise(x, x, [0, 1], 0.1, exclude_self=True)
    assert degenerate and value == 0.0


def test_naive_cross_entropy_uniform():
    assert naive_cross_entropy(np.zeros((5, 2)), [0, 1, 0, 1, 0]) == pytest.approx(math.log(2))


def test_pairwise_auc_hand_cases():
    assert pairwise_auc([0.9, 0.1], [1, 0]) == 1.0
    assert pairwise_auc([0.5, 0.5], [1, 0]) == 0.5
    assert pairwise_auc([0.3, 0.7, 0.3], [0, 1, 1]) == 0.75  # one tie, one win
    with pytest.raises(ValueError):
        pairwise_auc([0.1, 0.2], [1, 1])


def test_naive_macro_f1_hand_case():
    assert naive_macro_f1([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(1 / 3)


def test_finite_difference_on_quadratic():
    x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
    grad = finite_difference_gradient(lambda: (x**3).sum(), x)
    np.testing.assert_allclose(grad, 3 * x.detach().numpy() ** 2, rtol=1e-6)


def test_max_relative_error_flags_wrong_gradient():
    x = torch.tensor([0.5, 1.5], dtype=torch.float64, requires_grad=True)

    class Mismatched(torch.autograd.Function):
        @staticmethod
        def forward(ctx, value):
            ctx.save_for_backward(value)
            return (value**2).sum()

        @staticmethod
        def backward(ctx, grad_output):
            (value,) = ctx.saved_tensors
            return grad_output * 3.0 * value  # deliberately not 2x

    err = max_relative_gradient_error(lambda: Mismatched.apply(x), [x])
    assert err > 0.1


def test_run_suites_aggregates(monkeypatch):
    results, ok = run_suites(["metrics"])
    assert ok and all(isinstance(r, CheckResult) for r in results)
    assert all("[PASS]" in r.line() for r in results)
