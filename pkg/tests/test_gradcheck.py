import numpy as np
import pytest

from src.autodiff.gradcheck import check_gradients
from src.autodiff.tensor import Tensor, gradient_reverse
from src.errors import GradientCheckError


def test_sum_of_squares_is_tight(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    report = check_gradients(lambda t: (t * t).sum(), [x], eps=1e-4)
    assert report.max_relative_error < 1e-6
    np.testing.assert_allclose(report.analytic[0], 2 * x.data)


def test_constant_function_has_zero_gradients(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    report = check_gradients(lambda t: Tensor(1.5), [x])
    assert report.passed
    np.testing.assert_array_equal(report.analytic[0], 0.0)
    np.testing.assert_array_equal(report.numeric[0], 0.0)


def test_non_positive_eps_is_rejected(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with pytest.raises(GradientCheckError):
        check_gradients(lambda t: t.sum(), [x], eps=0.0)


def test_non_scalar_function_is_rejected(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with pytest.raises(GradientCheckError):
        check_gradients(lambda t: t * 2.0, [x])


def test_reversed_path_matches_negated_finite_differences(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    w = Tensor(rng.normal(size=4), requires_grad=True)

    def f(a, b):
        return (gradient_reverse(a) * b).sum()

    assert not check_gradients(f, [x, w]).passed
    report = check_gradients(f, [x, w], reversed_inputs=[0])
    assert report.passed, report.flagged
    np.testing.assert_allclose(report.analytic[0], -report.numeric[0], rtol=1e-8)


def test_subsampled_entries_leave_others_unchecked(rng):
    x = Tensor(rng.normal(size=(10, 10)), requires_grad=True)
    report = check_gradients(lambda t: (t * t).sum(), [x], max_entries=5)
    assert report.passed
    assert np.sum(~np.isnan(report.numeric[0])) == 5


def test_wrong_gradient_is_flagged(rng):
    x = Tensor(rng.uniform(0.5, 1.0, size=3), requires_grad=True)

    def f(t):
        # forward is t*t; the reversed term adds 2 to the analytic gradient only
        return (gradient_reverse(t) * -1.0 + t * t + t).sum()

    report = check_gradients(f, [x])
    assert not report.passed
    assert {entry[0] for entry in report.flagged} == {0}
