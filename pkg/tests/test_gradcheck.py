import numpy as np
import pytest

from roidepth import gradcheck as gc
from roidepth.certify import CHECKS, run_check
from roidepth.tensor import Parameter, bilinear_sample, bilinear_sample_backward, softmax


def test_square_exact():
    x = np.array([3.0])
    (g,) = gc.finite_diff_gradient(lambda: float(x[0] ** 2), [x])
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_softmax_sum_is_constant():
    x = np.random.default_rng(0).normal(size=5)
    (g,) = gc.finite_diff_gradient(lambda: float(softmax(x).sum()), [x])
    np.testing.assert_allclose(g, 0.0, atol=1e-8)


def test_parameter_perturbed_in_place():
    p = Parameter(np.array([1.0, 2.0]))
    (g,) = gc.finite_diff_gradient(lambda: float((p.value**3).sum()), [p])
    np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-8)
    np.testing.assert_array_equal(p.value, [1.0, 2.0])


def test_requires_float64():
    with pytest.raises(TypeError):
        gc.finite_diff_gradient(lambda: 0.0, [np.zeros(2, dtype=np.float32)])


def test_compare_identical_passes():
    a = np.random.default_rng(1).normal(size=(3, 3))
    assert gc.compare_gradients(a, a.copy()).passed


def test_compare_reports_error():
    rep = gc.compare_gradients(np.array([1.0]), np.array([1.1]))
    assert not rep.passed
    assert rep.max_abs_error == pytest.approx(0.1)
    assert rep.worst_index == (0,)


def test_subsampled_entries_are_skipped():
    x = np.random.default_rng(2).normal(size=50)
    rep = gc.check("cube", lambda: float((x**3).sum()), [x], [3 * x**2], max_entries=7)
    assert rep.passed and rep.checked == 7


def test_bilinear_backward_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        feat = rng.normal(size=(2, 4, 5))
        while True:
            coords = rng.uniform(-1.5, 5.5, size=(6, 2))
            if gc.min_boundary_distance(coords) >= gc.BOUNDARY_MARGIN:
                break
        r = rng.normal(size=(2, 6))
        gf, gcoord = bilinear_sample_backward(feat, coords, r)
        rep = gc.check("bilinear", lambda: float((bilinear_sample(feat, coords) * r).sum()), [feat, coords], [gf, gcoord])
        assert rep.passed, (seed, rep.row())


def test_boundary_distance():
    assert gc.min_boundary_distance(np.array([[0.25, 3.9]])) == pytest.approx(0.1)


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_every_op_single_seed(name):
    rep = run_check(name, seed=1234)
    assert rep.passed, "\n".join(d.row() for d in rep.details.values() if not d.passed)
