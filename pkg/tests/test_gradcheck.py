import numpy as np
import pytest

from latentcore import autodiff as ad
from latentcore.gradcheck import check_gradients, check_model, gradient_error


def test_gradient_error_semantics():
    err = gradient_error([1.0, 0.0, 1e-9, 100.0], [1.0 + 1e-5, 1e-7, 0.0, 101.0])
    np.testing.assert_allclose(err, [1e-5 / (1 + 1e-5), 1e-7 / 1e-2, 1e-9 / 1e-2, 1 / 101])
    assert gradient_error(0.0, 0.0) == 0.0


def test_smooth_function_passes(rng):
    x = ad.parameter(rng.standard_normal((3, 4)))
    w = ad.parameter(rng.standard_normal((2, 4)))
    y = rng.standard_normal((3, 2))

    def loss():
        return ad.frobenius_sq(ad.sub(ad.matmul(ad.mul(x, x), ad.transpose(w)), ad.constant(y)))

    rep = check_gradients(loss, [("x", x), ("w", w)])
    assert rep.passed and rep.max_error < 1e-7
    assert [p.checked for p in rep.params] == [12, 8]


def test_wrong_gradient_detected(rng):
    x = ad.parameter(rng.standard_normal(5))

    def loss():
        # value of sum(x^2) with a deliberately halved backward
        return ad._make(float((x.data ** 2).sum()), (x,), "bad",
                        lambda g: (x.data * g,))

    rep = check_gradients(loss, [("x", x)])
    assert not rep.passed
    assert rep.records()[-1].endswith("passed=false")


def test_kink_refinement(rng):
    # one coordinate sits 1e-7 from the relu kink: a 1e-5 stencil straddles it
    data = rng.standard_normal(6) + np.sign(rng.standard_normal(6)) * 0.5
    data[2] = 1e-7
    x = ad.parameter(data)
    rep = check_gradients(lambda: ad.sum_all(ad.relu(x)), [("x", x)], h=1e-5)
    assert rep.params[0].refined == 1
    assert rep.passed
    np.testing.assert_array_equal(x.data, data)


def test_coordinate_subset(rng):
    x = ad.parameter(rng.standard_normal(50))
    rep = check_gradients(lambda: ad.frobenius_sq(x), [("x", x)], max_coords=7, seed=3)
    assert rep.params[0].checked == 7 and rep.passed
    assert x.grad is None


def test_records_format(rng):
    x = ad.parameter(rng.standard_normal(2))
    lines = check_gradients(lambda: ad.frobenius_sq(x), [("x", x)]).records()
    assert lines[0].startswith("param=x size=2 checked=2 refined=0 max_rel_error=")
    assert lines[-1].startswith("max_rel_error=") and "tolerance=0.0001" in lines[-1]


@pytest.mark.parametrize("mode", ["source", "adapt"])
def test_tiny_model_passes(tiny_model, rng, mode):
    if mode == "adapt":
        tiny_model.freeze_cores()
    x = rng.random((3, 3, 8, 8))
    rep = check_model(tiny_model, "source", x, [0, 1, 2], mode=mode, max_coords=6)
    assert rep.passed, "\n".join(rep.records())
    assert all(not p.requires_grad for _, p in tiny_model.named_parameters())
