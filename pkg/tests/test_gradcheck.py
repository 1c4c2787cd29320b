import numpy as np
import pytest

from attnlab import ops
from attnlab.attention import Variant
from attnlab.gradcheck import gradcheck, numeric_grad, rel_error
from attnlab.tensor import Tensor
from attnlab.verify import gradcheck_attention, gradcheck_model, gradcheck_ops


def test_rel_error_floor():
    assert rel_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-5)
    assert rel_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_numeric_grad_of_quadratic(rng):
    p = Tensor(rng.normal(size=5))
    _, g = numeric_grad(lambda: ops.sum(ops.mul(p, p)), p)
    np.testing.assert_allclose(g, 2 * p.data, atol=1e-8)


def test_gradcheck_flags_a_wrong_gradient(rng):
    # a deliberately broken op: forward is x*x, backward claims 3x
    from attnlab.tensor import record

    def bad_square(x):
        return record("bad", x.data * x.data, (x,), lambda g: (3 * x.data * g,))

    x = Tensor(rng.normal(size=4) + 2.0)
    assert not gradcheck(lambda: ops.sum(bad_square(x)), {"x": x}).passed


def test_gradcheck_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        gradcheck(lambda: ops.sum(x), {"x": x})


def test_every_op_passes():
    for r in gradcheck_ops(seed=0):
        assert r.report.passed, (r.name, r.report.lines())


@pytest.mark.parametrize("variant", list(Variant))
def test_attention_variants_pass(variant):
    report = gradcheck_attention(variant, seed=1)
    assert report.passed, report.lines()


@pytest.mark.parametrize("variant", list(Variant))
def test_attention_without_memory(variant):
    report = gradcheck_attention(variant, seed=2, mem=0)
    assert report.passed, report.lines()


@pytest.mark.parametrize("variant", [Variant.MHA, Variant.RCMHA])
def test_micro_model_passes(variant):
    report = gradcheck_model(variant, seed=3)
    assert report.passed, report.lines()
