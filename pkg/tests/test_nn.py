"""Module layer: parameter registration, initializers, layer math."""

import numpy as np
import pytest

from skiff.nn import Conv1x1, Conv2d, Linear, Module, Scalar
from skiff.rng import Rng
from skiff.tensor import Tensor, finite_diff_check, mul, reduce_sum


def test_linear_is_wx_plus_b():
    rng = Rng(1)
    lin = Linear(3, 2, rng)
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = lin(Tensor(x)).data
    assert np.allclose(out, lin.weight.data @ x + lin.bias.data)


def test_linear_uniform_init_range():
    lin = Linear(64, 32, Rng(2))
    bound = 1 / np.sqrt(64)
    assert lin.weight.data.min() >= -bound and lin.weight.data.max() <= bound
    # spread should actually fill the interval, not collapse near zero
    assert lin.weight.data.std() > bound / 4


def test_linear_identity_and_zero_init():
    ident = Linear(5, 5, init="identity")
    assert np.array_equal(ident.weight.data, np.eye(5))
    zero = Linear(4, 6, init="zero")
    assert not zero.weight.data.any()
    x = np.ones((5, 2))
    assert np.allclose(ident(Tensor(x)).data, x)


def test_linear_no_bias():
    lin = Linear(3, 3, init="identity", bias=False)
    names = [n for n, _ in lin.named_parameters()]
    assert names == ["weight"]


def test_conv2d_center_identity_init():
    conv = Conv2d(4, 4, 3, padding=1, init="center_identity")
    x = Rng(3).normals(4 * 6 * 6).reshape(4, 6, 6)
    out = conv(Tensor(x)).data
    assert np.allclose(out, x)


def test_conv1x1_is_pixelwise_linear():
    rng = Rng(4)
    conv = Conv1x1(3, 2, rng)
    x = Rng(5).normals(3 * 4 * 4).reshape(3, 4, 4)
    out = conv(Tensor(x)).data
    w = conv.inner.weight.data.reshape(2, 3)
    b = conv.inner.bias.data.reshape(2, 1)
    ref = (w @ x.reshape(3, 16) + b).reshape(2, 4, 4)
    assert np.allclose(out, ref)


def test_named_parameters_recurse_containers():
    class Leaf(Module):
        def __init__(self):
            self.w = Tensor(np.zeros(2), requires_grad=True)

    class Nest(Module):
        def __init__(self):
            self.direct = Tensor(np.zeros(1), requires_grad=True)
            self.items = [Leaf(), Leaf()]
            self.grid = [[Leaf()], [Leaf(), Leaf()]]
            self.pair = (Leaf(), Scalar(0.5))

    names = sorted(n for n, _ in Nest().named_parameters())
    assert "direct" in names
    assert "items.0.w" in names and "items.1.w" in names
    assert "grid.1.1.w" in names
    assert "pair.0.w" in names and "pair.1.value" in names
    assert len(names) == 8


def test_parameters_are_unique_objects():
    lin = Linear(8, 8, Rng(6))
    params = list(lin.parameters())
    assert len(params) == len({id(p) for p in params})


def test_scalar_module():
    s = Scalar(2.5)
    assert s().shape == ()
    assert float(s().data) == 2.5


def test_conv2d_grad():
    conv = Conv2d(2, 3, 3, Rng(7))
    x = Tensor(Rng(8).normals(2 * 5 * 5).reshape(2, 5, 5), requires_grad=True)

    def fn():
        return reduce_sum(mul(conv(x), 0.3))

    params = dict(conv.named_parameters())
    params["x"] = x
    rep = finite_diff_check(fn, params, max_coords=20)
    assert rep.passed, rep.failures[:2]


def test_bad_init_name_rejected():
    with pytest.raises(ValueError):
        Linear(3, 3, init="xavier")
