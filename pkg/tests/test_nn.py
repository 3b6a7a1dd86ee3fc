import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_conv_at_sites
from sparsekd.nn import (
    BatchNorm,
    Linear,
    Module,
    Parameter,
    ReLU,
    SparseConv,
    SparseConvTranspose,
    concat,
    conv_backward,
    conv_forward,
    gradcheck,
    relu,
    residual_add,
    scattered_sites,
)
from sparsekd.sparse import CoordinateManager, SparseTensor, build_coordinate_map


def random_tensor(rng, n, channels, high=8, batches=1):
    coords = np.zeros((n, 4), np.int64)
    coords[:, 0] = rng.integers(0, batches, n)
    coords[:, 1:] = rng.integers(0, high, (n, 3))
    cmap, _ = build_coordinate_map(coords)
    return SparseTensor(rng.standard_normal((len(cmap), channels)), cmap)


def as64(layer):
    return layer.astype(np.float64)


# ---- convolution forward


def test_identity_one_by_one_conv():
    x = random_tensor(np.random.default_rng(0), 30, 4)
    conv = as64(SparseConv(4, 4, kernel_size=1))
    conv.weight.values[0] = np.eye(4)
    np.testing.assert_array_equal(conv(x).features, x.features)


def test_isolated_site_sees_only_centre():
    cmap, _ = build_coordinate_map(np.array([[0, 3, 3, 3]]))
    x = SparseTensor(np.array([[1.0, -2.0]]), cmap)
    conv = as64(SparseConv(2, 3, kernel_size=3))
    np.testing.assert_allclose(conv(x).features, x.features @ conv.weight.values[13], atol=0)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    x = random_tensor(rng, 50, 3, batches=2)
    conv = as64(SparseConv(3, 5, kernel_size=3, rng=rng))
    out = conv(x)
    km = x.manager.kernel_map(1, 1, 3)
    ref = dense_conv_at_sites(x.coords, x.features, conv.weight.values, km.offsets, out.coords, 1)
    np.testing.assert_allclose(out.features, ref, atol=1e-12)


def test_strided_and_transposed_match_dense_oracle():
    rng = np.random.default_rng(7)
    x = random_tensor(rng, 80, 2, high=12)
    down = as64(SparseConv(2, 4, kernel_size=2, stride=2, rng=rng))
    y = down(x)
    km = x.manager.kernel_map(1, 2, 2)
    np.testing.assert_allclose(
        y.features, dense_conv_at_sites(x.coords, x.features, down.weight.values, km.offsets, y.coords, 1), atol=1e-12
    )
    up = as64(SparseConvTranspose(4, 3, kernel_size=2, stride=2, rng=rng))
    z = up(y)
    assert z.cmap is x.cmap
    kt = x.manager.kernel_map(2, 1, 2, transposed=True)
    np.testing.assert_allclose(
        z.features, dense_conv_at_sites(y.coords, y.features, up.weight.values, kt.offsets, z.coords, 1, sign=-1),
        atol=1e-12,
    )


def test_channel_mismatch():
    x = random_tensor(np.random.default_rng(1), 10, 3)
    with pytest.raises(ValueError, match="channel mismatch"):
        SparseConv(4, 2)(x)


def test_forward_is_bitwise_repeatable():
    x = random_tensor(np.random.default_rng(2), 40, 3)
    conv = SparseConv(3, 8)
    np.testing.assert_array_equal(conv(x).features, conv(x).features)


def test_he_init_scale():
    conv = SparseConv(16, 32, kernel_size=3, rng=np.random.default_rng(0))
    fan_in = 27 * 16
    assert conv.weight.shape == (27, 16, 32)
    assert abs(conv.weight.values.std() - np.sqrt(2 / fan_in)) < 0.05 * np.sqrt(2 / fan_in)


# ---- convolution backward


def test_zero_adjoint():
    x = random_tensor(np.random.default_rng(3), 20, 3)
    conv = as64(SparseConv(3, 2))
    km = x.manager.kernel_map(1, 1, 3)
    gx, gw = conv_backward(np.zeros((len(x), 2)), x.features, conv.weight.values, km)
    assert not gx.any() and not gw.any()


def test_scalar_chain_rule():
    cmap, _ = build_coordinate_map(np.array([[0, 0, 0, 0]]))
    x = SparseTensor(np.array([[1.5]]), cmap)
    km = x.manager.kernel_map(1, 1, 1)
    _, gw = conv_backward(np.array([[-2.0]]), x.features, np.array([[[0.7]]]), km)
    assert gw.item() == 1.5 * -2.0


def test_conv_adjoint_dot_product():
    rng = np.random.default_rng(4)
    x = random_tensor(rng, 60, 3, batches=2)
    km = x.manager.kernel_map(1, 1, 3)
    w = rng.standard_normal((27, 3, 4))
    g = rng.standard_normal((len(x), 4))
    dx = rng.standard_normal(x.features.shape)
    dw = rng.standard_normal(w.shape)
    gx, gw = conv_backward(g, x.features, w, km)
    # conv is bilinear: <g, d/dt conv(x + t dx, w + t dw)> at t=0
    lhs = np.sum(g * (conv_forward(dx, w, km) + conv_forward(x.features, dw, km)))
    rhs = np.sum(gx * dx) + np.sum(gw * dw)
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


@pytest.mark.parametrize("transposed", [False, True])
def test_strided_adjoint_dot_product(transposed):
    rng = np.random.default_rng(5)
    x = random_tensor(rng, 70, 2, high=10)
    mgr = x.manager
    km = mgr.kernel_map(2, 1, 2, True) if transposed else mgr.kernel_map(1, 2, 2)
    xin = rng.standard_normal((km.n_in, 2))
    w = rng.standard_normal((8, 2, 3))
    g = rng.standard_normal((km.n_out, 3))
    gx, gw = conv_backward(g, xin, w, km)
    dx, dw = rng.standard_normal(xin.shape), rng.standard_normal(w.shape)
    lhs = np.sum(g * (conv_forward(dx, w, km) + conv_forward(xin, dw, km)))
    assert abs(lhs - np.sum(gx * dx) - np.sum(gw * dw)) < 1e-8 * max(1.0, abs(lhs))


# ---- batch norm


def test_batchnorm_constant_input_gives_zeros():
    cmap, _ = build_coordinate_map(np.array([[0, i, 0, 0] for i in range(6)]))
    bn = as64(BatchNorm(2))
    out = bn(SparseTensor(np.full((6, 2), 3.0), cmap))
    np.testing.assert_array_equal(out.features, 0.0)


def test_batchnorm_eval_identity():
    x = random_tensor(np.random.default_rng(6), 30, 3)
    bn = as64(BatchNorm(3)).eval()
    np.testing.assert_allclose(bn(x).features, x.features / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_normalizes_active_sites():
    rng = np.random.default_rng(7)
    x = random_tensor(rng, 200, 4)
    x = x.replace(x.features * 5 + 3)
    out = as64(BatchNorm(4))(x).features
    np.testing.assert_allclose(out.mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(0), 1, atol=1e-3)  # eps shrinks variance by var/(var+eps)
    np.testing.assert_allclose(out.var(0), x.features.var(0) / (x.features.var(0) + 1e-5), atol=1e-6)


def test_batchnorm_running_stats():
    rng = np.random.default_rng(8)
    x = random_tensor(rng, 50, 2)
    bn = as64(BatchNorm(2, momentum=0.1))
    bn(x)
    f = x.features
    np.testing.assert_allclose(bn.running_mean, 0.1 * f.mean(0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * f.var(0, ddof=1))


def test_batchnorm_adjoint_eval_and_train():
    rng = np.random.default_rng(9)
    x = random_tensor(rng, 40, 3)
    for training in (True, False):
        bn = as64(BatchNorm(3))
        bn.running_mean[...] = rng.standard_normal(3)
        bn.running_var[...] = rng.uniform(0.5, 2, 3)
        bn.track_running_stats = False
        bn.weight.values = rng.standard_normal(3)
        bn.train(training)
        g = rng.standard_normal(x.features.shape)
        bn(x)
        gx = bn.backward(g)
        d = rng.standard_normal(x.features.shape)
        eps = 1e-6
        num = (np.sum(g * bn(x.replace(x.features + eps * d)).features) - np.sum(g * bn(x.replace(x.features - eps * d)).features)) / (2 * eps)
        assert abs(num - np.sum(gx * d)) < 1e-6 * max(1, abs(num))


# ---- pointwise ops


def test_relu_values_and_mask():
    assert relu(np.array([-1.0, 2.0, 0.0])).tolist() == [0.0, 2.0, 0.0]
    cmap, _ = build_coordinate_map(np.array([[0, i, 0, 0] for i in range(3)]))
    r = ReLU()
    r(SparseTensor(np.array([[-1.0], [2.0], [0.0]]), cmap))
    assert r.backward(np.ones((3, 1)))[:, 0].tolist() == [0.0, 1.0, 0.0]


def test_residual_add_and_concat():
    x = random_tensor(np.random.default_rng(10), 20, 3)
    np.testing.assert_array_equal(residual_add(x, x.replace(np.zeros_like(x.features))).features, x.features)
    assert concat(x, x).shape == (len(x), 6)
    other = random_tensor(np.random.default_rng(11), 20, 3)
    with pytest.raises(ValueError, match="coordinate map mismatch"):
        residual_add(x, other)


def test_linear_adjoint():
    rng = np.random.default_rng(12)
    x = random_tensor(rng, 25, 4)
    lin = as64(Linear(4, 3, rng=rng))
    lin.bias.values = rng.standard_normal(3)
    g = rng.standard_normal((len(x), 3))
    lin(x)
    gx = lin.backward(g)
    np.testing.assert_allclose(gx, g @ lin.weight.values.T)
    np.testing.assert_allclose(lin.weight.grad, x.features.T @ g)
    np.testing.assert_allclose(lin.bias.grad, g.sum(0))


# ---- module plumbing and gradcheck


class TwoLayer(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.conv1 = SparseConv(3, 4, rng=rng)
        self.bn = BatchNorm(4)
        self.relu = ReLU()
        self.conv2 = SparseConv(4, 2, kernel_size=1, bias=True, rng=rng)

    def forward(self, x):
        return self.conv2(self.relu(self.bn(self.conv1(x))))

    def backward(self, g):
        return self.conv1.backward(self.bn.backward(self.relu.backward(self.conv2.backward(g))))


def five_sites():
    cmap, _ = build_coordinate_map(np.array([[0, 0, 0, 0], [0, 1, 0, 0], [0, 1, 1, 0], [0, 3, 2, 1], [0, 2, 2, 2]]))
    return SparseTensor(np.random.default_rng(1).standard_normal((5, 3)), cmap)


def test_gradcheck_two_layer_net():
    net = TwoLayer().astype(np.float64)
    report = gradcheck(net, five_sites())
    assert report.ok, report.format()
    assert {t.name for t in report.tensors} >= {"conv1.weight", "bn.weight", "bn.bias", "conv2.weight", "conv2.bias", "input"}


def test_gradcheck_frozen_parameter_exact_zero():
    net = TwoLayer().astype(np.float64)
    net.conv1.weight.frozen = True
    report = gradcheck(net, five_sites())
    frozen = [t for t in report.tensors if t.name == "conv1.weight"][0]
    assert frozen.max_abs_err == 0.0 and report.ok
    assert not net.conv1.weight.grad.any()


def test_gradcheck_detects_a_wrong_backward():
    class Broken(TwoLayer):
        def backward(self, g):
            return 2 * super().backward(g)

    report = gradcheck(Broken().astype(np.float64), five_sites())
    assert not report.ok
    assert [t.name for t in report.failures()] == ["input"]


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        gradcheck(TwoLayer(), five_sites().replace(np.zeros((5, 3), np.float32)))


def test_gradcheck_restores_state():
    net = TwoLayer().astype(np.float64)
    before = {k: v.copy() for k, v in net.state_dict().items()}
    gradcheck(net, five_sites())
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert net.bn.track_running_stats


def test_scattered_sites_spread():
    x = scattered_sites(20, seed=3)
    assert len(x) == 20 and x.features.dtype == np.float64
    mgr = CoordinateManager(x.cmap)
    assert len(mgr.coords_at(16)) > 1


def test_parameter_naming_and_state_dict_roundtrip():
    net = TwoLayer()
    names = [n for n, _ in net.named_parameters()]
    assert names == ["conv1.weight", "bn.weight", "bn.bias", "conv2.weight", "conv2.bias"]
    assert [n for n, _ in net.named_buffers()] == ["bn.running_mean", "bn.running_var"]
    other = TwoLayer()
    for p in other.parameters():
        p.values = p.values + 1
    other.load_state_dict(net.state_dict())
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, net.state_dict()[k])


def test_load_state_dict_names_bad_tensor():
    net = TwoLayer()
    state = net.state_dict()
    state["conv2.weight"] = np.zeros((1, 4, 5))
    with pytest.raises(ValueError, match="conv2.weight"):
        net.load_state_dict(state)
    del state["conv2.weight"]
    with pytest.raises(KeyError, match="conv2.weight"):
        net.load_state_dict(state)


def test_parameter_accumulate_checks_shape_and_freeze():
    p = Parameter(np.zeros(3))
    p.accumulate(np.ones(3))
    p.accumulate(np.ones(3))
    assert p.grad.tolist() == [2, 2, 2]
    with pytest.raises(ValueError):
        p.accumulate(np.ones(4))
    p.frozen = True
    p.accumulate(np.ones(3))
    assert p.grad.tolist() == [2, 2, 2]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 4))
def test_conv_dense_equivalence_property(seed, cin, cout):
    rng = np.random.default_rng(seed)
    x = random_tensor(rng, int(rng.integers(1, 40)), cin, high=6, batches=2)
    w = rng.standard_normal((27, cin, cout))
    km = x.manager.kernel_map(1, 1, 3)
    ref = dense_conv_at_sites(x.coords, x.features, w, km.offsets, x.coords, 1)
    np.testing.assert_allclose(conv_forward(x.features, w, km), ref, atol=1e-10)
