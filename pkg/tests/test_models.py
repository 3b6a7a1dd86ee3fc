import numpy as np
import pytest

from sparsekd.models import (
    BASE_PLANES,
    BLOCK_COUNTS,
    ArchSpec,
    build_res16unet,
    forward_tapped,
    param_count,
    parse_arch,
)
from sparsekd.nn import SparseConv, gradcheck, scattered_sites
from sparsekd.sparse import SparseTensor, build_coordinate_map


def scene_tensor(seed=0, n=300, high=40, batches=2, dtype=np.float32):
    rng = np.random.default_rng(seed)
    coords = np.zeros((n, 4), np.int64)
    coords[:, 0] = rng.integers(0, batches, n)
    coords[:, 1:] = rng.integers(0, high, (n, 3))
    cmap, _ = build_coordinate_map(coords)
    return SparseTensor(rng.standard_normal((len(cmap), 3)).astype(dtype), cmap)


def closed_form_count(spec: ArchSpec) -> int:
    """Trainable parameters derived from the layer recipe, without building anything."""

    def conv_bn(cin, cout, k):
        return k**3 * cin * cout + 2 * cout

    def block(cin, cout):
        return conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3) + (conv_bn(cin, cout, 1) if cin != cout else 0)

    def stage(cin, cout, n):
        return block(cin, cout) + (n - 1) * block(cout, cout)

    p, n, init = spec.planes, spec.block_counts, spec.init_dim
    total = conv_bn(spec.in_channels, init, 3)
    prev = init
    for i in range(4):
        total += conv_bn(prev, prev, 2) + stage(prev, p[i], n[i])
        prev = p[i]
    skips = (p[2], p[1], p[0], init)
    for j, skip in zip(range(4, 8), skips):
        total += conv_bn(prev, p[j], 2) + stage(p[j] + skip, p[j], n[j])
        prev = p[j]
    return total + p[7] * spec.num_classes + spec.num_classes


def test_planes_per_divisor():
    assert ArchSpec(width_divisor=1).planes == (32, 64, 128, 256, 256, 128, 96, 96)
    assert ArchSpec(width_divisor=2).planes == (16, 32, 64, 128, 128, 64, 48, 48)
    assert ArchSpec(width_divisor=4).planes == (8, 16, 32, 64, 64, 32, 24, 24)
    assert len(BASE_PLANES) == len(BLOCK_COUNTS) == 8


def test_invalid_divisors():
    with pytest.raises(ValueError, match="zero-width"):
        ArchSpec(width_divisor=64)
    with pytest.raises(ValueError, match="does not divide"):
        ArchSpec(width_divisor=3)
    with pytest.raises(ValueError):
        ArchSpec(width_divisor=0)


def test_parse_arch_names():
    assert parse_arch("Res16UNet34C").width_divisor == 1
    assert parse_arch("Res16UNet34C_Half").width_divisor == 2
    assert parse_arch("Res16UNet34C_Quarter").width_divisor == 4
    assert parse_arch("Res16UNet34C@divisor=8").name == "Res16UNet34C@divisor=8"
    with pytest.raises(ValueError):
        parse_arch("ResNet50")
    spec = parse_arch("Res16UNet34C_Half", num_classes=6)
    assert ArchSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("divisor", [1, 2, 4, 8])
def test_param_count_matches_closed_form(divisor):
    spec = ArchSpec(width_divisor=divisor)
    assert param_count(build_res16unet(spec)).trainable == closed_form_count(spec)


def test_param_count_scaling_and_absolute():
    counts = {d: closed_form_count(ArchSpec(width_divisor=d)) for d in (1, 2, 4)}
    assert 3.8 <= counts[1] / counts[2] <= 4.4
    assert 15.5 <= counts[1] / counts[4] <= 18.5
    for d in (1, 2):
        assert 3.5 <= counts[d] / counts[2 * d] <= 4.5
    assert abs(counts[1] - 39.7e6) / 39.7e6 < 0.15


def test_single_conv_count():
    assert param_count(SparseConv(4, 8, kernel_size=1)).trainable == 32
    assert param_count(SparseConv(4, 8, kernel_size=1, bias=True)).trainable == 40


def test_total_includes_running_stats():
    net = build_res16unet(ArchSpec(width_divisor=8))
    pc = param_count(net)
    bn_channels = sum(b.size for _, b in net.named_buffers())
    assert pc.total == pc.trainable + bn_channels


def test_tapped_output_shapes():
    net = build_res16unet(ArchSpec(width_divisor=2, num_classes=20))
    x = scene_tensor()
    out = forward_tapped(net, x, training=False)
    assert out.logits.shape == (len(x), 20)
    assert out.logits.cmap is x.cmap
    assert out.encoder_tap.shape[1] == 128 and out.encoder_tap.stride == 16
    assert out.decoder_tap.shape[1] == 48 and out.decoder_tap.stride == 1


def test_teacher_and_student_share_coordinate_maps():
    teacher = build_res16unet(ArchSpec(width_divisor=1, num_classes=5))
    student = build_res16unet(ArchSpec(width_divisor=2, num_classes=5))
    x_t, x_s = scene_tensor(3), scene_tensor(3)
    t, s = teacher.forward_tapped(x_t), student.forward_tapped(x_s)
    np.testing.assert_array_equal(t.encoder_tap.coords, s.encoder_tap.coords)
    for stride in (1, 2, 4, 8, 16):
        np.testing.assert_array_equal(x_t.manager.coords_at(stride).coords, x_s.manager.coords_at(stride).coords)


def test_input_validation():
    net = build_res16unet(ArchSpec(width_divisor=8))
    x = scene_tensor()
    with pytest.raises(ValueError):
        net.forward(x.replace(np.zeros((len(x), 4), np.float32)))


def test_seeded_init_is_deterministic():
    a = build_res16unet(ArchSpec(width_divisor=8), seed=3).state_dict()
    b = build_res16unet(ArchSpec(width_divisor=8), seed=3).state_dict()
    c = build_res16unet(ArchSpec(width_divisor=8), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["stem.layers.0.weight"], c["stem.layers.0.weight"])


def test_tap_gradients_flow():
    net = build_res16unet(ArchSpec(width_divisor=8, num_classes=4)).astype(np.float64)
    x = scene_tensor(5, dtype=np.float64)
    out = net.forward_tapped(x)
    net.zero_grad()
    gx = net.backward(np.zeros(out.logits.shape), grad_encoder=np.ones(out.encoder_tap.shape))
    assert not net.classifier.weight.grad.any()
    assert not net.block8.layers[0].conv1.weight.grad.any()
    assert net.block4.layers[0].conv1.weight.grad.any() and gx.any()


def test_small_network_gradcheck():
    spec = ArchSpec(width_divisor=16, num_classes=3)
    net = build_res16unet(spec, seed=1).astype(np.float64)
    report = gradcheck(net, scattered_sites(16, seed=2), entries=1)
    assert report.ok, report.format()
