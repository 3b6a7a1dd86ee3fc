import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_scores
from sparsekd.data import SceneParams, synthetic_split
from sparsekd.distill import DistillConfig
from sparsekd.models import ArchSpec, build_res16unet
from sparsekd.nn import Parameter
from sparsekd.train import (
    SUPERVISED,
    Checkpoint,
    CheckpointError,
    ConfusionMatrix,
    DataConfig,
    DivergenceError,
    OptimConfig,
    Optimizer,
    class_names,
    decode,
    encode,
    evaluate,
    export_model,
    fit,
    load_checkpoint,
    load_into_network,
    read_history,
    save_checkpoint,
    step_lr,
)

# ---- schedule and optimizer


def test_step_lr_examples():
    assert step_lr(0.1, 0.1, 30, 0) == 0.1
    assert step_lr(0.1, 0.1, 30, 29) == 0.1
    assert abs(step_lr(0.1, 0.1, 30, 30) - 0.01) < 1e-15
    assert abs(step_lr(0.1, 0.1, 30, 65) - 0.001) < 1e-15
    assert step_lr(0.05, 1.0, 1, 1000) == 0.05
    with pytest.raises(ValueError):
        step_lr(0.1, 0.1, 30, -1)


def test_optim_config_validation_and_roundtrip():
    for bad in ({"kind": "rmsprop"}, {"lr": -1.0}, {"gamma": 0.0}, {"step_size": 0}):
        with pytest.raises(ValueError):
            OptimConfig(**bad)
    cfg = OptimConfig(kind="adam", lr=1e-3)
    assert OptimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_zero_grad_clears():
    p = Parameter(np.ones(3))
    p.grad[:] = 5
    Optimizer([("p", p)], OptimConfig()).zero_grad()
    assert not p.grad.any()


def test_scalar_sgd_step():
    p = Parameter(np.array([1.0]))
    opt = Optimizer([("p", p)], OptimConfig(momentum=0.9, weight_decay=0.0))
    p.grad[:] = 2.0
    opt.step(0.1)
    assert p.values[0] == pytest.approx(0.8)
    opt.step(0.1)  # buffer 0.9*2 + 2
    assert p.values[0] == pytest.approx(0.8 - 0.38)


@pytest.mark.parametrize("kind", ["sgd_momentum", "adam"])
def test_quadratic_convergence(kind):
    target = np.array([3.0, -2.0, 0.5])
    p = Parameter(np.zeros(3))
    opt = Optimizer([("p", p)], OptimConfig(kind=kind, weight_decay=0.0))
    lr = 0.05 if kind == "sgd_momentum" else 0.1
    for _ in range(500):
        opt.zero_grad()
        p.grad += 2 * (p.values - target)
        opt.step(lr)
    np.testing.assert_allclose(p.values, target, atol=1e-3)


def test_divergence_names_parameter():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    b.grad[1] = np.nan
    opt = Optimizer([("block3.conv1.weight", a), ("block4.bn.gamma", b)], OptimConfig())
    with pytest.raises(DivergenceError, match="block4.bn.gamma"):
        opt.step(0.1)
    assert np.all(a.values == 1.0)


def test_frozen_parameters_untouched():
    p = Parameter(np.ones(2))
    p.frozen = True
    p.grad[:] = 1
    Optimizer([("p", p)], OptimConfig()).step(0.1)
    assert np.all(p.values == 1.0)


# ---- metrics


def test_two_class_confusion_example():
    cm = ConfusionMatrix(2, np.array([[3, 1], [1, 3]]))
    np.testing.assert_allclose(cm.iou(), [0.6, 0.6])
    assert cm.miou() == pytest.approx(0.6) and cm.macc() == pytest.approx(0.75)


def test_ignored_points_skipped():
    cm = ConfusionMatrix(3).update(np.array([0, 1, 2]), np.array([0, 255, 255]))
    assert cm.total == 1
    assert cm.miou() == 1.0 and np.isnan(cm.iou()[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(1, 200))
def test_scores_match_brute_force(seed, k, n):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, k, n)
    gt[rng.random(n) < 0.1] = 255
    pred = rng.integers(0, k, n)
    if (gt == 255).all():
        return
    cm = ConfusionMatrix(k).update(pred, gt)
    miou, macc = brute_force_scores(pred, gt, k)
    assert cm.miou() == miou and cm.macc() == macc


def test_batch_order_invariance():
    rng = np.random.default_rng(0)
    gt, pred = rng.integers(0, 5, 1000), rng.integers(0, 5, 1000)
    whole = ConfusionMatrix(5).update(pred, gt)
    parts = ConfusionMatrix(5)
    for idx in np.array_split(rng.permutation(1000), 7)[::-1]:
        parts = parts + ConfusionMatrix(5).update(pred[idx], gt[idx])
    np.testing.assert_array_equal(whole.counts, parts.counts)


def test_class_names():
    assert len(class_names(20)) == 20 and class_names(20)[0] == "bathtub"
    assert class_names(6)[0] == "floor"
    assert class_names(8)[-1] == "class_7"


def test_table_renders_percentages():
    from sparsekd.train import result_from_confusion

    text = result_from_confusion(ConfusionMatrix(2, np.array([[3, 1], [1, 3]]))).table()
    assert "60.0%" in text and "75.0%" in text


# ---- checkpoints


def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {"model/w": rng.standard_normal((3, 4)).astype(np.float32), "optim/m": rng.standard_normal(5),
         "ids": np.arange(4), "flag": np.array([True, False])},
        {"epoch": 3, "arch": None},
    )


def test_checkpoint_roundtrip_bytes(tmp_path):
    ckpt = sample_checkpoint()
    save_checkpoint(tmp_path / "a.skd", ckpt)
    back = load_checkpoint(tmp_path / "a.skd")
    assert back.meta == ckpt.meta
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "b.skd", back)
    assert (tmp_path / "a.skd").read_bytes() == (tmp_path / "b.skd").read_bytes()


def test_corruption_reports_offset():
    data = bytearray(encode(sample_checkpoint()))
    data[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="offset"):
        decode(bytes(data))
    with pytest.raises(CheckpointError, match="offset"):
        decode(bytes(data[:60]))
    with pytest.raises(CheckpointError, match="bad magic"):
        decode(b"PK\x03\x04" + bytes(data[4:]))


def test_version_mismatch():
    data = bytearray(encode(sample_checkpoint()))
    struct.pack_into("<I", data, 4, 99)
    with pytest.raises(CheckpointError, match="version 99"):
        decode(bytes(data))


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="complex"):
        encode(Checkpoint({"z": np.zeros(2, np.complex128)}))


def test_wrong_width_names_first_tensor():
    small = build_res16unet(ArchSpec(width_divisor=8, num_classes=4))
    big = build_res16unet(ArchSpec(width_divisor=4, num_classes=4))
    ckpt = Checkpoint({f"model/{k}": v for k, v in big.state_dict().items()}, {"arch": big.spec.to_dict()})
    first = next(iter(small.state_dict()))
    with pytest.raises(ValueError, match=first.replace(".", r"\.")):
        load_into_network(ckpt, small)


# ---- training loop


@pytest.fixture(scope="module")
def tiny():
    return synthetic_split(0, 4, 2, SceneParams(classes=4, points_per_class=80))


def student(seed=0, divisor=8):
    return build_res16unet(ArchSpec(width_divisor=divisor, num_classes=4), seed=seed)


BATCH = DataConfig(batch_size=2)


def test_zero_lr_keeps_parameters(tiny):
    net = student()
    before = [p.values.copy() for p in net.parameters()]
    fit(net, *tiny, OptimConfig(lr=0.0), 1, data=BATCH)
    assert all(np.array_equal(a, p.values) for a, p in zip(before, net.parameters()))


def test_fit_is_deterministic(tiny, tmp_path):
    cfg = OptimConfig(lr=0.05)
    a = fit(student(), *tiny, cfg, 2, seed=3, data=BATCH, run_dir=tmp_path / "a")
    b = fit(student(), *tiny, cfg, 2, seed=3, data=BATCH, run_dir=tmp_path / "b")
    assert encode(a.checkpoint) == encode(b.checkpoint)
    for name in ("history.jsonl", "checkpoint.skd", "model.skd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    hist = read_history(tmp_path / "a" / "history.jsonl")
    assert [h["epoch"] for h in hist] == [1, 2] and hist == a.history
    assert set(load_checkpoint(tmp_path / "a" / "model.skd").tensors) == {f"model/{k}" for k in student().state_dict()}


def test_alpha_one_without_fm_is_supervised(tiny):
    cfg = OptimConfig(lr=0.05)
    plain = fit(student(), *tiny, cfg, 2, seed=1, data=BATCH)
    teacher = student(seed=9, divisor=4)
    with_teacher = fit(student(), *tiny, cfg, 2, seed=1, data=BATCH, teacher=teacher,
                       distill_cfg=DistillConfig(alpha=1.0, temperature=3.0))
    assert export_model(plain.checkpoint).tensors.keys() == export_model(with_teacher.checkpoint).tensors.keys()
    for k, v in export_model(plain.checkpoint).tensors.items():
        assert v.tobytes() == with_teacher.checkpoint.tensors[k].tobytes()
    assert plain.history == with_teacher.history


def test_resume_matches_uninterrupted(tiny, tmp_path):
    cfg = OptimConfig(lr=0.05, step_size=2, gamma=0.5)
    teacher = student(seed=9, divisor=4)
    dcfg = DistillConfig(alpha=0.5, temperature=2.0, lambda_dec=1.0, lambda_enc=0.5)
    data = DataConfig(batch_size=2, mix_prob=0.5)
    full = fit(student(), *tiny, cfg, 3, seed=2, teacher=teacher, distill_cfg=dcfg, data=data)
    part = fit(student(), *tiny, cfg, 1, seed=2, teacher=teacher, distill_cfg=dcfg, data=data, run_dir=tmp_path)
    resumed = fit(student(), *tiny, cfg, 3, seed=2, teacher=teacher, distill_cfg=dcfg, data=data,
                  resume=load_checkpoint(tmp_path / "checkpoint.skd"))
    assert part.history == full.history[:1]
    assert encode(resumed.checkpoint) == encode(full.checkpoint)


def test_distill_requires_teacher(tiny):
    with pytest.raises(ValueError, match="teacher"):
        fit(student(), *tiny, OptimConfig(), 1, distill_cfg=DistillConfig(alpha=0.5))
    with pytest.raises(ValueError, match="class counts"):
        fit(student(), *tiny, OptimConfig(), 1, teacher=build_res16unet(ArchSpec(width_divisor=8, num_classes=5)),
            distill_cfg=DistillConfig(alpha=0.5))


def test_evaluate_restores_mode(tiny):
    net = student().train()
    train, val = tiny
    res = evaluate(net, val.voxelized(0.05))
    assert net.training and 0.0 <= res.miou <= 1.0


def test_supervised_constant():
    assert not SUPERVISED.uses_teacher
