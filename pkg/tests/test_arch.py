import math

import numpy as np
import pytest

from modrec import layers as L
from modrec.arch import (
    ARCH_IDS,
    ArchitectureSpec,
    LayerSpec,
    ShortcutSpec,
    build,
    default_spec,
    forward,
    forward_classify,
    lstm_params,
    param_count,
    param_shapes,
    residual_block,
)
from modrec.errors import ConfigError, ShapeError
from modrec.tensor import Rng


def enumerate_cnn2_params(num_classes=10):
    """Per-layer count written out independently of the shape-inference code."""
    conv1 = 256 * (1 * 3 * 1) + 256
    conv2 = 80 * (2 * 3 * 256) + 80
    dense1 = (80 * 1 * 128) * 128 + 128
    dense2 = 128 * num_classes + num_classes
    return conv1 + conv2 + dense1 + dense2


def test_cnn2_param_count():
    assert enumerate_cnn2_params() == 1_436_122
    assert param_count(default_spec("cnn2")) == 1_436_122


def test_single_dense_param_count():
    spec = ArchitectureSpec("tiny", (LayerSpec("dense", 3, activation="linear"),), num_classes=3, input_shape=(1, 2))
    assert param_count(spec) == 9


def test_empty_spec_rejected():
    with pytest.raises(ConfigError):
        param_count(ArchitectureSpec("cnn2", ()))


def test_build_is_deterministic():
    a = build(default_spec("cnn2"), 7)
    b = build(default_spec("cnn2"), 7)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_init_policy():
    net = build(default_spec("cldnn"), 3)
    w = net.params["conv0.w"]
    limit = math.sqrt(6.0 / (1 * 3 + 256 * 3))
    assert np.abs(w).max() <= limit
    assert np.all(net.params["conv0.b"] == 0)
    (p,) = lstm_params(net)
    assert p.units == 50
    np.testing.assert_array_equal(p.bias[50:100], 1.0)
    assert np.all(p.bias[:50] == 0) and np.all(p.bias[100:] == 0)


def test_cldnn_has_one_50_unit_lstm_between_conv_and_dense():
    kinds = [l.kind for l in default_spec("cldnn").layers]
    assert kinds.count("lstm") == 1
    k = kinds.index("lstm")
    assert kinds[k - 1] == "conv" and kinds[k + 1] == "dense"
    assert default_spec("cldnn").layers[k].units == 50


def test_cldnn_rejects_other_lstm_width():
    spec = default_spec("cldnn")
    layers = list(spec.layers)
    layers[4] = LayerSpec("lstm", 40, activation="linear")
    with pytest.raises(ConfigError):
        param_count(ArchitectureSpec("cldnn", tuple(layers)))


def test_resnet_shortcut_spans_two_convs():
    spec = default_spec("resnet4")
    (sc,) = spec.shortcuts
    assert sc.dest - sc.source == 2
    with pytest.raises(ConfigError):
        param_count(ArchitectureSpec("resnet4", spec.layers, (ShortcutSpec(0, 1),)))


def test_densenet_channel_growth():
    spec = default_spec("densenet4")
    shapes = param_shapes(spec)
    widths = [l.units for l in spec.layers if l.kind == "conv"]
    for i in range(4):
        assert shapes[f"conv{i}.w"][1] == 1 + sum(widths[:i])


def test_densenet_requires_dense_connectivity():
    spec = default_spec("densenet4")
    with pytest.raises(ConfigError):
        param_count(ArchitectureSpec("densenet4", spec.layers))


def test_spec_json_round_trip():
    for arch in ARCH_IDS:
        spec = default_spec(arch)
        assert ArchitectureSpec.from_json(spec.to_json()) == spec


def test_spec_json_malformed():
    with pytest.raises(ConfigError):
        ArchitectureSpec.from_json('{"layers": []}')


@pytest.mark.parametrize("arch", ARCH_IDS)
def test_forward_gives_probability_vector(arch):
    net = build(default_spec(arch), 1)
    frame = Rng(2).normal(size=(2, 128))
    p = forward_classify(net, frame)
    assert p.shape == (10,)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert np.all(p >= 0)


@pytest.mark.parametrize("arch", ARCH_IDS)
def test_forward_is_pure_in_eval_mode(arch):
    net = build(default_spec(arch), 1)
    zero = np.zeros((2, 128), np.float32)
    assert np.array_equal(forward_classify(net, zero), forward_classify(net, zero))


def test_forward_rejects_bad_frame():
    net = build(default_spec("cnn2"), 0)
    with pytest.raises(ShapeError):
        forward_classify(net, np.zeros((2, 64)))


def test_batched_forward_matches_single_frames():
    net = build(default_spec("cldnn"), 0)
    frames = Rng(1).normal(size=(3, 2, 128)).astype(np.float32)
    batch = forward(net, frames)
    for k in range(3):
        np.testing.assert_allclose(batch[k], forward(net, frames[k]), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("arch,seeds", [("cnn2", 100), ("cnn4", 20), ("resnet4", 10), ("densenet4", 10), ("cldnn", 20)])
def test_fresh_network_is_near_uniform(arch, seeds):
    frame = Rng(123).normal(size=(2, 128))
    for seed in range(seeds):
        p = forward_classify(build(default_spec(arch), seed), frame)
        assert p.max() < 0.5
        for label in range(10):
            assert abs(-math.log(p[label]) - math.log(10)) <= 0.7


def test_residual_block_identity_when_branch_is_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 16))
    zero = [L.ConvParams(np.zeros((3, 3, 2, 3)), np.zeros(3), "same", "same") for _ in range(2)]
    assert np.array_equal(residual_block(x, zero, activation="linear"), x)
    # a post-ReLU feature map is non-negative, so the rectified block is an identity too
    assert np.array_equal(residual_block(np.abs(x), zero), np.abs(x))


def test_resnet_with_zero_branch_equals_net_without_branch():
    net = build(default_spec("resnet4", dropout=0.0), 5, dtype=np.float64)
    for name in ("conv1.w", "conv1.b", "conv2.w", "conv2.b"):
        net.params[name][...] = 0.0
    # the same network with conv1 removed and conv2 replaced by the 1x1 projection
    layers = default_spec("resnet4", dropout=0.0).layers
    short_layers = (layers[0], LayerSpec("conv", 80, (1, 1), "same", "same"), layers[3]) + layers[4:]
    short = ArchitectureSpec("short", short_layers)
    short_net = build(short, 0, dtype=np.float64)
    short_net.params.update(
        {
            "conv0.w": net.params["conv0.w"],
            "conv0.b": net.params["conv0.b"],
            "conv1.w": net.params["proj0_2.w"],
            "conv1.b": np.zeros(80),
            "conv2.w": net.params["conv3.w"],
            "conv2.b": net.params["conv3.b"],
            "dense3.w": net.params["dense4.w"],
            "dense3.b": net.params["dense4.b"],
            "dense4.w": net.params["dense5.w"],
            "dense4.b": net.params["dense5.b"],
        }
    )
    frames = Rng(9).normal(size=(2, 2, 128))
    assert np.array_equal(forward(net, frames), forward(short_net, frames))


def test_cldnn_lstm_sees_time_order():
    net = build(default_spec("cldnn"), 4, dtype=np.float64)
    (p,) = lstm_params(net)
    seq = Rng(1).normal(size=(128, p.w_input.shape[1]))
    swapped = seq.copy()
    swapped[[126, 127]] = swapped[[127, 126]]  # early swaps fade through the forget gate
    assert not np.allclose(L.lstm(seq, p.w_input, p.w_recurrent, p.bias), L.lstm(swapped, p.w_input, p.w_recurrent, p.bias))


def test_dropout_changes_train_forward_only():
    net = build(default_spec("cnn2"), 0)
    frame = Rng(1).normal(size=(1, 2, 128)).astype(np.float32)
    a = forward(net, frame, mode="train", rng=Rng(2))
    b = forward(net, frame, mode="train", rng=Rng(3))
    assert not np.allclose(a, b)
    assert np.array_equal(forward(net, frame, mode="train", rng=Rng(2)), a)
