import numpy as np
import pytest

from m2d import autodiff as ad
from m2d import nets
from m2d.autodiff import Parameter
from m2d.nets import SurgeryPlan


def _classifier(seed=0):
    return nets.build(nets.mlp([2, 8, 4, 3]), seed)


def test_build_parameter_count():
    net = nets.build(nets.mlp([2, 8, 3]), 0)
    assert net.num_parameters() == 2 * 8 + 8 + 8 * 3 + 3 == 51


def test_build_rejects_dim_mismatch():
    spec = nets.ModelSpec((nets.dense(2, 8), nets.dense(4, 3, "linear")))
    with pytest.raises(nets.SpecError):
        nets.build(spec, 0)


def test_build_deterministic_and_biases_zero():
    a, b = _classifier(5), _classifier(5)
    assert a.param_bytes() == b.param_bytes()
    assert a.param_bytes() != _classifier(6).param_bytes()
    assert all(not p.data.any() for p in a.parameters() if p.identifier.endswith("bias"))


def test_tap_out_of_range_rejected():
    with pytest.raises(nets.SpecError):
        nets.mlp([2, 3, 2], taps={"bad": 7}).validate()


def test_duplicate_isolation():
    net = _classifier()
    before = net.param_bytes()
    copy = nets.duplicate(net)
    assert copy.param_bytes() == before
    params = copy.parameters()
    ad.sgd_step(params, {p.identifier: np.ones_like(p.data) for p in params}, ad.OptimizerState(0.5))
    assert net.param_bytes() == before
    assert nets.duplicate(nets.duplicate(net)).param_bytes() == before


def test_sever_and_attach_shapes_and_weight_retention():
    net = _classifier()
    coupled = nets.sever_and_attach(net, SurgeryPlan(1), seed=3)
    assert coupled.kind == "encoder_decoder"
    assert [(l.in_shape, l.out_shape) for l in coupled.spec.layers] == [((2,), (8,)), ((8,), (2,))]
    assert coupled.forward(np.ones((4, 2))).shape == (4, 2)
    assert np.array_equal(coupled.layer_params[0][0].data, net.layer_params[0][0].data)
    assert np.array_equal(coupled.layer_params[0][1].data, net.layer_params[0][1].data)


def test_mirrored_decoder_deeper_cut():
    coupled = nets.sever_and_attach(_classifier(), SurgeryPlan(2), seed=0)
    dims = [(l.in_shape[0], l.out_shape[0], l.activation) for l in coupled.spec.layers[2:]]
    assert dims == [(4, 8, "relu"), (8, 2, "linear")]


@pytest.mark.parametrize("sever_at", [0, 3, 10])
def test_degenerate_plans_rejected(sever_at):
    with pytest.raises(nets.SpecError):
        nets.sever_and_attach(_classifier(), SurgeryPlan(sever_at), seed=0)


def test_decoder_shape_mismatch_rejected():
    bad = nets.ModelSpec((nets.dense(8, 3, "linear"),))
    with pytest.raises(nets.SpecError):
        nets.sever_and_attach(_classifier(), SurgeryPlan(1, bad), seed=0)


def test_surgery_requires_classifier():
    coupled = nets.sever_and_attach(_classifier(), SurgeryPlan(1), seed=0)
    with pytest.raises(nets.SpecError):
        nets.sever_and_attach(coupled, SurgeryPlan(1), seed=0)


def test_extract_features_identity_layer():
    spec = nets.ModelSpec((nets.dense(2, 2, "relu"), nets.dense(2, 2, "linear")), {"h": 1})
    net = nets.Network(
        spec,
        [
            [Parameter(np.eye(2), "layers.0.weight"), Parameter(np.zeros(2), "layers.0.bias")],
            [Parameter(np.eye(2), "layers.1.weight"), Parameter(np.zeros(2), "layers.1.bias")],
        ],
    )
    x = np.array([[3.0, 4.0]])
    assert np.array_equal(nets.extract_features(net, x, ["h"])["h"], [[3.0, 4.0]])
    assert np.array_equal(nets.extract_features(net, x, ["input"])["input"], x)
    with pytest.raises(KeyError):
        nets.extract_features(net, x, ["nope"])


def test_conv_tap_is_channel_mean():
    spec = nets.ModelSpec(
        (nets.conv2d((6, 6, 1), 3, kernel=3), nets.flatten((4, 4, 3)), nets.dense(48, 2, "linear")),
        {"conv": 1},
    )
    net = nets.build(spec, 0)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 6, 6, 1))
    acts = net.activations(x)[1].data
    assert acts.shape == (5, 4, 4, 3)
    expected = np.array([[acts[n, :, :, c].sum() / 16 for c in range(3)] for n in range(5)])
    np.testing.assert_allclose(nets.extract_features(net, x, ["conv"])["conv"], expected, rtol=1e-13)


def test_conv_network_surgery_reconstructs_image_shape():
    spec = nets.ModelSpec(
        (nets.conv2d((6, 6, 1), 3, kernel=3), nets.flatten((4, 4, 3)), nets.dense(48, 2, "linear")),
        {"conv": 1},
    )
    coupled = nets.sever_and_attach(nets.build(spec, 0), SurgeryPlan(1), seed=0)
    x = np.zeros((2, 6, 6, 1))
    assert coupled.forward(x).shape == (2, 6, 6, 1)
    # flat inputs are reshaped to the declared image shape
    assert coupled.forward(x.reshape(2, 36)).shape == (2, 6, 6, 1)


def test_extract_features_is_pure():
    net = _classifier()
    x = np.random.default_rng(1).normal(size=(7, 2))
    a = nets.extract_features(net, x, ["h1", "h2"])
    b = nets.extract_features(net, x, ["h1", "h2"])
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_describe_parse_round_trip():
    spec = nets.ModelSpec(
        (nets.conv2d((6, 6, 1), 3, kernel=3, stride=1), nets.flatten((4, 4, 3)), nets.dense(48, 2, "linear")),
        {"conv": 1, "flat": 2},
    )
    assert nets.ModelSpec.parse(spec.describe().splitlines()) == spec
