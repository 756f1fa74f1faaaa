import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resemote.model import ModelConfig, build, make_residual_block, make_se_block
from resemote.tensor import Tensor


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count, written independently of the layer code."""
    total = 0
    cin = cfg.input_channels
    for c in cfg.backbone_channels:
        total += c * cin * 9 + c + 2 * c  # conv + bias, BN gamma/beta
        cin = c
    r = cin // cfg.se_reduction
    total += (cin * r + r) + (r * cin + cin)
    for c in cfg.residual_channels:
        total += c * cin * 9 + c + 2 * c + c * c * 9 + c + 2 * c
        total += c * cin + c + 2 * c  # every stage is strided, so the skip is always a projection
        cin = c
    for h in cfg.classifier_hidden + [cfg.num_classes]:
        total += cin * h + h
        cin = h
    return total


@pytest.fixture(scope="module")
def default_model():
    return build()


def test_default_forward_shape_and_finite(default_model):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64)))
    logits = default_model(x)
    assert logits.shape == (2, 7)
    assert np.isfinite(logits.data).all()


def test_default_parameter_count(default_model):
    assert default_model.num_parameters() == count_params(ModelConfig())


@pytest.mark.parametrize("preset", ["tiny", "desk"])
def test_preset_parameter_counts(preset):
    cfg = ModelConfig.preset(preset)
    assert build(cfg).num_parameters() == count_params(cfg)


def test_shape_plan_of_default():
    plan = dict(ModelConfig().shape_plan())
    assert plan["backbone.2"] == (256, 8, 8)
    assert plan["se"] == (256, 8, 8)
    assert plan["residual.0"] == (512, 4, 4)
    assert plan["residual.2"] == (2048, 1, 1)
    assert plan["pool"] == (2048, 1, 1)


def test_same_seed_same_parameters():
    a, b = build(ModelConfig.tiny(seed=3)), build(ModelConfig.tiny(seed=3))
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build(ModelConfig.tiny(seed=4))
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


def test_parameter_names_unique_and_stable():
    names = list(build(ModelConfig.tiny()).params)
    assert len(names) == len(set(names))
    assert names == list(build(ModelConfig.tiny()).params)


def test_all_zero_input_gives_finite_logits():
    logits = build(ModelConfig.tiny()).eval()(Tensor(np.zeros((1, 3, 8, 8))))
    assert np.isfinite(logits.data).all()


def test_identical_images_identical_rows_in_eval():
    img = np.random.default_rng(1).standard_normal((1, 3, 8, 8))
    logits = build(ModelConfig.tiny()).eval()(Tensor(np.concatenate([img, img])))
    assert logits.data[0].tobytes() == logits.data[1].tobytes()


def test_wrong_input_shape_rejected():
    with pytest.raises(ValueError, match="input batch"):
        build(ModelConfig.tiny())(Tensor(np.zeros((1, 3, 16, 16))))


@pytest.mark.parametrize("kwargs, match", [
    ({"input_size": (60, 64)}, "divisible"),
    ({"se_reduction": 7}, "se_reduction"),
    ({"num_classes": 1}, "num_classes"),
    ({"backbone_channels": []}, "nonempty"),
])
def test_invalid_configs(kwargs, match):
    with pytest.raises(ValueError, match=match):
        ModelConfig(**kwargs).validate()


def test_config_dict_round_trip_and_unknown_keys():
    cfg = ModelConfig.desk(seed=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"widths": 3})
    with pytest.raises(ValueError):
        ModelConfig.preset("huge")


# ---------------------------------------------------------------- SE block


def test_se_gate_at_zero_logit_halves_features():
    se, _ = make_se_block(8, 4)
    se.excite.weight.data[...] = 0
    se.excite.bias.data[...] = 0
    f0 = Tensor(np.random.default_rng(2).standard_normal((2, 8, 3, 3)))
    f1, w = se(f0)
    assert (w.data == 0.5).all()
    np.testing.assert_array_equal(f1.data, f0.data / 2)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_se_gate_strictly_inside_unit_interval(seed):
    se, _ = make_se_block(8, 2, seed)
    _, w = se(Tensor(np.random.default_rng(seed).standard_normal((2, 8, 2, 2))))
    assert w.shape == (2, 8, 1, 1)
    assert (w.data > 0).all() and (w.data < 1).all()


# ---------------------------------------------------------------- residual block


def test_zeroed_residual_path_is_identity_on_nonnegative_input():
    block, _, _ = make_residual_block(6, 6, 1)
    block.bn2.gamma.data[...] = 0
    block.bn2.beta.data[...] = 0
    x = Tensor(np.abs(np.random.default_rng(3).standard_normal((2, 6, 4, 4))))
    np.testing.assert_array_equal(block(x, True).data, x.data)


def test_strided_block_halves_and_projects():
    block, _, _ = make_residual_block(4, 10, 2)
    out = block(Tensor(np.random.default_rng(4).standard_normal((2, 4, 6, 6))), True)
    assert out.shape == (2, 10, 3, 3)


def test_odd_size_halves_with_ceiling():
    block, _, _ = make_residual_block(4, 4, 2)
    assert block(Tensor(np.ones((1, 4, 3, 3))), True).shape == (1, 4, 2, 2)


def test_train_eval_modes_differ_then_restore():
    m = build(ModelConfig.tiny())
    x = Tensor(np.random.default_rng(5).standard_normal((4, 3, 8, 8)))
    assert m.training
    train_out = m(x).data
    eval_out = m.eval()(x).data
    assert not np.array_equal(train_out, eval_out)
