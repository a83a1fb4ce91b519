import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY
from rfl import tensor as T
from rfl.errors import ConfigError, DimensionError, InputError
from rfl.models import (InputTransform, MLPConfig, Model, ParameterStore, ViTConfig, bilinear_matrix,
                        build_mlp, build_tiny_vit, count_params, feature_width, logits_of, patchify, predict)
from rfl.peft import Strategy, attach
from rfl.tensor import Tensor


def test_logit_shape(tiny_vit, images):
    assert tiny_vit(images).shape == (6, 3)


def test_feature_width(tiny_vit, images):
    assert tiny_vit.features(images).shape == (6, TINY.width)
    assert feature_width(tiny_vit) == TINY.width


def test_rejects_out_of_range_pixels(tiny_vit, images):
    with pytest.raises(InputError):
        tiny_vit(images + 1.5)
    tiny_vit(images + 1.5, strict=False)


def test_rejects_wrong_image_shape(tiny_vit):
    with pytest.raises(DimensionError):
        tiny_vit(np.zeros((1, 1, 12, 12), np.float32))


def test_same_seed_same_parameters():
    a = build_tiny_vit(TINY, np.random.default_rng(3))
    b = build_tiny_vit(TINY, np.random.default_rng(3))
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_patchify_round_trip():
    x = np.arange(2 * 3 * 8 * 8, dtype=np.float64).reshape(2, 3, 8, 8)
    p = patchify(Tensor(x), 4).data
    assert p.shape == (2, 4, 48)
    assert np.array_equal(p[0, 1].reshape(3, 4, 4), x[0, :, 0:4, 4:8])


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(image_size=8, patch_size=3).validate()
    with pytest.raises(ConfigError):
        ViTConfig(width=10, heads=4).validate()
    with pytest.raises(ConfigError):
        MLPConfig(widths=(64,)).validate()


def test_attention_rows_are_distributions(tiny_vit, images):
    trace = {}
    tiny_vit(images, trace=trace)
    assert len(trace) == TINY.depth
    for att in trace.values():
        np.testing.assert_allclose(att.sum(axis=-1), 1, atol=1e-5)


def test_bilinear_rows_sum_to_one():
    for src, dst in ((8, 16), (16, 8), (5, 7), (8, 8)):
        m = bilinear_matrix(src, dst)
        np.testing.assert_allclose(m.sum(axis=1), 1)
    assert np.array_equal(bilinear_matrix(8, 8), np.eye(8))


def test_resize_transform_accepts_source_resolution():
    model = build_tiny_vit(TINY, np.random.default_rng(0), InputTransform(resize_to=8))
    assert model(np.full((2, 1, 4, 4), 0.5, np.float32)).shape == (2, 3)


def test_transform_normalises_half_to_zero():
    out = InputTransform().apply(Tensor(np.full((1, 1, 2, 2), 0.5, np.float32))).data
    assert np.array_equal(out, np.zeros((1, 1, 2, 2), np.float32))


def test_transform_rejects_nonpositive_std():
    with pytest.raises(ConfigError):
        InputTransform(std=(0.0,))


def test_mlp_forward_and_counts():
    m = build_mlp(MLPConfig(widths=(64, 32), num_classes=4), np.random.default_rng(0))
    assert m(np.zeros((3, 1, 8, 8), np.float32)).shape == (3, 4)
    assert count_params(m) == 64 * 32 + 32 + 32 * 4 + 4


def test_store_duplicate_and_role_checks():
    s = ParameterStore()
    s.add("w", np.zeros(2), "weight")
    with pytest.raises(KeyError):
        s.add("w", np.zeros(2), "weight")
    with pytest.raises(ValueError):
        s.add("x", np.zeros(2), "gain")


def test_trainable_flag_drives_requires_grad():
    s = ParameterStore()
    t = s.add("w", np.zeros(2), "weight", trainable=False)
    assert not t.requires_grad
    s.set_trainable("w", True)
    assert t.requires_grad and s.trainable_names() == ["w"]


def test_clone_is_deep(tiny_vit):
    c = tiny_vit.clone()
    c.params["head.bias"].data = c.params["head.bias"].data + 1
    assert not np.array_equal(c.params["head.bias"].data, tiny_vit.params["head.bias"].data)


def test_predict_ties_go_to_lowest_index():
    m = build_mlp(MLPConfig(widths=(4, 2), num_classes=3), np.random.default_rng(0))
    m.params["head.weight"].data[:] = 0
    assert np.array_equal(predict(m, np.zeros((2, 1, 2, 2), np.float32)), [0, 0])


@given(st.integers(1, 5))
@settings(max_examples=5)
def test_batch_independence(n):
    model = build_tiny_vit(TINY, np.random.default_rng(0))
    x = np.random.default_rng(n).uniform(size=(n + 1, 1, 8, 8)).astype(np.float32)
    full = logits_of(model, x)
    np.testing.assert_allclose(logits_of(model, x[:1]), full[:1], atol=1e-5)


def test_default_config_count_ordering():
    counts = {}
    for kind in ("fullft", "adapter", "lora", "bias", "vpt", "linear"):
        model = build_tiny_vit(ViTConfig(), np.random.default_rng(0))
        attach(model, Strategy(kind), rng=np.random.default_rng(1))
        counts[kind] = count_params(model, trainable_only=True)
    order = ["fullft", "adapter", "lora", "bias", "vpt", "linear"]
    assert all(counts[a] > counts[b] for a, b in zip(order, order[1:])), counts


def test_float64_copy_matches(tiny_vit, images):
    with T.precision(np.float64):
        hi = tiny_vit.astype(np.float64)(images.astype(np.float64)).data
    np.testing.assert_allclose(hi, tiny_vit(images).data, atol=1e-5)
