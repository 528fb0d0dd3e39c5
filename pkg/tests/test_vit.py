import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hrdet import tensor as T
from hrdet.config import ConfigError, RunConfig, VitConfig
from hrdet.gradcheck import grad_check
from hrdet.optim import Adam
from hrdet.roi import PatchSet
from hrdet.tensor import Tensor
from hrdet.vit import (VisionTransformer, assign_region_labels, attention, classify, embed, encode,
                       encoder_layer, tr_loss)

CFG = VitConfig(d=64, L=2, heads=4, N=16, P=4, C=3)


def zero_layers(vit):
    for layer in vit.layers:
        for p in layer.parameters():
            p.data[:] = 0


def test_embed_zero_input_gives_position_codes(rng):
    vit = VisionTransformer(CFG, rng)
    z = embed(np.zeros((16, 4 * 4 * 3)), vit)
    assert z.shape == (1, 17, 64)
    np.testing.assert_array_equal(z.data[0], vit.pos_embed.data)


def test_embed_one_hot_pixel_selects_weight_row(rng):
    vit = VisionTransformer(CFG, rng)
    patches = np.zeros((16, 4, 4, 3))
    patches[3, 1, 2, 0] = 1.0                       # patch 3, pixel (1, 2), channel 0
    flat_index = (1 * 4 + 2) * 3 + 0
    z = embed(PatchSet(patches), vit).data[0]
    np.testing.assert_allclose(z[4], vit.patch_proj.data[flat_index] + vit.pos_embed.data[4], rtol=1e-6)
    np.testing.assert_allclose(z[5], vit.pos_embed.data[5])


def test_embed_rejects_mismatched_patches(rng):
    vit = VisionTransformer(CFG, rng)
    with pytest.raises(ValueError, match="does not match"):
        embed(np.zeros((9, 48)), vit)


def test_zero_weight_layer_is_exact_identity(rng):
    vit = VisionTransformer(CFG, rng)
    zero_layers(vit)
    z = Tensor(rng.normal(size=(2, 17, 64)))
    assert np.array_equal(encoder_layer(z, vit.layers[0]).data, z.data)


def test_single_token_attention_weight_is_one(rng):
    vit = VisionTransformer(CFG, rng)
    _, w = attention(Tensor(rng.normal(size=(1, 1, 64))), vit.layers[0], return_weights=True)
    assert np.array_equal(w.data, np.ones((1, 4, 1, 1), dtype=np.float32))


@given(st.integers(0, 2 ** 32 - 1))
def test_attention_rows_sum_to_one(seed):
    r = np.random.default_rng(seed)
    vit = VisionTransformer(CFG, r)
    for p in vit.layers[0].parameters():
        p.data = r.normal(0, 0.5, p.shape).astype(np.float32)
    _, w = attention(Tensor(r.normal(size=(2, 17, 64))), vit.layers[0], return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_zero_weights_encode_is_layer_norm_of_class_row(rng):
    vit = VisionTransformer(CFG, rng)
    zero_layers(vit)
    z0 = T.broadcast_to(vit.pos_embed.reshape(1, 17, 64), (1, 17, 64))
    y = encode(z0, vit)
    assert y.shape == (1, 64)
    want = vit.ln_out(Tensor(vit.pos_embed.data[0:1])).data
    assert np.array_equal(y.data, want)


def test_zero_layers_rejected_by_config():
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"vit.L": 0}).validate()


def test_classifier_zero_weights_uniform(rng):
    p = classify(Tensor(rng.normal(size=(3, 8))), Tensor(np.zeros((8, 6)))).data
    np.testing.assert_allclose(p, 1 / 6, rtol=1e-6)


@given(hnp.arrays(np.float64, (5, 6), elements=st.floats(-20, 20, allow_subnormal=False)))
def test_classify_rows_and_argmax_invariance(logits):
    if np.any(np.sort(logits, axis=1)[:, -1] - np.sort(logits, axis=1)[:, -2] < 1e-6):
        return                                          # ties: argmax is not unique
    eye = Tensor(np.eye(6))
    with T.default_dtype(np.float64):
        p = classify(Tensor(logits), eye).data
        q = classify(Tensor(logits), eye, skip_sigmoid=True).data
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    np.testing.assert_allclose(q.sum(1), 1.0, atol=1e-6)
    assert np.array_equal(p.argmax(1), logits.argmax(1))
    assert np.array_equal(q.argmax(1), logits.argmax(1))


def test_five_part_types_give_five_probabilities(rng):
    # the part vocabulary has five types
    vit = VisionTransformer(VitConfig(d=16, L=1, heads=2, N=4, P=2, num_classes=5), rng)
    assert vit.predict(rng.uniform(0, 1, (4, 12))).shape == (1, 5)


def test_permuting_patches_with_position_codes_is_invariant(rng):
    vit = VisionTransformer(CFG, rng)
    for p in vit.parameters():
        p.data = p.data + rng.normal(0, 0.05, p.shape).astype(np.float32)
    patches = rng.uniform(0, 1, (16, 48)).astype(np.float32)
    perm = rng.permutation(16)
    before = vit.predict(patches)
    vit.pos_embed.data[1:] = vit.pos_embed.data[1:][perm]
    after = vit.predict(patches[perm])
    np.testing.assert_allclose(after, before, atol=1e-5)


def test_tr_loss_examples(f64):
    assert tr_loss(Tensor([[0.0, 1.0, 0.0]]), [1]).item() == 0.0
    uniform = Tensor(np.full((1, 6), 1 / 6))
    assert tr_loss(uniform, [4]).item() == pytest.approx(math.log(6), abs=1e-12)
    assert round(math.log(6), 4) == 1.7918
    p = Tensor([[0.2, 0.8], [0.6, 0.4]])
    a, b = -math.log(0.8), -math.log(0.6)
    assert tr_loss(p, [1, 0]).item() == pytest.approx((a + b) / 2, rel=1e-12)
    soft = tr_loss(p, np.array([[0.5, 0.5], [1.0, 0.0]])).item()
    assert soft == pytest.approx((-(math.log(0.2) + math.log(0.8)) / 2 + b) / 2, rel=1e-12)


def test_tr_loss_empty_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert tr_loss(Tensor(np.zeros((0, 6))), []).item() == 0.0
    assert w and issubclass(w[0].category, RuntimeWarning)


def test_tr_loss_grad_wrt_classifier_3_class(f64):
    r = np.random.default_rng(9)
    y = Tensor(r.uniform(-1, 1, (4, 5)))
    W = Tensor(r.uniform(-1, 1, (5, 3)), requires_grad=True)
    assert grad_check(lambda w: tr_loss(classify(y, w), [0, 2, 1, 2]), W, tol=1e-4).passed


def test_region_labels():
    gts = np.array([[50, 50, 20, 20], [58, 50, 20, 20]], dtype=float)
    cls = np.array([4, 2])
    props = np.array([[50, 50, 20, 20], [500, 500, 10, 10], [56, 50, 20, 20]], dtype=float)
    from hrdet import geometry as G

    table = G.iou_matrix(props, gts)           # pairwise IoU table oracle
    assert table[2, 1] > table[2, 0] >= 0.5
    assert assign_region_labels(props, gts, cls, 0.5, 5).tolist() == [4, 5, 2]
    assert assign_region_labels(props, np.zeros((0, 4)), [], 0.5, 5).tolist() == [5, 5, 5]


def overfit(skip_sigmoid, steps=200):
    r = np.random.default_rng(0)
    cfg = VitConfig(d=32, L=2, heads=4, N=4, P=4, C=3, skip_sigmoid=skip_sigmoid)
    vit = VisionTransformer(cfg, r)
    x = r.uniform(0, 1, (8, 4, 48)).astype(np.float32)
    labels = np.arange(8) % 6
    opt = Adam(list(vit.named_parameters()), lr=3e-3)
    for _ in range(steps):
        opt.zero_grad()
        loss = tr_loss(vit(x), labels, log_space=True)
        loss.backward()
        opt.step()
    return tr_loss(vit(x), labels, log_space=True).item()


def test_overfit_eight_regions_in_200_steps():
    # with the sigmoid in place the loss is bounded below (see next test), so the
    # drive-to-zero check runs on the sigmoid-free classifier
    assert overfit(skip_sigmoid=True) < 0.05


def test_sigmoid_classifier_loss_is_bounded_below(f64):
    floor = -math.log(math.e / (math.e + 5))          # best case: one score at 1, five at 0
    saturated = np.full((1, 6), -1e3)
    saturated[0, 2] = 1e3
    p = classify(Tensor(saturated), Tensor(np.eye(6)))
    assert tr_loss(p, [2]).item() == pytest.approx(floor, rel=1e-9)
    loss = overfit(skip_sigmoid=False)
    assert floor <= loss < math.log(6)
