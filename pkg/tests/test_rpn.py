import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hrdet import geometry as G
from hrdet import tensor as T
from hrdet.geometry import Box, Resolution
from hrdet.gradcheck import grad_check
from hrdet.rpn import (BG, FG, IGNORE, RpnHead, RpnTargets, assign_targets, decode_proposals,
                       decode_proposals_array, fg_probs, generate_anchors, rpn_forward, rpn_loss)
from hrdet.tensor import Tensor


# -- anchors -------------------------------------------------------------------------------------

def test_single_cell_single_anchor_at_centre():
    a = generate_anchors([(1, 1)], [32], [1.0], [1.0])
    assert len(a) == 1
    assert a.boxes[0].tolist() == [16.0, 16.0, 32.0, 32.0]


def test_anchor_count_formula():
    a = generate_anchors([(2, 2)], [8], [1, 2, 4], [0.5, 1, 2])
    assert len(a) == 2 * 2 * 3 * 3 == 36
    multi = generate_anchors([(4, 6), (2, 3)], [8, 16], [1, 2], [1.0])
    assert len(multi) == (24 + 6) * 2 and multi.level_counts == [48, 12]


@pytest.mark.parametrize("s", [1.0, 2.0, 4.0])
def test_ratio_one_anchor_is_square(s):
    a = generate_anchors([(3, 3)], [16], [s], [1.0]).boxes
    assert np.all(a[:, 2] == s * 16) and np.all(a[:, 3] == s * 16)


def test_anchor_ratio_is_height_over_width_and_area_preserved():
    a = generate_anchors([(1, 1)], [8], [2.0], [0.5, 2.0]).boxes
    assert a[0, 3] / a[0, 2] == pytest.approx(0.5) and a[1, 3] / a[1, 2] == pytest.approx(2.0)
    np.testing.assert_allclose(a[:, 2] * a[:, 3], 256.0)


def test_anchor_centres_follow_cells():
    a = generate_anchors([(2, 3)], [10], [1.0], [1.0]).boxes
    assert a[:, :2].tolist() == [[5, 5], [15, 5], [25, 5], [5, 15], [15, 15], [25, 15]]


# -- assignment -------------------------------------------------------------------------------------

def test_identical_anchor_is_foreground(rng):
    anchors = np.array([[10, 10, 8, 8], [40, 40, 8, 8]], dtype=float)
    t = assign_targets(anchors, anchors[:1], 0.7, 0.3, 64, rng)
    assert t.labels[0] == FG and t.labels[1] == BG
    assert t.deltas[0].tolist() == [0, 0, 0, 0]


def test_weak_gt_still_gets_argmax_anchor():
    anchors = np.array([[10, 10, 10, 10], [13, 10, 10, 10], [17, 12, 10, 10], [30, 30, 10, 10], [11, 9, 20, 20]],
                       dtype=float)
    gt = np.array([[14, 11, 6, 6]], dtype=float)
    table = [G.iou(Box(*a), Box(*gt[0])) for a in anchors]      # exhaustive IoU table
    assert max(table) < 0.7
    want = int(np.argmax(table))
    t = assign_targets(anchors, gt, 0.7, 0.3, 64, np.random.default_rng(0))
    assert np.flatnonzero(t.labels == FG).tolist() == [want]
    for i, v in enumerate(table):
        if i != want:
            assert t.labels[i] == (BG if v < 0.3 else IGNORE)


def test_no_gt_means_all_sampled_background(rng):
    anchors = generate_anchors([(4, 4)], [8], [1.0], [1.0])
    t = assign_targets(anchors, np.zeros((0, 4)), 0.7, 0.3, 8, rng)
    assert set(t.labels.tolist()) <= {BG, IGNORE}
    assert len(t.sampled) == 8


def test_fg_iou_must_exceed_bg_iou(rng):
    with pytest.raises(ValueError):
        assign_targets(np.ones((1, 4)), np.ones((1, 4)), 0.3, 0.5, 8, rng)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 40))
def test_sampling_caps_and_balance(seed, max_samples):
    r = np.random.default_rng(seed)
    anchors = generate_anchors([(8, 8)], [8], [1, 2], [0.5, 1, 2])
    gt = np.column_stack([r.uniform(8, 56, (4, 2)), r.uniform(6, 30, (4, 2))])
    t = assign_targets(anchors, gt, 0.5, 0.3, max_samples, np.random.default_rng(seed))
    n_fg, n_bg = (t.labels == FG).sum(), (t.labels == BG).sum()
    assert n_fg + n_bg <= max_samples
    assert n_fg <= max_samples // 2
    # determinism under a fixed seed
    t2 = assign_targets(anchors, gt, 0.5, 0.3, max_samples, np.random.default_rng(seed))
    assert np.array_equal(t.labels, t2.labels)


def test_foreground_set_independent_of_background_sampling():
    anchors = generate_anchors([(8, 8)], [8], [1, 2], [0.5, 1, 2])
    gt = np.array([[20, 20, 16, 16], [44, 40, 20, 10]], dtype=float)
    fgs = {tuple(assign_targets(anchors, gt, 0.7, 0.3, 400, np.random.default_rng(s)).foreground) for s in range(5)}
    assert len(fgs) == 1


# -- head ----------------------------------------------------------------------------------------------

def test_zero_head_gives_even_objectness(rng):
    head = RpnHead(4, 9, rng)
    for p in head.parameters():
        p.data[:] = 0
    pyramid = [Tensor(rng.normal(size=(4, 4, 4))), Tensor(rng.normal(size=(4, 2, 2)))]
    logits, deltas = rpn_forward(pyramid, head)
    assert logits.shape == (20 * 9, 2) and deltas.shape == (180, 4)
    np.testing.assert_array_equal(fg_probs(logits.data), 0.5)


def test_head_rows_match_anchor_order_and_are_deterministic(rng):
    head = RpnHead(4, 6, rng)
    pyramid = [Tensor(rng.normal(size=(4, 3, 5)))]
    anchors = generate_anchors([(3, 5)], [8], [1, 2], [0.5, 1, 2])
    a = rpn_forward(pyramid, head)
    b = rpn_forward(pyramid, head)
    assert a[0].shape[0] == len(anchors)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    # row for cell (r, c), anchor k equals the head's channel output at that cell
    h = T.relu(head.conv(pyramid[0]))
    cls = head.cls(h).data
    r, c, k = 2, 3, 4
    row = (r * 5 + c) * 6 + k
    assert a[0].data[row].tolist() == [cls[2 * k, r, c], cls[2 * k + 1, r, c]]   # channels are anchor-major


# -- loss ---------------------------------------------------------------------------------------------

def two_anchor_targets():
    deltas_t = np.zeros((2, 4))
    return RpnTargets(np.array([FG, BG], dtype=np.int8), deltas_t, np.array([0, -1]))


def test_loss_hand_evaluation(f64):
    logits = Tensor(np.zeros((2, 2)))
    deltas = Tensor(np.array([[0.5] * 4, [9.0] * 4]))      # bg row must not count
    got = rpn_loss(logits, deltas, two_anchor_targets(), lam=1.0).item()
    want = (1 / 4) * (2 * math.log(2)) + (1 / 8) * (4 * 0.125)
    assert got == pytest.approx(want, rel=1e-12)


def test_loss_lambda_zero_is_classification_only(f64):
    logits = Tensor(np.array([[0.3, -0.2], [1.0, 0.5]]))
    deltas = Tensor(np.full((2, 4), 0.7))
    cls = rpn_loss(logits, deltas, two_anchor_targets(), lam=0.0).item()
    lp = logits.data - np.log(np.exp(logits.data).sum(1, keepdims=True))
    assert cls == pytest.approx(-(lp[0, 1] + lp[1, 0]) / 4, rel=1e-12)


def test_loss_perfect_prediction_vanishes(f64):
    logits = Tensor(np.array([[-50.0, 50.0], [50.0, -50.0]]))
    assert rpn_loss(logits, Tensor(np.zeros((2, 4))), two_anchor_targets()).item() < 1e-20


def test_loss_no_samples_warns_and_is_zero():
    t = RpnTargets(np.full(3, IGNORE, dtype=np.int8), np.zeros((3, 4)), np.full(3, -1))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        v = rpn_loss(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4))), t).item()
    assert v == 0.0 and any(issubclass(x.category, RuntimeWarning) for x in w)


@given(st.integers(0, 2 ** 32 - 1))
def test_loss_non_negative(seed):
    r = np.random.default_rng(seed)
    labels = r.choice([FG, BG, IGNORE], 10).astype(np.int8)
    t = RpnTargets(labels, r.normal(size=(10, 4)), np.zeros(10, dtype=int))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert rpn_loss(Tensor(r.normal(size=(10, 2)) * 5), Tensor(r.normal(size=(10, 4))), t, 2.0).item() >= 0


def test_head_gradient_one_anchor_toy(f64):
    r = np.random.default_rng(3)
    head = RpnHead(2, 1, r)
    for p in head.parameters():
        p.data = r.uniform(-0.5, 0.5, p.shape)
    feat = Tensor(r.uniform(0.2, 1.0, (2, 1, 1)))
    t = RpnTargets(np.array([FG], dtype=np.int8), np.array([[0.4, -0.3, 0.2, 0.5]]), np.array([0]))

    def loss():
        lg, dl = rpn_forward([feat], head)
        return rpn_loss(lg, dl, t, lam=1.0)

    assert grad_check(loss, head.parameters(), tol=1e-3).passed


def test_loss_decreases_over_50_steps_on_fixed_image():
    from hrdet.backbone import FeatureExtractor
    from hrdet.config import RunConfig
    from hrdet.optim import SGD

    cfg = RunConfig().backbone
    r = np.random.default_rng(5)
    net, head = FeatureExtractor(cfg, r), RpnHead(32, 9, r)
    img = Tensor(r.normal(size=(3, 64, 96)))
    gt = np.array([[30, 30, 24, 20]], dtype=float)
    params = list(net.named_parameters("n.")) + list(head.named_parameters("h."))
    opt = SGD(params, lr=0.05, momentum=0.9, grad_clip=10.0)
    losses = []
    for _ in range(51):
        opt.zero_grad()
        pyr = net(img)
        lg, dl = head(pyr)
        anchors = generate_anchors([f.shape[1:] for f in pyr], cfg.level_strides(), [1, 2, 4], [0.5, 1, 2])
        t = assign_targets(anchors, gt, 0.7, 0.3, 64, np.random.default_rng(0))
        loss = rpn_loss(lg, dl, t, 1.0)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert losses[-1] < losses[0]
    chunks = [np.mean(c) for c in np.array_split(losses, 5)]
    assert all(b < a for a, b in zip(chunks, chunks[1:]))


# -- decoding ------------------------------------------------------------------------------------------

RES = Resolution(64, 64)


def test_all_background_still_ranks_top_n():
    anchors = generate_anchors([(4, 4)], [16], [1.0], [1.0])
    logits = np.column_stack([np.full(16, 10.0), np.linspace(-9, -1, 16)])
    props = decode_proposals(logits, np.zeros((16, 4)), anchors, RES, 16, None, 5)
    assert len(props) == 5
    assert props[0].score == pytest.approx(fg_probs(logits)[-1])


def test_zero_deltas_return_anchors():
    anchors = generate_anchors([(2, 2)], [16], [1.0], [1.0])
    logits = np.column_stack([np.zeros(4), np.arange(4.0)])
    boxes, _ = decode_proposals_array(logits, np.zeros((4, 4)), anchors, RES, 4, None, 4)
    np.testing.assert_array_equal(boxes, anchors.boxes[::-1])


def test_duplicate_anchors_collapse_under_nms():
    anchors = np.array([[20, 20, 10, 10], [20, 20, 10, 10], [50, 50, 8, 8]], dtype=float)
    logits = np.column_stack([np.zeros(3), [2.0, 1.0, 0.0]])
    props = decode_proposals(logits, np.zeros((3, 4)), anchors, RES, 3, 0.5, 3)
    want = G.nms([G.ScoredBox(Box(*b), float(s)) for b, s in zip(anchors, fg_probs(logits))], 0.5)
    assert props == want and len(props) == 2


def test_nms_disabled_returns_top_pre_nms_k_unchanged():
    r = np.random.default_rng(2)
    anchors = generate_anchors([(4, 4)], [16], [1.0, 2.0], [1.0])
    logits, deltas = r.normal(size=(32, 2)), r.normal(0, 0.1, (32, 4))
    boxes, scores = decode_proposals_array(logits, deltas, anchors, RES, 10, None, 100)
    order = np.argsort(-fg_probs(logits), kind="stable")[:10]
    want = G.clip_array(G.decode_array(anchors.boxes[order], deltas[order]), RES)
    np.testing.assert_array_equal(boxes, want)
    assert len(boxes) == 10


def test_decode_rejects_non_positive_k():
    with pytest.raises(ValueError):
        decode_proposals_array(np.zeros((1, 2)), np.zeros((1, 4)), np.ones((1, 4)), RES, 0, None, 1)
