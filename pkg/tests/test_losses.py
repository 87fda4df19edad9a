import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowa import tensor as T
from lowa.dataset import Instance
from lowa.geometry import pairwise_giou, to_xyxy
from lowa.losses import (
    LossConfig,
    batch_matching_loss,
    focal_loss,
    giou_box_loss,
    l1_box_loss,
    matching_loss,
)
from lowa.matching import MatchWeights, build_cost_matrix, hungarian_assign
from lowa.model import ModelOutput
from lowa.querygen import Query


def boxes(rng, n):
    return np.column_stack([rng.uniform(0.3, 0.7, (n, 2)), rng.uniform(0.1, 0.4, (n, 2))])


def output(box_arr, logits):
    return ModelOutput(T.parameter(box_arr), None, T.parameter(logits))


def q(text, positive_for=()):
    return Query(text, "class", (("class", text),), frozenset(positive_for))


# -- box terms -----------------------------------------------------------------

def test_l1_examples():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    assert l1_box_loss(T.tensor(b), b).item() == 0.0
    assert l1_box_loss(T.tensor(b + 0.1), b).item() == pytest.approx(0.4, abs=1e-15)
    assert l1_box_loss(T.tensor(np.zeros((0, 4))), np.zeros((0, 4))).item() == 0.0


def test_giou_loss_examples():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    assert giou_box_loss(T.tensor(b), b).item() == pytest.approx(0.0, abs=1e-15)
    # (0,0,1,1) vs (2,0,3,1) in cxcywh
    a, c = np.array([[0.5, 0.5, 1, 1]]), np.array([[2.5, 0.5, 1, 1]])
    assert giou_box_loss(T.tensor(a), c).item() == pytest.approx(4 / 3, abs=1e-15)
    assert giou_box_loss(T.tensor(np.zeros((0, 4))), np.zeros((0, 4))).item() == 0.0


def test_l1_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        target = boxes(rng, 5)
        pred = T.tensor(target + rng.uniform(0.01, 0.05, target.shape) * rng.choice([-1, 1], target.shape))
        assert T.finite_diff_check(lambda p: l1_box_loss(p, target), pred, 1e-6) < 1e-3


def _smooth(pred, target, margin=1e-3):
    """True when no corner coordinates coincide (GIoU is differentiable there)."""
    p, t = to_xyxy(pred), to_xyxy(target)
    return np.abs(p[:, :, None] - t[:, None, :]).min() > margin


def test_giou_gradient_on_smooth_configurations():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 20:
        pred, target = boxes(rng, 4), boxes(rng, 4)
        if not _smooth(pred, target):
            continue
        assert T.finite_diff_check(lambda p: giou_box_loss(p, target), T.tensor(pred), 1e-4) < 1e-3
        checked += 1


# -- focal ---------------------------------------------------------------------

def test_focal_positive_cell_at_large_logit_vanishes():
    assert focal_loss(T.tensor([[50.0]]), [[1]]).item() < 1e-20


def test_focal_gamma_zero_closed_form():
    value = focal_loss(T.tensor([[0.0]]), [[1]], alpha=0.5, gamma=0.0).item()
    assert value == pytest.approx(0.5 * math.log(2), rel=1e-12)
    assert value == pytest.approx(0.3466, abs=1e-4)


def test_focal_gamma_zero_is_half_bce_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.normal(0, 3, (4, 5))
        t = (rng.random((4, 5)) < 0.3).astype(float)
        p = 1 / (1 + np.exp(-x))
        bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum()
        got = focal_loss(T.tensor(x), t, alpha=0.5, gamma=0.0, num_matched=1).item()
        assert got == pytest.approx(0.5 * bce, rel=1e-9)


def test_focal_reference_formula_and_normalisation():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 2, (6, 4))
    t = np.zeros((6, 4))
    t[1, 0] = t[1, 2] = t[4, 3] = 1
    p = 1 / (1 + np.exp(-x))
    cells = np.where(t == 1, -0.25 * (1 - p) ** 2 * np.log(p), -0.75 * p ** 2 * np.log(1 - p))
    assert focal_loss(T.tensor(x), t).item() == pytest.approx(cells.sum() / 2, rel=1e-12)
    assert focal_loss(T.tensor(x), np.zeros((6, 4))).item() == pytest.approx(
        (-0.75 * p ** 2 * np.log(1 - p)).sum(), rel=1e-12)


def test_focal_gradient():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = T.tensor(rng.normal(0, 2, (5, 3)))
        t = (rng.random((5, 3)) < 0.3).astype(float)
        assert T.finite_diff_check(lambda z: focal_loss(z, t), x, 1e-6) < 1e-3


@pytest.mark.parametrize("alpha,gamma", [(-0.1, 2.0), (1.5, 2.0), (0.25, -1.0)])
def test_focal_config_errors(alpha, gamma):
    with pytest.raises(ValueError):
        LossConfig(alpha, gamma)
    with pytest.raises(ValueError):
        focal_loss(T.tensor([[0.0]]), [[1]], alpha, gamma)


# -- matching loss -------------------------------------------------------------

def test_perfect_predictions_give_near_zero_loss():
    inst = [Instance(0, (0.3, 0.3, 0.2, 0.2), "a"), Instance(1, (0.7, 0.6, 0.3, 0.2), "b")]
    queries = [q("a", {0}), q("b", {1}), q("c")]
    pred = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2], [0.5, 0.5, 0.1, 0.1]])
    logits = np.full((3, 3), -40.0)
    logits[0, 0] = logits[1, 1] = 40.0
    v = matching_loss(output(pred, logits), inst, queries)
    assert v.total.item() == pytest.approx(0.0, abs=1e-3)
    assert v.num_matched == 2


def test_no_targets_reduces_to_background_focal():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 2))
    v = matching_loss(output(boxes(rng, 4), logits), [], [q("a"), q("b")])
    assert v.l1.item() == 0.0 and v.giou.item() == 0.0
    assert v.total.item() == pytest.approx(focal_loss(T.tensor(logits), np.zeros((4, 2))).item(), rel=1e-15)


def test_empty_query_set_is_an_error():
    with pytest.raises(ValueError, match="non-empty"):
        matching_loss(output(np.full((2, 4), 0.5), np.zeros((2, 0))), [], [])


def reference_matching_loss(pred, logits, inst, queries, alpha=0.25, gamma=2.0):
    """Straight-line recomputation: brute-force match, then the three terms."""
    import itertools
    P, Q = logits.shape
    pos = [[k for k, qq in enumerate(queries) if i.id in qq.positive_for] for i in inst]
    tgt = np.array([i.box for i in inst])
    sig = 1 / (1 + np.exp(-logits))
    cost = np.zeros((P, len(inst)))
    g = pairwise_giou(to_xyxy(pred), to_xyxy(tgt))
    for a in range(P):
        for b in range(len(inst)):
            cost[a, b] = np.abs(pred[a] - tgt[b]).sum() + (1 - g[a, b]) + np.mean([1 - sig[a, k] for k in pos[b]])
    best = min(itertools.permutations(range(P), len(inst)), key=lambda rows: sum(cost[r, b] for b, r in enumerate(rows)))
    l1 = np.mean([np.abs(pred[r] - tgt[b]).sum() for b, r in enumerate(best)])
    gl = np.mean([1 - g[r, b] for b, r in enumerate(best)])
    t = np.zeros((P, Q))
    for b, r in enumerate(best):
        t[r, pos[b]] = 1
    cells = np.where(t == 1, -alpha * (1 - sig) ** gamma * np.log(sig), -(1 - alpha) * sig ** gamma * np.log(1 - sig))
    focal = cells.sum() / len(inst)
    return l1, gl, focal


def test_matching_loss_matches_straight_line_recomputation():
    rng = np.random.default_rng(6)
    for _ in range(10):
        pred, logits = boxes(rng, 5), rng.normal(size=(5, 6))
        inst = [Instance(0, tuple(boxes(rng, 1)[0]), "a", ["x"]), Instance(1, tuple(boxes(rng, 1)[0]), "b")]
        queries = [q("a", {0}), q("x", {0}), q("b", {1}), q("c"), q("d"), q("e")]
        v = matching_loss(output(pred, logits), inst, queries)
        l1, gl, focal = reference_matching_loss(pred, logits, inst, queries)
        assert v.l1.item() == pytest.approx(l1, rel=1e-12)
        assert v.giou.item() == pytest.approx(gl, rel=1e-12)
        assert v.focal.item() == pytest.approx(focal, rel=1e-12)


def test_total_is_a_single_add_chain():
    rng = np.random.default_rng(7)
    inst = [Instance(0, (0.5, 0.5, 0.2, 0.2), "a")]
    v = matching_loss(output(boxes(rng, 3), rng.normal(size=(3, 2))), inst, [q("a", {0}), q("b")])
    assert v.total.op == "add"
    inner, focal = v.total._parents
    assert focal is v.focal and inner.op == "add" and inner._parents == (v.l1, v.giou)
    assert abs(v.total.item() - (v.l1.item() + v.giou.item() + v.focal.item())) <= 1e-12


def test_assignment_is_computed_on_detached_values():
    rng = np.random.default_rng(8)
    pred, logits = boxes(rng, 4), rng.normal(size=(4, 3))
    inst = [Instance(0, (0.4, 0.4, 0.2, 0.3), "a"), Instance(1, (0.6, 0.6, 0.3, 0.2), "b")]
    queries = [q("a", {0}), q("b", {1}), q("c")]
    pos = [[0], [1]]
    tgt = np.array([i.box for i in inst])
    base = hungarian_assign(build_cost_matrix(pred, logits, tgt, pos)).pairs
    for _ in range(20):
        eps = rng.normal(0, 1e-7, logits.shape)
        assert hungarian_assign(build_cost_matrix(pred, logits + eps, tgt, pos)).pairs == base
    out = output(pred, logits)
    v = matching_loss(out, inst, queries)
    T.backward(v.total)
    assert out.boxes.grad is not None and out.logits.grad is not None


def test_batch_loss_pools_matched_counts():
    rng = np.random.default_rng(9)
    outs, targets, qsets = [], [], []
    for k in range(3):
        outs.append(output(boxes(rng, 4), rng.normal(size=(4, 2))))
        targets.append([Instance(0, tuple(boxes(rng, 1)[0]), "a")])
        qsets.append([q("a", {0}), q("b")])
    v = batch_matching_loss(outs, targets, qsets)
    singles = [matching_loss(o, t, qq) for o, t, qq in zip(outs, targets, qsets)]
    assert v.num_matched == 3
    assert v.l1.item() == pytest.approx(np.mean([s.l1.item() for s in singles]), rel=1e-12)
    assert v.focal.item() == pytest.approx(np.mean([s.focal.item() for s in singles]), rel=1e-12)


def test_matching_weights_change_assignment_only():
    rng = np.random.default_rng(10)
    inst = [Instance(0, (0.5, 0.5, 0.2, 0.2), "a")]
    o = output(boxes(rng, 3), rng.normal(size=(3, 2)))
    v = matching_loss(o, inst, [q("a", {0}), q("b")], LossConfig(match_weights=MatchWeights(0, 0, 1)))
    assert v.num_matched == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_components_non_negative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 4))
    inst = [Instance(k, tuple(boxes(rng, 1)[0]), "a") for k in range(n)]
    queries = [q("a", set(range(n))), q("b")]
    v = matching_loss(output(boxes(rng, 5), rng.normal(0, 3, (5, 2))), inst, queries)
    for part in (v.l1, v.giou, v.focal, v.total):
        assert part.item() >= 0
