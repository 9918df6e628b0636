"""Two-stage matching pipeline and the segmentation loss."""

import math

import numpy as np
import pytest

from bimatch.autodiff import Tape, finite_diff_check
from bimatch.costs import GroundTruthSet, PredictionSet
from bimatch.errors import ContractError, InfeasibleError
from bimatch.matching import (MatchPair, Matching, SOURCE_CM, SOURCE_MAM,
                              SOURCE_NONE, completion_match, match_two_stage,
                              matching_to_json, merge_matchings,
                              segmentation_loss, split_residuals, union_match)
from bimatch.verify import random_gt, random_prediction_set, coverage_sweep


def _pred_from_costs(class_cols, modality, k, h, w):
    """Prediction set whose class-cost row against label j is -class_cols[i][j].

    Masks are uniform 0.5 so mask costs are identical across queries and the
    class component alone decides the assignment.
    """
    l = len(class_cols)
    scores = np.zeros((l, k + 1))
    for i, row in enumerate(class_cols):
        leftover = 1.0 - sum(row)
        scores[i, 0] = leftover
        scores[i, 1:1 + len(row)] = row
    masks = np.full((l, h, w), 0.5)
    return PredictionSet(modality, scores, masks)


def _simple_gt(u, k=4, h=4, w=4):
    items = []
    for i in range(u):
        mask = np.zeros((h, w))
        mask[i, :] = 1.0
        items.append((i + 1, mask))
    return GroundTruthSet(h, w, k, items)


def test_union_match_empty_gt():
    gt = GroundTruthSet(4, 4, 4, [])
    pred_r = _pred_from_costs([[0.2], [0.1]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.3], [0.4]], "x", 4, 4, 4)
    sigma = union_match(pred_r, pred_x, gt)
    assert all(p.source == SOURCE_NONE and p.label_index is None
               for p in sigma.pairs)


def test_union_match_prefers_rigged_rgb_rows():
    # both labels much cheaper in the RGB block
    gt = _simple_gt(2)
    pred_r = _pred_from_costs([[0.9, 0.05], [0.05, 0.9]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.2, 0.1], [0.1, 0.2]], "x", 4, 4, 4)
    sigma = union_match(pred_r, pred_x, gt)
    matched = {p.query_index: p.label_index for p in sigma.pairs
               if p.label_index is not None}
    assert matched == {0: 0, 1: 1}
    assert all(p.label_index is None for p in sigma.pairs if p.query_index >= 2)


def test_union_match_infeasible():
    gt = _simple_gt(3)
    pred_r = _pred_from_costs([[0.1, 0.1, 0.1]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.1, 0.1, 0.1]], "x", 4, 4, 4)
    with pytest.raises(InfeasibleError):
        union_match(pred_r, pred_x, gt)


def test_split_residuals_all_labels_to_rgb():
    gt = _simple_gt(2)
    pred_r = _pred_from_costs([[0.9, 0.05], [0.05, 0.9]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.2, 0.1], [0.1, 0.2]], "x", 4, 4, 4)
    sigma = union_match(pred_r, pred_x, gt)
    res = split_residuals(sigma, gt)
    assert res.residual_labels_r == []
    assert res.residual_labels_x == [0, 1]
    assert res.residual_queries_x == [0, 1]
    assert res.residual_queries_r == []


def test_split_residuals_complement_identity(rng):
    for _ in range(25):
        l, k = 4, 5
        u = int(rng.integers(0, 5))
        gt = random_gt(rng, u, k, 4, 4)
        pred_r = random_prediction_set(rng, l, k, 4, 4, "r")
        pred_x = random_prediction_set(rng, l, k, 4, 4, "x")
        sigma = union_match(pred_r, pred_x, gt)
        res = split_residuals(sigma, gt)
        assert len(res.residual_labels_r) == len(res.matched_labels_x)
        assert len(res.residual_labels_x) == len(res.matched_labels_r)
        assert sorted(res.matched_labels_r + res.residual_labels_r) == \
            list(range(u))


def test_completion_assigns_all_residual_labels():
    gt = _simple_gt(2)
    pred_r = _pred_from_costs([[0.9, 0.05], [0.05, 0.9]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.2, 0.1], [0.1, 0.2]], "x", 4, 4, 4)
    sigma = union_match(pred_r, pred_x, gt)
    res = split_residuals(sigma, gt)
    frag_r, frag_x = completion_match(pred_r, pred_x, gt, res)
    assert frag_r == []
    assert sorted(p.label_index for p in frag_x) == [0, 1]
    assert all(p.source == SOURCE_CM for p in frag_x)


def test_completion_picks_unique_minimum_vs_bruteforce(rng):
    from bimatch.assignment import CostMatrix, solve_bruteforce
    from bimatch.costs import build_cost_matrix

    for _ in range(25):
        l, k = 4, 5
        u = int(rng.integers(1, 5))
        gt = random_gt(rng, u, k, 4, 4)
        pred_r = random_prediction_set(rng, l, k, 4, 4, "r")
        pred_x = random_prediction_set(rng, l, k, 4, 4, "x")
        sigma = union_match(pred_r, pred_x, gt)
        res = split_residuals(sigma, gt)
        frag_r, frag_x = completion_match(pred_r, pred_x, gt, res)
        cost = build_cost_matrix([pred_r, pred_x], gt)
        for frag, queries, labels, offset in (
                (frag_r, res.residual_queries_r, res.residual_labels_r, 0),
                (frag_x, res.residual_queries_x, res.residual_labels_x, l)):
            if not labels:
                assert frag == []
                continue
            sub = cost[np.ix_([q + offset for q in queries], labels)]
            want = solve_bruteforce(CostMatrix(sub)).total_cost
            got = sum(cost[p.query_index, p.label_index] for p in frag)
            assert got == pytest.approx(want, abs=1e-9)


def test_merge_examples_and_conflict():
    gt = _simple_gt(2)
    l = 2
    sigma = Matching(l, [
        MatchPair(0, "r", 0, 1, SOURCE_MAM),
        MatchPair(1, "r", None, 0, SOURCE_NONE),
        MatchPair(2, "x", None, 0, SOURCE_NONE),
        MatchPair(3, "x", None, 0, SOURCE_NONE),
    ])
    frag_r = [MatchPair(1, "r", 1, 2, SOURCE_CM)]
    frag_x = [MatchPair(2, "x", 0, 1, SOURCE_CM)]
    merged = merge_matchings(sigma, frag_r, frag_x)
    assert merged.pairs[0].source == SOURCE_MAM and merged.pairs[0].class_id == 1
    assert merged.pairs[1].source == SOURCE_CM and merged.pairs[1].class_id == 2
    assert merged.pairs[3].source == SOURCE_NONE

    clash = [MatchPair(0, "r", 1, 2, SOURCE_CM)]
    with pytest.raises(ContractError, match="conflict"):
        merge_matchings(sigma, clash, [])


def test_merge_equals_literal_max_rule(rng):
    # exclusivity makes max over (class ids, masks) equal source priority
    for _ in range(25):
        l, k = 4, 5
        u = int(rng.integers(0, 5))
        gt = random_gt(rng, u, k, 4, 4)
        pred_r = random_prediction_set(rng, l, k, 4, 4, "r")
        pred_x = random_prediction_set(rng, l, k, 4, 4, "x")
        sigma = union_match(pred_r, pred_x, gt)
        res = split_residuals(sigma, gt)
        frag_r, frag_x = completion_match(pred_r, pred_x, gt, res)
        merged = merge_matchings(sigma, frag_r, frag_x)
        frag_by_query = {p.query_index: p for p in frag_r + frag_x}
        zero = np.zeros((4, 4))
        for i, p in enumerate(merged.pairs):
            candidates = [sigma.pairs[i], frag_by_query.get(i)]
            class_ids = [c.class_id if c else 0 for c in candidates]
            masks = [gt.mask_of(c.label_index) if c and c.label_index is not None
                     else zero for c in candidates]
            assert p.class_id == max(class_ids)
            want_mask = np.maximum(masks[0], masks[1])
            got_mask = gt.mask_of(p.label_index) if p.label_index is not None \
                else zero
            assert np.array_equal(got_mask, want_mask)


def test_two_stage_coverage_and_conservatism():
    report = coverage_sweep(n_cases=200, seed=11)
    assert report["coverage_violations"] == 0
    assert report["override_violations"] == 0


def test_two_stage_counting_identity(rng):
    for _ in range(20):
        l, k = 5, 6
        u = int(rng.integers(0, 6))
        gt = random_gt(rng, u, k, 4, 4)
        pred_r = random_prediction_set(rng, l, k, 4, 4, "r")
        pred_x = random_prediction_set(rng, l, k, 4, 4, "x")
        merged, _ = match_two_stage(pred_r, pred_x, gt)
        n_mam = sum(p.source == SOURCE_MAM for p in merged.pairs)
        n_cm = sum(p.source == SOURCE_CM for p in merged.pairs)
        assert n_mam + n_cm == 2 * u


def test_disabling_completion_reproduces_plain_matcher(rng):
    gt = random_gt(rng, 3, 5, 4, 4)
    pred_r = random_prediction_set(rng, 4, 5, 4, 4, "r")
    pred_x = random_prediction_set(rng, 4, 5, 4, 4, "x")
    plain = union_match(pred_r, pred_x, gt)
    merged, _ = match_two_stage(pred_r, pred_x, gt, use_completion=False)
    assert [(p.label_index, p.source) for p in merged.pairs] == \
        [(p.label_index, p.source) for p in plain.pairs]


def test_stage_order_is_union_first():
    # label's union-best query is in RGB; a per-modality-first pipeline
    # would tag both assignments as completion output instead
    gt = _simple_gt(1)
    pred_r = _pred_from_costs([[0.9], [0.1]], "r", 4, 4, 4)
    pred_x = _pred_from_costs([[0.8], [0.2]], "x", 4, 4, 4)
    merged, diag = match_two_stage(pred_r, pred_x, gt)
    assert merged.pairs[0].source == SOURCE_MAM
    assert merged.pairs[0].class_id == 1
    assert merged.pairs[2].source == SOURCE_CM  # x side filled by completion
    assert diag["mam_by_class"] == {1: "r"}


def test_serialization_field_order():
    l = 1
    m = Matching(l, [MatchPair(0, "r", 0, 3, SOURCE_MAM),
                     MatchPair(1, "x", None, 0, SOURCE_NONE)])
    obj = matching_to_json(m)
    assert obj == [
        {"query": 0, "modality": "r", "class": 3, "source": "mam"},
        {"query": 1, "modality": "x", "class": None, "source": "none"},
    ]
    assert [list(entry.keys()) for entry in obj] == \
        [["query", "modality", "class", "source"]] * 2


def _taped_predictions(tape, scores, masks_hw):
    s = tape.softmax_rows(tape.param(scores))
    m = tape.sigmoid(tape.param(masks_hw))
    return s, m


def test_seg_loss_perfect_fit_near_zero():
    h = w = 4
    gt = _simple_gt(1, k=2, h=h, w=w)
    g = gt.mask_of(0).ravel()
    tape = Tape()
    # logits hugely in favor of the assigned class and the exact mask
    scores_r, masks_r = _taped_predictions(
        tape, np.array([[-50.0, 50.0, -50.0]]), (g * 2 - 1)[None, :] * 50.0)
    scores_x, masks_x = _taped_predictions(
        tape, np.array([[-50.0, 50.0, -50.0]]), (g * 2 - 1)[None, :] * 50.0)
    matching = Matching(1, [MatchPair(0, "r", 0, 1, SOURCE_MAM),
                            MatchPair(1, "x", 0, 1, SOURCE_CM)])
    loss, comps = segmentation_loss(tape, scores_r, masks_r, scores_x,
                                    masks_x, gt, matching)
    assert comps["ce"] < 1e-6
    assert comps["bce"] < 1e-6
    assert comps["dice"] < 1e-3


def test_seg_loss_uniform_none_closed_form():
    h = w = 4
    k = 4
    gt = GroundTruthSet(h, w, k, [])
    l = 3
    tape = Tape()
    scores_r, masks_r = _taped_predictions(
        tape, np.zeros((l, k + 1)), np.zeros((l, h * w)))
    scores_x, masks_x = _taped_predictions(
        tape, np.zeros((l, k + 1)), np.zeros((l, h * w)))
    matching = Matching(l, [MatchPair(i, "r" if i < l else "x", None, 0,
                                      SOURCE_NONE) for i in range(2 * l)])
    none_weight = 0.1
    loss, comps = segmentation_loss(tape, scores_r, masks_r, scores_x,
                                    masks_x, gt, matching,
                                    none_weight=none_weight)
    # class term: none_weight * ln(K+1) per query
    assert comps["ce"] == pytest.approx(2 * l * none_weight * math.log(k + 1),
                                        rel=1e-9)
    assert comps["dice"] == 0.0
    # masks are sigmoid(0) = 0.5 against the all-zero target
    assert comps["bce"] == pytest.approx(2 * l * math.log(2.0), rel=1e-9)
    assert loss.data[0] == pytest.approx(comps["ce"] + comps["bce"], rel=1e-9)


def test_seg_loss_size_mismatch_rejected():
    gt = _simple_gt(1, k=2)
    tape = Tape()
    scores_r, masks_r = _taped_predictions(tape, np.zeros((3, 3)),
                                           np.zeros((3, 16)))
    scores_x, masks_x = _taped_predictions(tape, np.zeros((3, 3)),
                                           np.zeros((3, 16)))
    matching = Matching(2, [MatchPair(i, "r" if i < 2 else "x", None, 0,
                                      SOURCE_NONE) for i in range(4)])
    with pytest.raises(ContractError):
        segmentation_loss(tape, scores_r, masks_r, scores_x, masks_x, gt,
                          matching)


def test_seg_loss_gradient_matches_finite_differences(rng):
    h = w = 3
    gt = _simple_gt(2, k=3, h=h, w=w)
    matching = Matching(2, [
        MatchPair(0, "r", 0, 1, SOURCE_MAM),
        MatchPair(1, "r", 1, 2, SOURCE_CM),
        MatchPair(2, "x", 1, 2, SOURCE_MAM),
        MatchPair(3, "x", None, 0, SOURCE_NONE),
    ])
    base = [rng.normal(size=(2, 4)), rng.normal(size=(2, h * w)),
            rng.normal(size=(2, 4)), rng.normal(size=(2, h * w))]

    def build(params):
        tape = Tape()
        scores_r, masks_r = _taped_predictions(tape, params[0], params[1])
        scores_x, masks_x = _taped_predictions(tape, params[2], params[3])
        loss, _ = segmentation_loss(tape, scores_r, masks_r, scores_x,
                                    masks_x, gt, matching)
        return tape, loss

    tape, loss = build(base)
    from bimatch.autodiff import Tensor
    leaves = [Tensor(tape, i) for i, node in enumerate(tape.nodes)
              if node.is_param]
    grads = tape.backward(loss)
    analytic = [grads[leaf] for leaf in leaves]

    def value(params):
        _, total = build(params)
        return float(total.data[0])

    report = finite_diff_check(value, base, analytic)
    assert report.max_rel_err < 1e-4
