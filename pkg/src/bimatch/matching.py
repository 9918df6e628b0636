"""Two-stage label matching across modalities, plus the training loss.

Stage 1 (source tag "mam") matches ground-truth labels against the union of
both modalities' queries with no modality constraint. Stage 2 (source tag
"cm") completes the matching per modality: each modality receives the labels
stage 1 gave to the other side, solved over its still-unmatched queries.
After the merge every label is matched exactly once in each modality, which
is the property the training loss and the alignment stage rely on.

Matching runs in a no-gradient regime; only segmentation_loss records tape
operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import CostMatrix, solve_hungarian
from .autodiff import Tape, Tensor
from .costs import (CostWeights, GroundTruthSet, PredictionSet,
                    MODALITY_RGB, MODALITY_X, build_cost_matrix)
from .errors import ContractError, InfeasibleError

SOURCE_MAM = "mam"    # stage 1: modality-agnostic union pass
SOURCE_CM = "cm"      # stage 2: per-modality completion pass
SOURCE_NONE = "none"

CE_GUARD = 1e-12
BCE_CLAMP = 1e-7


@dataclass
class MatchPair:
    """One query's assignment: a label index into the ground-truth set or None."""

    query_index: int          # 0..2L-1; RGB block first
    modality: str
    label_index: int | None
    class_id: int             # 0 for None
    source: str

    def __post_init__(self):
        if (self.label_index is None) != (self.source == SOURCE_NONE):
            raise ContractError("source is 'none' exactly when the label is None")
        if (self.label_index is None) != (self.class_id == 0):
            raise ContractError("class id is 0 exactly when the label is None")


@dataclass
class Matching:
    """One MatchPair per query in the union, ordered by query index."""

    l: int                    # queries per modality
    pairs: list[MatchPair] = field(default_factory=list)

    def __post_init__(self):
        if len(self.pairs) != 2 * self.l:
            raise ContractError(
                f"expected {2 * self.l} pairs, got {len(self.pairs)}")
        for i, p in enumerate(self.pairs):
            if p.query_index != i:
                raise ContractError("pairs must be ordered by query index")
            expect = MODALITY_RGB if i < self.l else MODALITY_X
            if p.modality != expect:
                raise ContractError(
                    f"query {i} must carry modality {expect!r}")
        for mod in (MODALITY_RGB, MODALITY_X):
            labels = [p.label_index for p in self.pairs
                      if p.modality == mod and p.label_index is not None]
            if len(labels) != len(set(labels)):
                raise ContractError(f"label matched twice within modality {mod!r}")

    def pairs_for(self, modality: str) -> list[MatchPair]:
        return [p for p in self.pairs if p.modality == modality]

    def assigned_classes(self, modality: str) -> np.ndarray:
        """Per-query class ids (0 = None) for one modality, local indexing."""
        return np.array([p.class_id for p in self.pairs_for(modality)],
                        dtype=np.int64)


@dataclass
class Residuals:
    """Labels and queries left unmatched per modality after stage 1."""

    matched_labels_r: list[int]
    matched_labels_x: list[int]
    residual_labels_r: list[int]
    residual_labels_x: list[int]
    residual_queries_r: list[int]   # local indices 0..L-1
    residual_queries_x: list[int]


def _empty_matching(l: int) -> Matching:
    pairs = [MatchPair(i, MODALITY_RGB if i < l else MODALITY_X,
                       None, 0, SOURCE_NONE) for i in range(2 * l)]
    return Matching(l, pairs)


def _check_same_l(pred_r: PredictionSet, pred_x: PredictionSet) -> int:
    if pred_r.l != pred_x.l:
        raise ContractError(
            f"query counts disagree: rgb {pred_r.l} vs x {pred_x.l}")
    return pred_r.l


def union_match(pred_r: PredictionSet, pred_x: PredictionSet,
                gt: GroundTruthSet, weights: CostWeights = CostWeights(),
                cost_union: np.ndarray | None = None) -> Matching:
    """Stage 1: one globally optimal assignment over the 2L-query union."""
    l = _check_same_l(pred_r, pred_x)
    if 2 * l < gt.u:
        raise InfeasibleError(f"2L = {2 * l} < U = {gt.u}")
    if gt.u == 0:
        return _empty_matching(l)
    if cost_union is None:
        cost_union = build_cost_matrix([pred_r, pred_x], gt, weights)
    sol = solve_hungarian(CostMatrix(cost_union))
    by_query = {row: col for row, col in sol.pairs}
    pairs = []
    for i in range(2 * l):
        mod = MODALITY_RGB if i < l else MODALITY_X
        if i in by_query:
            label = by_query[i]
            pairs.append(MatchPair(i, mod, label, gt.class_of(label), SOURCE_MAM))
        else:
            pairs.append(MatchPair(i, mod, None, 0, SOURCE_NONE))
    return Matching(l, pairs)


def split_residuals(sigma_a: Matching, gt: GroundTruthSet) -> Residuals:
    """Stage 2 bookkeeping: per-modality matched/unmatched labels and queries."""
    l = sigma_a.l
    matched_r = [p.label_index for p in sigma_a.pairs[:l] if p.label_index is not None]
    matched_x = [p.label_index for p in sigma_a.pairs[l:] if p.label_index is not None]
    all_labels = list(range(gt.u))
    return Residuals(
        matched_labels_r=matched_r,
        matched_labels_x=matched_x,
        residual_labels_r=[i for i in all_labels if i not in matched_r],
        residual_labels_x=[i for i in all_labels if i not in matched_x],
        residual_queries_r=[p.query_index for p in sigma_a.pairs[:l]
                            if p.label_index is None],
        residual_queries_x=[p.query_index - l for p in sigma_a.pairs[l:]
                            if p.label_index is None],
    )


def completion_match(pred_r: PredictionSet, pred_x: PredictionSet,
                     gt: GroundTruthSet, residuals: Residuals,
                     weights: CostWeights = CostWeights(),
                     cost_union: np.ndarray | None = None,
                     ) -> tuple[list[MatchPair], list[MatchPair]]:
    """Stage 2: per-modality assignment of the labels stage 1 left out."""
    l = _check_same_l(pred_r, pred_x)
    if cost_union is None:
        cost_union = build_cost_matrix([pred_r, pred_x], gt, weights)
    frags = []
    for mod, queries, labels, offset in (
            (MODALITY_RGB, residuals.residual_queries_r,
             residuals.residual_labels_r, 0),
            (MODALITY_X, residuals.residual_queries_x,
             residuals.residual_labels_x, l)):
        if len(queries) < len(labels):
            raise InfeasibleError(
                f"modality {mod!r}: {len(queries)} residual queries for "
                f"{len(labels)} residual labels")
        frag = []
        if labels:
            sub = cost_union[np.ix_([q + offset for q in queries], labels)]
            sol = solve_hungarian(CostMatrix(sub))
            for row, col in sol.pairs:
                label = labels[col]
                frag.append(MatchPair(queries[row] + offset, mod, label,
                                      gt.class_of(label), SOURCE_CM))
        frags.append(frag)
    return frags[0], frags[1]


def merge_matchings(sigma_a: Matching, frag_r: list[MatchPair],
                    frag_x: list[MatchPair]) -> Matching:
    """Overlay completion fragments on stage 1; stage 1 wins by construction.

    The merge rule in max form (class ids with None encoded as 0, masks as
    all-zero) reduces to source priority because each query carries at most
    one non-None source; a query with two sources is an upstream bug.
    """
    final = {p.query_index: p for p in sigma_a.pairs}
    for frag in (frag_r, frag_x):
        for p in frag:
            current = final[p.query_index]
            if current.label_index is not None:
                raise ContractError(
                    f"merge conflict: query {p.query_index} carries two sources")
            final[p.query_index] = p
    pairs = [final[i] for i in range(2 * sigma_a.l)]
    # max-combination cross-check: max over {stage1, fragments, 0} class ids
    # must equal the selected class.
    frag_by_query = {p.query_index: p.class_id for p in frag_r + frag_x}
    for i, p in enumerate(pairs):
        c_a = sigma_a.pairs[i].class_id
        c_s = frag_by_query.get(i, 0)
        if max(c_a, c_s) != p.class_id:
            raise ContractError("merge rule deviated from max combination")
    return Matching(sigma_a.l, pairs)


def match_two_stage(pred_r: PredictionSet, pred_x: PredictionSet,
                    gt: GroundTruthSet, weights: CostWeights = CostWeights(),
                    use_union: bool = True, use_completion: bool = True,
                    ) -> tuple[Matching, dict]:
    """Run the full pipeline; stage switches implement the ablation modes.

    use_union=False skips stage 1 (every label becomes residual in both
    modalities); use_completion=False returns the stage 1 matching as-is.
    """
    l = _check_same_l(pred_r, pred_x)
    if l < gt.u:
        raise InfeasibleError(f"L = {l} < U = {gt.u}")
    cost_union = build_cost_matrix([pred_r, pred_x], gt, weights)
    if use_union:
        sigma_a = union_match(pred_r, pred_x, gt, weights, cost_union)
    else:
        sigma_a = _empty_matching(l)
    diagnostics = {
        "mam_cost": _pairs_cost(
            [p for p in sigma_a.pairs if p.label_index is not None], cost_union),
        "mam_by_class": {p.class_id: p.modality for p in sigma_a.pairs
                         if p.label_index is not None},
    }
    if use_completion:
        residuals = split_residuals(sigma_a, gt)
        frag_r, frag_x = completion_match(pred_r, pred_x, gt, residuals,
                                          weights, cost_union)
        merged = merge_matchings(sigma_a, frag_r, frag_x)
        diagnostics["cm_cost_r"] = _pairs_cost(frag_r, cost_union)
        diagnostics["cm_cost_x"] = _pairs_cost(frag_x, cost_union)
    else:
        merged = sigma_a
        diagnostics["cm_cost_r"] = 0.0
        diagnostics["cm_cost_x"] = 0.0
    return merged, diagnostics


def _pairs_cost(pairs: list[MatchPair], cost: np.ndarray) -> float:
    return float(sum(cost[p.query_index, p.label_index] for p in pairs))


def matching_to_json(m: Matching) -> list[dict]:
    """Wire format: stable field order (query, modality, class, source)."""
    return [{"query": p.query_index,
             "modality": p.modality,
             "class": p.class_id if p.label_index is not None else None,
             "source": p.source}
            for p in m.pairs]


def segmentation_loss(tape: Tape, scores_r: Tensor, masks_r: Tensor,
                      scores_x: Tensor, masks_x: Tensor, gt: GroundTruthSet,
                      matching: Matching,
                      weights: CostWeights = CostWeights(),
                      none_weight: float = 0.1,
                      ) -> tuple[Tensor, dict]:
    """Differentiable loss under a fixed matching.

    Per query: weighted class cross-entropy toward the assigned class (class
    0 with weight none_weight when unmatched), mean-pixel BCE toward the
    assigned mask (the all-zero mask when unmatched), and dice for matched
    queries only. Sums over queries and modalities. Returns the scalar loss
    node plus a float component breakdown {"ce", "bce", "dice"}.
    """
    l = matching.l
    if scores_r.shape[0] != l or scores_x.shape[0] != l:
        raise ContractError("matching size disagrees with prediction nodes")
    hw = masks_r.shape[1]
    components = {"ce": 0.0, "bce": 0.0, "dice": 0.0}
    total = None
    for scores, masks, mod in ((scores_r, masks_r, MODALITY_RGB),
                               (scores_x, masks_x, MODALITY_X)):
        pairs = matching.pairs_for(mod)
        kp1 = scores.shape[1]

        onehot = np.zeros((l, kp1))
        qweights = np.empty((l, 1))
        gmasks = np.zeros((l, hw))
        matched = []
        for j, p in enumerate(pairs):
            onehot[j, p.class_id] = 1.0
            qweights[j, 0] = none_weight if p.class_id == 0 else 1.0
            if p.label_index is not None:
                gmasks[j] = gt.mask_of(p.label_index).ravel()
                matched.append(j)

        p_sel = tape.sum(tape.mul(scores, tape.constant(onehot)), axis=1)
        ce_rows = -tape.log(p_sel + CE_GUARD)
        ce = tape.sum(tape.mul(ce_rows, tape.constant(qweights)))

        mc = tape.clamp(masks, BCE_CLAMP, 1.0 - BCE_CLAMP)
        g_const = tape.constant(gmasks)
        pos = tape.mul(g_const, tape.log(mc))
        neg = tape.mul(tape.constant(1.0 - gmasks), tape.log(1.0 - mc))
        bce_rows = tape.mean(-(pos + neg), axis=1)
        bce = tape.sum(bce_rows)

        mod_total = weights.w_cls * ce + weights.w_bce * bce
        components["ce"] += float(ce.data[0])
        components["bce"] += float(bce.data[0])

        if matched:
            select = np.zeros((len(matched), l))
            for row, j in enumerate(matched):
                select[row, j] = 1.0
            msel = tape.matmul(tape.constant(select), masks)
            gsel = gmasks[matched]
            inter = tape.sum(tape.mul(msel, tape.constant(gsel)), axis=1)
            num = 2.0 * inter + 1.0
            den = tape.sum(msel, axis=1) + tape.constant(
                gsel.sum(axis=1, keepdims=True) + 1.0)
            dice = tape.sum(1.0 - tape.div(num, den))
            mod_total = mod_total + weights.w_dice * dice
            components["dice"] += float(dice.data[0])

        total = mod_total if total is None else total + mod_total
    return total, components
