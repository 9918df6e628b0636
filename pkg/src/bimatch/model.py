"""Toy query-based mask-classification model and its training loop.

Per modality, learnable queries cross-attend once over the flattened scene
features (shared q/k/v projections, single head), a shared classifier maps
the attended queries to K+1 class probabilities (index 0 is the None class),
and masks come from the sigmoid inner product of queries with projected
mask features. Predictions from both modalities fuse at the pixel level by
summing probability-weighted masks and taking the argmax over real classes.

Training builds a fresh tape per step: forward, match under the configured
mode, segmentation loss (plus the alignment loss in umm_cma mode), backward,
Adam update. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import alignment as al
from . import matching as mt
from .autodiff import Tape, Tensor
from .config import RunConfig
from .costs import (CostWeights, GroundTruthSet, PredictionSet,
                    MODALITY_RGB, MODALITY_X)
from .errors import ContractError, DivergenceError, ShapeError
from .synth import Scene

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def init_params(cfg: RunConfig, mode: str | None = None) -> dict[str, np.ndarray]:
    """Model (and, for umm_cma, refiner) parameter arrays."""
    mode = mode or cfg.mode
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    c, cf, l, k = cfg.c, cfg.cf, cfg.l, cfg.k
    # All linear maps are bias-free: a classifier bias would give the
    # zero-feature prediction path (missing-modality inference) a trainable
    # class prior shared by every query, which floods the fused argmax.
    params = {
        "queries_r": rng.normal(0.0, 1.0, (l, c)),
        "queries_x": rng.normal(0.0, 1.0, (l, c)),
        "proj_q.w": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
        "proj_k.w": rng.normal(0.0, 1.0 / math.sqrt(cf), (cf, c)),
        "proj_v.w": rng.normal(0.0, 1.0 / math.sqrt(cf), (cf, c)),
        "classifier.w": rng.normal(0.0, 1.0 / math.sqrt(c), (c, k + 1)),
        "mask_proj.w": rng.normal(0.0, 1.0 / math.sqrt(cf), (cf, c)),
    }
    if mode == "umm_cma":
        params.update(al.init_refiner(rng, c, "rx"))
        params.update(al.init_refiner(rng, c, "xr"))
    return params


@dataclass
class ForwardOutputs:
    """Tape nodes for one scene's forward pass plus value-level predictions."""

    tape: Tape
    tensors: dict[str, Tensor]          # parameter leaves by name
    scores_r: Tensor                    # L x (K+1) probability rows
    scores_x: Tensor
    masks_r: Tensor                     # L x HW sigmoid masks
    masks_x: Tensor
    queries_r: Tensor                   # L x C attended queries
    queries_x: Tensor
    h: int
    w: int

    def prediction_sets(self) -> tuple[PredictionSet, PredictionSet]:
        shape = (-1, self.h, self.w)
        return (PredictionSet(MODALITY_RGB, self.scores_r.data,
                              self.masks_r.data.reshape(shape)),
                PredictionSet(MODALITY_X, self.scores_x.data,
                              self.masks_x.data.reshape(shape)))


def forward(params: dict[str, np.ndarray], scene: Scene,
            tape: Tape | None = None,
            tensors: dict[str, Tensor] | None = None) -> ForwardOutputs:
    """Single cross-attention forward pass for both modalities."""
    if tape is None:
        tape = Tape()
    if tensors is None:
        tensors = {name: tape.param(arr, name) for name, arr in params.items()}
    c = params["queries_r"].shape[1]
    cf, h, w = scene.feat_r.shape
    if cf != params["proj_k.w"].shape[0]:
        raise ShapeError(
            f"scene feature channels {cf} disagree with projections "
            f"{params['proj_k.w'].shape[0]}")
    scale = 1.0 / math.sqrt(c)

    def one_modality(query_name: str, feat: np.ndarray):
        flat = tape.constant(feat.reshape(cf, h * w).T)       # HW x Cf
        keys = tape.matmul(flat, tensors["proj_k.w"])         # HW x C
        values = tape.matmul(flat, tensors["proj_v.w"])       # HW x C
        q_proj = tape.matmul(tensors[query_name], tensors["proj_q.w"])
        logits = tape.scale(tape.matmul(q_proj, tape.transpose(keys)), scale)
        attn = tape.softmax_rows(logits)                      # L x HW
        # Residual around the cross-attention: a query whose attention lands
        # on featureless (all-zero) regions keeps its own embedding instead
        # of collapsing to zero, which would freeze its gradients and fuse
        # it with every other collapsed query.
        queries = tensors[query_name] + tape.matmul(attn, values)  # L x C
        scores = tape.softmax_rows(
            tape.matmul(queries, tensors["classifier.w"]))
        mask_feat = tape.matmul(flat, tensors["mask_proj.w"])  # HW x C
        masks = tape.sigmoid(tape.matmul(queries, tape.transpose(mask_feat)))
        return scores, masks, queries

    scores_r, masks_r, queries_r = one_modality("queries_r", scene.feat_r)
    scores_x, masks_x, queries_x = one_modality("queries_x", scene.feat_x)
    return ForwardOutputs(tape, tensors, scores_r, scores_x, masks_r, masks_x,
                          queries_r, queries_x, h, w)


def fuse_and_segment(pred_r: PredictionSet, pred_x: PredictionSet) -> np.ndarray:
    """Pixelwise class map: argmax over classes 1..K of the sum over all
    queries of class probability times mask value; ties break to the
    smaller class id."""
    if pred_r.masks.shape != pred_x.masks.shape:
        raise ShapeError("prediction grids disagree")
    k = pred_r.k
    h, w = pred_r.masks.shape[1:]
    scores = np.zeros((k, h * w))
    for pred in (pred_r, pred_x):
        scores += pred.class_scores[:, 1:].T @ pred.flat_masks()
    return (np.argmax(scores, axis=0) + 1).reshape(h, w)


def zero_fill(scene: Scene, subset: str) -> Scene:
    """Zero out the modalities absent from a presence subset tag."""
    feat_r = scene.feat_r if "r" in subset else np.zeros_like(scene.feat_r)
    feat_x = scene.feat_x if "x" in subset else np.zeros_like(scene.feat_x)
    return Scene(feat_r, feat_x, scene.gt, ("r" in subset, "x" in subset))


def match_for_mode(pred_r: PredictionSet, pred_x: PredictionSet,
                   gt: GroundTruthSet, weights: CostWeights,
                   mode: str) -> tuple[mt.Matching, dict]:
    use_union = mode != "cm_only"
    use_completion = mode != "mam_only"
    return mt.match_two_stage(pred_r, pred_x, gt, weights,
                              use_union=use_union,
                              use_completion=use_completion)


def query_sets(outputs: ForwardOutputs, matching: mt.Matching,
               ) -> tuple[al.QuerySet, al.QuerySet]:
    q_r = al.QuerySet(outputs.queries_r.data,
                      matching.assigned_classes(MODALITY_RGB),
                      MODALITY_RGB, outputs.queries_r)
    q_x = al.QuerySet(outputs.queries_x.data,
                      matching.assigned_classes(MODALITY_X),
                      MODALITY_X, outputs.queries_x)
    return q_r, q_x


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[dict]
    mode: str


def train(cfg: RunConfig, train_scenes: list[Scene],
          eval_scenes: list[Scene] | None = None,
          mode: str | None = None) -> TrainResult:
    """Adam training over the scene list, one scene per step (cyclic order).

    Appends one metrics row per epoch (a full pass over the data) and a
    final row, each carrying the running mean loss and per-subset mIoU on
    the evaluation scenes. Raises DivergenceError with a state dump if the
    loss goes non-finite.
    """
    from . import metrics as ev

    if not train_scenes:
        raise ContractError("training needs at least one scene")
    mode = mode or cfg.mode
    max_u = max(s.gt.u for s in train_scenes)
    if cfg.l < max_u:
        raise ContractError(f"L = {cfg.l} < max U = {max_u} in the dataset")

    params = init_params(cfg, mode)
    weights = CostWeights(cfg.w_cls, cfg.w_dice, cfg.w_bce)
    noise_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    adam_m = {n: np.zeros_like(a) for n, a in params.items()}
    adam_v = {n: np.zeros_like(a) for n, a in params.items()}

    metrics_rows = []
    epoch_losses = []

    def eval_row(epoch: int) -> dict:
        scenes = eval_scenes if eval_scenes is not None else train_scenes
        reports = ev.subset_eval(params, scenes, cfg.subsets, cfg)
        miou = {rep.subset: rep.mean_iou for rep in reports}
        loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        return {"epoch": epoch, "loss": loss, "miou": miou}

    def dump_state(step):
        return {"step": step, "mode": mode,
                "params": {k: v.tolist() for k, v in params.items()}}

    n = len(train_scenes)
    for step in range(cfg.steps):
        scene = train_scenes[step % n]
        outputs = forward(params, scene)
        tape, tensors = outputs.tape, outputs.tensors
        for node in (outputs.scores_r, outputs.scores_x,
                     outputs.masks_r, outputs.masks_x):
            if not np.all(np.isfinite(node.data)):
                raise DivergenceError(
                    f"non-finite forward values at step {step}",
                    state=dump_state(step))
        pred_r, pred_x = outputs.prediction_sets()
        matching, _ = match_for_mode(pred_r, pred_x, scene.gt, weights, mode)
        if mode == "mam_only" and any(p.source == mt.SOURCE_CM
                                      for p in matching.pairs):
            raise ContractError("completion pairs present in mam_only mode")

        loss, _ = mt.segmentation_loss(
            tape, outputs.scores_r, outputs.masks_r, outputs.scores_x,
            outputs.masks_x, scene.gt, matching, weights, cfg.none_weight)
        if mode == "umm_cma" and scene.gt.u:
            q_r, q_x = query_sets(outputs, matching)
            noise_r = noise_rng.standard_normal((scene.gt.u, cfg.c))
            noise_x = noise_rng.standard_normal((scene.gt.u, cfg.c))
            align, _ = al.alignment_loss(
                tape, q_r, q_x, tensors, cfg.lambda_mse, cfg.lambda_mmd,
                noise_r, noise_x, cfg.beta_kl)
            loss = loss + align

        loss_value = float(loss.data[0])
        if not math.isfinite(loss_value):
            raise DivergenceError(
                f"non-finite loss {loss_value} at step {step}",
                state=dump_state(step))
        epoch_losses.append(loss_value)

        grads = tape.backward(loss)
        t = step + 1
        for name in params:
            g = grads[tensors[name]]
            adam_m[name] = ADAM_BETA1 * adam_m[name] + (1 - ADAM_BETA1) * g
            adam_v[name] = ADAM_BETA2 * adam_v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = adam_m[name] / (1 - ADAM_BETA1 ** t)
            v_hat = adam_v[name] / (1 - ADAM_BETA2 ** t)
            params[name] = params[name] - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

        if (step + 1) % n == 0:
            metrics_rows.append(eval_row((step + 1) // n))
            epoch_losses = []

    if cfg.steps % n != 0:
        metrics_rows.append(eval_row(cfg.steps // n + 1))
    return TrainResult(params, metrics_rows, mode)


def save_checkpoint(params: dict[str, np.ndarray], path: str | Path):
    payload = {name: {"shape": list(arr.shape),
                      "data": [float(v) for v in arr.ravel()]}
               for name, arr in sorted(params.items())}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        payload = json.loads(Path(path).read_text())
        return {name: np.array(entry["data"], dtype=np.float64)
                .reshape(entry["shape"])
                for name, entry in payload.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed checkpoint: {exc}") from exc
