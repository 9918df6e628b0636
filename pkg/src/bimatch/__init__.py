"""Desk-scale two-modality query matching, alignment, and segmentation engine."""

from .backend import BACKEND
from .assignment import Assignment, CostMatrix, solve_bruteforce, solve_hungarian
from .autodiff import FDReport, Gradients, Tape, Tensor, finite_diff_check
from .costs import (CostWeights, GroundTruthSet, PredictionSet, bce_cost,
                    build_cost_matrix, class_cost, dice_cost)
from .matching import (Matching, MatchPair, match_two_stage, matching_to_json,
                       merge_matchings, segmentation_loss, split_residuals,
                       completion_match, union_match)
from .alignment import (QuerySet, alignment_loss, class_distance, mmd,
                        modality_distance, refine, reorder_by_class)
from .model import (ForwardOutputs, TrainResult, forward, fuse_and_segment,
                    init_params, train)
from .synth import Scene, SynthConfig, generate_benchmark, generate_scene
from .metrics import EvalReport, label_distribution, miou, subset_eval
from .config import RunConfig, load_config

__version__ = "0.1.0"
