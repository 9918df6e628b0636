"""Batch command-line front door.

Verbs: simulate, match, train, eval, analyze, gradcheck, oracle. Standard
output carries only machine-readable JSON/CSV payloads; human-readable
logs and tables go to stderr. Exit codes: 0 ok, 2 invalid config or
unparseable payload, 3 I/O failure, 4 infeasible matching instance,
5 verification failure or training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import matching as mt
from . import metrics as ev
from . import model as md
from . import verify
from .alignment import class_distance, modality_distance
from .config import RunConfig, load_config
from .costs import (CostWeights, GroundTruthSet, PredictionSet,
                    MODALITY_RGB, MODALITY_X)
from .errors import (BimatchError, ConfigError, DivergenceError,
                     GenerationError, InfeasibleError, VerificationError)
from .synth import load_split, rle_decode, write_benchmark

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_VERIFICATION = 5


def _emit(payload):
    sys.stdout.write(json.dumps(payload) + "\n")


def _log(message: str):
    sys.stderr.write(message + "\n")


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
        cfg.__post_init__()  # revalidate the override
    return cfg


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc


def _scenes(cfg: RunConfig, args) -> tuple[list, list]:
    """Train/test scenes from --data when given, else regenerated from the
    configuration (bit-identical to what simulate writes)."""
    if getattr(args, "data", None):
        return load_split(args.data, "train"), load_split(args.data, "test")
    from .synth import generate_benchmark
    synth_cfg = cfg.synth_config()
    train = generate_benchmark(synth_cfg, cfg.n_train)
    test = generate_benchmark(synth_cfg, cfg.n_test, start_index=cfg.n_train)
    return train, test


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_benchmark(cfg.synth_config(), cfg.n_train, cfg.n_test, out)
    _emit({"out": str(out), "n_train": cfg.n_train, "n_test": cfg.n_test,
           "digest": manifest["digest"]})
    return EXIT_OK


def _parse_gt(path: str) -> GroundTruthSet:
    obj = _read_json(path)
    try:
        h, w, k = int(obj["h"]), int(obj["w"]), int(obj["k"])
        items = [(int(entry["class"]), rle_decode(entry["mask_rle"], h, w))
                 for entry in obj["gt"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed ground-truth payload: {exc}") from exc
    return GroundTruthSet(h, w, k, items)


def _parse_predictions(path: str) -> tuple[PredictionSet, PredictionSet]:
    obj = _read_json(path)
    try:
        l, k, h, w = obj["l"], obj["k"], obj["h"], obj["w"]
        sets = []
        for mod in (MODALITY_RGB, MODALITY_X):
            scores = np.array(obj[f"class_scores_{mod}"],
                              dtype=np.float64).reshape(l, k + 1)
            masks = np.array(obj[f"masks_{mod}"],
                             dtype=np.float64).reshape(l, h, w)
            sets.append(PredictionSet(mod, scores, masks))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed prediction payload: {exc}") from exc
    return sets[0], sets[1]


def cmd_match(args) -> int:
    cfg = _load_run_config(args)
    pred_r, pred_x = _parse_predictions(args.pred)
    gt = _parse_gt(args.gt)
    weights = CostWeights(cfg.w_cls, cfg.w_dice, cfg.w_bce)
    matching, diagnostics = md.match_for_mode(pred_r, pred_x, gt, weights,
                                              cfg.mode)
    _emit({"matching": mt.matching_to_json(matching),
           "diagnostics": {
               "mam_cost": diagnostics["mam_cost"],
               "cm_cost_r": diagnostics["cm_cost_r"],
               "cm_cost_x": diagnostics["cm_cost_x"],
               "mam_by_class": {str(c): m for c, m in
                                sorted(diagnostics["mam_by_class"].items())},
           }})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    train_scenes, test_scenes = _scenes(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        result = md.train(cfg, train_scenes, test_scenes)
    except DivergenceError as exc:
        dump = out / "divergence_dump.json"
        dump.write_text(json.dumps(exc.state))
        _log(f"state dump written to {dump}")
        raise
    md.save_checkpoint(result.params, out / "checkpoint.json")
    with open(out / "metrics.jsonl", "w") as fh:
        for row in result.metrics:
            fh.write(json.dumps(row) + "\n")
    _log(f"trained {cfg.steps} steps ({result.mode}) in "
         f"{time.time() - started:.1f}s")
    _emit({"checkpoint": str(out / "checkpoint.json"),
           "metrics": str(out / "metrics.jsonl"),
           "final": result.metrics[-1] if result.metrics else None})
    return EXIT_OK


def _distance_diagnostics(cfg: RunConfig, params, scenes) -> dict:
    """Mean raw-query distances over scenes, matched via the full two-stage
    pipeline regardless of the training mode."""
    weights = CostWeights(cfg.w_cls, cfg.w_dice, cfg.w_bce)
    mod_d, cls_d = [], []
    for scene in scenes:
        outputs = md.forward(params, scene)
        matching, _ = mt.match_two_stage(*outputs.prediction_sets(),
                                         scene.gt, weights)
        q_r, q_x = md.query_sets(outputs, matching)
        if scene.gt.u == 0:
            continue
        mod_d.append(modality_distance(q_r, q_x))
        cls_d.append(class_distance(q_r, q_x))
    return {"modality_distance": float(np.mean(mod_d)) if mod_d else 0.0,
            "class_distance": float(np.mean(cls_d)) if cls_d else 0.0}


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    _, test_scenes = _scenes(cfg, args)
    params = md.load_checkpoint(args.checkpoint)
    reports = ev.subset_eval(params, test_scenes, list(cfg.subsets), cfg)
    diagnostics = _distance_diagnostics(cfg, params, test_scenes)
    _log(ev.report_table(reports))
    _emit({"reports": ev.report_to_json(reports), "diagnostics": diagnostics})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_run_config(args)
    _, test_scenes = _scenes(cfg, args)
    params = md.load_checkpoint(args.checkpoint)
    weights = CostWeights(cfg.w_cls, cfg.w_dice, cfg.w_bce)
    matchings, gts = [], []
    for scene in test_scenes:
        outputs = md.forward(params, scene)
        matching, _ = mt.match_two_stage(*outputs.prediction_sets(),
                                         scene.gt, weights)
        matchings.append(matching)
        gts.append(scene.gt)
    dist = ev.label_distribution(matchings, gts)
    csv_text = ev.distribution_csv(dist)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "label_distribution.csv").write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    diagnostics = _distance_diagnostics(cfg, params, test_scenes)
    _emit({"distribution": {str(c): [fr, fx] for c, (fr, fx) in dist.items()},
           "diagnostics": diagnostics})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    graphs = verify.random_graph_fd_sweep(n_graphs=args.graphs)
    suite = verify.model_fd_suite()
    payload = {
        "random_graphs": graphs,
        "losses": {name: {"max_rel_err": rep.max_rel_err,
                          "tol": rep.tol, "passed": rep.passed}
                   for name, rep in suite.items()},
    }
    _emit(payload)
    if graphs["failures"] or not all(r.passed for r in suite.values()):
        raise VerificationError("finite-difference check failed")
    return EXIT_OK


def cmd_oracle(args) -> int:
    assignment = verify.assignment_oracle_sweep(n_cases=args.cases)
    union = verify.union_optimality_sweep(n_cases=max(1, args.cases // 2))
    coverage = verify.coverage_sweep(n_cases=args.cases)
    _emit({"assignment": assignment, "union": union, "coverage": coverage})
    if assignment["mismatches"] or union["mismatches"] or \
            coverage["coverage_violations"] or coverage["override_violations"]:
        raise VerificationError("oracle sweep found mismatches")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimatch",
        description="two-modality matching, alignment, and segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--mode", default=None,
                       help="override the config mode")
        if out_required is not None:
            p.add_argument("--out", required=out_required,
                           help="output directory")

    p = sub.add_parser("simulate", help="write a scene benchmark to disk")
    common(p, out_required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("match", help="match serialized predictions to labels")
    common(p, out_required=None)
    p.add_argument("--pred", required=True, help="prediction JSON file")
    p.add_argument("--gt", required=True, help="ground-truth JSON file")
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("train", help="train the toy model")
    common(p, out_required=True)
    p.add_argument("--data", default=None,
                   help="benchmark directory (default: regenerate from config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over subsets")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="class-to-modality matching distribution")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, out_required=None)
    p.add_argument("--graphs", type=int, default=200,
                   help="random graphs to sweep")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle", help="assignment and matching oracle sweeps")
    common(p, out_required=None)
    p.add_argument("--cases", type=int, default=1000)
    p.set_defaults(fn=cmd_oracle)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, GenerationError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_IO
    except InfeasibleError as exc:
        _log(f"infeasible: {exc}")
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        _log(f"diverged: {exc}")
        return EXIT_VERIFICATION
    except VerificationError as exc:
        _log(f"verification failed: {exc}")
        return EXIT_VERIFICATION
    except BimatchError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
