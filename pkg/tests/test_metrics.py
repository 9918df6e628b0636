"""IoU metrics, subset evaluation, and the matching distribution analysis."""

import numpy as np
import pytest

from bimatch.config import RunConfig
from bimatch.costs import GroundTruthSet
from bimatch.errors import ConfigError
from bimatch.matching import MatchPair, Matching, SOURCE_CM, SOURCE_MAM, SOURCE_NONE
from bimatch.metrics import (IoUAccumulator, distribution_csv,
                             label_distribution, miou, render_gt_map,
                             report_table, report_to_json, subset_eval)
from bimatch.model import init_params, train
from bimatch.synth import generate_benchmark


def _gt_from_map(class_map, k):
    items = []
    for c in np.unique(class_map):
        if c == 0:
            continue
        items.append((int(c), (class_map == c).astype(float)))
    h, w = class_map.shape
    return GroundTruthSet(h, w, k, items)


def test_miou_identity():
    class_map = np.array([[1, 1, 2], [1, 3, 2], [3, 3, 2]])
    gt = _gt_from_map(class_map, 4)
    rep = miou(render_gt_map(gt), gt)
    assert rep.mean_iou == 1.0
    assert all(v == 1.0 for v in rep.per_class_iou.values())


def test_miou_disjoint_class_is_zero():
    gt_map = np.array([[1, 1], [1, 1]])
    pred = np.array([[2, 2], [2, 2]])
    gt = _gt_from_map(gt_map, 2)
    rep = miou(pred, gt)
    assert rep.per_class_iou[1] == 0.0


def test_miou_counting_oracle(rng):
    for _ in range(10):
        gt_map = rng.integers(1, 4, size=(8, 8))
        pred = rng.integers(1, 4, size=(8, 8))
        gt = _gt_from_map(gt_map, 3)
        rep = miou(pred, gt)
        for c in rep.per_class_iou:
            inter = np.count_nonzero((pred == c) & (gt_map == c))
            union = np.count_nonzero((pred == c) | (gt_map == c))
            assert rep.per_class_iou[c] == pytest.approx(inter / union)
        want_mean = np.mean([rep.per_class_iou[c] for c in rep.per_class_iou])
        assert rep.mean_iou == pytest.approx(want_mean)


def test_miou_symmetric_for_hard_maps(rng):
    a = rng.integers(1, 4, size=(6, 6))
    b = rng.integers(1, 4, size=(6, 6))
    forward_rep = miou(b, _gt_from_map(a, 3))
    backward_rep = miou(a, _gt_from_map(b, 3))
    assert forward_rep.per_class_iou == backward_rep.per_class_iou


def test_global_accumulation_sums_before_dividing():
    acc = IoUAccumulator()
    gt_map1 = np.array([[1, 1], [0, 0]])
    gt_map2 = np.array([[0, 0], [1, 1]])
    # scene 1 predicts perfectly, scene 2 entirely wrong
    acc.add(np.array([[1, 1], [2, 2]]), _gt_from_map(gt_map1, 2))
    acc.add(np.array([[2, 2], [2, 2]]), _gt_from_map(gt_map2, 2))
    rep = acc.report("rx")
    # class 1: inter 2, union 2+2 -> includes scene-2 misses
    assert rep.per_class_iou[1] == pytest.approx(2 / 4)


def _small_cfg(**kw):
    base = dict(l=4, c=8, cf=4, h=8, w=8, k=3,
                visibility={"1": "r", "2": "x", "3": "both"},
                shapes_min=2, shapes_max=3, steps=30, mode="umm")
    base.update(kw)
    return RunConfig(**base)


def test_subset_eval_full_presence_equals_plain_eval():
    cfg = _small_cfg()
    scenes = generate_benchmark(cfg.synth_config(), 4)
    params = init_params(cfg)
    reports = subset_eval(params, scenes, ["rx"], cfg)
    from bimatch.model import forward, fuse_and_segment
    acc = IoUAccumulator()
    for scene in scenes:
        out = forward(params, scene)
        acc.add(fuse_and_segment(*out.prediction_sets()), scene.gt)
    assert reports[0].mean_iou == acc.report("rx").mean_iou


def test_subset_eval_mean_row():
    cfg = _small_cfg()
    scenes = generate_benchmark(cfg.synth_config(), 3)
    params = init_params(cfg)
    reports = subset_eval(params, scenes, ["r", "x", "rx"], cfg)
    assert reports[-1].subset == "Mean"
    want = np.mean([r.mean_iou for r in reports[:-1]])
    assert reports[-1].mean_iou == pytest.approx(want)


def test_subset_eval_rejects_unknown_tag():
    cfg = _small_cfg()
    scenes = generate_benchmark(cfg.synth_config(), 1)
    with pytest.raises(ConfigError):
        subset_eval(init_params(cfg), scenes, ["rgb"], cfg)


def test_label_distribution_fractions():
    gt = GroundTruthSet(2, 2, 3, [(2, np.ones((2, 2)))])
    l = 1
    m1 = Matching(l, [MatchPair(0, "r", 0, 2, SOURCE_MAM),
                      MatchPair(1, "x", None, 0, SOURCE_NONE)])
    m2 = Matching(l, [MatchPair(0, "r", None, 0, SOURCE_NONE),
                      MatchPair(1, "x", 0, 2, SOURCE_MAM)])
    m3 = Matching(l, [MatchPair(0, "r", 0, 2, SOURCE_CM),
                      MatchPair(1, "x", None, 0, SOURCE_NONE)])
    dist = label_distribution([m1, m2, m3], [gt, gt, gt])
    # the CM pair does not count toward the stage-1 attribution
    assert dist == {2: (0.5, 0.5)}
    assert sum(dist[2]) == 1.0


def test_distribution_csv_format():
    text = distribution_csv({1: (0.75, 0.25), 3: (0.0, 1.0)})
    lines = text.strip().split("\n")
    assert lines[0] == "class,frac_rgb,frac_x"
    assert lines[1] == "1,0.75,0.25"
    assert lines[2] == "3,0.0,1.0"


def test_report_table_and_json_shapes():
    cfg = _small_cfg()
    scenes = generate_benchmark(cfg.synth_config(), 2)
    reports = subset_eval(init_params(cfg), scenes, ["r", "rx"], cfg)
    table = report_table(reports)
    assert "subset" in table.splitlines()[0]
    payload = report_to_json(reports)
    assert [row["subset"] for row in payload] == ["r", "rx", "Mean"]


def test_mirrored_benchmark_distribution_mirrors():
    # swapping the r/x visibility tags mirrors the matching distribution
    base = _small_cfg(steps=60, lr=0.02)
    mirrored = _small_cfg(steps=60, lr=0.02,
                          visibility={"1": "x", "2": "r", "3": "both"})

    def trained_distribution(cfg):
        from bimatch.costs import CostWeights
        from bimatch.matching import match_two_stage
        from bimatch.model import forward

        sc = cfg.synth_config()
        tr = generate_benchmark(sc, 24)
        result = train(cfg, tr)
        ms, gts = [], []
        for scene in tr:
            out = forward(result.params, scene)
            m, _ = match_two_stage(*out.prediction_sets(), scene.gt,
                                   CostWeights())
            ms.append(m)
            gts.append(scene.gt)
        return label_distribution(ms, gts)

    d_base = trained_distribution(base)
    d_mirror = trained_distribution(mirrored)
    # class 1 favors r on the base benchmark and x on the mirrored one
    assert d_base[1][0] > 0.5
    assert d_mirror[1][1] > 0.5
    assert d_base[2][1] > 0.5
    assert d_mirror[2][0] > 0.5
