"""Command-line front door: payload formats, determinism, exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from bimatch import cli
from bimatch.backend import BACKEND

DATA = Path(__file__).parent / "data"


def _write_config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(overrides))
    return str(path)


def _small_cfg_dict(**kw):
    base = dict(l=4, c=8, cf=4, h=8, w=8, k=3,
                visibility={"1": "r", "2": "x", "3": "both"},
                shapes_min=2, shapes_max=3, steps=10, n_train=6, n_test=3)
    base.update(kw)
    return base


def _dir_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_simulate_writes_benchmark_and_is_deterministic(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict())
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out1)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["n_train"] == 6 and payload["n_test"] == 3
    assert len(list((out1 / "train").glob("*.json"))) == 6
    assert (out1 / "manifest.json").exists()
    assert cli.main(["simulate", "--config", cfg, "--out", str(out2)]) == 0
    assert _dir_bytes(out1) == _dir_bytes(out2)


def test_simulate_default_config_has_96_scenes(tmp_path, capsys):
    out = tmp_path / "bench"
    assert cli.main(["simulate", "--out", str(out)]) == 0
    capsys.readouterr()
    n = len(list((out / "train").glob("*.json"))) + \
        len(list((out / "test").glob("*.json")))
    assert n == 96


def test_simulate_missing_visibility_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(
        visibility={"1": "r", "2": "x"}))
    assert cli.main(["simulate", "--config", cfg, "--out",
                     str(tmp_path / "o")]) == 2
    assert "class 3" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path, bogus_key=1)
    assert cli.main(["simulate", "--config", cfg, "--out",
                     str(tmp_path / "o")]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_match_golden_bytes(capsys):
    code = cli.main(["match", "--pred", str(DATA / "match_pred.json"),
                     "--gt", str(DATA / "match_gt.json")])
    assert code == 0
    got = capsys.readouterr().out
    golden = (DATA / "match_golden.json").read_text()
    # semantic equality under any backend; bytes under the default one
    assert json.loads(got)["matching"] == json.loads(golden)["matching"]
    if BACKEND == "c":
        assert got == golden


def test_match_golden_agrees_with_bruteforce_oracle():
    from bimatch.assignment import CostMatrix, solve_bruteforce
    from bimatch.cli import _parse_gt, _parse_predictions
    from bimatch.costs import build_cost_matrix

    pred_r, pred_x = _parse_predictions(str(DATA / "match_pred.json"))
    gt = _parse_gt(str(DATA / "match_gt.json"))
    cost = build_cost_matrix([pred_r, pred_x], gt)
    sol = solve_bruteforce(CostMatrix(cost))
    golden = json.loads((DATA / "match_golden.json").read_text())
    mam_pairs = {(e["query"], e["class"]) for e in golden["matching"]
                 if e["source"] == "mam"}
    want = {(row, gt.class_of(col)) for row, col in sol.pairs}
    assert mam_pairs == want


def test_match_empty_gt_all_none(tmp_path, capsys):
    gt = {"h": 2, "w": 2, "k": 3, "gt": []}
    path = tmp_path / "gt.json"
    path.write_text(json.dumps(gt))
    assert cli.main(["match", "--pred", str(DATA / "match_pred.json"),
                     "--gt", str(path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert all(e["class"] is None and e["source"] == "none"
               for e in payload["matching"])


def test_match_malformed_rle_exits_2_with_offset(tmp_path, capsys):
    gt = {"h": 2, "w": 2, "k": 3,
          "gt": [{"class": 1, "mask_rle": [1, 1]}]}  # covers 2 of 4
    path = tmp_path / "gt.json"
    path.write_text(json.dumps(gt))
    assert cli.main(["match", "--pred", str(DATA / "match_pred.json"),
                     "--gt", str(path)]) == 2
    assert "offset" in capsys.readouterr().err


def test_match_infeasible_exits_4(tmp_path, capsys):
    # four labels but only two queries per modality in the fixture
    masks = {1: [0, 1, 3], 2: [1, 1, 2], 3: [2, 1, 1], 4: [3, 1]}
    gt = {"h": 2, "w": 2, "k": 4,
          "gt": [{"class": c, "mask_rle": r} for c, r in masks.items()]}
    path = tmp_path / "gt.json"
    path.write_text(json.dumps(gt))
    pred = json.loads((DATA / "match_pred.json").read_text())
    pred["k"] = 4
    pred["class_scores_r"] = np.tile([0.2, 0.2, 0.2, 0.2, 0.2], 2).tolist()
    pred["class_scores_x"] = np.tile([0.2, 0.2, 0.2, 0.2, 0.2], 2).tolist()
    pred_path = tmp_path / "pred.json"
    pred_path.write_text(json.dumps(pred))
    assert cli.main(["match", "--pred", str(pred_path),
                     "--gt", str(path)]) == 4
    assert "infeasible" in capsys.readouterr().err.lower()


def test_train_zero_lr_checkpoint_equals_init(tmp_path, capsys):
    from bimatch.config import config_from_dict
    from bimatch.model import init_params, load_checkpoint

    cfg_dict = _small_cfg_dict(lr=0.0, steps=4)
    cfg_path = _write_config(tmp_path, **cfg_dict)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    capsys.readouterr()
    trained = load_checkpoint(out / "checkpoint.json")
    fresh = init_params(config_from_dict(cfg_dict))
    for name, arr in fresh.items():
        assert np.allclose(trained[name], arr, rtol=0, atol=0)


def test_train_byte_deterministic(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(steps=8))
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["train", "--config", cfg, "--out", str(out1)]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(out2)]) == 0
    capsys.readouterr()
    assert _dir_bytes(out1) == _dir_bytes(out2)


def test_eval_untrained_below_trained(tmp_path, capsys):
    cfg_dict = _small_cfg_dict(steps=60, lr=0.02, mode="umm")
    cfg = _write_config(tmp_path, **cfg_dict)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--config", cfg,
                     "--checkpoint", str(out / "checkpoint.json")]) == 0
    trained = json.loads(capsys.readouterr().out)

    from bimatch.config import config_from_dict
    from bimatch.model import init_params, save_checkpoint
    untrained_path = tmp_path / "untrained.json"
    save_checkpoint(init_params(config_from_dict(cfg_dict)), untrained_path)
    assert cli.main(["eval", "--config", cfg,
                     "--checkpoint", str(untrained_path)]) == 0
    untrained = json.loads(capsys.readouterr().out)

    mean_of = lambda payload: [r["mean_iou"] for r in payload["reports"]
                               if r["subset"] == "Mean"][0]
    assert mean_of(untrained) < mean_of(trained)
    assert set(trained["diagnostics"]) == {"modality_distance",
                                           "class_distance"}


def test_analyze_writes_csv(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(steps=8))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["analyze", "--config", cfg,
                     "--checkpoint", str(out / "checkpoint.json"),
                     "--out", str(out)]) == 0
    payload = json.loads(capsys.readouterr().out)
    csv_text = (out / "label_distribution.csv").read_text()
    assert csv_text.startswith("class,frac_rgb,frac_x")
    for fractions in payload["distribution"].values():
        assert sum(fractions) == pytest.approx(1.0)


def test_gradcheck_exits_zero(capsys):
    assert cli.main(["gradcheck", "--graphs", "25"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["random_graphs"]["failures"] == 0
    assert all(entry["passed"] for entry in payload["losses"].values())


def test_oracle_exits_zero(capsys):
    assert cli.main(["oracle", "--cases", "60"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["assignment"]["mismatches"] == 0
    assert payload["coverage"]["coverage_violations"] == 0


def test_train_with_data_dir_round_trip(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(steps=6))
    bench = tmp_path / "bench"
    assert cli.main(["simulate", "--config", cfg, "--out", str(bench)]) == 0
    out_gen = tmp_path / "gen"
    out_load = tmp_path / "load"
    assert cli.main(["train", "--config", cfg, "--out", str(out_gen)]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(out_load),
                     "--data", str(bench)]) == 0
    capsys.readouterr()
    assert (out_gen / "checkpoint.json").read_bytes() == \
        (out_load / "checkpoint.json").read_bytes()


def test_missing_data_dir_exits_3(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(steps=4))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--data", str(tmp_path / "nope")]) == 3


def test_seed_and_mode_flags_override_config(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(steps=4, seed=0))
    base, other = tmp_path / "base", tmp_path / "other"
    assert cli.main(["simulate", "--config", cfg, "--out", str(base)]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(other),
                     "--seed", "99"]) == 0
    capsys.readouterr()
    assert _dir_bytes(base) != _dir_bytes(other)

    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out),
                     "--mode", "mam_only"]) == 0
    capsys.readouterr()
    from bimatch.model import load_checkpoint
    ckpt = load_checkpoint(out / "checkpoint.json")
    assert "rx.mu.w" not in ckpt  # refiners only exist in umm_cma mode

    assert cli.main(["train", "--config", cfg, "--out", str(out),
                     "--mode", "nonsense"]) == 2
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergence_exits_5_with_dump(tmp_path, capsys):
    cfg = _write_config(tmp_path, **_small_cfg_dict(
        steps=4, lr=1e160, mode="umm_cma"))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 5
    assert (out / "divergence_dump.json").exists()
    assert "diverged" in capsys.readouterr().err
