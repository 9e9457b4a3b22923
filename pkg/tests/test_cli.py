import json
import os

import numpy as np
import pytest

from benchmark_tables import EXPECTED_B, GRID_B
from depthbench.cli import run
from depthbench.io import (RasterRecord, load_manifest, read_container,
                           read_pfm, read_report, write_container, write_pfm)
from depthbench.preimage import unfold_cross_attention


def _write_scores_csv(path, grid):
    lines = ["method,dataset,delta1,absrel"]
    for method, per_ds in grid.items():
        for ds, (d1, ar) in per_ds.items():
            lines.append(f"{method},{ds},{d1},{ar}")
    path.write_text("\n".join(lines) + "\n")


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["no-such-command"]) == 1
    assert run(["evaluate"]) == 1  # missing required args
    assert run(["bench", "--resolutions", "a,b", "--out", str(tmp_path)]) == 1


def test_missing_out_dir_is_usage_error(fixture_paths, monkeypatch, capsys):
    monkeypatch.delenv("DEPTHBENCH_OUT", raising=False)
    code = run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", fixture_paths["pred_a"]])
    assert code == 1
    assert "DEPTHBENCH_OUT" in capsys.readouterr().err


def test_out_dir_from_environment(fixture_paths, tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHBENCH_OUT", str(tmp_path / "envout"))
    code = run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", fixture_paths["pred_a"], "--method", "m"])
    assert code == 0
    assert (tmp_path / "envout" / "m__synthfix.report.json").exists()


def test_evaluate_identity_predictions_score_perfect(fixture_paths, tmp_path,
                                                     capsys):
    # predictions == GT (holes filled with NaN stay invalid)
    pred_dir = tmp_path / "ident"
    pred_dir.mkdir()
    manifest = load_manifest(fixture_paths["manifest"])
    for entry in manifest.entries:
        gt = read_pfm(os.path.join(manifest.base_dir, entry.gt_path))
        write_pfm(np.where(gt.valid, gt.values, np.nan)[0].astype(np.float32),
                  pred_dir / f"{entry.image_id}.pfm")
    out = tmp_path / "out"
    code = run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", str(pred_dir), "--method", "ident",
                "--out", str(out)])
    assert code == 0
    assert "delta1=100.00%" in capsys.readouterr().out
    rep = read_report(out / "ident__synthfix.report.json")
    assert rep.aggregate_delta1 == 1.0
    assert rep.aggregate_absrel == pytest.approx(0.0, abs=1e-9)


def test_evaluate_missing_prediction_exits_2(fixture_paths, tmp_path, capsys):
    pred_dir = tmp_path / "partial"
    pred_dir.mkdir()
    manifest = load_manifest(fixture_paths["manifest"])
    for entry in manifest.entries[:5]:
        src = os.path.join(fixture_paths["pred_a"], f"{entry.image_id}.pfm")
        (pred_dir / f"{entry.image_id}.pfm").write_bytes(
            open(src, "rb").read())
    code = run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", str(pred_dir), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "img005" in capsys.readouterr().err


def test_evaluate_jobs_byte_identical(fixture_paths, tmp_path):
    outs = []
    for jobs, name in [(1, "j1"), (8, "j8")]:
        out = tmp_path / name
        assert run(["evaluate", "--manifest", fixture_paths["manifest"],
                    "--pred", fixture_paths["pred_a"], "--method", "m",
                    "--jobs", str(jobs), "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("m__synthfix.report.json", "m__synthfix.report.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_combine_then_oracle_pipeline(fixture_paths, tmp_path, capsys):
    # evaluate both methods
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", fixture_paths["pred_a"], "--method", "ma",
                "--out", str(out_a)]) == 0
    assert run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", fixture_paths["pred_b"], "--method", "mb",
                "--out", str(out_b)]) == 0

    # pixel average them
    out_c = tmp_path / "combined"
    assert run(["combine", "--manifest", fixture_paths["manifest"],
                "--pred-a", fixture_paths["pred_a"],
                "--pred-b", fixture_paths["pred_b"],
                "--method", "avg", "--out", str(out_c)]) == 0
    assert (out_c / "predictions" / "img000.pfm").exists()
    rep_avg = read_report(out_c / "avg__synthfix.report.json")
    assert 0.0 <= rep_avg.aggregate_delta1 <= 1.0

    # oracle on the two reports
    out_o = tmp_path / "oracle"
    assert run(["oracle",
                "--report-a", str(out_a / "ma__synthfix.report.json"),
                "--report-b", str(out_b / "mb__synthfix.report.json"),
                "--out", str(out_o)]) == 0
    fractions = json.loads((out_o / "oracle_fractions.json").read_text())
    assert set(fractions) == {"delta1", "absrel"}
    rep_a = read_report(out_a / "ma__synthfix.report.json")
    rep_b = read_report(out_b / "mb__synthfix.report.json")
    oracle_rep = read_report(out_o / "oracle_delta1.report.json")
    assert oracle_rep.aggregate_delta1 >= max(rep_a.aggregate_delta1,
                                              rep_b.aggregate_delta1)
    assert fractions["delta1"]["fraction_a"] + \
        fractions["delta1"]["fraction_b"] == pytest.approx(100.0)


def test_rank_reproduces_published_table(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    _write_scores_csv(scores, GRID_B)
    out = tmp_path / "rank"
    assert run(["rank", "--scores", str(scores), "--out", str(out)]) == 0
    ranking = json.loads((out / "ranking.json").read_text())
    got = {m: round(v, 1) for m, v in ranking["average_rank"].items()}
    assert got == EXPECTED_B
    csv_lines = (out / "ranking.csv").read_text().splitlines()
    assert csv_lines[1].startswith("pixel_average")  # best rank first


def test_categories_emits_stats_svg_and_png(fixture_paths, tmp_path):
    out_e = tmp_path / "eval"
    assert run(["evaluate", "--manifest", fixture_paths["manifest"],
                "--pred", fixture_paths["pred_a"], "--method", "m",
                "--out", str(out_e)]) == 0
    out_c = tmp_path / "cats"
    assert run(["categories", "--report",
                str(out_e / "m__synthfix.report.json"),
                "--out", str(out_c)]) == 0
    stats_csv = (out_c / "category_stats.csv").read_text().splitlines()
    assert stats_csv[0].startswith("category,count,median")
    assert len(stats_csv) == 3  # indoor + outdoor
    assert (out_c / "boxplot.svg").exists()
    assert (out_c / "boxplot.png").exists()


def test_pool_attn_transforms_container(tmp_path):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 16, 16, 256))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    self_data = e / e.sum(axis=-1, keepdims=True)
    clogits = rng.normal(size=(2, 16, 16, 77))
    ce = np.exp(clogits - clogits.max(axis=-1, keepdims=True))
    cross_data = ce / ce.sum(axis=-1, keepdims=True)
    feat = rng.normal(size=(4, 16, 16))

    src = tmp_path / "raw.rstc"
    write_container(src, [
        RasterRecord("s0/self0", "self_attn", self_data, meta=2),
        RasterRecord("s0/cross0", "cross_attn", cross_data, meta=2),
        RasterRecord("s0/feature0", "feature", feat),
    ])
    dst = tmp_path / "pooled.rstc"
    assert run(["pool-attn", "--input", str(src), "--output", str(dst)]) == 0
    back = {r.name: r for r in read_container(dst)}
    assert back["s0/self0"].role == "self_attn_pooled"
    assert back["s0/self0"].data.shape == (128, 16, 16)
    assert back["s0/cross0"].role == "cross_attn_folded"
    assert back["s0/cross0"].data.shape == (154, 16, 16)
    np.testing.assert_array_equal(back["s0/feature0"].data, feat)
    # folding is exactly invertible
    restored = unfold_cross_attention(back["s0/cross0"].data, heads=2)
    np.testing.assert_array_equal(restored.data, cross_data)


def test_train_toy_writes_history_params_config_and_figure(tmp_path):
    out = tmp_path / "train"
    assert run(["train-toy", "--steps", "3", "--samples", "4",
                "--latent", "8", "--stages", "2", "--base-channels", "4",
                "--seed", "1", "--out", str(out)]) == 0
    hist = (out / "loss_history.csv").read_text().splitlines()
    assert hist[0] == "step,total,ssi,dice,focal"
    assert len(hist) == 4
    assert (out / "params.rstc").exists()
    assert json.loads((out / "config.json").read_text())["stages"] == 2
    assert (out / "loss_curves.png").exists()


def test_train_toy_deterministic_outputs(tmp_path):
    outs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert run(["train-toy", "--steps", "3", "--samples", "4",
                    "--latent", "8", "--stages", "2", "--base-channels", "4",
                    "--seed", "9", "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("loss_history.csv", "params.rstc", "config.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_gradcheck_seed7_exits_zero(tmp_path, capsys):
    assert run(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "all gradient checks passed" in out
    errors = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(v < 1e-4 for v in errors.values())


def test_bench_emits_table_and_figure(tmp_path, capsys):
    out = tmp_path / "bench"
    assert run(["bench", "--resolutions", "8", "--runs", "3",
                "--precision", "f32", "--out", str(out)]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0] == "latent,output,runs,mean_s,std_s,median_s,iqr_s"
    assert lines[1].startswith("8,16,3,")
    assert (out / "bench.png").exists()
    assert "median" in capsys.readouterr().out
