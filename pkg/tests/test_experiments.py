import json
import math

import numpy as np
import pytest
import yaml
from PIL import Image

from elcrack import experiments
from elcrack.cli import main
from elcrack.data import synthetic_dataset, write_dataset
from elcrack.experiments import (
    ConfigError,
    emit_panel,
    format_table,
    heatmap_to_uint8,
    load_sweep_config,
    run_dir,
    run_sweep,
    summarize,
    sweep_config_from_dict,
)
from elcrack.model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from elcrack.pooling import INF
from elcrack.train import evaluate

TINY = {
    "seed": 0,
    "data": {"synthetic": {"n": 12, "size": 32, "seed": 0}},
    "train": {"epochs": 1, "batch_size": 4, "augment": False},
}


def tiny_cfg(**over):
    return sweep_config_from_dict(TINY, over)


def test_defaults_follow_table_columns():
    cfg = sweep_config_from_dict({"data": {"root": "x"}})
    assert cfg.p_values == [1, 2, 3, 4, 5, 9, INF]
    assert cfg.repeats == 1 and cfg.jobs == 1


def test_overrides_win_and_parse_p(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({**TINY, "p_values": [1, 2]}))
    cfg = load_sweep_config(path, {"p_values": "3,inf", "train.epochs": 4, "seed": 9})
    assert cfg.p_values == [3, INF]
    assert cfg.train.epochs == 4 and cfg.seed == 9
    assert cfg.train.batch_size == 4


@pytest.mark.parametrize(
    "raw",
    [
        {**TINY, "p_values": []},
        {**TINY, "p_values": [0.5]},
        {**TINY, "bogus": 1},
        {**TINY, "train": {"epochs": 0}},
        {"p_values": [1]},
    ],
)
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        sweep_config_from_dict(raw)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_sweep_config(tmp_path / "missing.yaml")


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    report = run_sweep(tiny_cfg(p_values=[1, INF]), out)
    return out, report


def test_sweep_artifacts(sweep_dir):
    out, report = sweep_dir
    for name in ("resolved_config.yaml", "provenance.json", "split.json", "report.json", "report.md", "run_meta.json"):
        assert (out / name).is_file(), name
    for p in (1, INF):
        rd = run_dir(out, p, 0)
        assert {f.name for f in rd.iterdir()} >= {"checkpoint.pt", "history.jsonl", "metrics.json"}
    prov = json.loads((out / "provenance.json").read_text())
    assert {"code_version", "dataset_checksum", "split_checksum", "seed"} <= set(prov)
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert sweep_config_from_dict(resolved).to_dict() == tiny_cfg(p_values=[1, INF]).to_dict()
    assert report["columns"] == ["1", "inf"]
    assert not report["incomplete"]


def test_shared_split_across_p(sweep_dir):
    out, report = sweep_dir
    checksums = {r["split_checksum"] for r in report["records"]}
    assert checksums == {report["split_checksum"]}
    for p in (1, INF):
        meta = load_checkpoint(run_dir(out, p, 0) / "checkpoint.pt").checkpoint_metadata
        assert meta["split_checksum"] == report["split_checksum"]


def test_report_equals_evaluate(sweep_dir):
    out, report = sweep_dir
    cfg = tiny_cfg(p_values=[1, INF])
    split = experiments.make_split(cfg, experiments.load_samples(cfg))
    for record in report["records"]:
        model = load_checkpoint(run_dir(out, float(record["p"]), 0) / "checkpoint.pt")
        assert record["metrics"] == evaluate(model, split.test).to_dict()


def test_table_layout(sweep_dir):
    out, _ = sweep_dir
    lines = (out / "report.md").read_text().splitlines()
    assert lines[0] == "| Norm | L_1 | L_inf |"
    assert [line.split("|")[1].strip() for line in lines[2:6]] == ["Precision", "Recall", "f1 score", "Accuracy"]
    assert "PROXY" not in "\n".join(lines)


def test_sweep_report_is_reproducible(sweep_dir, tmp_path):
    out, report = sweep_dir
    again = run_sweep(tiny_cfg(p_values=[1, INF]), tmp_path)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert again == report


def test_failed_run_is_recorded(tmp_path, monkeypatch):
    real = experiments.build_model

    def flaky(config):
        if config.pooling.p == 2:
            raise RuntimeError("boom")
        return real(config)

    monkeypatch.setattr(experiments, "build_model", flaky)
    report = run_sweep(tiny_cfg(p_values=[1, 2]), tmp_path)
    assert report["incomplete"] == ["2"]
    failed = [r for r in report["records"] if r["status"] == "failed"]
    assert len(failed) == 1 and "boom" in failed[0]["error"]
    table = (tmp_path / "report.md").read_text()
    assert "n/a" in table and "incomplete" in table


def test_summary_mean_std():
    records = [
        {"p": "3", "status": "ok", "metrics": {"precision_crack": a, "recall_crack": a, "f1_crack": a, "accuracy": a}}
        for a in (0.5, 0.7)
    ]
    col = summarize(records, [3])["3"]
    assert col["accuracy"]["mean"] == pytest.approx(0.6) and col["accuracy"]["std"] == pytest.approx(0.1)
    assert "0.60 ± 0.10" in format_table({"3": col}, proxy=True)
    assert "PROXY LABELS" in format_table({"3": col}, proxy=True)


# -- panels -------------------------------------------------------------------------


def test_constant_heatmap_is_mid_gray():
    assert np.all(heatmap_to_uint8(np.full((5, 5), 3.2)) == 128)
    h = heatmap_to_uint8(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert h.min() == 0 and h.max() == 255


@pytest.fixture(scope="module")
def panel_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("panel")
    samples, masks = synthetic_dataset(2, 32, seed=4)
    write_dataset(samples, root / "data", masks)
    images = [root / "data" / samples[0].image_path]
    ckpts = {}
    for p in (1, 2, 3, 4, 5, INF):
        ckpts[p] = save_checkpoint(build_model(ModelConfig(input_size=32, pooling=p)), root / f"p{p}.pt")
    return root, images, ckpts


def test_panel_one_image_six_p(panel_inputs, tmp_path):
    _, images, ckpts = panel_inputs
    result = emit_panel(ckpts, images, tmp_path)
    assert len(result["written"]) == 7 and not result["skipped"]
    heat = np.asarray(Image.open(tmp_path / f"{images[0].stem}_Linf_heatmap.png"))
    assert heat.shape == (32, 32) and heat.dtype == np.uint8


def test_panel_overlay_triplet(panel_inputs, tmp_path):
    _, images, ckpts = panel_inputs
    result = emit_panel({INF: ckpts[INF]}, images, tmp_path, overlay=True)
    assert sorted(p.rsplit("_", 1)[-1] for p in result["written"]) == ["heatmap.png", "original.png", "segmentation.png"]
    with pytest.raises(ValueError, match="polarity"):
        emit_panel({1: ckpts[1]}, images, tmp_path, overlay=True)
    assert len(emit_panel({1: ckpts[1]}, images, tmp_path, overlay=True, polarity="inverted")["written"]) == 3


def test_panel_missing_checkpoint_skipped(panel_inputs, tmp_path):
    root, images, ckpts = panel_inputs
    result = emit_panel({INF: ckpts[INF], 9: root / "nope.pt"}, images, tmp_path)
    assert len(result["written"]) == 2
    assert result["skipped"] == [{"p": "9", "checkpoint": str(root / "nope.pt")}]


# -- CLI ----------------------------------------------------------------------------


def test_cli_config_errors(tmp_path, capsys):
    assert main(["sweep", "--out", str(tmp_path), "--set", "bogus=1", "--set", "data.synthetic={n: 4}"]) == 1
    assert main(["sweep", "--out", str(tmp_path), "--p", "0.5", "--set", "data.synthetic={n: 4}"]) == 1
    assert main(["train", "--out", str(tmp_path), "--p", "1", "--config", str(tmp_path / "none.yaml")]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_partial_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "p_values": [1]}))
    code = main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--weights", str(tmp_path / "none.pth")])
    assert code == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["incomplete"] == ["1"]


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["prepare-data", "--synthetic", "12", "--size", "32", "--out", str(data)]) == 0
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        yaml.safe_dump(
            {"data": {"root": str(data), "labels_file": str(data / "crack_labels.csv"), "image_size": 32}, "train": TINY["train"]}
        )
    )
    assert main(["prepare-data", "--config", str(cfg), "--out", str(tmp_path / "prep")]) == 0
    assert json.loads((tmp_path / "prep" / "data_summary.json").read_text())["n_samples"] == 12

    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--p", "inf"]) == 0
    ckpt = run / "checkpoint.pt"
    assert ckpt.is_file() and (run / "history.jsonl").is_file()

    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--json", str(tmp_path / "e.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "e.json").read_text())
    assert printed["p"] == "inf" and set(printed) >= {"accuracy", "f1_crack", "confusion_matrix"}

    image = next(p for p in data.rglob("*.png") if "masks" not in p.parts)
    assert main(["segment", "--checkpoint", str(ckpt), "--out", str(tmp_path / "seg"), str(image)]) == 0
    assert len(list((tmp_path / "seg").glob("*.png"))) == 1
    assert len(list((tmp_path / "seg").glob("*.json"))) == 1

    assert main(["panel", "--checkpoint", f"inf={ckpt}", "--checkpoint", f"3={tmp_path / 'x.pt'}", "--out", str(tmp_path / "pan"), str(image)]) == 0
    assert len(list((tmp_path / "pan").glob("*.png"))) == 2


def test_cli_segment_low_p_needs_polarity(tmp_path, capsys):
    data = tmp_path / "data"
    samples, masks = synthetic_dataset(2, 32, seed=0)
    write_dataset(samples, data, masks)
    ckpt = save_checkpoint(build_model(ModelConfig(input_size=32, pooling=2)), tmp_path / "m.pt")
    image = str(data / samples[0].image_path)
    assert main(["segment", "--checkpoint", str(ckpt), "--out", str(tmp_path / "s"), image]) == 1
    assert "polarity" in capsys.readouterr().err
    assert main(["segment", "--checkpoint", str(ckpt), "--out", str(tmp_path / "s"), "--polarity", "inverted", image]) == 0


def test_parallel_jobs_match_sequential(sweep_dir, tmp_path):
    out, report = sweep_dir
    par = run_sweep(tiny_cfg(p_values=[1, INF], jobs=2), tmp_path)
    assert [r["metrics"] for r in par["records"]] == [r["metrics"] for r in report["records"]]
    assert math.isclose(par["records"][0]["test_loss"], report["records"][0]["test_loss"], rel_tol=1e-9)


@pytest.mark.slow
def test_p1_sweep_on_overfit_set(tmp_path):
    from pathlib import Path

    cfg = load_sweep_config(Path(__file__).parents[1] / "configs" / "synthetic_overfit.yaml")
    report = run_sweep(cfg, tmp_path)
    assert report["columns"] == ["1"]
    assert report["records"][0]["metrics"]["accuracy"] >= 0.95
