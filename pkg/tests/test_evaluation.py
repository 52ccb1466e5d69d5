import csv

import numpy as np
import pytest

from tinyloc import synthdata as sd
from tinyloc.evaluation import (EvalReport, LengthMismatch, acc_at_iou,
                                evaluate_checkpoint, format_comparison,
                                vqa_accuracy, write_report)
from tinyloc.geometry import BBox
from tinyloc.model import LocModel, ModelConfig
from tinyloc.trainer import TrainConfig, run_stage

TINY = dict(d_model=32, n_layers=1, n_heads=2, patch_grid=4, mask_channels=8, max_seq_len=96)


def test_acc_at_iou_exact_and_disjoint():
    boxes = [BBox(0.1, 0.1, 0.4, 0.4), BBox(0.5, 0.5, 0.9, 0.9)]
    assert acc_at_iou(boxes, boxes, 0.5) == 1.0
    far = [BBox(0.6, 0.6, 0.9, 0.9), BBox(0.0, 0.0, 0.3, 0.3)]
    assert acc_at_iou(boxes, far, 0.5) == 0.0
    assert acc_at_iou(boxes + boxes, boxes + far, 0.5) == 0.5


def test_acc_at_iou_handles_parse_failures_as_none():
    boxes = [BBox(0.1, 0.1, 0.4, 0.4), BBox(0.5, 0.5, 0.9, 0.9)]
    assert acc_at_iou([boxes[0], None], boxes, 0.5) == 0.5


def test_acc_at_iou_length_mismatch():
    with pytest.raises(LengthMismatch):
        acc_at_iou([BBox(0, 0, 1, 1)], [], 0.5)


def test_vqa_accuracy_counting():
    assert vqa_accuracy([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert vqa_accuracy([0, 0, 0, 0], [1, 2, 3, 0]) == 0.25
    assert vqa_accuracy([-1, 1], [0, 1]) == 0.5
    with pytest.raises(LengthMismatch):
        vqa_accuracy([0], [0, 1])


def test_report_row_excludes_wall_time():
    r = EvalReport(scheme="Pemb", task="grounding", acc_at_05=0.5, n_samples=4, wall_time=3.2)
    row = r.csv_row()
    assert "wall_time" not in row
    assert row["acc_at_05"] == 0.5 and row["vqa_accuracy"] == ""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaldata")
    samples, scenes = sd.generate_dataset(7, 30, mix=(0.6, 0.0, 0.4))
    sd.write_dataset(root / "data", samples, scenes, split_fracs=(0.5, 0.0, 0.5))
    cfg = TrainConfig(stage=1, steps=4, batch_size=4, lr=1e-3, warmup=1, seed=0,
                      data_dir=str(root / "data"), out_dir=str(root / "run"),
                      scheme="Pemb", log_every=2, model=ModelConfig(**TINY))
    run_stage(cfg)
    return root


def test_evaluate_checkpoint_reports(trained):
    reports, records = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    tasks = {r.task for r in reports}
    assert tasks == {"grounding", "region_vqa"}
    for r in reports:
        assert r.n_samples > 0
        for v in (r.acc_at_05, r.mean_iou, r.vqa_accuracy, r.mask_miou, r.parse_failure_rate):
            if v is not None:
                assert 0.0 <= v <= 1.0
    g = next(r for r in reports if r.task == "grounding")
    assert g.parse_failure_rate == 0.0  # continuous decoding never fails to parse


def test_evaluate_deterministic(trained):
    r1, _ = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    r2, _ = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    assert [r.csv_row() for r in r1] == [r.csv_row() for r in r2]


def test_evaluate_threaded_matches_serial(trained, monkeypatch):
    r1, _ = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    monkeypatch.setenv("NEXTCHAT_THREADS", "2")
    r2, _ = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    assert [r.csv_row() for r in r1] == [r.csv_row() for r in r2]


def test_write_report_csv_and_figures(trained, tmp_path):
    reports, records = evaluate_checkpoint(trained / "run", trained / "data", "test", seed=0)
    path = write_report(reports, records, trained / "data", tmp_path / "rep")
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(reports)
    assert (tmp_path / "rep" / "predictions.png").exists()


def test_format_comparison_table():
    reports = [EvalReport("Pemb", "grounding", acc_at_05=0.9, mean_iou=0.8,
                          parse_failure_rate=0.0, n_samples=10),
               EvalReport("P4bin", "grounding", acc_at_05=0.7, mean_iou=0.6,
                          parse_failure_rate=0.1, n_samples=10)]
    text = format_comparison(reports)
    assert "Pemb" in text and "P4bin" in text and "Acc@0.5" in text
