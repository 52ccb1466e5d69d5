"""Metrics, checkpoint evaluation, and the scheme-comparison harness.

Evaluation is a deterministic function of (checkpoint, split, seed); reports
are written as CSV plus rendered figures. Wall time is printed but kept out
of the CSV so repeated runs are byte-identical. Worker threads are capped by
the NEXTCHAT_THREADS env var (default 1 for bit-determinism).
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .codec import LocParseError
from .geometry import BBox, MaskGrid, box_iou, mask_soft_iou
from .model import LocModel, ModelConfig, build_plan, load_checkpoint
from .synthdata import Dataset
from .trainer import TrainConfig, run_stage


class LengthMismatch(Exception):
    pass


def worker_threads() -> int:
    return max(1, int(os.environ.get("NEXTCHAT_THREADS", "1")))


def acc_at_iou(preds, gts, thresh: float = 0.5) -> float:
    """Fraction of prediction/target pairs with IoU >= thresh.

    Unparseable predictions are passed as None and count as misses.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} targets")
    if not 0.0 < thresh < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    hits = 0
    for p, g in zip(preds, gts):
        if p is not None and box_iou(p, g) >= thresh:
            hits += 1
    return hits / len(preds)


def vqa_accuracy(choices, answers) -> float:
    """Exact-match rate of candidate picks (indices 0..3; -1 = no pick)."""
    if len(choices) != len(answers):
        raise LengthMismatch(f"{len(choices)} choices vs {len(answers)} answers")
    if any(not 0 <= a <= 3 for a in answers):
        raise ValueError("answers must be candidate indices 0..3")
    return sum(int(c == a) for c, a in zip(choices, answers)) / len(answers)


@dataclass
class EvalReport:
    scheme: str
    task: str
    acc_at_05: float | None = None
    mean_iou: float | None = None
    vqa_accuracy: float | None = None
    mask_miou: float | None = None
    parse_failure_rate: float | None = None
    n_samples: int = 0
    seed: int = 0
    wall_time: float = 0.0

    def csv_row(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")  # timing is not a deterministic function of inputs
        return {k: ("" if v is None else v) for k, v in d.items()}


REPORT_COLUMNS = ("scheme", "task", "acc_at_05", "mean_iou", "vqa_accuracy",
                  "mask_miou", "parse_failure_rate", "n_samples", "seed")


def _eval_grounding_sample(model: LocModel, dataset: Dataset, sample, max_new: int,
                           want_mask: bool):
    plan = build_plan(sample, model.codec, model.vocab, include_target=False)
    raster = dataset.raster(sample.scene_id)
    res = model.generate(plan, raster, max_new=max_new, decode_masks=want_mask)
    gt = BBox.from_array(sample.boxes[0])
    rec = {"scene_id": sample.scene_id, "gt_box": list(gt.as_array()),
           "pred_box": None, "iou": 0.0, "parse_failed": False}
    pred = None
    if model.cfg.scheme == "Pemb":
        if res.boxes:
            pred = res.boxes[0]
    else:
        try:
            pred = model.codec.extract_first_box(res.tokens)
        except LocParseError:
            rec["parse_failed"] = True
    if pred is not None:
        rec["pred_box"] = list(pred.as_array())
        rec["iou"] = box_iou(pred, gt)
    if want_mask and res.masks:
        gt_mask = dataset.gt_mask(sample)
        rec["pred_mask"] = res.masks[0]
        rec["gt_mask"] = gt_mask
        rec["mask_iou"] = mask_soft_iou(MaskGrid(res.masks[0]), MaskGrid(gt_mask))
    return pred, gt, rec


def _eval_vqa_sample(model: LocModel, dataset: Dataset, sample, max_new: int):
    plan = build_plan(sample, model.codec, model.vocab, include_target=False)
    raster = dataset.raster(sample.scene_id)
    res = model.generate(plan, raster, max_new=max_new)
    letters = [model.vocab.id(ch) for ch in "ABCD"]
    choice = -1
    for t in res.tokens:
        if t in letters:
            choice = letters.index(t)
            break
    return choice, {"scene_id": sample.scene_id, "choice": choice,
                    "answer": sample.answer_idx, "note": f"pick {choice} / ans {sample.answer_idx}"}


def evaluate_checkpoint(ckpt_dir, data_dir, split: str = "test", seed: int = 0,
                        masks: bool = False, max_new: int = 36,
                        limit: int | None = None) -> tuple[list[EvalReport], list[dict]]:
    """Run generation over a split and score per task present.

    Returns (one EvalReport per task, per-sample records for figures).
    """
    model, _, _ = load_checkpoint(ckpt_dir)
    dataset = Dataset(data_dir, split)
    samples = dataset.samples[:limit] if limit else dataset.samples
    threads = worker_threads()
    t0 = time.perf_counter()

    grounding = [s for s in samples if s.task == "grounding"]
    vqa = [s for s in samples if s.task == "region_vqa"]
    reports: list[EvalReport] = []
    records: list[dict] = []

    def run_all(fn, items):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                return list(ex.map(fn, items))
        return [fn(s) for s in items]

    if grounding:
        want_mask = masks and model.cfg.scheme == "Pemb"
        outs = run_all(lambda s: _eval_grounding_sample(model, dataset, s, max_new, want_mask),
                       grounding)
        preds = [o[0] for o in outs]
        gts = [o[1] for o in outs]
        recs = [o[2] for o in outs]
        records.extend(recs)
        ious = [r["iou"] for r in recs]
        failures = sum(r["parse_failed"] for r in recs)
        mask_ious = [r["mask_iou"] for r in recs if "mask_iou" in r]
        reports.append(EvalReport(
            scheme=model.cfg.scheme, task="grounding",
            acc_at_05=acc_at_iou(preds, gts, 0.5),
            mean_iou=float(np.mean(ious)),
            mask_miou=float(np.mean(mask_ious)) if mask_ious else None,
            parse_failure_rate=failures / len(grounding),
            n_samples=len(grounding), seed=seed,
        ))
    if vqa:
        outs = run_all(lambda s: _eval_vqa_sample(model, dataset, s, max_new), vqa)
        choices = [o[0] for o in outs]
        records.extend(o[1] for o in outs)
        reports.append(EvalReport(
            scheme=model.cfg.scheme, task="region_vqa",
            vqa_accuracy=vqa_accuracy(choices, [s.answer_idx for s in vqa]),
            parse_failure_rate=0.0,
            n_samples=len(vqa), seed=seed,
        ))
    wall = time.perf_counter() - t0
    for r in reports:
        r.wall_time = wall
    return reports, records


def write_report(reports: list[EvalReport], records: list[dict], data_dir,
                 out_dir, figures: bool = True):
    """report.csv plus prediction/mask figures alongside."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())
    if figures:
        from . import figures as figs
        dataset = Dataset(data_dir, "test")
        box_recs = [r for r in records if "gt_box" in r]
        if box_recs:
            figs.save_prediction_figure(box_recs, dataset, out / "predictions.png")
        mask_recs = [r for r in records if r.get("pred_mask") is not None]
        if mask_recs:
            figs.save_mask_figure(mask_recs, dataset, out / "masks.png")
    return out / "report.csv"


# ---------------------------------------------------------------------------
# Scheme comparison harness
# ---------------------------------------------------------------------------


@dataclass
class CompareConfig:
    data_dir: str
    out_dir: str
    seed: int = 0
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    split: str = "test"
    max_new: int = 36
    limit: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    @staticmethod
    def from_json(text: str) -> "CompareConfig":
        return CompareConfig(**json.loads(text))


def compare_schemes(cfg: CompareConfig, schemes: list[str]) -> list[EvalReport]:
    """Train every scheme under one matched budget/seed/data and evaluate.

    Writes comparison.csv, comparison.txt, and a bar figure under out_dir.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: list[EvalReport] = []
    for scheme in schemes:
        run_dir = out / f"run_{scheme}"
        tcfg = TrainConfig(
            stage=1, steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
            warmup=cfg.warmup, seed=cfg.seed, data_dir=cfg.data_dir,
            out_dir=str(run_dir), scheme=scheme,
            model=ModelConfig.from_dict({**cfg.model.to_dict(), "scheme": scheme}),
        )
        run_stage(tcfg)
        reps, _ = evaluate_checkpoint(run_dir, cfg.data_dir, cfg.split,
                                      seed=cfg.seed, max_new=cfg.max_new, limit=cfg.limit)
        reports.extend(reps)

    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())
    with open(out / "comparison.txt", "w") as f:
        f.write(format_comparison(reports))
    try:
        from .figures import save_comparison_figure
        by_task: dict[str, list[EvalReport]] = {}
        for r in reports:
            by_task.setdefault(r.task, []).append(r)
        for task, rs in by_task.items():
            save_comparison_figure(rs, out / f"comparison_{task}.png")
    except Exception:
        pass
    return reports


def format_comparison(reports: list[EvalReport]) -> str:
    """Fixed-width text table of the comparison rows."""
    header = f"{'scheme':<8} {'task':<16} {'Acc@0.5':>8} {'mIoU':>8} {'VQA':>8} {'maskIoU':>8} {'parse-fail':>10} {'n':>6}"
    lines = [header, "-" * len(header)]
    for r in reports:
        def fmt(v):
            return f"{v:8.4f}" if v is not None else " " * 8
        lines.append(
            f"{r.scheme:<8} {r.task:<16} {fmt(r.acc_at_05)} {fmt(r.mean_iou)} "
            f"{fmt(r.vqa_accuracy)} {fmt(r.mask_miou)} "
            f"{(f'{r.parse_failure_rate:10.4f}' if r.parse_failure_rate is not None else ' ' * 10)} "
            f"{r.n_samples:>6}"
        )
    return "\n".join(lines) + "\n"
