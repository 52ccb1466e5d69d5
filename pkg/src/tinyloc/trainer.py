"""Staged training: optimizer, freezing policy, checkpointing, metrics.

Stage 1 pre-trains text + detection + cycle objectives (stage 2 reuses the
same loss on a different data mix); stage 3 trains only the mask head on the
segmentation loss with everything else frozen. Batch order is a stateless
function of (seed, step), so resuming from a checkpoint replays the exact
run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as lo
from .autodiff import Tensor
from .model import (LocModel, ModelConfig, build_plan, collate, param_hashes,
                    load_checkpoint)
from .synthdata import Dataset


class MissingCheckpoint(Exception):
    pass


class FrozenParamDrift(Exception):
    pass


class NonFiniteGradient(Exception):
    pass


METRIC_COLUMNS = ("step", "l_text", "l_det", "l_cyc", "l_seg", "total", "grad_norm", "lr")


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    clip: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    data_dir: str = "data"
    out_dir: str = "run"
    scheme: str = "Pemb"
    trainable_only: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    freeze_patch_encoder: bool = False
    log_every: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: lo.LossConfig = field(default_factory=lo.LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = lo.LossConfig(**self.loss)
        self.model.scheme = self.scheme

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        return TrainConfig(**json.loads(text))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def fresh(params: dict[str, Tensor], names) -> "OptimizerState":
        return OptimizerState(
            m={n: np.zeros_like(params[n].data) for n in names},
            v={n: np.zeros_like(params[n].data) for n in names},
            step=0,
        )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, clip: float = 0.0,
               weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8) -> float:
    """One decoupled-weight-decay update. Returns the pre-clip grad norm.

    Raises NonFiniteGradient (without touching parameters or state) if the
    global norm is not finite.
    """
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradient(f"global grad norm is {norm}")
    scale = 1.0
    if clip > 0.0 and norm > clip:
        scale = clip / norm
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in grads:
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[name].data
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)
    return norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to 10% of peak."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.steps <= cfg.warmup:
        return cfg.lr
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic batch for a step; a fresh permutation per epoch."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * bs : (k + 1) * bs]


def trainable_names(params, cfg: TrainConfig) -> list[str]:
    if cfg.stage == 3:
        # stage 3 trains the mask projector and decoder only
        names = [n for n in params if n.startswith("mask.")]
    elif cfg.trainable_only:
        names = [n for n in params if any(n.startswith(p) for p in cfg.trainable_only)]
    else:
        names = list(params)
    frozen = list(cfg.frozen)
    if cfg.freeze_patch_encoder and cfg.stage != 3:
        frozen.append("patch.")
    return [n for n in names if not any(n.startswith(p) for p in frozen)]


def _gather_rows_3d(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows along the batch axis of a (B, N, D) tensor."""
    B, N, D = x.shape
    flat = ad.reshape(x, (B, N * D))
    return ad.reshape(ad.embedding_gather(flat, rows), (len(rows), N, D))


def _stage12_losses(model: LocModel, out, batch, cfg: TrainConfig):
    """text + det + cyc parts for stages 1 and 2."""
    tokens, mask = batch.tokens, batch.loss_mask
    B, T = tokens.shape
    logits = ad.reshape(ad.slice_(out.logits, (slice(None), slice(0, T - 1), slice(None))),
                        (B * (T - 1), len(model.vocab)))
    targets = tokens[:, 1:].reshape(-1)
    keep = mask[:, 1:].reshape(-1)
    text = lo.l_text(logits, targets, keep)

    if model.cfg.scheme != "Pemb":
        return {"text": text, "det": lo.zero_loss(), "cyc": lo.zero_loss()}

    det = lo.zero_loss()
    trig = out.trigger_hidden
    if trig is not None:
        pred = model.box_decoder(trig)
        det = lo.l_det(pred, Tensor(batch.trigger_boxes.astype(np.float32)), cfg.loss)
    pool = [b for b in (batch.trigger_boxes, batch.override_boxes) if b.size]
    boxes = np.concatenate(pool, axis=0) if pool else None
    cyc = lo.l_cyc(Tensor(boxes.astype(np.float32)) if boxes is not None else None,
                   trig, F=model.box_decoder, G=model.location_encoder, config=cfg.loss)
    return {"text": text, "det": det, "cyc": cyc}


def _stage3_loss(model: LocModel, out, batch, dataset: Dataset, samples, cfg: TrainConfig):
    trig = out.trigger_hidden
    if trig is None:
        raise ValueError("stage 3 batch has no trigger positions")
    with ad.no_grad():
        pred_boxes = model.box_decoder(trig).data.copy()
    feats = _gather_rows_3d(out.visual, batch.trigger_sample)
    masks = model.decode_mask_from_hidden(trig, feats, pred_boxes)
    gts = np.stack([
        dataset.masks(samples[b].scene_id)[samples[b].mask_refs[slot]]
        for b, slot in zip(batch.trigger_sample, batch.trigger_slot)
    ])
    return lo.l_seg(masks, Tensor(gts), cfg.loss)


def run_stage(cfg: TrainConfig, checkpoint_in: str | None = None,
              callback=None, callback_every: int = 0):
    """Train one stage; writes a checkpoint, metrics.csv, and a loss figure.

    `callback(model, step) -> bool` (optional) is invoked every
    `callback_every` steps and stops training early when it returns True.
    Returns (model, metrics rows).
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.stage == 3 and checkpoint_in is None:
        raise MissingCheckpoint("stage 3 requires a checkpoint from stages 1-2")

    start_step = 0
    opt_state = None
    if checkpoint_in is not None:
        model, training_state, saved_opt = load_checkpoint(checkpoint_in)
        model.cfg.scheme = cfg.scheme
        if training_state is not None and training_state.get("stage") == cfg.stage:
            start_step = int(training_state.get("step", 0))
        if saved_opt is not None and start_step > 0:
            opt_state = OptimizerState(
                m={n: m for n, (m, _) in saved_opt.items()},
                v={n: v for n, (_, v) in saved_opt.items()},
                step=int(training_state.get("opt_step", start_step)),
            )
    else:
        model = LocModel(cfg.model, seed=cfg.seed)

    dataset = Dataset(cfg.data_dir, "train")
    samples_all = dataset.samples
    if cfg.stage == 3:
        samples_all = [s for s in samples_all if s.task == "grounding"]
        if not samples_all:
            raise ValueError("stage 3 needs grounding samples with masks")

    train_names = trainable_names(model.params, cfg)
    frozen_names = [n for n in model.params if n not in train_names]
    for n in frozen_names:
        model.params[n].requires_grad = False
    for n in train_names:
        model.params[n].requires_grad = True
    pre_hashes = {n: h for n, h in param_hashes(model.params).items() if n in frozen_names}

    if opt_state is None:
        opt_state = OptimizerState.fresh(model.params, train_names)

    metrics_path = out_dir / "metrics.csv"
    rows: list[dict] = []
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    mfile = open(metrics_path, mode, newline="")
    writer = csv.DictWriter(mfile, fieldnames=METRIC_COLUMNS)
    if mode == "w":
        writer.writeheader()

    n = len(samples_all)
    stopped = False
    for step in range(start_step, cfg.steps):
        idx = batch_indices(n, cfg.batch_size, step, cfg.seed)
        batch_samples = [samples_all[i] for i in idx]
        plans = [build_plan(s, model.codec, model.vocab,
                            loc_supervised=model.cfg.loc_supervised) for s in batch_samples]
        batch = collate(plans, model.vocab, model.cfg)
        rasters = np.stack([dataset.raster(s.scene_id) for s in batch_samples])

        lr = lr_at(step, cfg)
        with ad.fresh_tape():
            out = model.forward_train(batch, rasters)
            if cfg.stage in (1, 2):
                parts = _stage12_losses(model, out, batch, cfg)
            else:
                parts = {"seg": _stage3_loss(model, out, batch, dataset, batch_samples, cfg)}
            total = lo.stage_loss(cfg.stage, parts)
            ad.backward(total)

        grads = {}
        for name in train_names:
            p = model.params[name]
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.grad = None
        try:
            norm = adamw_step(model.params, grads, opt_state, lr, cfg.clip,
                              cfg.weight_decay, (cfg.beta1, cfg.beta2))
        except NonFiniteGradient:
            norm = float("nan")

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {
                "step": step,
                "l_text": parts.get("text", lo.zero_loss()).item(),
                "l_det": parts.get("det", lo.zero_loss()).item(),
                "l_cyc": parts.get("cyc", lo.zero_loss()).item(),
                "l_seg": parts.get("seg", lo.zero_loss()).item(),
                "total": total.item(),
                "grad_norm": norm,
                "lr": lr,
            }
            rows.append(row)
            writer.writerow(row)
            mfile.flush()
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            if callback(model, step + 1):
                stopped = True
                break
    mfile.close()

    post_hashes = param_hashes(model.params)
    drifted = [n for n, h in pre_hashes.items() if post_hashes[n] != h]
    if drifted:
        raise FrozenParamDrift(f"frozen parameters changed: {drifted[:5]}")

    final_step = cfg.steps if not stopped else step + 1
    model.save(out_dir,
               training_state={"stage": cfg.stage, "step": final_step,
                               "opt_step": opt_state.step, "seed": cfg.seed},
               opt_state={n: (opt_state.m[n], opt_state.v[n]) for n in train_names})
    with open(out_dir / "train_config.json", "w") as f:
        f.write(cfg.to_json())
    try:
        from .figures import save_metrics_figure
        save_metrics_figure(metrics_path, out_dir / "metrics.png")
    except Exception:
        pass  # figures are best-effort; training artifacts already stored
    return model, rows
