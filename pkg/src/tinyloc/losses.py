"""Training objectives: detection, segmentation, cycle, text, and stage sums.

Sign conventions: the GIoU and IoU terms are losses (1 - GIoU, 1 - softIoU),
so every objective is nonnegative and vanishes on an exact match. The
detection path here is the differentiable twin of the pure-fp64 geometry
module; tests hold the two routes against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class MissingComponent(Exception):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.4          # weight of the GIoU term in the detection loss
    beta: float = 20.0          # weight of the focal term in the segmentation loss
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cycle_box_weight: float = 1.0
    cycle_emb_weight: float = 1.0
    dice_eps: float = 1e-6
    min_box_side: float = 1e-6  # degenerate-box clamp before GIoU

    def validate(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def _as_boxes(t) -> Tensor:
    """Coerce to a (N, 4) tensor."""
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    if t.shape == (4,):
        t = ad.reshape(t, (1, 4))
    if t.data.ndim != 2 or t.shape[1] != 4:
        raise ad.ShapeMismatch(f"expected (N, 4) boxes, got {t.shape}")
    return t


def giou_tensor(pred: Tensor, gt: Tensor, min_side: float = 1e-6) -> Tensor:
    """Differentiable GIoU of corner-format box rows; returns (N,)."""
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeMismatch(f"box count mismatch {pred.shape} vs {gt.shape}")

    def corners(b):
        x0 = ad.slice_(b, (slice(None), 0))
        y0 = ad.slice_(b, (slice(None), 1))
        x1 = ad.slice_(b, (slice(None), 2))
        y1 = ad.slice_(b, (slice(None), 3))
        # clamp to a minimum side so zero-area boxes keep finite gradients
        x1 = ad.maximum(x1, x0 + min_side)
        y1 = ad.maximum(y1, y0 + min_side)
        return x0, y0, x1, y1

    px0, py0, px1, py1 = corners(pred)
    gx0, gy0, gx1, gy1 = corners(gt)
    p_area = (px1 - px0) * (py1 - py0)
    g_area = (gx1 - gx0) * (gy1 - gy0)
    iw = ad.clip(ad.minimum(px1, gx1) - ad.maximum(px0, gx0), 0.0, None)
    ih = ad.clip(ad.minimum(py1, gy1) - ad.maximum(py0, gy0), 0.0, None)
    inter = iw * ih
    union = p_area + g_area - inter
    hull = (ad.maximum(px1, gx1) - ad.minimum(px0, gx0)) * (ad.maximum(py1, gy1) - ad.minimum(py0, gy0))
    return inter / union - (hull - union) / hull


def l_det(b: Tensor, b_gt, config: LossConfig | None = None) -> Tensor:
    """L1 + alpha * (1 - GIoU) between predicted and ground-truth boxes."""
    cfg = config or LossConfig()
    pred = _as_boxes(b)
    gt = _as_boxes(b_gt if isinstance(b_gt, Tensor) else Tensor(np.asarray(
        b_gt.as_array() if hasattr(b_gt, "as_array") else b_gt, dtype=np.float64)))
    l1 = ad.l1_distance(pred, gt)
    giou = giou_tensor(pred, gt, min_side=cfg.min_box_side)
    return l1 + ad.scale(ad.mean(ad.scale(giou, -1.0) + 1.0), cfg.alpha)


def dice_loss(m: Tensor, g: Tensor, eps: float = 1e-6) -> Tensor:
    """1 - 2*sum(mg) / (sum(m) + sum(g) + eps)."""
    num = ad.scale(ad.sum_(m * g), 2.0)
    den = ad.sum_(m) + ad.sum_(g) + eps
    return 1.0 - num / den


def focal_loss(m: Tensor, g: Tensor, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Binary focal loss on probabilities, mean over cells."""
    p = ad.clip(m, 1e-7, 1.0 - 1e-7)
    pos = -alpha * g * ad.power(1.0 - p, gamma) * ad.log(p)
    neg = -(1.0 - alpha) * (1.0 - g) * ad.power(p, gamma) * ad.log(1.0 - p)
    return ad.mean(pos + neg)


def soft_iou_tensor(m: Tensor, g: Tensor, eps: float = 1e-6) -> Tensor:
    return ad.sum_(ad.minimum(m, g)) / (ad.sum_(ad.maximum(m, g)) + eps)


def l_seg(m: Tensor, m_gt, config: LossConfig | None = None) -> Tensor:
    """(1 - softIoU) + Dice + beta * Focal on sigmoid mask probabilities."""
    cfg = config or LossConfig()
    g = m_gt if isinstance(m_gt, Tensor) else Tensor(np.asarray(
        m_gt.values if hasattr(m_gt, "values") else m_gt))
    if m.shape != g.shape:
        raise ad.ShapeMismatch(f"mask shapes differ: {m.shape} vs {g.shape}")
    iou_term = 1.0 - soft_iou_tensor(m, g, cfg.dice_eps)
    dice = dice_loss(m, g, cfg.dice_eps)
    focal = focal_loss(m, g, cfg.focal_gamma, cfg.focal_alpha)
    return iou_term + dice + ad.scale(focal, cfg.beta)


def l_cyc(b, t, F, G, config: LossConfig | None = None) -> Tensor:
    """Cycle loss binding encoder and decoder: L1(b, F(G(b))) + L2(t, G(F(t))).

    `b` are sampled boxes (N, 4); `t` are hidden states (M, d) or None when
    the batch produced no trigger states. F decodes hidden -> box, G encodes
    box -> hidden.
    """
    cfg = config or LossConfig()
    parts = []
    if b is not None:
        boxes = _as_boxes(b)
        rec = F(G(boxes))
        parts.append(ad.scale(ad.l1_distance(rec, boxes), cfg.cycle_box_weight))
    if t is not None:
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
        rec = G(F(t))
        parts.append(ad.scale(ad.squared_error(rec, t), cfg.cycle_emb_weight))
    if not parts:
        raise MissingComponent("cycle loss needs boxes or hidden states")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def l_text(logits: Tensor, targets, mask) -> Tensor:
    """Mean cross-entropy over the positions where `mask` is True."""
    keep = np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ad.EmptyMask("no supervised positions")
    return ad.cross_entropy(logits, np.asarray(targets, dtype=np.int64), ignore_mask=~keep)


def stage_loss(stage: int, parts: dict) -> Tensor:
    """Combine component losses for a training stage.

    Stages 1 and 2 sum text + det + cyc; stage 3 is the segmentation loss
    alone.
    """
    def need(name):
        if name not in parts or parts[name] is None:
            raise MissingComponent(f"stage {stage} needs loss component {name!r}")
        p = parts[name]
        return p if isinstance(p, Tensor) else Tensor(np.asarray(p))

    if stage in (1, 2):
        return need("text") + need("det") + need("cyc")
    if stage == 3:
        return need("seg")
    raise ValueError(f"unknown stage {stage}")


def zero_loss(like: Tensor | None = None) -> Tensor:
    """A constant zero component (used by schemes without a given loss)."""
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.zeros((), dtype=dtype))


def loss_gradient_checks(seeds: int = 32, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference suite over every loss, fp64 reference path."""
    results: dict[str, float] = {}
    cfg = LossConfig()

    def run(name, make):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(5000 + s)
            f, x = make(rng)
            worst = max(worst, ad.finite_difference_check(f, x, eps=eps))
        results[name] = worst

    def rand_box_rows(rng, n):
        rows = []
        for _ in range(n):
            x0, y0 = rng.uniform(0.05, 0.55, 2)
            w, h = rng.uniform(0.2, 0.4, 2)
            rows.append([x0, y0, min(x0 + w, 0.99), min(y0 + h, 0.99)])
        return np.array(rows)

    run("l_det", lambda rng: (
        (lambda b, gt=Tensor(rand_box_rows(rng, 3), dtype=np.float64): l_det(b, gt, cfg)),
        Tensor(rand_box_rows(rng, 3))))
    run("giou", lambda rng: (
        (lambda b, gt=Tensor(rand_box_rows(rng, 2), dtype=np.float64): ad.mean(giou_tensor(b, gt))),
        Tensor(rand_box_rows(rng, 2))))
    run("l_seg_probs", lambda rng: (
        (lambda m, g=Tensor((rng.random((8, 8)) > 0.5).astype(np.float64), dtype=np.float64):
         l_seg(ad.sigmoid(m), g, cfg)),
        Tensor(rng.standard_normal((8, 8)))))
    run("l_cyc", lambda rng: (
        (lambda w, b=Tensor(rand_box_rows(rng, 2), dtype=np.float64),
                t=Tensor(rng.standard_normal((2, 6)), dtype=np.float64):
         l_cyc(b, t,
               F=lambda h: ad.sigmoid(ad.matmul(h, ad.slice_(w, (slice(None), slice(0, 4))))),
               G=lambda bb: ad.matmul(bb, ad.transpose(ad.slice_(w, (slice(None), slice(0, 4))), (1, 0))),
               config=cfg)),
        Tensor(np.random.default_rng(50).standard_normal((6, 6)) * 0.3)))
    run("l_text", lambda rng: (
        (lambda lg, t=rng.integers(0, 9, size=7), m=np.array([True] * 5 + [False] * 2):
         l_text(lg, t, m)),
        Tensor(rng.standard_normal((7, 9)))))
    run("stage1", lambda rng: (
        (lambda b, gt=Tensor(rand_box_rows(rng, 2), dtype=np.float64),
                lg=Tensor(rng.standard_normal((4, 6)), dtype=np.float64),
                t=rng.integers(0, 6, size=4):
         stage_loss(1, {"text": l_text(lg, t, np.ones(4, bool)),
                        "det": l_det(b, gt, cfg),
                        "cyc": zero_loss()})),
        Tensor(rand_box_rows(rng, 2))))
    return results
