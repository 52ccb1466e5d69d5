"""Toy decoder-only transformer with a visual-token prefix and location heads.

The sequence is [patch tokens ; text tokens] under a causal mask. Two small
MLPs bridge boxes and hidden space: the box decoder F maps a trigger-token
hidden state to a box, and the location encoder G maps a box to the input
embedding used at placeholder (`<loc>`) positions. A small convolutional
decoder over the patch-feature grid produces masks from the same hidden
states.

Convention: "the hidden state of the trigger" is the final-layer (post-norm)
state at the position whose *input* token is the trigger, which keeps
generation causal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import LocCodec, Vocab, build_vocab
from .geometry import BBox, rasterize_box


class SequenceTooLong(Exception):
    pass


class ContextOverflow(Exception):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 128
    patch_grid: int = 8
    image_channels: int = 6
    image_size: int = 64
    input_pool: int = 1           # average-pool factor applied to the raster
    mask_size: int = 64
    mask_channels: int = 16
    scheme: str = "Pemb"
    loc_supervised: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % (self.patch_grid * self.input_pool):
            raise ValueError("image_size must divide into input_pool * patch_grid")
        ups = self.mask_size / self.patch_grid
        if ups < 1 or 2 ** int(np.log2(ups) + 0.5) != int(ups):
            raise ValueError("mask_size / patch_grid must be a power of two")

    @property
    def n_visual(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def patch_size(self) -> int:
        return self.image_size // self.input_pool // self.patch_grid

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "ModelConfig":
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Sequence plans
# ---------------------------------------------------------------------------


@dataclass
class SequencePlan:
    """Token stream plus per-position embedding overrides and box targets."""

    tokens: list[int]
    loss_mask: list[bool]
    overrides: dict[int, int] = field(default_factory=dict)        # pos -> box slot
    trigger_targets: dict[int, int] = field(default_factory=dict)  # pos -> box slot
    boxes: list[np.ndarray] = field(default_factory=list)
    sample_id: int = -1
    scene_id: int = -1

    def validate(self, vocab: Vocab):
        for pos, tok in enumerate(self.tokens):
            if tok == vocab.loc_id and pos not in self.overrides:
                raise ValueError(f"<loc> at {pos} has no embedding override")
        for pos in self.overrides:
            if self.tokens[pos] != vocab.loc_id:
                raise ValueError(f"override at {pos} is not a <loc> position")
        for pos, slot in self.trigger_targets.items():
            if self.tokens[pos] != vocab.trigger_id:
                raise ValueError(f"trigger target at {pos} is not a <trigger> position")
            if not 0 <= slot < len(self.boxes):
                raise ValueError(f"trigger target slot {slot} out of range")
            if pos + 1 >= len(self.tokens) or self.tokens[pos + 1] != vocab.loc_id:
                raise ValueError("target <trigger> must be followed by <loc>")


_BOX_SLOT = "{box:"


def _expand_slot(word: str) -> int | None:
    if word.startswith(_BOX_SLOT) and word.endswith("}"):
        return int(word[len(_BOX_SLOT):-1])
    return None


def build_plan(sample, codec: LocCodec, vocab: Vocab, loc_supervised: bool = True,
               include_target: bool = True) -> SequencePlan:
    """Expand a sample's word stream into scheme-specific token ids.

    Box placeholders in the prompt become input references (an embedding
    override for the continuous scheme, coordinate tokens otherwise); box
    placeholders in the target become supervised outputs (a trigger/
    placeholder pair, or coordinate tokens).
    """
    boxes = [np.asarray(b, dtype=np.float64) for b in sample.boxes]
    tokens: list[int] = []
    mask: list[bool] = []
    overrides: dict[int, int] = {}
    triggers: dict[int, int] = {}

    def emit_words(words, supervised: bool, target_region: bool):
        for w in words:
            slot = _expand_slot(w)
            if slot is None:
                tokens.append(vocab.id(w))
                mask.append(supervised)
                continue
            if codec.scheme == "Pemb":
                if target_region:
                    tokens.append(vocab.trigger_id)
                    mask.append(supervised)
                    triggers[len(tokens) - 1] = slot
                    tokens.append(vocab.loc_id)
                    mask.append(supervised and loc_supervised)
                    overrides[len(tokens) - 1] = slot
                else:
                    tokens.append(vocab.loc_id)
                    mask.append(False)
                    overrides[len(tokens) - 1] = slot
            else:
                for tid in codec.encode_box(BBox.from_array(boxes[slot])):
                    tokens.append(tid)
                    mask.append(supervised)

    emit_words(sample.prompt_tokens, supervised=False, target_region=False)
    if include_target:
        emit_words(sample.target_tokens, supervised=True, target_region=True)
    plan = SequencePlan(tokens, mask, overrides, triggers, boxes,
                        sample_id=sample.sample_id, scene_id=sample.scene_id)
    plan.validate(vocab)
    return plan


@dataclass
class PlanBatch:
    """Padded batch of plans with flattened override/trigger slots."""

    tokens: np.ndarray            # (B, T) int64, padded
    loss_mask: np.ndarray         # (B, T) bool
    pad_mask: np.ndarray          # (B, T) bool, True where real token
    override_flat: np.ndarray     # (n_over,) into (B*T)
    override_boxes: np.ndarray    # (n_over, 4)
    trigger_flat: np.ndarray      # (n_trig,) into (B*T)
    trigger_boxes: np.ndarray     # (n_trig, 4)
    trigger_sample: np.ndarray    # (n_trig,) batch row per trigger
    trigger_slot: np.ndarray      # (n_trig,) box slot per trigger
    lengths: np.ndarray


def collate(plans: list[SequencePlan], vocab: Vocab, cfg: ModelConfig) -> PlanBatch:
    B = len(plans)
    T = max(len(p.tokens) for p in plans)
    if cfg.n_visual + T > cfg.max_seq_len:
        raise SequenceTooLong(f"{cfg.n_visual}+{T} tokens exceed max_seq_len {cfg.max_seq_len}")
    tokens = np.full((B, T), vocab.pad_id, dtype=np.int64)
    loss_mask = np.zeros((B, T), dtype=bool)
    pad_mask = np.zeros((B, T), dtype=bool)
    o_flat, o_boxes, t_flat, t_boxes, t_sample, t_slot = [], [], [], [], [], []
    for b, p in enumerate(plans):
        L = len(p.tokens)
        tokens[b, :L] = p.tokens
        loss_mask[b, :L] = p.loss_mask
        pad_mask[b, :L] = True
        for pos, slot in p.overrides.items():
            o_flat.append(b * T + pos)
            o_boxes.append(p.boxes[slot])
        for pos, slot in p.trigger_targets.items():
            t_flat.append(b * T + pos)
            t_boxes.append(p.boxes[slot])
            t_sample.append(b)
            t_slot.append(slot)
    return PlanBatch(
        tokens, loss_mask, pad_mask,
        np.asarray(o_flat, dtype=np.int64),
        np.asarray(o_boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(t_flat, dtype=np.int64),
        np.asarray(t_boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(t_sample, dtype=np.int64),
        np.asarray(t_slot, dtype=np.int64),
        np.asarray([len(p.tokens) for p in plans], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def sincos_grid_embedding(grid: int, d: int) -> np.ndarray:
    """2-D sin-cos position code over a grid x grid patch layout.

    Used to initialize the learned patch position embeddings so patch
    coordinates are linearly decodable from the start.
    """
    if d % 4:
        raise ValueError("d_model must be divisible by 4 for the 2-D sin-cos init")
    half = d // 2
    omega = 1.0 / 10000 ** (np.arange(half // 2, dtype=np.float64) / (half // 2))
    pos = np.arange(grid, dtype=np.float64)
    block = np.concatenate([np.sin(np.outer(pos, omega)), np.cos(np.outer(pos, omega))], axis=1)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    emb = np.concatenate([block[ys.reshape(-1)], block[xs.reshape(-1)]], axis=1)
    return emb.astype(np.float32)


def init_params(cfg: ModelConfig, vocab_size: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    p_in = cfg.image_channels * cfg.patch_size * cfg.patch_size
    cm = cfg.mask_channels

    def w(*shape):
        return Tensor((rng.standard_normal(shape) * 0.02).astype(np.float32), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    params: dict[str, Tensor] = {
        "patch.proj.w": w(p_in, d), "patch.proj.b": zeros(d),
        "patch.pos": Tensor(sincos_grid_embedding(cfg.patch_grid, d) * 0.5,
                            requires_grad=True),
        "tok.emb": w(vocab_size, d), "tok.pos": w(cfg.max_seq_len, d),
        "ln_f.g": ones(d), "ln_f.b": zeros(d),
        "lm_head.w": w(d, vocab_size), "lm_head.b": zeros(vocab_size),
        "boxdec.w1": w(d, d), "boxdec.b1": zeros(d),
        "boxdec.w2": w(d, 4), "boxdec.b2": zeros(4),
        "locenc.w1": w(4, d), "locenc.b1": zeros(d),
        "locenc.w2": w(d, d), "locenc.b2": zeros(d),
        "mask.tproj.w": w(d, cm), "mask.tproj.b": zeros(cm),
        "mask.fproj.w": w(d, cm), "mask.fproj.b": zeros(cm),
        "mask.bproj.w": w(1, cm), "mask.bproj.b": zeros(cm),
    }
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = ones(d)
        params[pre + "ln1.b"] = zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            params[pre + "attn." + nm] = w(d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            params[pre + "attn." + nm] = zeros(d)
        params[pre + "ln2.g"] = ones(d)
        params[pre + "ln2.b"] = zeros(d)
        params[pre + "mlp.w1"] = w(d, f)
        params[pre + "mlp.b1"] = zeros(f)
        params[pre + "mlp.w2"] = w(f, d)
        params[pre + "mlp.b2"] = zeros(d)
    # mask decoder: conv at patch-grid res, then upsample+conv to mask res
    n_up = int(np.log2(cfg.mask_size // cfg.patch_grid) + 0.5)
    chans = [max(cm >> i, 8) for i in range(n_up + 1)]
    params["mask.dec.0.w"] = w(chans[0], 3 * cm, 3, 3)
    params["mask.dec.0.b"] = zeros(chans[0])
    for i in range(n_up):
        params[f"mask.dec.{i + 1}.w"] = w(chans[i + 1], chans[i], 3, 3)
        params[f"mask.dec.{i + 1}.b"] = zeros(chans[i + 1])
    params["mask.out.w"] = w(1, chans[-1], 3, 3)
    params["mask.out.b"] = zeros(1)
    return params


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ForwardOut:
    logits: Tensor                # (B, T_text, V)
    trigger_hidden: Tensor | None  # (n_trig, d)
    visual: Tensor                # (B, n_visual, d) patch features
    batch: PlanBatch


@dataclass
class GenerateResult:
    tokens: list[int]             # emitted token ids (prompt excluded)
    boxes: list[BBox]
    masks: list[np.ndarray]
    trigger_hidden: list[np.ndarray]
    loc_embeddings: list[np.ndarray]


class LocModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab | None = None,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab or build_vocab(cfg.scheme)
        self.codec = LocCodec(cfg.scheme, self.vocab)
        self.params = params or init_params(cfg, len(self.vocab), seed)

    # -- heads ------------------------------------------------------------

    def box_decoder(self, t: Tensor) -> Tensor:
        """F: hidden states (M, d) -> corner-ordered boxes (M, 4) in [0,1]^4."""
        p = self.params
        h = ad.relu(ad.matmul(t, p["boxdec.w1"]) + p["boxdec.b1"])
        r = ad.sigmoid(ad.matmul(h, p["boxdec.w2"]) + p["boxdec.b2"])
        a = ad.slice_(r, (slice(None), slice(0, 1)))
        b = ad.slice_(r, (slice(None), slice(1, 2)))
        c = ad.slice_(r, (slice(None), slice(2, 3)))
        d = ad.slice_(r, (slice(None), slice(3, 4)))
        return ad.concat([ad.minimum(a, c), ad.minimum(b, d),
                          ad.maximum(a, c), ad.maximum(b, d)], axis=1)

    def location_encoder(self, boxes) -> Tensor:
        """G: boxes (N, 4) -> embeddings (N, d)."""
        p = self.params
        b = boxes if isinstance(boxes, Tensor) else Tensor(np.asarray(boxes, dtype=np.float32))
        h = ad.relu(ad.matmul(b, p["locenc.w1"]) + p["locenc.b1"])
        return ad.matmul(h, p["locenc.w2"]) + p["locenc.b2"]

    def decode_box_from_hidden(self, t) -> BBox:
        """Single-state convenience wrapper around the box decoder."""
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float32))
        if t.data.ndim == 1:
            t = ad.reshape(t, (1, -1))
        with ad.no_grad():
            out = self.box_decoder(t)
        return BBox.from_array(out.data[0])

    # -- encoders ---------------------------------------------------------

    def patches(self, rasters: np.ndarray) -> np.ndarray:
        """(B, C, H, W) -> (B, n_visual, C*ps*ps) row-major patch vectors.

        Coverage rasters average-pool exactly (mean coverage at the coarser
        resolution), so input_pool trades spatial detail for a cleaner
        per-patch feature vector.
        """
        cfg = self.cfg
        B, C, H, W = rasters.shape
        if C != cfg.image_channels or H != cfg.image_size or W != cfg.image_size:
            raise ad.ShapeMismatch(f"raster shape {rasters.shape} does not match config")
        if cfg.input_pool > 1:
            p = cfg.input_pool
            rasters = rasters.reshape(B, C, H // p, p, W // p, p).mean(axis=(3, 5))
            H, W = H // p, W // p
        g, ps = cfg.patch_grid, cfg.patch_size
        x = rasters.reshape(B, C, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x).reshape(B, g * g, C * ps * ps)

    def encode_image(self, rasters: np.ndarray) -> Tensor:
        """Patch projection plus learned per-patch position embedding."""
        p = self.params
        x = Tensor(self.patches(np.asarray(rasters, dtype=np.float32)))
        return ad.matmul(x, p["patch.proj.w"]) + p["patch.proj.b"] + p["patch.pos"]

    # -- transformer ------------------------------------------------------

    def _attn_mask(self, batch: PlanBatch) -> Tensor:
        cfg = self.cfg
        B, T_text = batch.tokens.shape
        T = cfg.n_visual + T_text
        causal = np.tril(np.ones((T, T), dtype=bool))
        keep = np.ones((B, T), dtype=bool)
        keep[:, cfg.n_visual:] = batch.pad_mask
        m = causal[None, :, :] & keep[:, None, :]
        bias = np.where(m, 0.0, -1e9).astype(np.float32)
        return Tensor(bias[:, None, :, :])

    def _text_embeddings(self, batch: PlanBatch) -> Tensor:
        p, cfg = self.params, self.cfg
        B, T = batch.tokens.shape
        emb = ad.embedding_gather(p["tok.emb"], batch.tokens.reshape(-1))
        if batch.override_flat.size:
            # teacher forcing: placeholder inputs are exactly G(box)
            enc = self.location_encoder(Tensor(batch.override_boxes.astype(np.float32)))
            emb = ad.scatter_rows(emb, batch.override_flat, enc)
        emb = ad.reshape(emb, (B, T, cfg.d_model))
        pos = ad.slice_(p["tok.pos"], (slice(cfg.n_visual, cfg.n_visual + T),))
        return emb + pos

    def _block(self, i: int, x: Tensor, mask: Tensor, B: int, T: int) -> Tensor:
        p, cfg = self.params, self.cfg
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        pre = f"blocks.{i}."

        h = ad.layernorm(x) * p[pre + "ln1.g"] + p[pre + "ln1.b"]

        def heads(name):
            y = ad.matmul(h, p[pre + "attn.w" + name]) + p[pre + "attn.b" + name]
            return ad.transpose(ad.reshape(y, (B, T, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.softmax(scores + mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + ad.matmul(ctx, p[pre + "attn.wo"]) + p[pre + "attn.bo"]

        h2 = ad.layernorm(x) * p[pre + "ln2.g"] + p[pre + "ln2.b"]
        ff = ad.matmul(ad.gelu(ad.matmul(h2, p[pre + "mlp.w1"]) + p[pre + "mlp.b1"]),
                       p[pre + "mlp.w2"]) + p[pre + "mlp.b2"]
        return x + ff

    def forward_hidden(self, visual: Tensor, batch: PlanBatch) -> Tensor:
        """Final-layer (post-norm) hidden states over [visual ; text]."""
        p, cfg = self.params, self.cfg
        B, T_text = batch.tokens.shape
        T = cfg.n_visual + T_text
        x = ad.concat([visual, self._text_embeddings(batch)], axis=1)
        mask = self._attn_mask(batch)
        for i in range(cfg.n_layers):
            x = self._block(i, x, mask, B, T)
        return ad.layernorm(x) * p["ln_f.g"] + p["ln_f.b"]

    def forward_train(self, batch: PlanBatch, rasters: np.ndarray) -> ForwardOut:
        """Teacher-forced forward: text logits plus trigger hidden states."""
        p, cfg = self.params, self.cfg
        B, T_text = batch.tokens.shape
        visual = self.encode_image(rasters)
        hidden = self.forward_hidden(visual, batch)
        text_h = ad.slice_(hidden, (slice(None), slice(cfg.n_visual, None), slice(None)))
        logits = ad.matmul(text_h, p["lm_head.w"]) + p["lm_head.b"]
        trig = None
        if batch.trigger_flat.size:
            T = cfg.n_visual + T_text
            flat = ad.reshape(hidden, (B * T, cfg.d_model))
            rows = batch.trigger_sample * T + cfg.n_visual + (batch.trigger_flat % T_text)
            trig = ad.embedding_gather(flat, rows)
        return ForwardOut(logits, trig, visual, batch)

    # -- mask head ----------------------------------------------------------

    def decode_mask_from_hidden(self, t: Tensor, feats: Tensor, boxes: np.ndarray) -> Tensor:
        """Masks (M, S, S) from trigger states, patch features, and box prompts.

        feats: (M, n_visual, d) patch features of each trigger's sample;
        boxes: (M, 4) prompt boxes (predicted or ground truth), rasterized to
        the patch grid as an extra conditioning channel.
        """
        p, cfg = self.params, self.cfg
        M = t.shape[0]
        g, cm = cfg.patch_grid, cfg.mask_channels

        def to_grid(x):  # (M, g*g, c) -> (M, c, g, g)
            return ad.transpose(ad.reshape(x, (M, g, g, -1)), (0, 3, 1, 2))

        fgrid = to_grid(ad.matmul(feats, p["mask.fproj.w"]) + p["mask.fproj.b"])
        tvec = ad.matmul(t, p["mask.tproj.w"]) + p["mask.tproj.b"]
        ones = Tensor(np.ones((1, 1, g, g), dtype=np.float32))
        tgrid = ad.reshape(tvec, (M, cm, 1, 1)) * ones
        rast = np.stack([rasterize_box(BBox.from_array(b), g, g).values for b in boxes])
        bvec = ad.matmul(Tensor(rast.reshape(M, g * g, 1)), p["mask.bproj.w"]) + p["mask.bproj.b"]
        bgrid = to_grid(bvec)

        x = ad.relu(ad.conv2d(ad.concat([fgrid, tgrid, bgrid], axis=1),
                              p["mask.dec.0.w"], p["mask.dec.0.b"]))
        n_up = int(np.log2(cfg.mask_size // g) + 0.5)
        for i in range(n_up):
            x = ad.relu(ad.conv2d(ad.upsample2(x), p[f"mask.dec.{i + 1}.w"], p[f"mask.dec.{i + 1}.b"]))
        logits = ad.conv2d(x, p["mask.out.w"], p["mask.out.b"])
        return ad.reshape(ad.sigmoid(logits), (M, cfg.mask_size, cfg.mask_size))

    # -- generation ---------------------------------------------------------

    def generate(self, plan: SequencePlan, raster: np.ndarray, max_new: int = 24,
                 decode_masks: bool = False) -> GenerateResult:
        """Greedy decoding; triggers regress a box which is re-encoded into
        the forced placeholder token that follows."""
        cfg, vocab = self.cfg, self.vocab
        if cfg.n_visual + len(plan.tokens) + 1 > cfg.max_seq_len:
            raise ContextOverflow(f"prompt of {len(plan.tokens)} tokens does not fit")
        tokens = list(plan.tokens)
        overrides: dict[int, np.ndarray] = {}
        result = GenerateResult([], [], [], [], [])
        with ad.no_grad():
            for pos, slot in plan.overrides.items():
                overrides[pos] = self.location_encoder(
                    plan.boxes[slot].reshape(1, 4).astype(np.float32)).data[0]
            visual = self.encode_image(np.asarray(raster, dtype=np.float32)[None])

            def hidden_for(tokens_now):
                work = SequencePlan(list(tokens_now), [False] * len(tokens_now))
                batch = collate([work], vocab, cfg)
                emb = ad.embedding_gather(self.params["tok.emb"], batch.tokens.reshape(-1))
                if overrides:
                    idx = np.fromiter(overrides.keys(), dtype=np.int64)
                    rows = Tensor(np.stack([overrides[i] for i in idx]))
                    emb = ad.scatter_rows(emb, idx, rows)
                emb = ad.reshape(emb, (1, len(tokens_now), cfg.d_model))
                pos = ad.slice_(self.params["tok.pos"],
                                (slice(cfg.n_visual, cfg.n_visual + len(tokens_now)),))
                x = ad.concat([visual, emb + pos], axis=1)
                mask = self._attn_mask(batch)
                for i in range(cfg.n_layers):
                    x = self._block(i, x, mask, 1, cfg.n_visual + len(tokens_now))
                return ad.layernorm(x) * self.params["ln_f.g"] + self.params["ln_f.b"]

            for _ in range(max_new):
                if cfg.n_visual + len(tokens) + 1 > cfg.max_seq_len:
                    break
                h = hidden_for(tokens)
                last = h.data[0, -1]
                logits = last @ self.params["lm_head.w"].data + self.params["lm_head.b"].data
                logits[vocab.loc_id] = -np.inf  # placeholders are forced, never sampled
                nxt = int(np.argmax(logits))
                tokens.append(nxt)
                result.tokens.append(nxt)
                if nxt == vocab.trigger_id:
                    h = hidden_for(tokens)
                    t_state = h.data[0, -1]
                    box_t = self.box_decoder(Tensor(t_state[None, :].astype(np.float32)))
                    box = BBox.from_array(box_t.data[0])
                    loc_emb = self.location_encoder(box_t).data[0]
                    overrides[len(tokens)] = loc_emb
                    tokens.append(vocab.loc_id)
                    result.tokens.append(vocab.loc_id)
                    result.boxes.append(box)
                    result.trigger_hidden.append(t_state.copy())
                    result.loc_embeddings.append(loc_emb.copy())
                elif nxt == vocab.eos_id:
                    break
            if decode_masks and result.trigger_hidden:
                M = len(result.trigger_hidden)
                t = Tensor(np.stack(result.trigger_hidden).astype(np.float32))
                feats = ad.concat([visual] * M, axis=0) if M > 1 else visual
                boxes = np.stack([b.as_array() for b in result.boxes])
                masks = self.decode_mask_from_hidden(t, feats, boxes)
                result.masks = [masks.data[i].copy() for i in range(M)]
        return result

    # -- persistence ----------------------------------------------------------

    def save(self, ckpt_dir, training_state: dict | None = None,
             opt_state: dict | None = None):
        save_checkpoint(ckpt_dir, self, training_state, opt_state)

    @staticmethod
    def load(ckpt_dir) -> "LocModel":
        model, _, _ = load_checkpoint(ckpt_dir)
        return model


# ---------------------------------------------------------------------------
# Checkpoint format: manifest.json + one raw little-endian fp32 bin per param
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt_dir, model: LocModel, training_state: dict | None = None,
                    opt_state: dict | None = None):
    out = Path(ckpt_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    manifest = {
        "scheme": model.cfg.scheme,
        "config": model.cfg.to_dict(),
        "params": [{"name": k, "shape": list(v.shape), "dtype": "float32"}
                   for k, v in model.params.items()],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    with open(out / "vocab.json", "w") as f:
        f.write(model.vocab.to_json())
    for name, t in model.params.items():
        with open(out / "params" / f"{name}.bin", "wb") as f:
            f.write(t.data.astype("<f4").tobytes())
    if training_state is not None:
        with open(out / "training_state.json", "w") as f:
            json.dump(training_state, f, sort_keys=True, indent=1)
    if opt_state is not None:
        (out / "opt").mkdir(exist_ok=True)
        for name, (m1, m2) in opt_state.items():
            with open(out / "opt" / f"{name}.m.bin", "wb") as f:
                f.write(m1.astype("<f4").tobytes())
            with open(out / "opt" / f"{name}.v.bin", "wb") as f:
                f.write(m2.astype("<f4").tobytes())


def load_checkpoint(ckpt_dir):
    """Returns (model, training_state | None, opt_state | None)."""
    root = Path(ckpt_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    cfg = ModelConfig.from_dict(manifest["config"])
    with open(root / "vocab.json") as f:
        vocab = Vocab.from_json(f.read())
    params = {}
    for spec in manifest["params"]:
        name, shape = spec["name"], tuple(spec["shape"])
        raw = np.frombuffer((root / "params" / f"{name}.bin").read_bytes(), dtype="<f4")
        params[name] = Tensor(raw.reshape(shape).copy(), requires_grad=True)
    model = LocModel(cfg, vocab, params)
    training_state = None
    if (root / "training_state.json").exists():
        with open(root / "training_state.json") as f:
            training_state = json.load(f)
    opt_state = None
    if (root / "opt").exists():
        opt_state = {}
        for spec in manifest["params"]:
            name, shape = spec["name"], tuple(spec["shape"])
            mf = root / "opt" / f"{name}.m.bin"
            if mf.exists():
                m1 = np.frombuffer(mf.read_bytes(), dtype="<f4").reshape(shape).copy()
                m2 = np.frombuffer((root / "opt" / f"{name}.v.bin").read_bytes(),
                                   dtype="<f4").reshape(shape).copy()
                opt_state[name] = (m1, m2)
    return model, training_state, opt_state


def param_hashes(params: dict[str, Tensor]) -> dict[str, str]:
    """SHA-256 of each parameter's raw little-endian fp32 bytes."""
    return {k: hashlib.sha256(v.data.astype("<f4").tobytes()).hexdigest()
            for k, v in params.items()}
