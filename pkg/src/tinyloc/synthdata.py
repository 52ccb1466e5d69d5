"""Deterministic synthetic referring-expression scenes and tasks.

Scenes are 2-6 colored shapes on a unit canvas, rendered to a channelized
raster (one channel per color, fractional shape coverage per cell). Three
tasks are generated from them:

  grounding      - "find the red circle"            -> box (and mask) output
  region_caption - "describe <box> :"               -> text output
  region_vqa     - choose among four candidate boxes -> letter output

Every query is validated by a brute-force interpreter over the scene graph
so the referent is provably unique. Sample i is generated from seed ^ i, so
parallel generation is byte-identical to sequential.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox, box_iou

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
KINDS = ("circle", "square", "triangle")
SIZES = ("small", "large")
RELATIONS = ("left", "right", "above", "below")
TASKS = ("grounding", "region_caption", "region_vqa")

RESOLUTION = 64         # dataset raster and mask resolution
SUPERSAMPLE = 4         # subsamples per cell edge for shape coverage
MAX_PAIR_IOU = 0.1      # max box overlap between scene objects
SIZE_RANGES = {"small": (0.18, 0.3), "large": (0.34, 0.52)}


class UnsatisfiableScene(Exception):
    pass


@dataclass
class ShapeSpec:
    kind: str
    color: str
    size: str
    bbox: BBox

    def mask(self, res: int = RESOLUTION) -> np.ndarray:
        """Shape coverage per cell via subsampled point membership."""
        n = res * SUPERSAMPLE
        c = (np.arange(n) + 0.5) / n
        xs, ys = np.meshgrid(c, c)
        b = self.bbox
        if self.kind == "square":
            inside = (xs >= b.x0) & (xs <= b.x1) & (ys >= b.y0) & (ys <= b.y1)
        elif self.kind == "circle":
            cx, cy = b.center
            r = min(b.width, b.height) / 2
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:  # triangle: apex top-center, base along the bottom edge
            ax, ay = (b.x0 + b.x1) / 2, b.y0
            inside = (ys <= b.y1) & (ys >= b.y0)
            # left edge (apex -> bottom-left) and right edge (apex -> bottom-right)
            t = np.clip((ys - ay) / max(b.height, 1e-9), 0.0, 1.0)
            inside &= (xs >= ax - t * (ax - b.x0)) & (xs <= ax + t * (b.x1 - ax))
        m = inside.reshape(res, SUPERSAMPLE, res, SUPERSAMPLE).mean(axis=(1, 3))
        return m.astype(np.float32)


@dataclass
class Scene:
    scene_id: int
    objects: list[ShapeSpec]

    def render(self, res: int = RESOLUTION) -> np.ndarray:
        """Channelized raster (n_colors, res, res) of per-color coverage."""
        raster = np.zeros((len(COLORS), res, res), dtype=np.float32)
        for obj in self.objects:
            raster[COLORS.index(obj.color)] += obj.mask(res)
        return np.clip(raster, 0.0, 1.0)

    def masks(self, res: int = RESOLUTION) -> np.ndarray:
        return np.stack([obj.mask(res) for obj in self.objects])


@dataclass
class Sample:
    sample_id: int
    task: str
    scene_id: int
    prompt_tokens: list[str]        # words, with "{box:i}" placeholders
    target_tokens: list[str]
    boxes: list[list[float]]        # slot i of "{box:i}"
    mask_refs: list[int] = field(default_factory=list)  # object index per target box
    candidates: list[list[float]] | None = None
    answer_idx: int | None = None

    def to_json(self) -> str:
        d = {
            "id": self.sample_id,
            "task": self.task,
            "scene_id": self.scene_id,
            "prompt_tokens": self.prompt_tokens,
            "target_tokens": self.target_tokens,
            "boxes": self.boxes,
            "mask_refs": self.mask_refs,
        }
        if self.candidates is not None:
            d["candidates"] = self.candidates
            d["answer_idx"] = self.answer_idx
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "Sample":
        d = json.loads(line)
        return Sample(d["id"], d["task"], d["scene_id"], d["prompt_tokens"],
                      d["target_tokens"], d["boxes"], d.get("mask_refs", []),
                      d.get("candidates"), d.get("answer_idx"))


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _place_box(rng: np.random.Generator, size: str, square: bool, existing) -> BBox | None:
    lo, hi = SIZE_RANGES[size]
    for _ in range(40):
        w = rng.uniform(lo, hi)
        h = w if square else rng.uniform(lo, hi)
        x0 = rng.uniform(0.01, 0.99 - w)
        y0 = rng.uniform(0.01, 0.99 - h)
        b = BBox(x0, y0, x0 + w, y0 + h)
        if all(box_iou(b, e.bbox) <= MAX_PAIR_IOU for e in existing):
            return b
    return None


def make_scene(scene_id: int, rng: np.random.Generator) -> Scene:
    """2-6 objects with distinct (color, kind) pairs and low box overlap."""
    for _ in range(50):
        n = int(rng.integers(2, 7))
        combos = [(c, k) for c in COLORS for k in KINDS]
        picks = rng.permutation(len(combos))[:n]
        objects: list[ShapeSpec] = []
        ok = True
        for p in picks:
            color, kind = combos[p]
            size = SIZES[int(rng.integers(0, 2))]
            b = _place_box(rng, size, square=(kind == "circle"), existing=objects)
            if b is None:
                ok = False
                break
            objects.append(ShapeSpec(kind, color, size, b))
        if ok:
            return Scene(scene_id, objects)
    raise UnsatisfiableScene(f"could not place objects for scene {scene_id}")


# ---------------------------------------------------------------------------
# Query grammar and its brute-force interpreter
# ---------------------------------------------------------------------------


def interpret_query(tokens: list[str], scene: Scene) -> list[int]:
    """Indices of the scene objects a query denotes (brute force)."""
    toks = list(tokens)
    if len(toks) == 3 and toks[0] == "the" and toks[1] in COLORS:
        return [i for i, o in enumerate(scene.objects)
                if o.color == toks[1] and o.kind == toks[2]]
    if len(toks) == 3 and toks[:2] == ["the", "largest"]:
        cands = [(o.bbox.area, i) for i, o in enumerate(scene.objects) if o.kind == toks[2]]
        if not cands:
            return []
        return [max(cands)[1]]
    if len(toks) == 7 and toks[0] == "the" and toks[2] in RELATIONS and toks[3] == "of":
        kind1, rel = toks[1], toks[2]
        anchors = interpret_query(toks[4:], scene)
        if len(anchors) != 1:
            return []
        ax, ay = scene.objects[anchors[0]].bbox.center
        out = []
        for i, o in enumerate(scene.objects):
            if o.kind != kind1 or i == anchors[0]:
                continue
            cx, cy = o.bbox.center
            hit = {"left": cx < ax, "right": cx > ax, "above": cy < ay, "below": cy > ay}[rel]
            if hit:
                out.append(i)
        return out
    raise ValueError(f"unparseable query {toks}")


def _candidate_queries(scene: Scene) -> dict[str, list[tuple[list[str], int]]]:
    """Grammar queries with a provably unique referent, grouped by template."""
    out: dict[str, list] = {"attribute": [], "largest": [], "relation": []}
    for i, o in enumerate(scene.objects):
        q = ["the", o.color, o.kind]
        if interpret_query(q, scene) == [i]:
            out["attribute"].append((q, i))
    for kind in KINDS:
        q = ["the", "largest", kind]
        ref = interpret_query(q, scene)
        if len(ref) == 1 and sum(o.kind == kind for o in scene.objects) >= 2:
            out["largest"].append((q, ref[0]))
    for anchor in scene.objects:
        for rel in RELATIONS:
            for kind1 in KINDS:
                q = ["the", kind1, rel, "of", "the", anchor.color, anchor.kind]
                try:
                    ref = interpret_query(q, scene)
                except ValueError:
                    continue
                if len(ref) == 1:
                    out["relation"].append((q, ref[0]))
    return out


# relation queries dominate the raw candidate count combinatorially, so the
# template mixture is sampled by weight instead of uniformly over candidates
QUERY_TEMPLATE_WEIGHTS = {"attribute": 0.6, "largest": 0.2, "relation": 0.2}


def _pick_query(scene: Scene, rng: np.random.Generator,
                weights: dict[str, float] | None = None) -> tuple[list[str], int]:
    groups = _candidate_queries(scene)
    w = weights or QUERY_TEMPLATE_WEIGHTS
    kinds = [k for k in w if w[k] > 0 and groups[k]]
    probs = np.array([w[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    cands = groups[kind]
    return cands[int(rng.integers(0, len(cands)))]


# ---------------------------------------------------------------------------
# Task builders
# ---------------------------------------------------------------------------


def make_grounding(scene: Scene, sample_id: int, rng: np.random.Generator,
                   query_weights=None) -> Sample:
    query, ref = _pick_query(scene, rng, query_weights)
    obj = scene.objects[ref]
    return Sample(
        sample_id, "grounding", scene.scene_id,
        prompt_tokens=["<bos>", "find"] + query,
        target_tokens=["it", "is", "at", "{box:0}", "<eos>"],
        boxes=[list(obj.bbox.as_array())],
        mask_refs=[ref],
    )


def make_region_caption(scene: Scene, sample_id: int, rng: np.random.Generator) -> Sample:
    ref = int(rng.integers(0, len(scene.objects)))
    obj = scene.objects[ref]
    return Sample(
        sample_id, "region_caption", scene.scene_id,
        prompt_tokens=["<bos>", "describe", "{box:0}", ":"],
        target_tokens=["the", obj.color, obj.kind, "<eos>"],
        boxes=[list(obj.bbox.as_array())],
        mask_refs=[ref],
    )


def _random_distractor(rng: np.random.Generator, gt: BBox) -> BBox:
    """Random box with IoU < 0.5 against the ground truth."""
    while True:
        w, h = rng.uniform(0.1, 0.4, 2)
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        b = BBox(x0, y0, x0 + w, y0 + h)
        if box_iou(b, gt) < 0.5:
            return b


def make_region_vqa(scene: Scene, sample_id: int, rng: np.random.Generator,
                    query_weights=None) -> Sample:
    """Four candidate boxes, exactly one correct; answer position uniform."""
    if len(scene.objects) < 2:
        raise ValueError("region_vqa needs at least two objects")
    query, ref = _pick_query(scene, rng, query_weights)
    gt = scene.objects[ref].bbox
    distractors = [o.bbox for i, o in enumerate(scene.objects)
                   if i != ref and box_iou(o.bbox, gt) < 0.5]
    order = rng.permutation(len(distractors))
    distractors = [distractors[i] for i in order[:3]]
    while len(distractors) < 3:
        distractors.append(_random_distractor(rng, gt))
    answer = int(rng.integers(0, 4))
    candidates = distractors[:answer] + [gt] + distractors[answer:]
    prompt = ["<bos>", "which", "box", "has"] + query + ["?"]
    for letter, i in zip("ABCD", range(4)):
        prompt += [letter, f"{{box:{i}}}"]
    return Sample(
        sample_id, "region_vqa", scene.scene_id,
        prompt_tokens=prompt,
        target_tokens=["ABCD"[answer], "<eos>"],
        boxes=[list(c.as_array()) for c in candidates],
        mask_refs=[ref],
        candidates=[list(c.as_array()) for c in candidates],
        answer_idx=answer,
    )


# ---------------------------------------------------------------------------
# Dataset generation and IO
# ---------------------------------------------------------------------------


def generate_sample(seed: int, index: int, mix: tuple[float, float, float],
                    query_weights=None) -> tuple[Sample, Scene]:
    """Sample `index` of the dataset seeded by `seed` (stateless per sample)."""
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(index))
    scene = make_scene(index, rng)
    r = rng.random()
    if r < mix[0]:
        sample = make_grounding(scene, index, rng, query_weights)
    elif r < mix[0] + mix[1]:
        sample = make_region_caption(scene, index, rng)
    else:
        sample = make_region_vqa(scene, index, rng, query_weights)
    return sample, scene


def generate_dataset(seed: int, n: int, mix=(1.0, 0.0, 0.0),
                     query_weights=None) -> tuple[list[Sample], list[Scene]]:
    if n <= 0:
        raise ValueError("n must be positive")
    mix = tuple(float(m) for m in mix)
    if abs(sum(mix) - 1.0) > 1e-9:
        raise ValueError(f"task mix must sum to 1, got {mix}")
    samples, scenes = [], []
    for i in range(n):
        sample, scene = generate_sample(seed, i, mix, query_weights)
        samples.append(sample)
        scenes.append(scene)
    return samples, scenes


def write_dataset(out_dir, samples, scenes, split_fracs=(0.8, 0.1, 0.1), meta=None):
    """Write split JSONLs, the scene graph, and per-scene raster sidecars."""
    out = Path(out_dir)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    n = len(samples)
    n_train = int(n * split_fracs[0])
    n_val = int(n * split_fracs[1])
    splits = {
        "train": samples[:n_train],
        "val": samples[n_train : n_train + n_val],
        "test": samples[n_train + n_val :],
    }
    for name, rows in splits.items():
        with open(out / f"{name}.jsonl", "w") as f:
            for s in rows:
                f.write(s.to_json() + "\n")
    with open(out / "scenes.jsonl", "w") as f:
        for sc in scenes:
            d = {"id": sc.scene_id,
                 "objects": [{"kind": o.kind, "color": o.color, "size": o.size,
                              "bbox": list(o.bbox.as_array())} for o in sc.objects]}
            f.write(json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n")
    for sc in scenes:
        np.save(out / "rasters" / f"{sc.scene_id}.npy", sc.render())
        np.save(out / "masks" / f"{sc.scene_id}.npy", sc.masks())
    info = {"n": n, "splits": {k: len(v) for k, v in splits.items()},
            "resolution": RESOLUTION, "colors": list(COLORS)}
    if meta:
        info.update(meta)
    with open(out / "meta.json", "w") as f:
        json.dump(info, f, sort_keys=True, indent=1)


class Dataset:
    """Loader for a written dataset directory with lazy raster access."""

    def __init__(self, root, split: str = "train"):
        self.root = Path(root)
        path = self.root / f"{split}.jsonl"
        with open(path) as f:
            self.samples = [Sample.from_json(line) for line in f if line.strip()]
        self.scenes: dict[int, Scene] = {}
        with open(self.root / "scenes.jsonl") as f:
            for line in f:
                d = json.loads(line)
                objs = [ShapeSpec(o["kind"], o["color"], o["size"], BBox.from_array(o["bbox"]))
                        for o in d["objects"]]
                self.scenes[d["id"]] = Scene(d["id"], objs)
        self._raster_cache: dict[int, np.ndarray] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.samples)

    def raster(self, scene_id: int) -> np.ndarray:
        if scene_id not in self._raster_cache:
            self._raster_cache[scene_id] = np.load(self.root / "rasters" / f"{scene_id}.npy")
        return self._raster_cache[scene_id]

    def masks(self, scene_id: int) -> np.ndarray:
        if scene_id not in self._mask_cache:
            self._mask_cache[scene_id] = np.load(self.root / "masks" / f"{scene_id}.npy")
        return self._mask_cache[scene_id]

    def gt_mask(self, sample: Sample) -> np.ndarray:
        return self.masks(sample.scene_id)[sample.mask_refs[0]]
