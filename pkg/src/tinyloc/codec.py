"""The four location-modeling schemes as interchangeable box <-> token codecs.

P4bin  - one token per coordinate over 224 bins, bracketed (6 tokens/box)
P2bin  - one token per corner point over a 32x32 grid, bracketed (4 tokens/box)
Pnum   - character tokens of "[%.3f,%.3f,%.3f,%.3f]" (25 tokens/box)
Pemb   - continuous: a trigger/placeholder token pair, boxes never tokenized

Every scheme shares the same base vocabulary; schemes add their own location
tokens on top.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .geometry import BBox

SCHEMES = ("P4bin", "P2bin", "Pnum", "Pemb")

PAD, BOS, EOS, TRIGGER, LOC, IMG = "<pad>", "<bos>", "<eos>", "<trigger>", "<loc>", "<img>"
SPECIALS = (PAD, BOS, EOS, TRIGGER, LOC, IMG)

# closed template-language vocabulary for the synthetic tasks
WORDS = (
    "red", "green", "blue", "yellow", "purple", "orange",
    "circle", "square", "triangle",
    "small", "large",
    "left", "right", "above", "below", "of",
    "the", "largest", "find", "describe", "which", "box", "has", "is", "at", "it",
    "A", "B", "C", "D",
)
DIGITS = tuple(str(d) for d in range(10))
PUNCT = ("[", "]", ",", ".", "?", ":")
BASE_TOKENS = SPECIALS + WORDS + DIGITS + PUNCT


class UnsupportedScheme(Exception):
    pass


class LocParseError(Exception):
    pass


class Vocab:
    """Token list with id <-> string maps; ids are positions in the list."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self._ids

    def id(self, tok: str) -> int:
        return self._ids[tok]

    def token(self, tid: int) -> str:
        return self.tokens[tid]

    def encode(self, toks) -> list[int]:
        return [self._ids[t] for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def bos_id(self):
        return self._ids[BOS]

    @property
    def eos_id(self):
        return self._ids[EOS]

    @property
    def trigger_id(self):
        return self._ids[TRIGGER]

    @property
    def loc_id(self):
        return self._ids[LOC]

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @staticmethod
    def from_json(s: str) -> "Vocab":
        return Vocab(json.loads(s))


def build_vocab(scheme: str) -> Vocab:
    if scheme not in SCHEMES:
        raise UnsupportedScheme(f"unknown scheme {scheme!r}")
    tokens = list(BASE_TOKENS)
    if scheme == "P4bin":
        tokens += [f"<bin{i}>" for i in range(224)]
    elif scheme == "P2bin":
        tokens += [f"<pt{i}>" for i in range(1024)]
    return Vocab(tokens)


_NUM_RE = re.compile(r"^\[(\d\.\d{3}),(\d\.\d{3}),(\d\.\d{3}),(\d\.\d{3})\]$")


@dataclass(frozen=True)
class LocCodec:
    """One location-modeling scheme bound to its vocabulary."""

    scheme: str
    vocab: Vocab

    @property
    def bins_per_axis(self) -> int:
        if self.scheme == "P4bin":
            return 224
        if self.scheme == "P2bin":
            return 32
        raise UnsupportedScheme(f"{self.scheme} has no per-axis bins")

    def added_vocab(self) -> int:
        """New tokens this scheme adds to a text-only vocabulary."""
        return {"P4bin": 224, "P2bin": 1024, "Pnum": 0, "Pemb": 2}[self.scheme]

    def tokens_per_box(self) -> int:
        if self.scheme == "P4bin":
            return 6
        if self.scheme == "P2bin":
            return 4
        if self.scheme == "Pnum":
            # character-level "[0.000,0.000,0.000,0.000]"; the brackets and
            # commas count
            return 25
        return 2  # Pemb: trigger + placeholder

    def _bin(self, v: float, n: int) -> int:
        return min(max(int(v * n), 0), n - 1)

    def encode_box(self, b: BBox) -> list[int]:
        """Tokenize one box. Pemb is continuous and has no token form."""
        v = self.vocab
        if self.scheme == "P4bin":
            ids = [self._bin(c, 224) for c in (b.x0, b.y0, b.x1, b.y1)]
            return [v.id("[")] + [v.id(f"<bin{i}>") for i in ids] + [v.id("]")]
        if self.scheme == "P2bin":
            pts = []
            for x, y in ((b.x0, b.y0), (b.x1, b.y1)):
                row, col = self._bin(y, 32), self._bin(x, 32)
                pts.append(row * 32 + col)
            return [v.id("[")] + [v.id(f"<pt{p}>") for p in pts] + [v.id("]")]
        if self.scheme == "Pnum":
            text = "[%.3f,%.3f,%.3f,%.3f]" % (b.x0, b.y0, b.x1, b.y1)
            return [v.id(ch) for ch in text]
        raise UnsupportedScheme("Pemb boxes are continuous embeddings, not tokens")

    def decode_box(self, token_ids) -> BBox:
        """Parse one complete box token sequence back into a BBox."""
        v = self.vocab
        toks = [v.token(t) for t in token_ids]
        if self.scheme == "P4bin":
            if len(toks) != 6 or toks[0] != "[" or toks[-1] != "]":
                raise LocParseError(f"expected [ b b b b ], got {toks}")
            vals = []
            for t in toks[1:5]:
                m = re.fullmatch(r"<bin(\d+)>", t)
                if not m:
                    raise LocParseError(f"not a bin token: {t}")
                vals.append((int(m.group(1)) + 0.5) / 224)
            return BBox.from_unordered(vals[0], vals[1], vals[2], vals[3])
        if self.scheme == "P2bin":
            if len(toks) != 4 or toks[0] != "[" or toks[-1] != "]":
                raise LocParseError(f"expected [ p p ], got {toks}")
            pts = []
            for t in toks[1:3]:
                m = re.fullmatch(r"<pt(\d+)>", t)
                if not m:
                    raise LocParseError(f"not a point token: {t}")
                p = int(m.group(1))
                row, col = divmod(p, 32)
                pts.append(((col + 0.5) / 32, (row + 0.5) / 32))
            return BBox.from_unordered(pts[0][0], pts[0][1], pts[1][0], pts[1][1])
        if self.scheme == "Pnum":
            text = "".join(toks)
            m = _NUM_RE.match(text)
            if not m:
                raise LocParseError(f"malformed numeric box text {text!r}")
            vals = [float(g) for g in m.groups()]
            if any(x > 1.0 for x in vals):
                raise LocParseError(f"coordinate out of range in {text!r}")
            return BBox.from_unordered(vals[0], vals[1], vals[2], vals[3])
        raise UnsupportedScheme("Pemb boxes are decoded by regression, not parsing")

    def extract_first_box(self, token_ids) -> BBox:
        """Decode the first syntactically complete box in a token stream."""
        v = self.vocab
        lb = v.id("[")
        try:
            start = list(token_ids).index(lb)
        except ValueError:
            raise LocParseError("no '[' in generated stream") from None
        if self.scheme in ("P4bin", "P2bin"):
            n = self.tokens_per_box()
            chunk = list(token_ids)[start : start + n]
            if len(chunk) < n:
                raise LocParseError("stream ends before box is complete")
            return self.decode_box(chunk)
        if self.scheme == "Pnum":
            rb = v.id("]")
            rest = list(token_ids)[start:]
            try:
                end = rest.index(rb)
            except ValueError:
                raise LocParseError("no closing ']' in generated stream") from None
            return self.decode_box(rest[: end + 1])
        raise UnsupportedScheme("Pemb has no token boxes to extract")


def make_codec(scheme: str) -> LocCodec:
    return LocCodec(scheme, build_vocab(scheme))
