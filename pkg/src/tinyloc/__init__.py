"""tinyloc: a desk-scale testbed for object-location modeling.

Compares an embedding-based scheme (a trigger token whose hidden state is
regressed to a box, plus a location encoder for box inputs) against three
token-based coordinate codecs, inside a tiny decoder-only multimodal
transformer trained on synthetic referring-expression scenes.
"""

from .geometry import BBox, MaskGrid
from .codec import LocCodec, Vocab, build_vocab, make_codec, SCHEMES
from .model import LocModel, ModelConfig

__all__ = [
    "BBox", "MaskGrid", "LocCodec", "Vocab", "build_vocab", "make_codec",
    "SCHEMES", "LocModel", "ModelConfig",
]

__version__ = "0.1.0"
