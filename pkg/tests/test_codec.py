import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinyloc.codec import (LocParseError, SCHEMES, UnsupportedScheme, Vocab,
                           build_vocab, make_codec, TRIGGER, LOC)
from tinyloc.geometry import BBox, sample_random_box

TABLE1 = {  # scheme -> (tokens per box, added vocab)
    "P4bin": (6, 224),
    "P2bin": (4, 1024),
    "Pnum": (25, 0),   # character tokenizer count; brackets and commas included
    "Pemb": (2, 2),
}


@pytest.mark.parametrize("scheme", SCHEMES)
def test_table1_accounting(scheme):
    c = make_codec(scheme)
    tob, added = TABLE1[scheme]
    assert c.tokens_per_box() == tob
    assert c.added_vocab() == added


@pytest.mark.parametrize("scheme", SCHEMES)
def test_vocab_has_trigger_and_loc_once(scheme):
    v = build_vocab(scheme)
    assert v.tokens.count(TRIGGER) == 1
    assert v.tokens.count(LOC) == 1


def test_vocab_location_token_counts():
    base = len(build_vocab("Pnum"))
    assert len(build_vocab("P4bin")) == base + 224
    assert len(build_vocab("P2bin")) == base + 1024
    assert len(build_vocab("Pemb")) == base


def test_p4bin_zero_maps_to_bin0():
    c = make_codec("P4bin")
    ids = c.encode_box(BBox(0.0, 0.0, 0.5, 0.5))
    assert c.vocab.token(ids[1]) == "<bin0>"
    assert c.vocab.token(ids[0]) == "[" and c.vocab.token(ids[-1]) == "]"


def test_p4bin_full_coordinate_clamps_to_last_bin():
    c = make_codec("P4bin")
    ids = c.encode_box(BBox(0.0, 0.0, 1.0, 1.0))
    assert c.vocab.token(ids[3]) == "<bin223>"


def test_p2bin_center_point_index():
    # (0.5, 0.5) -> bin (16, 16) -> 16*32 + 16 = 528
    c = make_codec("P2bin")
    ids = c.encode_box(BBox(0.5, 0.5, 0.9, 0.9))
    assert c.vocab.token(ids[1]) == "<pt528>"


def test_pnum_text_form():
    c = make_codec("Pnum")
    ids = c.encode_box(BBox(0.111, 0.111, 0.333, 0.333))
    assert "".join(c.vocab.decode(ids)) == "[0.111,0.111,0.333,0.333]"
    assert len(ids) == 25


def test_pemb_has_no_token_form():
    c = make_codec("Pemb")
    with pytest.raises(UnsupportedScheme):
        c.encode_box(BBox(0, 0, 1, 1))
    with pytest.raises(UnsupportedScheme):
        c.decode_box([0])


@pytest.mark.parametrize("scheme,bound", [("P4bin", 0.5 / 224), ("P2bin", 0.5 / 32), ("Pnum", 5e-4)])
def test_roundtrip_bounds_1000_boxes(scheme, bound):
    c = make_codec(scheme)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        b = sample_random_box(rng, min_side=0.02)
        d = c.decode_box(c.encode_box(b))
        worst = max(worst, float(np.abs(d.as_array() - b.as_array()).max()))
    assert worst <= bound + 1e-12


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["P4bin", "P2bin", "Pnum"]))
def test_decode_total_over_encode_image(seed, scheme):
    # encode -> decode never raises and lands within the half-bin bound
    c = make_codec(scheme)
    rng = np.random.default_rng(seed)
    b = sample_random_box(rng, min_side=0.01)
    d = c.decode_box(c.encode_box(b))
    assert isinstance(d, BBox)


def test_decode_malformed_sequences():
    c4 = make_codec("P4bin")
    ok = c4.encode_box(BBox(0.1, 0.1, 0.6, 0.6))
    with pytest.raises(LocParseError):
        c4.decode_box(ok[:-1])  # missing bracket
    with pytest.raises(LocParseError):
        c4.decode_box([ok[0], c4.vocab.id("the")] + ok[2:])  # word where bin expected
    cn = make_codec("Pnum")
    bad = [cn.vocab.id(ch) for ch in "[9.999,0.111,0.333,0.333]"]
    with pytest.raises(LocParseError):
        cn.decode_box(bad)  # out-of-range digit string


def test_extract_first_box_from_stream():
    c = make_codec("P4bin")
    box = BBox(0.2, 0.2, 0.8, 0.8)
    v = c.vocab
    stream = [v.id("it"), v.id("is"), v.id("at")] + c.encode_box(box) + [v.eos_id]
    d = c.extract_first_box(stream)
    assert np.abs(d.as_array() - box.as_array()).max() <= 0.5 / 224
    with pytest.raises(LocParseError):
        c.extract_first_box([v.id("it"), v.id("is")])


def test_vocab_json_roundtrip():
    v = build_vocab("P4bin")
    v2 = Vocab.from_json(v.to_json())
    assert v2.tokens == v.tokens
    assert v2.trigger_id == v.trigger_id
