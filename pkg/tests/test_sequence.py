import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvlm_micro.sequence import (
    IMAGE,
    MultimodalSequence,
    TagScheme,
    Tokenizer,
    build_d_sequence,
    build_h_sequence,
    build_x_sequence,
    placeholder_blocks,
    render_tags,
    split_hybrid,
)
from nvlm_micro.tiler import DEFAULT_RATIOS, RatioSet, layout_for_size
from nvlm_micro.vision import THUMBNAIL, ImageSlot

from golden_cases import CASES, GOLDEN_DIR, build, render_case

TOK = Tokenizer()


def six_tile(scheme="1d", T=256):
    lo = layout_for_size(6 * 448, 448)
    return render_tags(lo, scheme), placeholder_blocks(lo, T)


def prompt_for(text_len: int, arch: str, tags) -> str:
    """A prompt padding the whole non-image stream to exactly ``text_len`` positions."""
    probe = {"D": lambda p: build_d_sequence(p, "ok", tags, [ImageSlot(0, 1)] * len(tags), TOK),
             "X": lambda p: build_x_sequence(p, "ok", tags, TOK)[0]}[arch]
    overhead = probe("").text_len
    return "x" * (text_len - overhead)


# -- tokenizer ------------------------------------------------------------------

def test_vocab_layout():
    assert TOK.vocab_size == 256 + 4 + 7 + 36 + 2
    assert TOK[IMAGE] == 256
    ids = [TOK[f"<tile_x{i}_y{j}>"] for i in range(1, 7) for j in range(1, 7)]
    assert len(set(ids)) == 36


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_tokenizer_round_trip(s):
    assert TOK.decode(TOK.encode(s)) == s


def test_box_tags_are_multi_token():
    ids = TOK.encode_tag("<box> (0, 0), (448, 448) </box>")
    assert ids[0] == TOK["<box>"] and ids[-1] == TOK["</box>"]
    assert TOK.decode(ids) == "<box> (0, 0), (448, 448) </box>"
    with pytest.raises(ValueError):
        TOK.encode_tag("<tile_99>")


# -- tags -----------------------------------------------------------------------

def test_tags_examples():
    lo = layout_for_size(896, 448, tile_size=448)
    assert render_tags(lo, "1d") == ["<tile_1>", "<tile_2>", "<tile_global>"]
    assert render_tags(lo, "2d-grid") == ["<tile_x1_y1>", "<tile_x2_y1>", "<tile_global>"]
    assert render_tags(lo, "none") == ["", "", ""]
    one = layout_for_size(448, 448, tile_size=448)
    assert render_tags(one, "2d-bbox") == ["<box> (0, 0), (448, 448) </box>"]


def test_grid_tags_row_major():
    lo = layout_for_size(2 * 448, 3 * 448, tile_size=448)
    assert lo.ratio == (2, 3)
    assert render_tags(lo, "2d-grid")[:4] == ["<tile_x1_y1>", "<tile_x2_y1>", "<tile_x1_y2>", "<tile_x2_y2>"]


def test_one_d_capacity():
    lo = layout_for_size(896, 672, RatioSet.up_to(12), tile_size=224)
    with pytest.raises(ValueError):
        render_tags(lo, "1d")
    assert len(render_tags(lo, "2d-bbox")) == 13


@pytest.mark.parametrize("scheme", ["1d", "2d-grid", "2d-bbox"])
def test_tags_injective(scheme):
    for c, r in DEFAULT_RATIOS.ratios:
        tags = render_tags(layout_for_size(c * 448, r * 448, RatioSet(((c, r),), 6), 448), scheme)
        assert len(set(tags)) == len(tags)


# -- builders -------------------------------------------------------------------

def test_decoder_lengths_at_table_scale():
    tags, blocks = six_tile()
    d = build_d_sequence(prompt_for(1024, "D", tags), "ok", tags, blocks, TOK)
    assert d.text_len == 1024 and d.decoder_len == 2816
    x, _ = build_x_sequence(prompt_for(1024, "X", tags), "ok", tags, TOK)
    assert x.decoder_len == 1024
    p = prompt_for(1024, "X", [tags[-1]])
    h, routing = build_h_sequence(p, "ok", tags, blocks, TOK)
    assert h.decoder_len == 1280
    assert len(routing.xattn_blocks) == 6 and routing.decoder_block.source == THUMBNAIL
    assert sum(isinstance(it, ImageSlot) for it in h.items) == 1
    text, _ = build_x_sequence(prompt_for(1024, "X", []), "ok", [], TOK)
    assert build_h_sequence(prompt_for(1024, "X", []), "ok", [], [], TOK)[0].decoder_len == 1024
    assert text.decoder_len == 1024


def test_text_only_identical_across_archs():
    d = build_d_sequence("hi", "yo", [], [], TOK)
    x, spans = build_x_sequence("hi", "yo", [], TOK)
    h, _ = build_h_sequence("hi", "yo", [], [], TOK)
    assert d.items == x.items == h.items and spans == []
    assert d.decoder_len == d.text_len


def test_template_layout():
    seq = build_d_sequence("Q?", "A.", ["<tile_1>"], [ImageSlot(0, 2)], TOK, system="S")
    ids = seq.expanded_ids(TOK[IMAGE])
    assert TOK.decode(ids) == (
        "<|im_start|>system\nS<|im_end|>\n<|im_start|>user\n<tile_1><image><image>Q?<|im_end|>\n"
        "<|im_start|>assistant\nA.<|im_end|>"
    )
    masked = [i for i, m in zip(ids, seq.loss_mask) if m]
    assert TOK.decode(masked) == "A."


@pytest.mark.parametrize("scheme", ["none", "1d", "2d-grid", "2d-bbox"])
@pytest.mark.parametrize("arch", ["D", "X", "H"])
def test_mask_excludes_images_and_tags(arch, scheme):
    lo = layout_for_size(3 * 448, 2 * 448)
    tags, blocks = render_tags(lo, scheme), placeholder_blocks(lo, 16)
    if arch == "D":
        seq = build_d_sequence("p", "resp", tags, blocks, TOK)
    elif arch == "X":
        seq = build_x_sequence("p", "resp", tags, TOK)[0]
    else:
        seq = build_h_sequence("p", "resp", tags, blocks, TOK)[0]
    labels = seq.labels()
    assert len(labels) == len(seq.loss_mask) == seq.decoder_len
    for lab, m in zip(labels, seq.loss_mask):
        if lab != "text":
            assert not m
    assert sum(seq.loss_mask) == 4


def test_no_tag_equals_stripped_one_d():
    lo = layout_for_size(896, 448)
    blocks = placeholder_blocks(lo, 8)
    tagged = build_d_sequence("p", "r", render_tags(lo, "1d"), blocks, TOK)
    bare = build_d_sequence("p", "r", render_tags(lo, "none"), blocks, TOK)
    stripped = [it for it, lab in zip(tagged.items, _item_labels(tagged)) if lab != "tag"]
    assert bare.items == stripped


def _item_labels(seq):
    pos, out = 0, []
    in_tag = {p for s, e in seq.tag_spans for p in range(s, e)}
    for it in seq.items:
        out.append("tag" if not isinstance(it, ImageSlot) and pos in in_tag else "other")
        pos += it.n_tokens if isinstance(it, ImageSlot) else 1
    return out


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=30), st.text(min_size=1, max_size=30), st.sampled_from(DEFAULT_RATIOS.ratios),
       st.sampled_from(["1d", "2d-grid", "2d-bbox"]))
def test_x_tag_spans_disjoint_ordered(prompt, response, ratio, scheme):
    c, r = ratio
    lo = layout_for_size(c * 100, r * 100, RatioSet((ratio,), 6), 32)
    seq, spans = build_x_sequence(prompt, response, render_tags(lo, scheme), TOK)
    assert len(spans) == lo.n_blocks
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a0 < a1 <= b0 < b1
    ids = seq.expanded_ids(TOK[IMAGE])
    text = TOK.decode(ids)
    assert prompt in text and response in text


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 6), st.integers(1, 64), st.integers(0, 50))
def test_length_ordering(tiles, T, n_text):
    blocks = [ImageSlot(k, T) for k in range(tiles)]
    tags = [f"<tile_{k + 1}>" for k in range(tiles)]
    if tiles > 1:
        blocks.append(ImageSlot(THUMBNAIL, T))
        tags.append("<tile_global>")
    p = "x" * n_text
    d = build_d_sequence(p, "r", tags, blocks, TOK).decoder_len
    h = build_h_sequence(p, "r", tags, blocks, TOK)[0].decoder_len
    x = build_x_sequence(p, "r", tags, TOK)[0].decoder_len
    # X keeps every tag in the decoder, H keeps one tag plus one block
    assert h - x == (T - tiles if tiles > 1 else T if tiles else 0)
    assert d - h == (T + 1) * tiles if tiles > 1 else d == h
    if T > tiles:
        assert d >= h >= x
        assert (h > x) == (tiles > 0)
        assert (d > h) == (tiles > 1)


def test_builder_errors():
    with pytest.raises(ValueError):
        build_d_sequence("p", "r", ["<tile_1>"], [], TOK)
    with pytest.raises(ValueError):
        split_hybrid(["<tile_1>", "<tile_2>"], [ImageSlot(0, 4), ImageSlot(1, 4)])


def test_single_tile_hybrid_goes_to_decoder():
    routing = split_hybrid(["<tile_1>"], [ImageSlot(0, 4)])
    assert routing.decoder_block == ImageSlot(0, 4) and routing.xattn_blocks == []


def test_record_round_trip():
    seq = build("H", CASES["wide_1d"])
    rec = json.loads(seq.to_json())
    back = MultimodalSequence.from_record(rec)
    assert back == seq


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden_files(name):
    assert render_case(name) == (GOLDEN_DIR / f"{name}.jsonl").read_text()


def test_golden_content_by_hand():
    # independent reading of one golden record
    rec = json.loads((GOLDEN_DIR / "wide_1d.jsonl").read_text().splitlines()[0])
    assert rec["arch"] == "D"
    slots = [it for it in rec["items"] if isinstance(it, dict)]
    assert slots == [{"image": 0, "tokens": 256}, {"image": 1, "tokens": 256}, {"image": "thumbnail", "tokens": 256}]
    n_text = len(rec["items"]) - 3
    assert rec["decoder_len"] == n_text + 768
    assert rec["loss_mask"].count("1") == len("A.cat") + 1  # "A cat."
    assert rec["loss_mask"].rstrip("0").endswith("111111")
