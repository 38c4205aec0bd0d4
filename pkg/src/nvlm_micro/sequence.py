"""Byte-level tokenizer, tile tags, chat template and interleaved sequences.

Template (ChatML style; ``[x]`` is a single special token)::

    [[<|im_start|>] "system\\n" SYSTEM [<|im_end|>] "\\n"]      (only if a system text is given)
    [<|im_start|>] "user\\n" IMAGE-REGION PROMPT [<|im_end|>] "\\n"
    [<|im_start|>] "assistant\\n" RESPONSE [<|im_end|>]

The loss mask is true exactly on the RESPONSE bytes.  IMAGE-REGION depends on
the architecture:

* D: for every block (row-major tiles, thumbnail last) its tag then its image slot.
* X: only the tags; the image tokens live on the cross-attention side.
* H: the global view's tag and image slot; regular tiles go to cross-attention.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Sequence, Union

from .tiler import TileLayout
from .vision import THUMBNAIL, ImageSlot

IMAGE = "<image>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
PAD = "<pad>"
TILE_GLOBAL = "<tile_global>"
BOX_OPEN = "<box>"
BOX_CLOSE = "</box>"
MAX_TAG_TILES = 6

_BOX_RE = re.compile(r"^<box>( \(\d+, \d+\), \(\d+, \d+\) )</box>$")


class TagScheme(str, enum.Enum):
    NO_TAG = "none"
    ONE_D = "1d"
    TWO_D_GRID = "2d-grid"
    TWO_D_BBOX = "2d-bbox"


class Tokenizer:
    """256 byte ids followed by special tokens; every tag is one special id
    except bounding boxes, which are ``<box>`` + coordinate bytes + ``</box>``."""

    def __init__(self, max_tiles: int = MAX_TAG_TILES):
        self.max_tiles = max_tiles
        specials = [IMAGE, IM_START, IM_END, PAD]
        specials += [f"<tile_{k}>" for k in range(1, max_tiles + 1)] + [TILE_GLOBAL]
        specials += [f"<tile_x{i}_y{j}>" for j in range(1, max_tiles + 1) for i in range(1, max_tiles + 1)]
        specials += [BOX_OPEN, BOX_CLOSE]
        self.special_to_id = {s: 256 + i for i, s in enumerate(specials)}
        self.id_to_special = {i: s for s, i in self.special_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.special_to_id)

    def __getitem__(self, special: str) -> int:
        return self.special_to_id[special]

    def encode(self, text: str) -> list[int]:
        """Plain UTF-8 bytes; special-token strings are not interpreted."""
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        out, buf = [], bytearray()
        for i in ids:
            if i < 256:
                buf.append(i)
                continue
            out.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            out.append(self.id_to_special[i])
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    def encode_tag(self, tag: str) -> list[int]:
        if not tag:
            return []
        if tag in self.special_to_id:
            return [self.special_to_id[tag]]
        m = _BOX_RE.match(tag)
        if m:
            return [self[BOX_OPEN]] + self.encode(m.group(1)) + [self[BOX_CLOSE]]
        raise ValueError(f"unknown tile tag {tag!r}")

    def is_special(self, i: int) -> bool:
        return i >= 256


def render_tags(lo: TileLayout, scheme: TagScheme | str, max_tiles: int = MAX_TAG_TILES) -> list[str]:
    """One tag per block: row-major tiles, then the thumbnail if present."""
    scheme = TagScheme(scheme)
    n = lo.n_tiles
    cols, rows = lo.ratio
    if scheme is TagScheme.NO_TAG:
        tags = [""] * n
    elif scheme is TagScheme.ONE_D:
        if n > max_tiles:
            raise ValueError(f"1-D tags cover at most {max_tiles} tiles, layout has {n}")
        tags = [f"<tile_{k + 1}>" for k in range(n)]
    elif scheme is TagScheme.TWO_D_GRID:
        if cols > max_tiles or rows > max_tiles:
            raise ValueError(f"2-D grid tags cover at most {max_tiles} per axis, layout is {cols}x{rows}")
        tags = ["<tile_x{}_y{}>".format(*lo.grid_position(k)) for k in range(n)]
    else:
        tags = [f"<box> ({l}, {t}), ({r}, {b}) </box>" for l, t, r, b in lo.tile_boxes]
    if lo.has_thumbnail:
        tags.append("" if scheme is TagScheme.NO_TAG else TILE_GLOBAL)
    return tags


Item = Union[int, ImageSlot]


@dataclass
class MultimodalSequence:
    """Interleaved text ids and image slots with a per-position loss mask.

    ``tag_spans`` holds one ``(start, stop)`` span of expanded positions per
    tag rendered into the decoder stream (empty spans for untagged blocks).
    """

    items: list[Item]
    loss_mask: list[bool]
    tag_spans: list[tuple[int, int]] = field(default_factory=list)
    arch: str = "D"

    @property
    def decoder_len(self) -> int:
        return sum(it.n_tokens if isinstance(it, ImageSlot) else 1 for it in self.items)

    @property
    def text_len(self) -> int:
        return sum(1 for it in self.items if not isinstance(it, ImageSlot))

    def expanded_ids(self, image_id: int) -> list[int]:
        out: list[int] = []
        for it in self.items:
            if isinstance(it, ImageSlot):
                out.extend([image_id] * it.n_tokens)
            else:
                out.append(it)
        return out

    def labels(self) -> list[str]:
        """Per expanded position: ``text``, ``tag`` or ``image:<source>``."""
        out: list[str] = []
        for it in self.items:
            if isinstance(it, ImageSlot):
                out.extend([f"image:{it.source}"] * it.n_tokens)
            else:
                out.append("text")
        for start, stop in self.tag_spans:
            for p in range(start, stop):
                out[p] = "tag"
        return out

    def image_positions(self) -> list[tuple[int, ImageSlot]]:
        pos, out = 0, []
        for it in self.items:
            if isinstance(it, ImageSlot):
                out.append((pos, it))
                pos += it.n_tokens
            else:
                pos += 1
        return out

    def to_record(self, **extra) -> dict:
        items = [
            {"image": it.source, "tokens": it.n_tokens} if isinstance(it, ImageSlot) else it
            for it in self.items
        ]
        rec = {
            "arch": self.arch,
            "decoder_len": self.decoder_len,
            "items": items,
            "loss_mask": "".join("1" if m else "0" for m in self.loss_mask),
            "tag_spans": [list(s) for s in self.tag_spans],
        }
        rec.update(extra)
        return rec

    def to_json(self, **extra) -> str:
        return json.dumps(self.to_record(**extra), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, rec: dict) -> MultimodalSequence:
        items = [ImageSlot(it["image"], it["tokens"]) if isinstance(it, dict) else it for it in rec["items"]]
        mask = [c == "1" for c in rec["loss_mask"]]
        return cls(items, mask, [tuple(s) for s in rec["tag_spans"]], rec.get("arch", "D"))


class _Builder:
    def __init__(self, tok: Tokenizer, arch: str):
        self.tok = tok
        self.items: list[Item] = []
        self.mask: list[bool] = []
        self.spans: list[tuple[int, int]] = []
        self.pos = 0
        self.arch = arch

    def ids(self, ids: Sequence[int], loss: bool = False) -> None:
        self.items.extend(ids)
        self.mask.extend([loss] * len(ids))
        self.pos += len(ids)

    def text(self, s: str, loss: bool = False) -> None:
        self.ids(self.tok.encode(s), loss)

    def special(self, s: str) -> None:
        self.ids([self.tok[s]])

    def tag(self, tag: str) -> tuple[int, int]:
        start = self.pos
        self.ids(self.tok.encode_tag(tag))
        span = (start, self.pos)
        self.spans.append(span)
        return span

    def slot(self, block) -> None:
        n = block.n_tokens
        self.items.append(ImageSlot(block.source, n))
        self.mask.extend([False] * n)
        self.pos += n

    def open_user(self, system: str | None) -> None:
        if system is not None:
            self.special(IM_START)
            self.text("system\n" + system)
            self.special(IM_END)
            self.text("\n")
        self.special(IM_START)
        self.text("user\n")

    def close(self, prompt: str, response: str) -> MultimodalSequence:
        self.text(prompt)
        self.special(IM_END)
        self.text("\n")
        self.special(IM_START)
        self.text("assistant\n")
        self.text(response, loss=True)
        self.special(IM_END)
        return MultimodalSequence(self.items, self.mask, self.spans, self.arch)


def _check_pairs(tags: Sequence[str], blocks: Sequence) -> None:
    if len(tags) != len(blocks):
        raise ValueError(f"{len(tags)} tags for {len(blocks)} image blocks")


def build_d_sequence(prompt: str, response: str, tags: Sequence[str], blocks: Sequence,
                     tok: Tokenizer, system: str | None = None) -> MultimodalSequence:
    """Decoder-only stream: every block's tag followed by its image slot.

    ``blocks`` are :class:`TokenBlock` or :class:`ImageSlot` values (anything
    with ``source`` and ``n_tokens``), ordered row-major with the thumbnail last.
    """
    _check_pairs(tags, blocks)
    b = _Builder(tok, "D")
    b.open_user(system)
    for tag, block in zip(tags, blocks):
        b.tag(tag)
        b.slot(block)
    return b.close(prompt, response)


def build_x_sequence(prompt: str, response: str, tags: Sequence[str], tok: Tokenizer,
                     system: str | None = None) -> tuple[MultimodalSequence, list[tuple[int, int]]]:
    """Cross-attention stream: tags only, no image slots in the decoder."""
    b = _Builder(tok, "X")
    b.open_user(system)
    for tag in tags:
        b.tag(tag)
    seq = b.close(prompt, response)
    return seq, list(seq.tag_spans)


@dataclass
class HybridRouting:
    decoder_block: object | None
    decoder_tag: str
    xattn_blocks: list
    xattn_tags: list[str]


def split_hybrid(tags: Sequence[str], blocks: Sequence) -> HybridRouting:
    """Global view to the decoder, regular tiles to cross-attention.

    The global view is the thumbnail, or the only tile of a one-tile layout.
    """
    _check_pairs(tags, blocks)
    if not blocks:
        return HybridRouting(None, "", [], [])
    thumbs = [i for i, blk in enumerate(blocks) if blk.source == THUMBNAIL]
    if not thumbs:
        if len(blocks) > 1:
            raise ValueError("hybrid routing needs a thumbnail when the image has several tiles")
        return HybridRouting(blocks[0], tags[0], [], [])
    g = thumbs[-1]
    rest = [i for i in range(len(blocks)) if i != g]
    return HybridRouting(blocks[g], tags[g], [blocks[i] for i in rest], [tags[i] for i in rest])


def build_h_sequence(prompt: str, response: str, tags: Sequence[str], blocks: Sequence,
                     tok: Tokenizer, system: str | None = None) -> tuple[MultimodalSequence, HybridRouting]:
    """Hybrid stream: one image slot (the global view) in the decoder."""
    routing = split_hybrid(tags, blocks)
    b = _Builder(tok, "H")
    b.open_user(system)
    if routing.decoder_block is not None:
        b.tag(routing.decoder_tag)
        b.slot(routing.decoder_block)
    return b.close(prompt, response), routing


def placeholder_blocks(lo: TileLayout | None, tokens_per_tile: int) -> list[ImageSlot]:
    """Image slots matching a layout, for building sequences without encoding."""
    if lo is None:
        return []
    slots = [ImageSlot(k, tokens_per_tile) for k in range(lo.n_tiles)]
    if lo.has_thumbnail:
        slots.append(ImageSlot(THUMBNAIL, tokens_per_tile))
    return slots
