"""The three architectures wired end to end: D (decoder-only), X (gated
cross-attention) and H (hybrid)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .autodiff import Tensor
from .config import Config, default_seed
from .sequence import (
    IM_END,
    IMAGE,
    HybridRouting,
    MultimodalSequence,
    TagScheme,
    Tokenizer,
    build_d_sequence,
    build_h_sequence,
    build_x_sequence,
    render_tags,
)
from .tiler import Image, RatioSet, TileLayout, blocks_in_order, cut, layout
from .vision import THUMBNAIL, TokenBlock, VisionEncoder, init_projector_d, init_projector_x, project_d, project_x

ARCHS = ("D", "X", "H")

# independent RNG streams so that models of different archs built from one
# seed share every parameter they have in common
_STREAM_BACKBONE, _STREAM_PROJ_D, _STREAM_PROJ_X, _STREAM_XATTN = 1, 2, 3, 4


@dataclass
class TrainingExample:
    prompt: str
    response: str
    image: Image | None = None

    def __post_init__(self):
        if not self.response:
            raise ValueError("training example needs a nonempty response")


@dataclass
class EncodedImage:
    layout: TileLayout
    tags: list[str]
    blocks: list[TokenBlock]


@dataclass
class Prepared:
    """Everything the decoder needs for one example, before projection."""

    seq: MultimodalSequence
    decoder_blocks: list[TokenBlock]
    xattn_blocks: list[TokenBlock] = field(default_factory=list)
    xattn_tags: list[str] = field(default_factory=list)
    tag_spans: list[tuple[int, int]] = field(default_factory=list)


def param_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


class NVLMModel:
    """One model instance: parameter store, frozen set and forward pass."""

    def __init__(self, arch: str = "X", config: Config | None = None, seed: int | None = None,
                 tag_scheme: str | TagScheme | None = None):
        if arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {arch!r}")
        self.arch = arch
        self.config = config or Config()
        self.seed = default_seed() if seed is None else seed
        cfg = self.config.arch
        self.tag_scheme = TagScheme(tag_scheme or cfg.tag_scheme)
        self.tokenizer = Tokenizer(cfg.max_tiles)
        self.ratios = RatioSet.up_to(self.config.tiling.max_tiles)
        self.encoder = VisionEncoder(self.config.encoder, self.seed)

        enc = self.config.encoder
        p = dict(self.encoder.params)
        dec.init_backbone(p, cfg, self.tokenizer.vocab_size, np.random.default_rng([self.seed, _STREAM_BACKBONE]))
        if arch in ("D", "H"):
            init_projector_d(p, np.random.default_rng([self.seed, _STREAM_PROJ_D]), enc.shuffled_dim,
                             cfg.projector_hidden, cfg.d_model, cfg.init_std)
        if arch == "X":
            init_projector_x(p, np.random.default_rng([self.seed, _STREAM_PROJ_X]), enc.shuffled_dim,
                             cfg.d_model, cfg.init_std)
        if arch in ("X", "H"):
            dec.init_xattn(p, cfg, np.random.default_rng([self.seed, _STREAM_XATTN]))
        self.params = p
        self._cache: dict[int, tuple[Image, EncodedImage]] = {}

    # -- parameter groups -------------------------------------------------

    def names(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def vision_names(self) -> list[str]:
        return self.names("vision.")

    def alignment_names(self) -> list[str]:
        return self.names("proj_") + self.names("xattn")

    def backbone_names(self) -> list[str]:
        return self.names("backbone.")

    def trainable_names(self, stage: int = 2) -> list[str]:
        """Stage 1 trains only the alignment modules; stage 2 adds the backbone."""
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        names = self.alignment_names()
        if stage == 2:
            names = self.backbone_names() + names
        return names

    def gate_names(self) -> list[str]:
        return [n for n in self.params if ".gate_" in n]

    def param_groups(self) -> dict[str, list[str]]:
        groups = {
            "backbone.embeddings": self.names("backbone.tok_emb") + self.names("backbone.pos_emb"),
            "backbone.blocks": self.names("backbone.block"),
            "backbone.head": self.names("backbone.ln_f") + self.names("backbone.head"),
            "projector": self.names("proj_"),
        }
        if self.arch in ("X", "H"):
            xa = self.names("xattn")
            groups["xattn.attention"] = [n for n in xa if ".attn." in n or ".ln1." in n]
            groups["xattn.mlp"] = [n for n in xa if ".mlp." in n or ".ln2." in n]
            groups["xattn.gates"] = self.gate_names()
        return {k: v for k, v in groups.items() if v}

    def set_gates(self, value: float) -> None:
        for n in self.gate_names():
            self.params[n].assign(np.full(1, value))

    def hash(self, names: Sequence[str] | None = None) -> str:
        names = list(self.params) if names is None else names
        return param_hash({n: self.params[n] for n in names})

    def share_from(self, other: NVLMModel) -> None:
        """Copy values of every parameter both models have."""
        for n, t in other.params.items():
            if n in self.params:
                self.params[n].assign(t.data)

    # -- inputs -----------------------------------------------------------

    def encode_image(self, image: Image) -> EncodedImage:
        hit = self._cache.get(id(image))
        if hit is not None and hit[0] is image:
            return hit[1]
        lo = layout(image, self.ratios, self.config.encoder.tile_size, self.config.tiling.thumbnail)
        tiles, thumb = cut(image, lo)
        blocks = [
            self.encoder.encode(t, THUMBNAIL if thumb is not None and t is thumb else k)
            for k, t in enumerate(blocks_in_order(tiles, thumb))
        ]
        enc = EncodedImage(lo, render_tags(lo, self.tag_scheme, self.tokenizer.max_tiles), blocks)
        self._cache[id(image)] = (image, enc)
        return enc

    def prepare(self, ex: TrainingExample) -> Prepared:
        tags: list[str] = []
        blocks: list[TokenBlock] = []
        if ex.image is not None:
            enc = self.encode_image(ex.image)
            tags, blocks = enc.tags, enc.blocks
        tok = self.tokenizer
        if self.arch == "D":
            return Prepared(build_d_sequence(ex.prompt, ex.response, tags, blocks, tok), list(blocks))
        if self.arch == "X":
            seq, spans = build_x_sequence(ex.prompt, ex.response, tags, tok)
            return Prepared(seq, [], list(blocks), list(tags), spans)
        seq, routing = build_h_sequence(ex.prompt, ex.response, tags, blocks, tok)
        routing: HybridRouting
        dblocks = [routing.decoder_block] if routing.decoder_block is not None else []
        return Prepared(seq, dblocks, routing.xattn_blocks, routing.xattn_tags)

    # -- forward ----------------------------------------------------------

    def _project(self, b: TokenBlock) -> Tensor:
        return (project_x(b, self.params) if self.arch == "X" else project_d(b, self.params)).data

    def cross_context(self, prep: Prepared, n_positions: int) -> dec.CrossContext | None:
        if self.arch == "D":
            return None
        if not prep.xattn_blocks:
            return dec.CrossContext(None)
        parts: list[Tensor] = []
        sizes: list[int] = []
        table = self.params["backbone.tok_emb"]
        for tag, b in zip(prep.xattn_tags, prep.xattn_blocks):
            rows = [self._project(b)]
            if self.arch == "H":
                tag_ids = self.tokenizer.encode_tag(tag)
                if tag_ids:
                    rows.insert(0, ad.take_rows(table, tag_ids))
            parts.extend(rows)
            sizes.append(sum(r.shape[0] for r in rows))
        kv = ad.concat_rows(parts)
        if self.arch == "X":
            mask = dec.build_x_mask(prep.tag_spans, n_positions, len(sizes), sizes)
        else:
            mask = None
        return dec.CrossContext(kv, mask)

    def logits_for_ids(self, prep: Prepared, ids: Sequence[int]) -> Tensor:
        images = {}
        for (pos, _slot), block in zip(prep.seq.image_positions(), prep.decoder_blocks):
            images[pos] = self._project(block)
        x = dec.embed(self.params, ids, images)
        return dec.decode(self.params, self.config.arch, x, self.cross_context(prep, len(ids)))

    def forward(self, ex: TrainingExample) -> tuple[Tensor, Tensor]:
        """Logits over the expanded decoder stream and the masked next-token loss."""
        prep = self.prepare(ex)
        ids = prep.seq.expanded_ids(self.tokenizer[IMAGE])
        logits = self.logits_for_ids(prep, ids)
        n = len(ids)
        loss = ad.cross_entropy(ad.slice_rows(logits, 0, n - 1), ids[1:], prep.seq.loss_mask[1:])
        return logits, loss

    def loss(self, ex: TrainingExample) -> float:
        return float(self.forward(ex)[1].data)

    def text_only_logits(self, ids: Sequence[int]) -> Tensor:
        return dec.forward_text_only(self.params, self.config.arch, ids)

    def generate(self, image: Image | None, prompt: str, max_new_tokens: int) -> str:
        """Greedy decoding of the assistant turn."""
        prep = self.prepare(TrainingExample(prompt, " ", image))
        ids = prep.seq.expanded_ids(self.tokenizer[IMAGE])[:-2]  # drop placeholder byte and <|im_end|>
        end = self.tokenizer[IM_END]
        out: list[int] = []
        for _ in range(max_new_tokens):
            logits = self.logits_for_ids(prep, ids + out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == end:
                break
            out.append(nxt)
        return bytes(i for i in out if i < 256).decode("utf-8", errors="replace")
