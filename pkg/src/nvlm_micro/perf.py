"""Sequence-length accounting, analytic FLOP estimates and a wall-clock microbench."""

from __future__ import annotations

import gc
import json
import statistics
import time
from dataclasses import dataclass, field

from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import Config
from .model import ARCHS, NVLMModel, TrainingExample
from .tiler import Image


def blocks_for(tiles: int, thumbnail: bool = True) -> int:
    """Encoded blocks for ``tiles`` regular tiles (thumbnail only when tiles > 1)."""
    return tiles + int(thumbnail and tiles > 1)


def decoder_lengths(text_len: int, tiles: int, tokens_per_tile: int, thumbnail: bool = True) -> dict[str, int]:
    """Decoder sequence lengths; ``text_len`` counts every non-image position."""
    image = tiles > 0
    return {
        "D": text_len + tokens_per_tile * blocks_for(tiles, thumbnail),
        "H": text_len + (tokens_per_tile if image else 0),
        "X": text_len,
    }


def kv_lengths(tiles: int, tokens_per_tile: int, thumbnail: bool = True) -> dict[str, int]:
    regular = tiles if tiles > 1 else 0
    return {
        "D": 0,
        "H": tokens_per_tile * regular,
        "X": tokens_per_tile * blocks_for(tiles, thumbnail),
    }


def iteration_flops(n: int, kv: int, d: int, n_layers: int, n_xattn: int, mlp_ratio: int = 4) -> float:
    """Forward+backward multiply-adds x2 for one sequence (backward ~ 2x forward)."""
    self_attn = n_layers * (8 * n * d * d + 4 * n * n * d)
    mlp = n_layers * 4 * mlp_ratio * n * d * d
    cross = 0
    if kv:
        cross = n_xattn * (4 * n * d * d + 4 * kv * d * d + 4 * n * kv * d + 4 * mlp_ratio * n * d * d)
    return 3.0 * (self_attn + mlp + cross)


@dataclass
class CostReport:
    text_len: int
    tiles: int
    tokens_per_tile: int
    decoder_len: dict[str, int]
    kv_len: dict[str, int]
    flops: dict[str, float]
    measured_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "text_len": self.text_len,
            "tiles": self.tiles,
            "tokens_per_tile": self.tokens_per_tile,
            "decoder_len": self.decoder_len,
            "kv_len": self.kv_len,
            "flops": self.flops,
            "measured_ms": self.measured_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        tiles = f"{self.tiles}+1" if self.tiles > 1 else str(self.tiles)
        head = f"{'Model':<8}{'Seq len in decoder':>20}{'# tiles':>9}{'kv len':>8}{'est. GFLOP/iter':>17}{'ms/iter':>10}"
        lines = [head, "-" * len(head)]
        for arch in ("X", "D", "H"):
            ms = self.measured_ms.get(arch)
            lines.append(
                f"{'NVLM-' + arch:<8}{self.decoder_len[arch]:>20,}{tiles:>9}{self.kv_len[arch]:>8,}"
                f"{self.flops[arch] / 1e9:>17.3f}{(f'{ms:.2f}' if ms is not None else '-'):>10}"
            )
        return "\n".join(lines)


def analytic_cost(cfg: Config, text_len: int, tiles: int, tokens_per_tile: int | None = None) -> CostReport:
    if tiles > cfg.tiling.max_tiles:
        raise ValueError(f"{tiles} tiles exceeds max_tiles {cfg.tiling.max_tiles}")
    t = cfg.encoder.tokens_per_tile if tokens_per_tile is None else tokens_per_tile
    thumb = cfg.tiling.thumbnail
    dl = decoder_lengths(text_len, tiles, t, thumb)
    kv = kv_lengths(tiles, t, thumb)
    a = cfg.arch
    flops = {
        arch: iteration_flops(dl[arch], kv[arch], a.d_model, a.n_layers, 0 if arch == "D" else a.n_xattn,
                              a.mlp_ratio)
        for arch in ARCHS
    }
    return CostReport(text_len, tiles, t, dl, kv, flops)


def bench_example(cfg: Config, tiles: int, text_len: int) -> TrainingExample:
    """A one-line prompt plus an image whose layout has ``tiles`` regular tiles."""
    size = cfg.encoder.tile_size
    image = None
    if tiles:
        # a cols x 1 strip matches the (tiles, 1) grid exactly
        image = Image.blank(size * tiles, size, cfg.encoder.channels, 0.5)
    prompt = ("describe the image " * (text_len // 19 + 1))[:text_len]
    return TrainingExample(prompt, "ok", image)


def _timed_step(model: NVLMModel, ex: TrainingExample) -> float:
    gc.collect()
    gc.disable()  # collector pauses land on whichever step is running
    try:
        t0 = time.perf_counter()
        _, loss = model.forward(ex)
        ad.backward(loss)
        dt = (time.perf_counter() - t0) * 1e3
    finally:
        gc.enable()
    for p in model.params.values():
        p.zero_grad()
    return dt


def _bench_model(arch: str, cfg: Config, seed: int) -> NVLMModel:
    model = NVLMModel(arch, cfg, seed)
    model.set_gates(0.5)
    return model


def microbench(arch: str, cfg: Config, reps: int = 5, tiles: int = 6, text_len: int | None = None,
               seed: int = 0) -> float:
    """Median wall-clock ms of forward+backward over ``reps`` runs.

    The first iteration is a discarded warmup; it also fills the encoder cache,
    so timed runs cover projection, decoder and backward only.
    """
    return compare_archs((arch,), cfg, reps, tiles, text_len, seed)[arch]


def compare_archs(archs, cfg: Config, reps: int = 5, tiles: int = 6, text_len: int | None = None,
                  seed: int = 0) -> dict[str, float]:
    """:func:`microbench` for several archs, timed round-robin.

    Each rep times every arch once in turn, so bursts of machine load hit all
    of them alike instead of whichever happened to be running.
    """
    if reps < 3:
        raise ValueError("microbench needs reps >= 3")
    text_len = cfg.tiling.text_len if text_len is None else text_len
    ex = bench_example(cfg, tiles, text_len)
    archs = tuple(archs)
    models = {a: _bench_model(a, cfg, seed) for a in archs}
    times: dict[str, list[float]] = {a: [] for a in archs}
    with threadpool_limits(limits=1):
        for a in archs:
            _timed_step(models[a], ex)
        for r in range(reps):
            k = r % len(archs)
            for a in archs[k:] + archs[:k]:  # rotate so no arch always runs first
                times[a].append(_timed_step(models[a], ex))
    return {a: statistics.median(t) for a, t in times.items()}


def cost_report(cfg: Config, tiles: int = 6, text_len: int | None = None, reps: int = 5,
                measure: bool = True, seed: int = 0) -> CostReport:
    text_len = cfg.tiling.text_len if text_len is None else text_len
    rep = analytic_cost(cfg, text_len, tiles)
    if measure:
        rep.measured_ms = compare_archs(ARCHS, cfg, reps, tiles, text_len, seed)
    return rep
