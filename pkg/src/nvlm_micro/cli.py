"""Command-line entry point: ``nvlm-micro <subcommand>``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .config import Config, ConfigError
from .model import ARCHS
from .sequence import TagScheme, Tokenizer, build_d_sequence, build_h_sequence, build_x_sequence, render_tags
from .tiler import RatioSet, layout, layout_for_size

class UsageError(Exception):
    pass


def _load_config(args) -> Config:
    try:
        cfg = config_mod.load(args.config)
        # --seed, then $NVLM_MICRO_SEED, then the file's seed (itself defaulting to the constant)
        if args.seed is not None:
            cfg.seed = args.seed
        elif os.environ.get(config_mod.SEED_ENV):
            cfg.seed = config_mod.default_seed()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_tile(args) -> int:
    from .images import read_image, write_image
    from .tiler import cut

    cfg = _load_config(args)
    try:
        image = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}") from exc
    rs = RatioSet.up_to(args.max_tiles or cfg.tiling.max_tiles)
    tile_size = args.tile_size or cfg.encoder.tile_size
    tpt = args.tokens_per_tile or cfg.encoder.tokens_per_tile
    lo = layout(image, rs, tile_size, cfg.tiling.thumbnail)
    manifest = lo.to_dict(tpt)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tiles, thumb = cut(image, lo)
        files = []
        for k, t in enumerate(tiles):
            name = f"tile_{k + 1:02d}.png"
            write_image(t, out / name)
            files.append(name)
        if thumb is not None:
            write_image(thumb, out / "thumbnail.png")
            files.append("thumbnail.png")
        manifest["files"] = files
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    else:
        sys.stdout.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"token budget: {manifest['token_budget']}", file=sys.stderr)
    return 0


def _read_example(path: str) -> dict:
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        doc = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read example {path}: {exc}") from exc
    if not isinstance(doc, dict) or "prompt" not in doc or "response" not in doc:
        raise UsageError("example JSON needs 'prompt' and 'response'")
    return doc


def cmd_build_seq(args) -> int:
    from .images import read_image
    from .sequence import placeholder_blocks

    cfg = _load_config(args)
    doc = _read_example(args.example)
    tok = Tokenizer(cfg.arch.max_tiles)
    rs = RatioSet.up_to(cfg.tiling.max_tiles)
    tile_size = cfg.encoder.tile_size
    lo = None
    if "image" in doc:
        img = doc["image"]
        try:
            lo = layout_for_size(int(img["width"]), int(img["height"]), rs, tile_size, cfg.tiling.thumbnail)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad image entry {img!r}: {exc}") from exc
    elif "image_path" in doc:
        try:
            lo = layout(read_image(doc["image_path"]), rs, tile_size, cfg.tiling.thumbnail)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read image {doc['image_path']}: {exc}") from exc
    try:
        tags = render_tags(lo, args.tag_scheme, tok.max_tiles) if lo is not None else []
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    blocks = placeholder_blocks(lo, cfg.encoder.tokens_per_tile)
    system = doc.get("system")
    extra: dict = {"tag_scheme": TagScheme(args.tag_scheme).value}
    if args.arch == "D":
        seq = build_d_sequence(doc["prompt"], doc["response"], tags, blocks, tok, system)
    elif args.arch == "X":
        seq, _ = build_x_sequence(doc["prompt"], doc["response"], tags, tok, system)
        extra["kv_blocks"] = [{"source": b.source, "tokens": b.n_tokens, "tag": t} for t, b in zip(tags, blocks)]
    else:
        seq, routing = build_h_sequence(doc["prompt"], doc["response"], tags, blocks, tok, system)
        extra["kv_blocks"] = [
            {"source": b.source, "tokens": b.n_tokens, "tag": t}
            for t, b in zip(routing.xattn_tags, routing.xattn_blocks)
        ]
    _emit(seq.to_json(**extra) + "\n", args.out)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import model_gradcheck

    cfg = _load_config(args)
    report = model_gradcheck(args.arch, cfg, cfg.seed, tol=args.tol, max_entries=args.entries)
    lines = [f"grad-check arch={args.arch} tol={args.tol:g}"] + report.lines()
    lines.append("PASS" if report.passed else "FAIL")
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if report.passed else 1


def cmd_overfit(args) -> int:
    from .corpus import make_ocr_corpus
    from .model import NVLMModel
    from .train import overfit_harness

    cfg = _load_config(args)
    tc = cfg.train
    for key in ("steps", "stage", "lr", "batch_size"):
        val = getattr(args, key)
        if val is not None:
            setattr(tc, key, val)
    if args.target is not None:
        tc.target_loss = args.target
    corpus = make_ocr_corpus(args.examples, seed=cfg.seed, scale=cfg.encoder.tile_size // 16,
                             channels=cfg.encoder.channels)
    model = NVLMModel(args.arch, cfg, cfg.seed)
    curve = overfit_harness(model, corpus, tc, seed=cfg.seed)
    _emit(curve.to_csv(), args.out)
    final = curve.final_loss
    print(f"final corpus loss {final:.6f} after {max(curve.corpus_loss)} steps", file=sys.stderr)
    return 0 if final < tc.target_loss else 1


def cmd_perf(args) -> int:
    from .perf import analytic_cost, compare_archs

    if args.config is None:
        # toy shapes are too small for timings to reflect sequence length
        args.config = "bench"
    cfg = _load_config(args)
    text_len = args.text_len if args.text_len is not None else cfg.tiling.text_len
    try:
        rep = analytic_cost(cfg, text_len, args.tiles)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.reps is not None and args.reps < 3:
        raise UsageError("--reps must be at least 3")
    if not args.no_measure:
        archs = [args.arch] if args.arch else list(ARCHS)
        rep.measured_ms = compare_archs(archs, cfg, args.reps or 5, args.tiles, text_len, cfg.seed)
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n")
    _emit(rep.table() + "\n", args.out)
    return 0


def cmd_dump_config(args) -> int:
    cfg = _load_config(args)
    _emit(cfg.dumps(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help=f"preset name ({', '.join(config_mod.PRESETS)}) or TOML path; default toy")
    common.add_argument("--seed", type=int, default=None,
                        help=f"default {config_mod.DEFAULT_SEED}, or ${config_mod.SEED_ENV}")
    common.add_argument("--out", default=None, help="write the main output here instead of stdout")

    parser = argparse.ArgumentParser(prog="nvlm-micro", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", parents=[common], help="tile an image and print its manifest")
    p.add_argument("image")
    p.add_argument("--out-dir", default=None, help="write manifest.json and tile PNGs here")
    p.add_argument("--max-tiles", type=int, default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--tokens-per-tile", type=int, default=None)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("build-seq", parents=[common], help="build a decoder sequence record (JSON line)")
    p.add_argument("example", help="example JSON file, or - for stdin")
    p.add_argument("--arch", choices=ARCHS, default="D")
    p.add_argument("--tag-scheme", choices=[s.value for s in TagScheme], default="1d")
    p.set_defaults(func=cmd_build_seq)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check per parameter group")
    p.add_argument("--arch", choices=ARCHS, default="D")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--entries", type=int, default=12, help="coordinates probed per tensor")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("overfit", parents=[common], help="overfit the synthetic OCR corpus; CSV loss curve")
    p.add_argument("--arch", choices=ARCHS, default="X")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--examples", type=int, default=32)
    p.add_argument("--target", type=float, default=None)
    p.set_defaults(func=cmd_overfit)

    p = sub.add_parser("perf", parents=[common],
                       help="sequence lengths, FLOP estimate and microbench (bench preset by default)")
    p.add_argument("--arch", choices=ARCHS, default=None, help="benchmark one arch (default all)")
    p.add_argument("--tiles", type=int, default=6)
    p.add_argument("--text-len", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--no-measure", action="store_true", help="analytic part only (deterministic)")
    p.add_argument("--json", default=None, help="also write the report as JSON here")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("dump-config", parents=[common], help="print the effective configuration as TOML")
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
