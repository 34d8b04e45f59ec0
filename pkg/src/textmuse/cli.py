"""Command-line interface for the pipeline.

Commands mirror the library stages: tokenize, detokenize, attrs, metrics,
dataset build/split, train-align, grad-check, generate. Every command
accepts --config (a JSON file of option defaults; explicit flags win and
unknown keys are rejected) and --seed. The resolved options are echoed to
stderr as one JSON line; stdout carries only command output.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import remi
from .align import AlignConfig, AlignModel, grad_check, train, write_history_csv
from .attributes import bin_attributes, polyphony, rhythmic_intensity
from .dataset import (
    DatasetError,
    SplitSet,
    build_pairs,
    read_jsonl,
    segment,
    tokenize_corpus,
    write_jsonl,
)
from .dataset import split as split_examples
from .generate import (
    DecoderConfig,
    DecoderModel,
    GenerationConfig,
    clip_guided_tune,
    grad_check_decoder,
)
from .metrics import evaluate
from .midi_io import SmfParseError, parse_smf, quantize, write_smf
from .remi import RemiDecodeError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments; the contract here is
    # 1 for usage problems, so raise and let run() translate.
    def error(self, message):
        raise UsageError(message)


def _load_piece(path: str):
    return quantize(parse_smf(Path(path).read_bytes()))


def _merge_options(args, spec: dict) -> dict:
    """Resolve option values: explicit flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {args.config}: invalid JSON ({exc.msg})")
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {args.config}: expected a JSON object")
        unknown = set(file_cfg) - set(spec)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in spec.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


# ---------------------------------------------------------------------------
# commands


def cmd_tokenize(args, cfg):
    piece = _load_piece(args.input)
    print(remi.to_text(remi.encode(piece)))
    return 0


def cmd_detokenize(args, cfg):
    seq = remi.from_text(Path(args.input).read_text(encoding="utf-8"))
    if cfg["repair"]:
        seq = remi.repair(seq)
    piece, _ = remi.decode(seq)
    Path(args.output).write_bytes(write_smf(piece))
    print(f"wrote {args.output}", file=sys.stderr)
    return 0


def cmd_attrs(args, cfg):
    piece = _load_piece(args.input)
    rhym = rhythmic_intensity(piece)
    poly = polyphony(piece)
    classes = bin_attributes(rhym, poly)
    print(
        json.dumps(
            {
                "rhythmic_intensity": [float(x) for x in rhym],
                "polyphony": [float(x) for x in poly],
                "rhythmic_intensity_classes": [int(x) for x in classes.a_rhym],
                "polyphony_classes": [int(x) for x in classes.a_poly],
                "rhythmic_intensity_edges": [float(x) for x in classes.rhym_edges],
                "polyphony_edges": [float(x) for x in classes.poly_edges],
            }
        )
    )
    return 0


def cmd_metrics(args, cfg):
    piece = _load_piece(args.input)
    report = evaluate(piece, remi.detect_chords(piece), min_duration=cfg["min_duration"])
    print(report.to_json() if cfg["json"] else report.to_table())
    return 0


def cmd_dataset_build(args, cfg):
    captions = json.loads(Path(args.captions).read_text(encoding="utf-8"))
    if not isinstance(captions, dict):
        raise DatasetError(f"{args.captions}: expected an object of review entries")
    reviews = {}
    reviews_by_piece: dict[str, list[str]] = {}
    for rid in sorted(captions):
        entry = captions[rid]
        try:
            pid, text = entry["piece_id"], entry["caption"]
        except (TypeError, KeyError):
            raise DatasetError(
                f"{args.captions}: entry {rid!r} needs piece_id and caption fields"
            ) from None
        reviews[rid] = text
        reviews_by_piece.setdefault(pid, []).append(rid)

    midi_paths = sorted(Path(args.midi_dir).glob("*.mid"))
    if not midi_paths:
        raise DatasetError(f"no .mid files in {args.midi_dir}")
    pieces = {p.stem: quantize(parse_smf(p.read_bytes())) for p in midi_paths}
    toks = tokenize_corpus(pieces, reviews_by_piece=reviews_by_piece)
    segments = [
        s
        for t in toks
        for s in segment(t, bars_per_segment=cfg["bars_per_segment"])
        if any(rid in reviews for rid in s.review_ids)
    ]
    if not segments:
        raise DatasetError("no captioned segments; pieces too short or captions unlinked")
    examples = build_pairs(segments, reviews, seed=cfg["seed"])
    write_jsonl(examples, args.output)
    print(
        json.dumps(
            {"pieces": len(pieces), "segments": len(segments), "examples": len(examples)}
        )
    )
    return 0


def cmd_dataset_split(args, cfg):
    examples = read_jsonl(args.input)
    parts = split_examples(examples, seed=cfg["seed"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, part in (
        ("train", parts.train),
        ("validation", parts.validation),
        ("test", parts.test),
    ):
        write_jsonl(part, out_dir / f"{name}.jsonl")
        counts[name] = len(part)
    print(json.dumps(counts))
    return 0


def cmd_train_align(args, cfg):
    train_ex = tuple(read_jsonl(args.train))
    val_ex = tuple(read_jsonl(args.val)) if args.val else ()
    dataset = SplitSet(train_ex, val_ex, (), seed=cfg["seed"])
    config = AlignConfig(
        embed_dim=cfg["embed_dim"],
        heads=cfg["heads"],
        batch_size=cfg["batch_size"],
        lr_max=cfg["lr_max"],
        lr_min=cfg["lr_min"],
        scheduler=cfg["scheduler"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        temperature_init=cfg["temperature_init"],
        text_hash_buckets=cfg["text_hash_buckets"],
        loss_mode=cfg["loss_mode"],
    )
    model, history = train(dataset, config)
    if args.out:
        model.save(args.out)
    if args.history:
        write_history_csv(history, args.history)
    last = history[-1]
    print(
        json.dumps(
            {
                "epochs": len(history),
                "final_train_loss": last.train_loss,
                "final_val_loss": None if last.val_loss != last.val_loss else last.val_loss,
            }
        )
    )
    return 0


def cmd_grad_check(args, cfg):
    seed = cfg["seed"]
    rng = np.random.default_rng(seed)
    results = {}
    if cfg["which"] in ("align", "both"):
        model = AlignModel.init(
            AlignConfig(embed_dim=8, heads=2, text_hash_buckets=50, temperature_init=1.0)
        )
        for name, tensor in model.params.items():
            if tensor.ndim == 2:
                model.params[name] = rng.normal(0.0, 0.35, tensor.shape)
        model.params["log_temp"] = np.array(0.0)
        batch = [([5, 9, 9, 200], [3, 7]), ([82, 83, 84], [7, 11, 12]), ([404, 0, 1], [49])]
        results["align"] = grad_check(model, batch, seed=seed)
    if cfg["which"] in ("decoder", "both"):
        decoder = DecoderModel.init(DecoderConfig(embed_dim=8, heads=2, max_len=16))
        align_model = AlignModel.init(AlignConfig(embed_dim=8, text_hash_buckets=64))
        for name, tensor in decoder.params.items():
            decoder.params[name] = rng.normal(0.0, 0.3, tensor.shape)
        for name, tensor in align_model.params.items():
            if tensor.ndim == 2:
                align_model.params[name] = rng.normal(0.0, 0.3, tensor.shape)
        results["decoder"] = grad_check_decoder(
            decoder, align_model, [405, 5, 9, 9, 200, 404, 0, 1], seed=seed
        )
    threshold = 1e-4
    ok = all(v < threshold for v in results.values())
    print(json.dumps({**results, "threshold": threshold, "ok": ok}))
    return 0 if ok else 2


def cmd_generate(args, cfg):
    if not str(cfg["prompt"]).strip():
        raise UsageError("generate needs a prompt (--prompt or config)")
    seed = cfg["seed"]
    if args.align:
        align_model = AlignModel.load(args.align)
    else:
        align_model = AlignModel.init(AlignConfig(seed=seed))
    max_len = max(cfg["max_tokens"], cfg["context_len"])
    decoder = DecoderModel.init(DecoderConfig(seed=seed, max_len=max_len))
    config = GenerationConfig(
        prompt=cfg["prompt"],
        nucleus_p=cfg["nucleus_p"],
        max_tokens=cfg["max_tokens"],
        context_len=cfg["context_len"],
        tune_epochs=cfg["tune_epochs"],
        tune_lr=cfg["tune_lr"],
        seed=seed,
        plateau_patience=cfg["plateau_patience"],
        plateau_min_delta=cfg["plateau_min_delta"],
    )
    result = clip_guided_tune(decoder, align_model, config)
    print(
        f"guidance loss {result.history[0]:.4f} -> {result.history[-1]:.4f} "
        f"over {len(result.history)} epochs",
        file=sys.stderr,
    )
    if args.output:
        piece, _ = remi.decode(result.repaired)
        Path(args.output).write_bytes(write_smf(piece))
        print(f"wrote {args.output}", file=sys.stderr)
    print(remi.to_text(result.repaired))
    return 0


# ---------------------------------------------------------------------------
# parser


SPECS = {
    "tokenize": {"seed": 0},
    "detokenize": {"seed": 0, "repair": False},
    "attrs": {"seed": 0},
    "metrics": {"seed": 0, "json": False, "min_duration": 1},
    "dataset build": {"seed": 0, "bars_per_segment": 16},
    "dataset split": {"seed": 0},
    "train-align": {
        "seed": 0,
        "embed_dim": 64,
        "heads": 1,
        "batch_size": 8,
        "lr_max": 1e-4,
        "lr_min": 5e-6,
        "scheduler": "cosine",
        "epochs": 50,
        "temperature_init": 0.07,
        "text_hash_buckets": 32768,
        "loss_mode": "in_batch",
    },
    "grad-check": {"seed": 0, "which": "both"},
    "generate": {
        "seed": 0,
        "prompt": "",
        "nucleus_p": 0.9,
        "max_tokens": 512,
        "context_len": 32,
        "tune_epochs": 100,
        "tune_lr": 0.1,
        "plateau_patience": None,
        "plateau_min_delta": 1e-4,
    },
}


def _add_common(p):
    p.add_argument("--config", help="JSON file of option defaults; flags win")
    p.add_argument("--seed", type=int, help="random seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textmuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenize", help="MIDI file to token text on stdout")
    p.add_argument("input", help="input .mid file")
    _add_common(p)
    p.set_defaults(func=cmd_tokenize, spec_name="tokenize")

    p = sub.add_parser("detokenize", help="token text file to a MIDI file")
    p.add_argument("input", help="token text file")
    p.add_argument("-o", "--output", required=True, help="output .mid path")
    p.add_argument("--repair", action="store_true", default=None,
                   help="repair the stream before decoding")
    _add_common(p)
    p.set_defaults(func=cmd_detokenize, spec_name="detokenize")

    p = sub.add_parser("attrs", help="per-bar attribute scores and classes as JSON")
    p.add_argument("input", help="input .mid file")
    _add_common(p)
    p.set_defaults(func=cmd_attrs, spec_name="attrs")

    p = sub.add_parser("metrics", help="objective metrics for a MIDI file")
    p.add_argument("input", help="input .mid file")
    p.add_argument("--json", action="store_true", default=None, help="JSON instead of a table")
    p.add_argument("--min-duration", type=int, dest="min_duration",
                   help="qualified-note duration threshold in sub-beats")
    _add_common(p)
    p.set_defaults(func=cmd_metrics, spec_name="metrics")

    ds = sub.add_parser("dataset", help="build or split contrastive pair data")
    dsub = ds.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = dsub.add_parser("build", help="pair MIDI segments with captions into JSONL")
    p.add_argument("--midi-dir", required=True, help="directory of .mid files")
    p.add_argument("--captions", required=True,
                   help="JSON: {review_id: {piece_id, caption}}")
    p.add_argument("-o", "--output", required=True, help="output JSONL path")
    p.add_argument("--bars-per-segment", type=int, dest="bars_per_segment")
    _add_common(p)
    p.set_defaults(func=cmd_dataset_build, spec_name="dataset build")

    p = dsub.add_parser("split", help="split pair JSONL into train/validation/test")
    p.add_argument("input", help="pairs JSONL file")
    p.add_argument("--out-dir", required=True, help="directory for the three JSONL files")
    _add_common(p)
    p.set_defaults(func=cmd_dataset_split, spec_name="dataset split")

    p = sub.add_parser("train-align", help="train the text-music alignment model")
    p.add_argument("--train", required=True, help="training pairs JSONL")
    p.add_argument("--val", help="validation pairs JSONL")
    p.add_argument("--out", help="checkpoint output path (.npz)")
    p.add_argument("--history", help="loss history CSV path")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr-max", type=float, dest="lr_max")
    p.add_argument("--lr-min", type=float, dest="lr_min")
    p.add_argument("--scheduler", choices=["cosine", "constant"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--temperature-init", type=float, dest="temperature_init")
    p.add_argument("--text-hash-buckets", type=int, dest="text_hash_buckets")
    p.add_argument("--loss-mode", choices=["in_batch", "explicit"], dest="loss_mode")
    _add_common(p)
    p.set_defaults(func=cmd_train_align, spec_name="train-align")

    p = sub.add_parser("grad-check", help="finite-difference check of the gradients")
    p.add_argument("--which", choices=["align", "decoder", "both"])
    _add_common(p)
    p.set_defaults(func=cmd_grad_check, spec_name="grad-check")

    p = sub.add_parser("generate", help="prompt-guided generation to tokens and MIDI")
    p.add_argument("--prompt", help="text prompt to steer toward")
    p.add_argument("--align", help="alignment checkpoint (.npz); fresh model if omitted")
    p.add_argument("-o", "--output", help="write the repaired piece as a .mid file")
    p.add_argument("--nucleus-p", type=float, dest="nucleus_p")
    p.add_argument("--max-tokens", type=int, dest="max_tokens")
    p.add_argument("--context-len", type=int, dest="context_len")
    p.add_argument("--tune-epochs", type=int, dest="tune_epochs")
    p.add_argument("--tune-lr", type=float, dest="tune_lr")
    p.add_argument("--plateau-patience", type=int, dest="plateau_patience")
    p.add_argument("--plateau-min-delta", type=float, dest="plateau_min_delta")
    _add_common(p)
    p.set_defaults(func=cmd_generate, spec_name="generate")

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _merge_options(args, SPECS[args.spec_name])
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return exc.code or 0
    print(json.dumps({"command": args.spec_name, **cfg}), file=sys.stderr)
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        SmfParseError,
        RemiDecodeError,
        DatasetError,
        ValueError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
