"""Command line entry points.

Subcommands: gen-data, train-base, train-delib, decode, evaluate.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, apply_overrides, load_run_config
from .data import (
    VOCAB_FILENAME,
    SynthConfig,
    Vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    load_manifest,
)
from .errors import DataError, NumericError, UsageError
from .model import FastSlowTransducer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fsdt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic corpus directory")
    gen.add_argument("--out", required=True, help="output corpus directory")
    gen.add_argument("--n-utts", type=int, default=200)
    gen.add_argument("--n-symbols", type=int, default=12)
    gen.add_argument("--min-tokens", type=int, default=5)
    gen.add_argument("--max-tokens", type=int, default=20)
    gen.add_argument("--frames-per-token", type=int, default=3)
    gen.add_argument("--feature-dim", type=int, default=8)
    gen.add_argument("--noise-std", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--template-seed", type=int, default=1234)
    gen.add_argument("--lexicon", default="", help="comma-separated word list")
    gen.add_argument("--confusion-pair", default="", help="two symbols 'a,b': b reuses a's template")

    def add_common(p):
        p.add_argument("--config", default="", help="JSON run config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.FIELD=VALUE", help="override any config field")

    tb = sub.add_parser("train-base", help="step one: train the fast-slow model")
    add_common(tb)
    tb.add_argument("--manifest", required=True)
    tb.add_argument("--out", required=True, help="checkpoint to write")

    td = sub.add_parser("train-delib", help="step two: joint training with deliberation")
    add_common(td)
    td.add_argument("--manifest", required=True)
    td.add_argument("--base", required=True, help="step-one checkpoint")
    td.add_argument("--out", required=True, help="checkpoint to write")

    dec = sub.add_parser("decode", help="decode a manifest with parallel beam search")
    add_common(dec)
    dec.add_argument("--manifest", required=True)
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--out", required=True, help="hypotheses JSONL")
    dec.add_argument("--trace", default="", help="optional beam-call trace JSONL")

    ev = sub.add_parser("evaluate", help="score hypotheses against a manifest")
    add_common(ev)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--hyps", required=True, help="hypotheses JSONL from decode")
    ev.add_argument("--report", required=True, help="report path (writes .txt and .json)")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, list(args.overrides))


def _load_checkpoint_model(path) -> tuple[FastSlowTransducer, Vocabulary]:
    model, texts = FastSlowTransducer.load(path)
    if "vocab" not in texts:
        raise DataError(f"checkpoint {path} has no vocabulary record")
    vocab = Vocabulary(json.loads(texts["vocab"])["symbols"])
    return model, vocab


def _cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        n_utts=args.n_utts,
        n_symbols=args.n_symbols,
        min_tokens=args.min_tokens,
        max_tokens=args.max_tokens,
        frames_per_token=args.frames_per_token,
        feature_dim=args.feature_dim,
        noise_std=args.noise_std,
        seed=args.seed,
        template_seed=args.template_seed,
        lexicon=tuple(w for w in args.lexicon.split(",") if w) or None,
        confusion_pair=tuple(args.confusion_pair.split(",")) if args.confusion_pair else None,
    )
    manifest = generate_synthetic_corpus(cfg, args.out)
    print(f"wrote {cfg.n_utts} utterances under {manifest.parent}")
    return EXIT_OK


def _cmd_train_base(args) -> int:
    run = _run_config(args)
    records, vocab = load_corpus(args.manifest)
    base_dir = Path(args.manifest).parent
    model, history = pipeline.train_base(records, vocab, run, base_dir)
    model.save(args.out, {
        "vocab": json.dumps({"symbols": vocab.symbols}),
        "stage": "base",
        "run_config": json.dumps(run.to_dict(), sort_keys=True),
    })
    print(f"final loss {history[-1]:.4f}; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_train_delib(args) -> int:
    run = _run_config(args)
    records, vocab = load_corpus(args.manifest)
    base_dir = Path(args.manifest).parent
    model, vocab_ckpt = _load_checkpoint_model(args.base)
    if vocab_ckpt != vocab:
        raise DataError("checkpoint vocabulary does not match the corpus vocabulary")
    history = pipeline.train_delib(model, records, run, base_dir)
    model.save(args.out, {
        "vocab": json.dumps({"symbols": vocab.symbols}),
        "stage": "deliberation",
        "run_config": json.dumps(run.to_dict(), sort_keys=True),
    })
    print(f"final loss {history[-1]:.4f}; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    run = _run_config(args)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise DataError(f"manifest {args.manifest} does not exist")
    records = load_manifest(manifest_path)
    model, vocab = _load_checkpoint_model(args.checkpoint)
    vocab_file = manifest_path.parent / VOCAB_FILENAME
    if vocab_file.exists() and Vocabulary.load(vocab_file) != vocab:
        raise DataError("checkpoint vocabulary does not match the corpus vocabulary")
    base_dir = manifest_path.parent
    entries, traces = pipeline.decode_records(
        model, records, vocab, run.beam, base_dir,
        collect_trace=bool(args.trace), log=lambda msg: print(msg, file=sys.stderr),
    )
    with open(args.out, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
    if args.trace:
        with open(args.trace, "w") as fh:
            for record in traces:
                fh.write(json.dumps(record) + "\n")
    decoded = sum(1 for e in entries if "error" not in e)
    print(f"decoded {decoded}/{len(records)} utterances to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    run = _run_config(args)
    records, vocab = load_corpus(args.manifest)
    entries = []
    try:
        for line in Path(args.hyps).read_text().splitlines():
            if line.strip():
                entries.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read hypotheses {args.hyps}: {err}") from err
    report = pipeline.evaluate_hypotheses(
        records, entries, vocab, frame_ms=run.frame_ms, slice_threshold_s=run.slice_threshold_s
    )
    report["config"] = run.to_dict()
    text = pipeline.format_report(report)
    report_path = Path(args.report)
    report_path.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    report_path.with_suffix(".txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-base": _cmd_train_base,
    "train-delib": _cmd_train_delib,
    "decode": _cmd_decode,
    "evaluate": _cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
