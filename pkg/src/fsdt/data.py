"""Tokenization, masking, corpus formats, and the synthetic corpus generator.

The feature file format is a small binary container (magic ``FSFT``), the
manifest is one JSON record per line, and the vocabulary lives in a sibling
``vocab.json`` so token ids stay stable between training and decoding runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, FormatError

BLANK_ID = 0
BOS_ID = 1
BLANK_TOKEN = "<blank>"
BOS_TOKEN = "<bos>"

FEATURE_MAGIC = b"FSFT"
FEATURE_VERSION = 1

VOCAB_FILENAME = "vocab.json"


class Vocabulary:
    """Bijective symbol/id mapping; id 0 is blank (and the mask), id 1 is BOS."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(symbols) < 3:
            raise DataError("vocabulary needs blank, BOS, and at least one real symbol")
        if symbols[BLANK_ID] != BLANK_TOKEN or symbols[BOS_ID] != BOS_TOKEN:
            raise DataError(f"symbols must start with {BLANK_TOKEN!r}, {BOS_TOKEN!r}")
        if len(set(symbols)) != len(symbols):
            raise DataError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self._ids = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def from_characters(cls, chars: Iterable[str]) -> "Vocabulary":
        return cls([BLANK_TOKEN, BOS_TOKEN, *chars])

    @property
    def size(self) -> int:
        return len(self.symbols)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            if ch not in self._ids:
                raise DataError(f"character {ch!r} is not in the vocabulary")
            ids.append(self._ids[ch])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        chars = []
        for i in ids:
            if not BOS_ID < i < self.size:
                raise DataError(f"token id {i} is not a writable symbol")
            chars.append(self.symbols[i])
        return "".join(chars)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"symbols": self.symbols}) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise DataError(f"cannot read vocabulary {path}: {err}") from err
        return cls(payload["symbols"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols


def mask_tokens(tokens: Sequence[int], p: float, rng: np.random.Generator) -> list[int]:
    """Independently replace each token with the blank id with probability p.

    Training-time augmentation only; length is always preserved.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"mask probability {p} outside [0, 1]")
    if p == 0.0 or not tokens:
        return list(tokens)
    draws = rng.random(len(tokens)) < p
    return [BLANK_ID if hit else tok for tok, hit in zip(tokens, draws)]


def truncate_hypothesis(tokens: Sequence[int], max_len: int) -> list[int]:
    """Keep the most recent ``max_len`` tokens."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    return list(tokens[-max_len:])


# ---------------------------------------------------------------------------
# Feature files


def write_feature_file(path, features: np.ndarray) -> None:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"features must be a non-empty [T, F] matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f8").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad feature magic {magic!r} at offset 0 in {path}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"truncated feature header in {path}: expected 12 bytes, got {len(header)}")
        version, n_frames, n_dims = struct.unpack("<III", header)
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature version {version} in {path}")
        if n_frames == 0:
            raise FormatError(f"empty utterance (0 frames) in {path}")
        expected = 8 * n_frames * n_dims
        raw = fh.read(expected + 1)
        if len(raw) < expected:
            raise FormatError(
                f"truncated feature data in {path}: expected {expected} bytes, got {len(raw)}"
            )
        if len(raw) > expected:
            raise FormatError(f"trailing bytes after feature data in {path}")
    return np.frombuffer(raw[:expected], dtype="<f8").astype(np.float64).reshape(n_frames, n_dims)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class UtteranceRecord:
    utt_id: str
    features: "str | np.ndarray"
    transcript: list[int]
    alignment: list[int] | None = None

    def __post_init__(self):
        if BLANK_ID in self.transcript or BOS_ID in self.transcript:
            raise DataError(f"{self.utt_id}: reference transcript contains a reserved token id")
        if self.alignment is not None:
            if len(self.alignment) != len(self.transcript):
                raise DataError(f"{self.utt_id}: alignment length does not match transcript")
            if any(b < a for a, b in zip(self.alignment, self.alignment[1:])):
                raise DataError(f"{self.utt_id}: alignment frames must be nondecreasing")
            if self.alignment and self.alignment[0] < 0:
                raise DataError(f"{self.utt_id}: negative alignment frame")

    def load_features(self, base_dir=None) -> np.ndarray:
        if isinstance(self.features, np.ndarray):
            return self.features
        path = Path(self.features)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return read_feature_file(path)


def save_manifest(path, records: Sequence[UtteranceRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            if not isinstance(rec.features, str):
                raise DataError(f"{rec.utt_id}: manifest records must reference feature files by path")
            row = {"id": rec.utt_id, "features": rec.features, "transcript": rec.transcript}
            if rec.alignment is not None:
                row["alignment"] = rec.alignment
            fh.write(json.dumps(row) + "\n")


def load_manifest(path) -> list[UtteranceRecord]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise DataError(f"cannot read manifest {path}: {err}") from err
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            records.append(
                UtteranceRecord(
                    utt_id=row["id"],
                    features=row["features"],
                    transcript=list(row["transcript"]),
                    alignment=list(row["alignment"]) if row.get("alignment") is not None else None,
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise DataError(f"bad manifest record at {path}:{lineno}: {err}") from err
    return records


def load_corpus(manifest_path) -> tuple[list[UtteranceRecord], Vocabulary]:
    """Load a manifest plus the vocabulary stored next to it."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    vocab = Vocabulary.load(manifest_path.parent / VOCAB_FILENAME)
    return records, vocab


# ---------------------------------------------------------------------------
# Synthetic corpus generator


@dataclass
class SynthConfig:
    """Controls for the synthetic corpus.

    Each symbol (including the space) gets a fixed template feature vector;
    an utterance repeats its tokens' templates ``frames_per_token`` times and
    adds Gaussian noise, so ground-truth per-token alignments exist by
    construction. ``template_seed`` is separate from ``seed`` so held-out
    sets can share the acoustic inventory while varying the utterances.
    ``confusion_pair`` copies one symbol's template onto another, making the
    two acoustically identical; transcripts then must disambiguate them.
    """

    n_utts: int = 200
    n_symbols: int = 12
    min_tokens: int = 5
    max_tokens: int = 20
    frames_per_token: int = 3
    feature_dim: int = 8
    noise_std: float = 0.1
    seed: int = 0
    template_seed: int = 1234
    lexicon: tuple[str, ...] | None = None
    confusion_pair: tuple[str, str] | None = None

    def __post_init__(self):
        if self.n_symbols < 2:
            raise ContractError("need at least two symbols (space plus one letter)")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ContractError("bad token count range")
        if self.frames_per_token < 1:
            raise ContractError("frames_per_token must be >= 1")

    def characters(self) -> list[str]:
        letters = "abcdefghijklmnopqrstuvwxyz"
        if self.n_symbols - 1 > len(letters):
            raise ContractError("too many symbols requested")
        return [" "] + list(letters[: self.n_symbols - 1])


def _random_words(rng: np.random.Generator, cfg: SynthConfig, letters: list[str]) -> str:
    target = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    words: list[str] = []
    total = 0
    while total < target:
        if cfg.lexicon is not None:
            word = cfg.lexicon[int(rng.integers(len(cfg.lexicon)))]
        else:
            length = int(rng.integers(2, 6))
            word = "".join(letters[int(rng.integers(len(letters)))] for _ in range(length))
        extra = len(word) + (1 if words else 0)
        if words and total + extra > cfg.max_tokens:
            break
        words.append(word)
        total += extra
    return " ".join(words)


def make_templates(cfg: SynthConfig, vocab: Vocabulary) -> np.ndarray:
    """Per-symbol feature templates indexed by vocabulary id."""
    rng = np.random.default_rng(cfg.template_seed)
    templates = np.zeros((vocab.size, cfg.feature_dim))
    templates[BOS_ID + 1 :] = rng.normal(size=(vocab.size - 2, cfg.feature_dim))
    if cfg.confusion_pair is not None:
        src, dst = cfg.confusion_pair
        templates[vocab.tokenize(dst)[0]] = templates[vocab.tokenize(src)[0]]
    return templates


def synthesize_corpus(cfg: SynthConfig) -> tuple[list[UtteranceRecord], Vocabulary, np.ndarray]:
    """Build an in-memory corpus: records with inline features, vocab, templates."""
    vocab = Vocabulary.from_characters(cfg.characters())
    templates = make_templates(cfg, vocab)
    rng = np.random.default_rng(cfg.seed)
    letters = cfg.characters()[1:]
    records = []
    for i in range(cfg.n_utts):
        text = _random_words(rng, cfg, letters)
        ids = vocab.tokenize(text)
        base = np.repeat(templates[ids], cfg.frames_per_token, axis=0)
        noise = cfg.noise_std * rng.normal(size=base.shape) if cfg.noise_std > 0 else 0.0
        records.append(
            UtteranceRecord(
                utt_id=f"utt{i:05d}",
                features=base + noise,
                transcript=ids,
                alignment=[u * cfg.frames_per_token for u in range(len(ids))],
            )
        )
    return records, vocab, templates


def generate_synthetic_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Write a corpus directory (manifest.jsonl, vocab.json, feats/) and return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    records, vocab, _ = synthesize_corpus(cfg)
    on_disk = []
    for rec in records:
        rel = f"feats/{rec.utt_id}.fsft"
        write_feature_file(out_dir / rel, rec.features)
        on_disk.append(
            UtteranceRecord(rec.utt_id, rel, list(rec.transcript), list(rec.alignment))
        )
    manifest = out_dir / "manifest.jsonl"
    save_manifest(manifest, on_disk)
    vocab.save(out_dir / VOCAB_FILENAME)
    return manifest
