"""WER and emission-delay statistics, plus duration-sliced reporting.

WER is word-level Levenshtein with unit costs, aggregated over counts (not
per-utterance rates). Emission delay is the time from a token's spoken end
to its decoded emission; delays are measured only for correctly recognized
tokens, matched by the same alignment machinery WER uses. Percentiles are
nearest-rank so results reproduce exactly everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ContractError, DataError

__all__ = [
    "EditCounts",
    "edit_align",
    "edit_counts",
    "WerReport",
    "wer",
    "nearest_rank_percentile",
    "DelayReport",
    "token_delays",
    "emission_delays",
    "sliced_wer",
]


@dataclass
class EditCounts:
    matches: int = 0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimum-edit alignment as (op, ref_index, hyp_index) steps.

    Ops are "match", "sub", "del" (ref only), "ins" (hyp only). Ties prefer
    the diagonal, then deletion, so the alignment is deterministic.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            cost = 0 if r == hyp[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)
    steps: list[tuple[str, int | None, int | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if dist[i][j] == dist[i - 1][j - 1] + cost:
                steps.append(("match" if cost == 0 else "sub", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            steps.append(("del", i - 1, None))
            i -= 1
            continue
        steps.append(("ins", None, j - 1))
        j -= 1
    steps.reverse()
    return steps


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    counts = EditCounts()
    for op, _, _ in edit_align(ref, hyp):
        if op == "match":
            counts.matches += 1
        elif op == "sub":
            counts.substitutions += 1
        elif op == "del":
            counts.deletions += 1
        else:
            counts.insertions += 1
    return counts


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0
    hyp_words: int = 0
    n_utts: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float | None:
        if self.ref_words == 0:
            return None
        return self.errors / self.ref_words

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_words": self.ref_words,
            "hyp_words": self.hyp_words,
            "n_utts": self.n_utts,
        }


def wer(ref_texts: Sequence[str], hyp_texts: Sequence[str]) -> WerReport:
    """Corpus WER over whitespace-split words; counts aggregate across utterances."""
    if len(ref_texts) == 0:
        raise DataError("empty reference corpus")
    if len(ref_texts) != len(hyp_texts):
        raise DataError(f"got {len(ref_texts)} references but {len(hyp_texts)} hypotheses")
    report = WerReport(n_utts=len(ref_texts))
    for ref_text, hyp_text in zip(ref_texts, hyp_texts):
        ref_words = ref_text.split()
        hyp_words = hyp_text.split()
        counts = edit_counts(ref_words, hyp_words)
        report.substitutions += counts.substitutions
        report.insertions += counts.insertions
        report.deletions += counts.deletions
        report.ref_words += len(ref_words)
        report.hyp_words += len(hyp_words)
    if report.ref_words == 0:
        raise DataError("reference corpus contains no words")
    return report


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not values:
        raise ContractError("percentile of an empty list")
    if not 0.0 < pct <= 100.0:
        raise ContractError(f"percentile {pct} outside (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class DelayReport:
    """Per-token emission delays in milliseconds with avg/P95/P99 summaries."""

    delays: list[float] = field(default_factory=list)
    frame_ms: float = 40.0

    @property
    def empty(self) -> bool:
        return not self.delays

    @property
    def n_tokens(self) -> int:
        return len(self.delays)

    @property
    def avg(self) -> float | None:
        return sum(self.delays) / len(self.delays) if self.delays else None

    @property
    def p95(self) -> float | None:
        return nearest_rank_percentile(self.delays, 95.0) if self.delays else None

    @property
    def p99(self) -> float | None:
        return nearest_rank_percentile(self.delays, 99.0) if self.delays else None

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "avg_ms": self.avg,
            "p95_ms": self.p95,
            "p99_ms": self.p99,
            "frame_ms": self.frame_ms,
            "empty": self.empty,
        }


def token_delays(
    ref_tokens: Sequence[int],
    ref_frames: Sequence[int],
    hyp_tokens: Sequence[int],
    emit_frames: Sequence[int],
    frame_ms: float = 40.0,
) -> list[float]:
    """Delays for correctly recognized tokens of one utterance.

    A matched token's delay is (emit_frame - reference_frame) * frame_ms,
    both measured at the end of their frames. Substituted and inserted
    tokens have no spoken-time reference and are skipped.
    """
    if len(ref_tokens) != len(ref_frames):
        raise DataError("reference tokens and alignment frames differ in length")
    if len(hyp_tokens) != len(emit_frames):
        raise DataError("hypothesis tokens and emission frames differ in length")
    delays = []
    for op, i, j in edit_align(list(ref_tokens), list(hyp_tokens)):
        if op == "match":
            delays.append((emit_frames[j] - ref_frames[i]) * frame_ms)
    return delays


def emission_delays(
    utterances: Iterable[tuple[Sequence[int], Sequence[int], Sequence[int], Sequence[int]]],
    frame_ms: float = 40.0,
) -> DelayReport:
    """Aggregate delay report over (ref_tokens, ref_frames, hyp_tokens, emit_frames) tuples.

    An empty report (no matched tokens anywhere) is returned flagged rather
    than raising, so callers can surface it in summaries.
    """
    report = DelayReport(frame_ms=frame_ms)
    for ref_tokens, ref_frames, hyp_tokens, emit_frames in utterances:
        report.delays.extend(token_delays(ref_tokens, ref_frames, hyp_tokens, emit_frames, frame_ms))
    return report


def sliced_wer(
    items: Iterable[tuple[str, str, float]],
    threshold_s: float = 3.0,
) -> dict[str, WerReport]:
    """WER split by utterance duration: at most ``threshold_s`` vs longer."""
    short: list[tuple[str, str]] = []
    long_: list[tuple[str, str]] = []
    for ref_text, hyp_text, duration_s in items:
        (short if duration_s <= threshold_s else long_).append((ref_text, hyp_text))

    def _report(pairs: list[tuple[str, str]]) -> WerReport:
        if not pairs:
            return WerReport()
        return wer([r for r, _ in pairs], [h for _, h in pairs])

    return {"short": _report(short), "long": _report(long_)}
