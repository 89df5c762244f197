"""Beam search for the fast-slow transducer, with deliberation and latency bookkeeping.

The decoder interleaves two frame-synchronous beam searches over one shared
search space. The fast search runs once per chunk. Its output embeddings
accumulate until a slow segment completes; the slow encoder then re-encodes
the whole segment, the current fast 1-best partial hypothesis is encoded and
merged into those embeddings, and the slow search re-decodes the segment's
frames starting from the slow beam left by the previous segment. The fast
beam is replaced by the slow result, so later fast chunks continue from the
rescored hypotheses. The final answer maximizes length-normalized log
probability over the last slow beam.

Hypotheses with identical token sequences are merged by log-sum-exp, so with
a beam at least as large as the number of distinct sequences the search is
exact marginal decoding. Tie-breaking is always score descending, then
length ascending, then lexicographic, which makes decoding deterministic.

Emission timestamps are kept at call granularity: a token is stamped with
the index of the last frame the emitting beam-search call had consumed
(chunk end for fast calls, segment end for slow calls). Tokens already in a
surviving hypothesis keep their stamps; only tokens written by the current
call are stamped, and a slow-branch rewrite therefore re-stamps exactly the
tokens it writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import BLANK_ID, BOS_ID
from .errors import ContractError, DimensionError
from .layers import EncoderState
from .model import FastSlowTransducer
from .tensor import Tensor, log_softmax, no_grad

__all__ = [
    "Hypothesis",
    "BeamConfig",
    "SearchSpace",
    "ModelSearchSpace",
    "TableSearchSpace",
    "StreamState",
    "DecodeResult",
    "beam_search_segment",
    "greedy_search",
    "get_best_hypo",
    "finalize",
    "parallel_beam_search",
    "fast_partial_hypotheses",
    "fast_only_beam_search",
]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    predictor_state: object
    predictor_out: object
    emit_times: tuple[int, ...]

    def key(self) -> tuple[int, ...]:
        return self.tokens


def _sort_key(h: Hypothesis):
    return (-h.log_prob, len(h.tokens), h.tokens)


def _norm_score(h: Hypothesis) -> float:
    return h.log_prob / max(len(h.tokens), 1)


@dataclass
class BeamConfig:
    fast_segment_frames: int = 0   # 0 = take from the model config
    slow_segment_frames: int = 0   # 0 = fast_segment_frames * slow chunk factor
    fast_beam: int = 10
    slow_beam: int = 10
    max_symbols_per_frame: int = 4

    def validate(self) -> None:
        if self.fast_beam < 1 or self.slow_beam < 1:
            raise ContractError("beam sizes must be >= 1")
        if self.fast_segment_frames < 1:
            raise ContractError("fast_segment_frames must be >= 1")
        if self.slow_segment_frames < self.fast_segment_frames or (
            self.slow_segment_frames % self.fast_segment_frames != 0
        ):
            raise ContractError("slow segment must be a positive multiple of the fast segment")
        if self.max_symbols_per_frame < 1:
            raise ContractError("max_symbols_per_frame must be >= 1")

    def resolved_for(self, model: FastSlowTransducer) -> "BeamConfig":
        cfg = replace(self)
        cfg.fast_segment_frames = cfg.fast_segment_frames or model.cfg.fast_chunk_frames
        cfg.slow_segment_frames = cfg.slow_segment_frames or (
            cfg.fast_segment_frames * model.cfg.slow_chunk_factor
        )
        cfg.validate()
        if cfg.fast_segment_frames != model.cfg.fast_chunk_frames:
            raise ContractError(
                f"fast segment {cfg.fast_segment_frames} does not match the model chunk size "
                f"{model.cfg.fast_chunk_frames}"
            )
        if cfg.slow_segment_frames != model.cfg.slow_chunk_frames:
            raise ContractError(
                f"slow segment {cfg.slow_segment_frames} does not match the model segment size "
                f"{model.cfg.slow_chunk_frames}"
            )
        return cfg


class SearchSpace:
    """Scoring interface shared by the fast and slow searches.

    Holding the predictor and joiner in one place is what makes hypotheses
    from either branch directly rescoreable by the other.
    """

    vocab_size: int
    blank_id: int = BLANK_ID

    def labels(self) -> tuple[int, ...]:
        """Token ids the search may emit (blank and sentinels excluded)."""
        return tuple(v for v in range(self.vocab_size) if v != self.blank_id)

    def initial_hypothesis(self) -> Hypothesis:
        raise NotImplementedError

    def log_probs(self, frame, hyps: Sequence[Hypothesis]) -> np.ndarray:
        """[len(hyps), vocab_size] log distributions for one frame."""
        raise NotImplementedError

    def advance(self, hyp: Hypothesis, token: int) -> tuple[object, object]:
        """Predictor state and output after appending ``token`` to ``hyp``."""
        raise NotImplementedError


class ModelSearchSpace(SearchSpace):
    """Search space backed by a model's shared predictor and joiner."""

    def __init__(self, model: FastSlowTransducer):
        self.model = model
        self.vocab_size = model.cfg.vocab_size
        with no_grad():
            out, state = model.predictor_init()
        self._init_out = out.data[0].copy()
        self._init_state = state
        # predictor state is a pure function of the token sequence, so steps
        # can be memoized for the lifetime of one decoding session
        self._advance_memo: dict[tuple[int, ...], tuple[object, object]] = {}

    def labels(self) -> tuple[int, ...]:
        # the BOS sentinel is internal and never written to a transcript
        return tuple(v for v in range(self.vocab_size) if v not in (self.blank_id, BOS_ID))

    def initial_hypothesis(self) -> Hypothesis:
        return Hypothesis(
            tokens=(),
            log_prob=0.0,
            predictor_state=self._init_state,
            predictor_out=self._init_out,
            emit_times=(),
        )

    def log_probs(self, frame: np.ndarray, hyps: Sequence[Hypothesis]) -> np.ndarray:
        with no_grad():
            enc = Tensor(np.asarray(frame).reshape(1, -1))
            pred = Tensor(np.stack([h.predictor_out for h in hyps]))
            logits = self.model.joiner_forward(enc, pred)
            return log_softmax(logits, axis=-1).data

    def advance(self, hyp: Hypothesis, token: int) -> tuple[object, object]:
        key = hyp.tokens + (token,)
        cached = self._advance_memo.get(key)
        if cached is None:
            with no_grad():
                out, state = self.model.predictor_step(token, hyp.predictor_state)
            cached = (state, out.data[0].copy())
            self._advance_memo[key] = cached
        return cached


class TableSearchSpace(SearchSpace):
    """Lookup-table joiner for tests and demos.

    ``table(frame_index, tokens)`` must return a length-V vector of log
    probabilities. Frames are plain integer indices.
    """

    def __init__(self, vocab_size: int, table: Callable[[int, tuple[int, ...]], np.ndarray]):
        self.vocab_size = vocab_size
        self.table = table

    def initial_hypothesis(self) -> Hypothesis:
        return Hypothesis((), 0.0, None, None, ())

    def log_probs(self, frame: int, hyps: Sequence[Hypothesis]) -> np.ndarray:
        return np.stack([np.asarray(self.table(int(frame), h.tokens)) for h in hyps])

    def advance(self, hyp: Hypothesis, token: int) -> tuple[object, object]:
        return None, None


# ---------------------------------------------------------------------------
# Frame-synchronous beam search over one segment


def _merge_hypothesis(pool: dict, hyp: Hypothesis) -> None:
    """Merge by token sequence: log-sum-exp scores, metadata from the stronger side."""
    prev = pool.get(hyp.tokens)
    if prev is None:
        pool[hyp.tokens] = hyp
        return
    merged_lp = float(np.logaddexp(prev.log_prob, hyp.log_prob))
    keep = prev if prev.log_prob >= hyp.log_prob else hyp
    pool[hyp.tokens] = replace(keep, log_prob=merged_lp)


def _top_n(pool: dict, n: int) -> dict:
    ranked = sorted(pool.values(), key=_sort_key)[:n]
    return {h.tokens: h for h in ranked}


def beam_search_segment(
    frames,
    beam: Sequence[Hypothesis],
    n_beam: int,
    space: SearchSpace,
    *,
    emit_stamp: int = 0,
    max_symbols: int = 4,
) -> list[Hypothesis]:
    """Frame-synchronous transducer beam search over a span of frames.

    Per frame, every hypothesis may close the frame with a blank or extend
    with up to ``max_symbols`` tokens (re-querying the predictor per token).
    The returned beam holds the ``n_beam`` best sequences by log probability.
    Tokens appended during this call are stamped with ``emit_stamp``.
    """
    if n_beam < 1:
        raise ContractError("beam size must be >= 1")
    if not beam:
        raise ContractError("beam must be seeded with at least the empty hypothesis")
    labels = space.labels()
    current: dict[tuple[int, ...], Hypothesis] = {}
    for hyp in beam:
        _merge_hypothesis(current, hyp)

    for frame in frames:
        finished: dict[tuple[int, ...], Hypothesis] = {}
        level = current
        for depth in range(max_symbols + 1):
            if not level:
                break
            hyps = list(level.values())
            log_rows = space.log_probs(frame, hyps)
            if log_rows.shape != (len(hyps), space.vocab_size):
                raise DimensionError(
                    f"search space returned shape {log_rows.shape}, expected "
                    f"{(len(hyps), space.vocab_size)}"
                )
            candidates: dict[tuple[int, ...], list] = {}
            for hyp, row in zip(hyps, log_rows):
                closed = replace(hyp, log_prob=hyp.log_prob + float(row[space.blank_id]))
                assert closed.log_prob <= 1e-9, "scores must stay true log-probabilities"
                _merge_hypothesis(finished, closed)
                if depth == max_symbols:
                    continue
                for tok in labels:
                    lp = hyp.log_prob + float(row[tok])
                    seq = hyp.tokens + (tok,)
                    entry = candidates.get(seq)
                    if entry is None:
                        candidates[seq] = [lp, lp, hyp, tok]
                    else:
                        entry[0] = float(np.logaddexp(entry[0], lp))
                        if lp > entry[1]:
                            entry[1], entry[2], entry[3] = lp, hyp, tok
            if not candidates:
                break
            ranked = sorted(
                candidates.items(), key=lambda kv: (-kv[1][0], len(kv[0]), kv[0])
            )[:n_beam]
            level = {}
            for seq, (lp, _, parent, tok) in ranked:
                state, out = space.advance(parent, tok)
                level[seq] = Hypothesis(
                    tokens=seq,
                    log_prob=lp,
                    predictor_state=state,
                    predictor_out=out,
                    emit_times=parent.emit_times + (emit_stamp,),
                )
        current = _top_n(finished, n_beam)
    return sorted(current.values(), key=_sort_key)


def greedy_search(frames, space: SearchSpace, *, emit_stamp: int = 0,
                  max_symbols: int = 4) -> Hypothesis:
    """Greedy decoding, defined as beam search with a beam of one."""
    beam = beam_search_segment(
        frames, [space.initial_hypothesis()], 1, space,
        emit_stamp=emit_stamp, max_symbols=max_symbols,
    )
    return beam[0]


def get_best_hypo(beam: Sequence[Hypothesis]) -> list[int]:
    """Tokens of the highest log-probability hypothesis (no length normalization)."""
    if not beam:
        raise ContractError("cannot take the best hypothesis of an empty beam")
    return list(min(beam, key=_sort_key).tokens)


def finalize(beam: Sequence[Hypothesis]) -> Hypothesis:
    """Length-normalized selection; the empty hypothesis counts one token."""
    if not beam:
        raise ContractError("cannot finalize an empty beam")
    return min(beam, key=lambda h: (-_norm_score(h), len(h.tokens), h.tokens))


# ---------------------------------------------------------------------------
# Parallel beam search with deliberation


@dataclass
class StreamState:
    """Everything a decoding session carries between chunks."""

    fast_state: EncoderState
    slow_state: EncoderState
    pending_fast: list[Tensor] = field(default_factory=list)
    y_partial: list[int] = field(default_factory=list)


@dataclass
class DecodeResult:
    tokens: list[int]
    emit_frames: list[int]
    log_prob: float
    norm_score: float
    final_beam: list[Hypothesis]
    trace: list[dict]
    n_fast_calls: int
    n_slow_calls: int
    n_delib_calls: int


def _beam_snapshot(beam: Sequence[Hypothesis]) -> list[dict]:
    return [
        {"tokens": list(h.tokens), "log_prob": h.log_prob, "emit_times": list(h.emit_times)}
        for h in beam
    ]


def parallel_beam_search(
    features,
    model: FastSlowTransducer,
    cfg: BeamConfig,
    *,
    collect_trace: bool = False,
    use_deliberation: bool = True,
) -> DecodeResult:
    """Decode one utterance with interleaved fast and slow beam searches.

    Chunk loop: encode a fast chunk, run the fast search over it, and stash
    the embeddings. When a slow segment completes (or the utterance ends),
    snapshot the fast 1-best as the partial hypothesis, encode the segment
    with the slow encoder, fuse in the encoded partial hypothesis, run the
    slow search, and hand the slow beam back to the fast branch.

    ``use_deliberation=False`` skips the text encoding and merge entirely,
    decoding the plain fast-slow model; with zero-initialized merge outputs
    both modes produce identical results.
    """
    cfg = cfg.resolved_for(model)
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError(f"features must be [T, F], got shape {feats.shape}")
    T = feats.shape[0]
    chunk = cfg.fast_segment_frames
    factor = cfg.slow_segment_frames // cfg.fast_segment_frames
    look = model.cfg.lookahead_frames
    space = ModelSearchSpace(model)

    fast_state, slow_state = model.initial_states()
    stream = StreamState(fast_state=fast_state, slow_state=slow_state)
    beam_fast = [space.initial_hypothesis()]
    beam_slow = [space.initial_hypothesis()]
    trace: list[dict] = []
    n_fast = n_slow = n_delib = 0
    n_chunks = (T + chunk - 1) // chunk

    with no_grad():
        for ci in range(n_chunks):
            start = ci * chunk
            end = min(start + chunk, T)
            stop = min(end + look, T)
            e_fast, stream.fast_state = model.encode_fast_chunk(
                Tensor(feats[start:stop]), stream.fast_state,
                chunk_len=end - start, start_frame=start,
            )
            beam_fast = beam_search_segment(
                e_fast.data, beam_fast, cfg.fast_beam, space,
                emit_stamp=end - 1, max_symbols=cfg.max_symbols_per_frame,
            )
            n_fast += 1
            if collect_trace:
                trace.append(
                    {
                        "call": "fast",
                        "frame_begin": start,
                        "frame_end": end,
                        "beam": _beam_snapshot(beam_fast),
                    }
                )
            boundary = (ci + 1) % factor == 0 or ci == n_chunks - 1
            stream.pending_fast.append(e_fast)
            if not boundary:
                continue

            # Partial hypothesis is snapshotted right after the fast search of
            # the chunk that completes the segment, just before the slow pass.
            stream.y_partial = get_best_hypo(beam_fast)
            segment = (
                stream.pending_fast[0]
                if len(stream.pending_fast) == 1
                else Tensor(np.concatenate([t.data for t in stream.pending_fast], axis=0))
            )
            seg_start = end - segment.shape[0]
            e_slow, stream.slow_state = model.encode_slow_segment(segment, stream.slow_state)
            if use_deliberation:
                e_text = model.encode_deliberation_text(stream.y_partial)
                e_comb = model.merge_forward(e_slow, e_text)
                n_delib += 1
                if collect_trace:
                    trace.append(
                        {
                            "call": "deliberation",
                            "frame_begin": seg_start,
                            "frame_end": end,
                            "y_partial": list(stream.y_partial),
                            "text_rows": e_text.shape[0],
                        }
                    )
            else:
                e_comb = e_slow
            beam_slow = beam_search_segment(
                e_comb.data, beam_slow, cfg.slow_beam, space,
                emit_stamp=end - 1, max_symbols=cfg.max_symbols_per_frame,
            )
            n_slow += 1
            if collect_trace:
                trace.append(
                    {
                        "call": "slow",
                        "frame_begin": seg_start,
                        "frame_end": end,
                        "y_partial": list(stream.y_partial),
                        "beam": _beam_snapshot(beam_slow),
                    }
                )
            stream.pending_fast = []
            beam_fast = list(beam_slow)

    best = finalize(beam_slow)
    return DecodeResult(
        tokens=list(best.tokens),
        emit_frames=list(best.emit_times),
        log_prob=best.log_prob,
        norm_score=_norm_score(best),
        final_beam=list(beam_slow),
        trace=trace,
        n_fast_calls=n_fast,
        n_slow_calls=n_slow,
        n_delib_calls=n_delib,
    )


def fast_partial_hypotheses(
    e_fast: np.ndarray,
    model: FastSlowTransducer,
    segments: Sequence[tuple[int, int]],
    *,
    beam_size: int = 1,
    max_symbols: int = 4,
) -> list[list[int]]:
    """Fast-branch partial hypotheses at each segment boundary.

    Used during joint training: the fast branch is decoded incrementally
    (beam of one by default) and the 1-best prefix is captured after each
    segment's last frame, mirroring what streaming decoding will see.
    """
    space = ModelSearchSpace(model)
    beam = [space.initial_hypothesis()]
    partials: list[list[int]] = []
    for start, end in segments:
        beam = beam_search_segment(
            e_fast[start:end], beam, beam_size, space,
            emit_stamp=end - 1, max_symbols=max_symbols,
        )
        partials.append(get_best_hypo(beam))
    return partials


def fast_only_beam_search(
    features,
    model: FastSlowTransducer,
    *,
    beam_size: int = 10,
    max_symbols: int = 4,
) -> DecodeResult:
    """Decode with the fast branch alone (no slow rescoring, no deliberation).

    A reference point for latency comparisons: emission stamps come from the
    fast chunk calls only.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    T = feats.shape[0]
    chunk = model.cfg.fast_chunk_frames
    look = model.cfg.lookahead_frames
    space = ModelSearchSpace(model)
    beam = [space.initial_hypothesis()]
    state = model.fast_encoder.initial_state()
    n_chunks = (T + chunk - 1) // chunk
    with no_grad():
        for ci in range(n_chunks):
            start = ci * chunk
            end = min(start + chunk, T)
            stop = min(end + look, T)
            e_fast, state = model.encode_fast_chunk(
                Tensor(feats[start:stop]), state, chunk_len=end - start, start_frame=start
            )
            beam = beam_search_segment(
                e_fast.data, beam, beam_size, space, emit_stamp=end - 1, max_symbols=max_symbols
            )
    best = finalize(beam)
    return DecodeResult(
        tokens=list(best.tokens),
        emit_frames=list(best.emit_times),
        log_prob=best.log_prob,
        norm_score=_norm_score(best),
        final_beam=list(beam),
        trace=[],
        n_fast_calls=n_chunks,
        n_slow_calls=0,
        n_delib_calls=0,
    )
