"""Shared oracles and checking utilities for the test suite.

Oracles here are deliberately independent of the library's fast paths:
finite differences for gradients, exhaustive path enumeration for lattice
losses and beam search, and brute-force scoring for percentiles.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from fsdt.tensor import Tensor, backward, reset_tape


def rel_err(a, b) -> float:
    """Elementwise relative error with an absolute floor.

    Entries near zero are compared absolutely (scaled by the floor): some
    gradients are exactly zero by symmetry (e.g. a key bias shifts every
    attention score in a row equally), where finite differences return pure
    roundoff noise and a strict relative error would be meaningless.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_grad(fn, tensors: list[Tensor], h: float = 1e-5,
                     max_entries: int | None = None,
                     rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Central finite differences of scalar fn() w.r.t. each tensor's entries.

    ``fn`` must recompute the scalar from the tensors' current data. When
    ``max_entries`` is set, only a random subset of entries per tensor is
    probed; unprobed entries are returned as NaN so callers can mask them.
    """
    grads = []
    for t in tensors:
        g = np.full(t.data.shape, np.nan)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            assert rng is not None
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def tape_grads(loss_fn, tensors: list[Tensor]) -> list[np.ndarray]:
    """Analytic gradients of scalar loss_fn() via the tape."""
    reset_tape()
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    out = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    reset_tape()
    for t in tensors:
        t.grad = None
    return out


def check_grads(loss_fn, tensors, h=1e-5, tol=1e-5, max_entries=None, rng=None) -> float:
    """Compare analytic and finite-difference gradients; return the rel error."""
    analytic = tape_grads(loss_fn, tensors)

    def value():
        reset_tape()
        v = loss_fn().item()
        reset_tape()
        return v

    numeric = finite_diff_grad(value, tensors, h=h, max_entries=max_entries, rng=rng)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if mask.any():
            worst = max(worst, rel_err(a[mask], n[mask]))
    assert worst < tol, f"gradient mismatch: rel err {worst} >= {tol}"
    return worst


# ---------------------------------------------------------------------------
# Transducer loss oracles


def enumerate_paths_logprob(log_probs: np.ndarray, targets: list[int],
                            windows: list[tuple[int, int]] | None = None) -> float:
    """Exhaustive path enumeration of the transducer log-likelihood.

    A path assigns each target token an emission frame (nondecreasing);
    blanks fill every frame, including the terminating blank on the last
    frame. ``windows`` optionally restricts token u's emission frame to
    [lo_u, hi_u] inclusive.
    """
    T, U1, _ = log_probs.shape
    U = len(targets)
    assert U1 == U + 1
    total = -math.inf
    for emit_frames in itertools.combinations_with_replacement(range(T), U):
        if windows is not None and any(
            not (lo <= f <= hi) for f, (lo, hi) in zip(emit_frames, windows)
        ):
            continue
        logp = 0.0
        for u, frame in enumerate(emit_frames):
            logp += log_probs[frame, u, targets[u]]
        for t in range(T):
            consumed = sum(1 for f in emit_frames if f <= t)
            logp += log_probs[t, consumed, 0]
        total = np.logaddexp(total, logp)
    return float(total)


def single_path_logprob(log_probs: np.ndarray, targets: list[int],
                        emit_frames: list[int]) -> float:
    """Log-probability of one fully specified alignment path."""
    logp = 0.0
    for u, frame in enumerate(emit_frames):
        logp += log_probs[frame, u, targets[u]]
    T = log_probs.shape[0]
    for t in range(T):
        consumed = sum(1 for f in emit_frames if f <= t)
        logp += log_probs[t, consumed, 0]
    return float(logp)


def random_lattice(rng: np.random.Generator, T: int, U: int, V: int) -> np.ndarray:
    """Random normalized [T, U+1, V] log distributions."""
    raw = rng.normal(size=(T, U + 1, V))
    return raw - np.logaddexp.reduce(raw, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Beam search oracle


def enumerate_sequence_logprobs(table, T: int, vocab_size: int,
                                max_len: int) -> dict[tuple[int, ...], float]:
    """True marginal log-probability of every label sequence up to max_len.

    ``table(t, tokens)`` returns the length-V log distribution at frame t
    given an emitted prefix. Sums over all alignments of each sequence.
    """
    labels = [v for v in range(vocab_size) if v != 0]
    totals: dict[tuple[int, ...], float] = {}
    for length in range(max_len + 1):
        for seq in itertools.product(labels, repeat=length):
            total = -math.inf
            for emit_frames in itertools.combinations_with_replacement(range(T), length):
                logp = 0.0
                for u, frame in enumerate(emit_frames):
                    logp += table(frame, seq[:u])[seq[u]]
                for t in range(T):
                    consumed = sum(1 for f in emit_frames if f <= t)
                    logp += table(t, seq[:consumed])[0]
                total = np.logaddexp(total, logp)
            totals[seq] = float(total)
    return totals


def blank_sink_row(vocab_size: int, penalty: float = 60.0) -> np.ndarray:
    """A normalized row with almost all mass on blank.

    Used for prefixes at the table's maximum length so that longer sequences
    are numerically impossible and the hypothesis space stays finite.
    """
    raw = np.full(vocab_size, -penalty)
    raw[0] = 0.0
    return raw - np.logaddexp.reduce(raw)


def random_table(rng: np.random.Generator, T: int, vocab_size: int, max_len: int):
    """A random lookup-table joiner over (frame, prefix) pairs.

    Prefixes at ``max_len`` emit (essentially) only blank, so the space of
    plausible label sequences is exactly those of length <= max_len.
    """
    labels = [v for v in range(vocab_size) if v != 0]
    entries: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}
    for t in range(T):
        for length in range(max_len):
            for seq in itertools.product(labels, repeat=length):
                raw = rng.normal(size=vocab_size)
                entries[(t, seq)] = raw - np.logaddexp.reduce(raw)

    sink = blank_sink_row(vocab_size)

    def table(t: int, tokens: tuple[int, ...]) -> np.ndarray:
        return entries.get((t, tokens), sink)

    return table
