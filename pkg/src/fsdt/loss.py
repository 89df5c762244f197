"""Transducer losses: forward-backward NLL, alignment restriction, joint objective.

The lattice is a [T, U+1, V] grid of per-node log distributions. Node (t, u)
means t frames consumed and u target tokens emitted; blank (id 0) moves to
(t+1, u), the next target token moves to (t, u+1), and a final blank at
(T-1, U) terminates. The loss is the negative log of the summed probability
of all monotone paths:

    alpha[0, 0] = 0
    alpha[t, u] = logaddexp(alpha[t-1, u] + blank[t-1, u],
                            alpha[t, u-1] + token[t, u-1])
    -loss       = alpha[T-1, U] + blank[T-1, U]

The recursion runs on anti-diagonals so each wavefront is a vectorized
logaddexp. Gradients come from the matching beta recursion: the adjoint of a
transition log-prob is minus its posterior occupancy. The whole computation
is registered on the gradient tape as one fused primitive.

Alignment restriction prunes node (t, u) unless it lies between the buffered
reference frame of the last emitted token and that of the next one, which
reproduces per-token emission windows [a_u - left, a_u + right]. Pruned
nodes are held at a large negative constant rather than -inf so the backward
pass stays NaN-free.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BLANK_ID
from .errors import ContractError, DimensionError, NumericError, UnreachableAlignmentError
from .tensor import Tensor, _backward_rule, _result, add, scale

LOG_ZERO = -1.0e30

__all__ = [
    "LOG_ZERO",
    "Lattice",
    "AlignmentRestriction",
    "rnnt_loss",
    "ar_rnnt_loss",
    "joint_loss",
]


@dataclass
class Lattice:
    """A [T, U+1, V] grid of log distributions over blank and tokens."""

    log_probs: Tensor

    def __post_init__(self):
        if self.log_probs.ndim != 3:
            raise DimensionError(f"lattice must be [T, U+1, V], got shape {self.log_probs.shape}")

    @property
    def n_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def n_positions(self) -> int:
        return self.log_probs.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[2]


@dataclass
class AlignmentRestriction:
    """Per-token reference frames plus emission buffers.

    Token u (0-indexed) may be emitted only at frames within
    [token_frames[u] - left_buffer, token_frames[u] + right_buffer].
    """

    token_frames: Sequence[int]
    left_buffer: int = 1
    right_buffer: int = 4

    def __post_init__(self):
        if self.left_buffer < 0 or self.right_buffer < 0:
            raise ContractError("buffers must be >= 0")
        frames = list(self.token_frames)
        if any(b < a for a, b in zip(frames, frames[1:])):
            raise ContractError("token_frames must be nondecreasing")
        if frames and frames[0] < 0:
            raise ContractError("token_frames must be >= 0")
        self.token_frames = frames

    def validity_mask(self, n_frames: int, n_tokens: int) -> np.ndarray:
        """Boolean [T, U+1] mask of lattice nodes consistent with the windows."""
        if len(self.token_frames) != n_tokens:
            raise ContractError(
                f"restriction covers {len(self.token_frames)} tokens, target has {n_tokens}"
            )
        if any(f >= n_frames for f in self.token_frames):
            raise ContractError("token_frames must be < T")
        t = np.arange(n_frames)[:, None]
        valid = np.ones((n_frames, n_tokens + 1), dtype=bool)
        for u in range(n_tokens + 1):
            if u > 0:
                valid[:, u] &= (t >= self.token_frames[u - 1] - self.left_buffer)[:, 0]
            if u < n_tokens:
                valid[:, u] &= (t <= self.token_frames[u] + self.right_buffer)[:, 0]
        return valid


def _as_log_probs(lattice: "Lattice | Tensor") -> Tensor:
    return lattice.log_probs if isinstance(lattice, Lattice) else lattice


def _check_lattice(log_probs: Tensor, targets: Sequence[int]) -> None:
    if log_probs.ndim != 3:
        raise DimensionError(f"lattice must be [T, U+1, V], got shape {log_probs.shape}")
    T, U1, V = log_probs.shape
    if T < 1:
        raise DimensionError("lattice has zero frames")
    if U1 != len(targets) + 1:
        raise DimensionError(f"lattice has {U1} label positions but target has {len(targets)} tokens")
    for tok in targets:
        if tok == BLANK_ID:
            raise ContractError("target contains the blank token")
        if not 0 <= tok < V:
            raise ContractError(f"target token id {tok} outside vocabulary of size {V}")
    if not np.all(np.isfinite(log_probs.data)):
        raise NumericError("lattice contains non-finite values")
    norms = np.logaddexp.reduce(log_probs.data, axis=-1)
    if not np.all(np.abs(norms) < 1e-6):
        raise ContractError(
            f"lattice rows are not normalized log distributions (max |logsum| = {np.abs(norms).max():.3g})"
        )


def _forward_alphas(lpb: np.ndarray, lpy: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    T, U1 = lpb.shape
    alphas = np.full((T, U1), LOG_ZERO)
    if valid is None or valid[0, 0]:
        alphas[0, 0] = 0.0
    for d in range(1, T + U1 - 1):
        u_lo = max(0, d - T + 1)
        u_hi = min(U1 - 1, d)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = d - us
        t_prev = np.maximum(ts - 1, 0)
        via_blank = np.where(ts > 0, alphas[t_prev, us] + lpb[t_prev, us], LOG_ZERO)
        u_prev = np.maximum(us - 1, 0)
        via_token = np.where(us > 0, alphas[ts, u_prev] + lpy[ts, u_prev], LOG_ZERO)
        vals = np.logaddexp(via_blank, via_token)
        if valid is not None:
            vals = np.where(valid[ts, us], vals, LOG_ZERO)
        alphas[ts, us] = vals
    return alphas


def _backward_betas(lpb: np.ndarray, lpy: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    T, U1 = lpb.shape
    U = U1 - 1
    betas = np.full((T, U1), LOG_ZERO)
    if valid is None or valid[T - 1, U]:
        betas[T - 1, U] = lpb[T - 1, U]
    for d in range(T + U1 - 3, -1, -1):
        u_lo = max(0, d - T + 1)
        u_hi = min(U, d)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = d - us
        t_next = np.minimum(ts + 1, T - 1)
        via_blank = np.where(ts < T - 1, lpb[ts, us] + betas[t_next, us], LOG_ZERO)
        u_next = np.minimum(us + 1, U)
        via_token = np.where(us < U, lpy[ts, np.minimum(us, U - 1)] + betas[ts, u_next], LOG_ZERO)
        vals = np.logaddexp(via_blank, via_token)
        if valid is not None:
            vals = np.where(valid[ts, us], vals, LOG_ZERO)
        betas[ts, us] = vals
    return betas


def _lattice_nll(log_probs: Tensor, targets: tuple[int, ...], valid: np.ndarray | None,
                 restriction: "AlignmentRestriction | None") -> Tensor:
    _check_lattice(log_probs, targets)
    T, U1, _ = log_probs.shape
    data = log_probs.data
    lpb = data[:, :, BLANK_ID]
    if targets:
        lpy = data[:, np.arange(len(targets)), list(targets)]
    else:
        # dummy column so the clamped wavefront indexing stays in bounds
        lpy = np.full((T, 1), LOG_ZERO)
    alphas = _forward_alphas(lpb, lpy, valid)
    total = alphas[T - 1, U1 - 1] + lpb[T - 1, U1 - 1]
    if total < LOG_ZERO / 2:
        detail = ""
        if restriction is not None:
            windows = [
                (f - restriction.left_buffer, f + restriction.right_buffer)
                for f in restriction.token_frames
            ]
            detail = f" under emission windows {windows}"
        raise UnreachableAlignmentError(
            f"no path through the lattice (T={T}, U={len(targets)}){detail}; loss is infinite"
        )
    return _result(
        "transducer_nll",
        (log_probs,),
        np.float64(-total),
        ctx=(tuple(targets), valid, alphas, lpb, lpy, total),
    )


@_backward_rule("transducer_nll")
def _lattice_nll_bwd(node, g):
    (log_probs,) = node.inputs
    targets, valid, alphas, lpb, lpy, total = node.ctx
    T, U1, _ = log_probs.shape
    U = U1 - 1
    betas = _backward_betas(lpb, lpy, valid)

    occ_blank = np.zeros((T, U1))
    if T > 1:
        occ_blank[: T - 1, :] = np.exp(alphas[: T - 1, :] + lpb[: T - 1, :] + betas[1:, :] - total)
    occ_blank[T - 1, :U] = 0.0  # a blank on the last frame before u=U cannot finish
    occ_blank[T - 1, U] = np.exp(alphas[T - 1, U] + lpb[T - 1, U] - total)

    grad = np.zeros_like(log_probs.data)
    grad[:, :, BLANK_ID] = -occ_blank
    if U > 0:
        occ_token = np.exp(alphas[:, :U] + lpy + betas[:, 1:] - total)
        for u, tok in enumerate(targets):
            grad[:, u, tok] -= occ_token[:, u]
    return [grad * float(g)]


def rnnt_loss(lattice: "Lattice | Tensor", targets: Sequence[int]) -> Tensor:
    """Negative log-probability of ``targets`` summed over all monotone paths."""
    return _lattice_nll(_as_log_probs(lattice), tuple(targets), None, None)


def ar_rnnt_loss(lattice: "Lattice | Tensor", targets: Sequence[int],
                 restriction: AlignmentRestriction) -> Tensor:
    """Transducer loss with lattice nodes outside the emission windows pruned.

    With buffers spanning the whole utterance this equals ``rnnt_loss``
    exactly, which the tests use as the always-available oracle path.
    """
    log_probs = _as_log_probs(lattice)
    valid = restriction.validity_mask(log_probs.shape[0], len(targets))
    return _lattice_nll(log_probs, tuple(targets), valid, restriction)


def joint_loss(l_slow: Tensor, l_fast: Tensor, lambda_fast: float) -> Tensor:
    """Combined objective: slow-branch loss plus ``lambda_fast`` times the fast one."""
    if not 0.0 < lambda_fast < 1.0:
        warnings.warn(
            f"lambda_fast={lambda_fast} outside (0, 1); proceeding for ablation",
            RuntimeWarning,
            stacklevel=2,
        )
    return add(l_slow, scale(l_fast, lambda_fast))
