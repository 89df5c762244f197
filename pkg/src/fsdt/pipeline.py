"""Training, decoding, and evaluation drivers used by the CLI and tests.

Training follows a two-step recipe. Step one trains the plain fast-slow
model on the joint objective (slow loss plus a weighted fast loss, both
alignment-restricted when reference alignments exist). Step two extends the
checkpoint with the deliberation branch and trains jointly: every minibatch,
each utterance is decoded with the fast branch (beam of one, no gradients),
the resulting partial hypotheses are randomly masked, and the slow loss runs
through the merge blocks. Because the merge output projections start at
zero, step two begins exactly at the step-one model's behavior.

Step two defaults to a learning rate one hundred times smaller and half the
epochs of step one.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import UtteranceRecord, Vocabulary, mask_tokens
from .decoding import BeamConfig, fast_partial_hypotheses, parallel_beam_search
from .errors import DataError, NumericError
from .loss import AlignmentRestriction, ar_rnnt_loss, joint_loss, rnnt_loss
from .metrics import DelayReport, emission_delays, sliced_wer, wer
from .model import FastSlowTransducer, ModelConfig
from .tensor import AdamState, Tensor, adam_step, backward, concat, no_grad, reset_tape, scale


def build_model_config(run: RunConfig, vocab: Vocabulary, feature_dim: int) -> ModelConfig:
    cfg = run.model.resolved()
    cfg.vocab_size = cfg.vocab_size or vocab.size
    cfg.feature_dim = cfg.feature_dim or feature_dim
    if cfg.vocab_size != vocab.size:
        raise DataError(f"config vocab_size {cfg.vocab_size} != corpus vocabulary {vocab.size}")
    cfg.validate()
    return cfg


def _restriction_for(rec: UtteranceRecord, run: RunConfig) -> AlignmentRestriction | None:
    if not run.train.use_alignment or rec.alignment is None:
        return None
    return AlignmentRestriction(rec.alignment, run.train.ar_left, run.train.ar_right)


def _transducer_loss(lattice, targets, restriction):
    if restriction is None:
        return rnnt_loss(lattice, targets)
    return ar_rnnt_loss(lattice, targets, restriction)


def base_utterance_loss(model: FastSlowTransducer, features: np.ndarray,
                        rec: UtteranceRecord, run: RunConfig) -> Tensor:
    """Joint loss of the plain fast-slow model (no deliberation) on one utterance."""
    e_fast, e_slow, _ = model.fast_slow_forward(Tensor(features))
    pred, _ = model.predictor_forward(rec.transcript)
    restriction = _restriction_for(rec, run)
    l_fast = _transducer_loss(model.lattice_log_probs(e_fast, pred), rec.transcript, restriction)
    l_slow = _transducer_loss(model.lattice_log_probs(e_slow, pred), rec.transcript, restriction)
    return joint_loss(l_slow, l_fast, run.train.lambda_fast)


def delib_utterance_loss(model: FastSlowTransducer, features: np.ndarray,
                         rec: UtteranceRecord, run: RunConfig,
                         rng: np.random.Generator) -> Tensor:
    """Joint loss with the slow branch conditioned on decoded partial hypotheses.

    The lattice target stays the teacher-forced reference; the decoded
    hypothesis only conditions the merge input.
    """
    e_fast, e_slow, segments = model.fast_slow_forward(Tensor(features))
    pred, _ = model.predictor_forward(rec.transcript)
    restriction = _restriction_for(rec, run)
    l_fast = _transducer_loss(model.lattice_log_probs(e_fast, pred), rec.transcript, restriction)

    with no_grad():
        partials = fast_partial_hypotheses(e_fast.data, model, segments)
    comb_parts = []
    for (start, end), partial in zip(segments, partials):
        if run.train.mask_p > 0:
            partial = mask_tokens(partial, run.train.mask_p, rng)
        e_text = model.encode_deliberation_text(partial)
        comb_parts.append(model.merge_forward(e_slow[start:end, :], e_text))
    e_comb = comb_parts[0] if len(comb_parts) == 1 else concat(comb_parts, axis=0)
    l_slow = _transducer_loss(model.lattice_log_probs(e_comb, pred), rec.transcript, restriction)
    return joint_loss(l_slow, l_fast, run.train.lambda_fast)


def _trainable(model: FastSlowTransducer, names: list[str], frozen: tuple[str, ...]):
    params = model.params()
    selected = [n for n in names if not any(n.startswith(p) for p in frozen)]
    return selected, [params[n] for n in selected]


def _load_features(rec: UtteranceRecord, base_dir) -> np.ndarray:
    feats = rec.load_features(base_dir)
    if feats.shape[0] < 1:
        raise DataError(f"{rec.utt_id}: empty utterance")
    return feats


def _run_training(model, records, run, *, loss_fn, param_names, lr, epochs, seed, log):
    rng = np.random.default_rng(seed)
    names, params = _trainable(model, param_names, run.train.frozen_prefixes())
    if not params:
        raise DataError("nothing to train: every parameter is frozen")
    state = AdamState()
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), run.train.batch_size):
            batch = [records[i] for i in order[lo : lo + run.train.batch_size]]
            reset_tape()
            total = None
            for rec in batch:
                loss = loss_fn(model, rec, rng)
                total = loss if total is None else total + loss
            mean_loss = scale(total, 1.0 / len(batch))
            value = mean_loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}")
            backward(mean_loss)
            adam_step(params, state, lr)
            epoch_loss += value
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
        log(f"epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    reset_tape()
    return history


def train_base(records: list[UtteranceRecord], vocab: Vocabulary, run: RunConfig,
               base_dir=None, log=print) -> tuple[FastSlowTransducer, list[float]]:
    """Step one: train the fast-slow model without deliberation."""
    if not records:
        raise DataError("empty training manifest")
    feats0 = _load_features(records[0], base_dir)
    cfg = build_model_config(run, vocab, feats0.shape[1])
    model = FastSlowTransducer(cfg, np.random.default_rng(run.train.seed))
    cache = {rec.utt_id: _load_features(rec, base_dir) for rec in records}

    def loss_fn(model, rec, rng):
        return base_utterance_loss(model, cache[rec.utt_id], rec, run)

    history = _run_training(
        model, records, run,
        loss_fn=loss_fn,
        param_names=model.base_param_names(),
        lr=run.train.lr,
        epochs=run.train.epochs,
        seed=run.train.seed,
        log=log,
    )
    return model, history


def train_delib(model: FastSlowTransducer, records: list[UtteranceRecord], run: RunConfig,
                base_dir=None, log=print) -> list[float]:
    """Step two: joint training with the deliberation branch, from a step-one model."""
    if not records:
        raise DataError("empty training manifest")
    cache = {rec.utt_id: _load_features(rec, base_dir) for rec in records}

    def loss_fn(model, rec, rng):
        return delib_utterance_loss(model, cache[rec.utt_id], rec, run, rng)

    return _run_training(
        model, records, run,
        loss_fn=loss_fn,
        param_names=list(model.params().keys()),
        lr=run.train.effective_stage2_lr,
        epochs=run.train.effective_stage2_epochs,
        seed=run.train.seed + 1,
        log=log,
    )


# ---------------------------------------------------------------------------
# Decoding and evaluation


def decode_records(model: FastSlowTransducer, records: list[UtteranceRecord],
                   vocab: Vocabulary, beam: BeamConfig, base_dir=None,
                   collect_trace: bool = False, log=print) -> tuple[list[dict], list[dict]]:
    """Decode every record; per-utterance data errors are reported, not fatal.

    Returns (hypothesis entries, trace records).
    """
    entries: list[dict] = []
    traces: list[dict] = []
    for rec in records:
        try:
            feats = _load_features(rec, base_dir)
            result = parallel_beam_search(feats, model, beam, collect_trace=collect_trace)
            entries.append(
                {
                    "id": rec.utt_id,
                    "tokens": result.tokens,
                    "text": vocab.detokenize(result.tokens),
                    "emit_frames": result.emit_frames,
                    "log_prob": result.log_prob,
                    "norm_score": result.norm_score,
                    "n_frames": int(feats.shape[0]),
                    "n_fast_calls": result.n_fast_calls,
                    "n_slow_calls": result.n_slow_calls,
                    "n_delib_calls": result.n_delib_calls,
                }
            )
            for record in result.trace:
                traces.append({"id": rec.utt_id, **record})
        except DataError as err:
            log(f"skipping {rec.utt_id}: {err}")
            entries.append({"id": rec.utt_id, "error": str(err)})
    return entries, traces


def evaluate_hypotheses(records: list[UtteranceRecord], entries: list[dict],
                        vocab: Vocabulary, frame_ms: float = 40.0,
                        slice_threshold_s: float = 3.0) -> dict:
    """Corpus WER, emission delays, and duration-sliced WER for decoded output."""
    by_id = {e["id"]: e for e in entries if "error" not in e}
    missing = [rec.utt_id for rec in records if rec.utt_id not in by_id]
    if missing:
        raise DataError(f"hypotheses missing for utterance ids: {missing}")

    refs, hyps, sliced_items, delay_items = [], [], [], []
    for rec in records:
        entry = by_id[rec.utt_id]
        ref_text = vocab.detokenize(rec.transcript)
        refs.append(ref_text)
        hyps.append(entry["text"])
        duration_s = entry["n_frames"] * frame_ms / 1000.0
        sliced_items.append((ref_text, entry["text"], duration_s))
        if rec.alignment is not None:
            delay_items.append((rec.transcript, rec.alignment, entry["tokens"], entry["emit_frames"]))

    wer_report = wer(refs, hyps)
    delay_report = emission_delays(delay_items, frame_ms) if delay_items else DelayReport(frame_ms=frame_ms)
    slices = sliced_wer(sliced_items, slice_threshold_s)
    return {
        "n_utts": len(records),
        "wer": wer_report.to_dict(),
        "delays": delay_report.to_dict(),
        # synthetic alignments approximate spoken time; delays are relative to them
        "delay_reference": "synthetic-alignment-proxy",
        "sliced_wer": {
            "threshold_s": slice_threshold_s,
            "short": slices["short"].to_dict(),
            "long": slices["long"].to_dict(),
        },
    }


def training_wer(model: FastSlowTransducer, records: list[UtteranceRecord],
                 vocab: Vocabulary, beam: BeamConfig, base_dir=None) -> float:
    entries, _ = decode_records(model, records, vocab, beam, base_dir, log=lambda _: None)
    report = evaluate_hypotheses(records, entries, vocab)
    return report["wer"]["wer"]


def format_report(report: dict) -> str:
    """Human-readable summary of an evaluation report."""
    lines = [f"utterances: {report['n_utts']}"]
    w = report["wer"]
    lines.append(
        f"wer: {w['wer']:.4f} (S={w['substitutions']} I={w['insertions']} D={w['deletions']} "
        f"over {w['ref_words']} ref words)"
    )
    d = report["delays"]
    if d["empty"]:
        lines.append("emission delay: no matched tokens with reference alignments")
    else:
        lines.append(
            f"emission delay ms (vs {report['delay_reference']}): "
            f"avg={d['avg_ms']:.1f} p95={d['p95_ms']:.1f} p99={d['p99_ms']:.1f} "
            f"over {d['n_tokens']} tokens"
        )
    s = report["sliced_wer"]
    for name, sign in (("short", "<="), ("long", ">")):
        part = s[name]
        shown = "n/a" if part["wer"] is None else f"{part['wer']:.4f}"
        lines.append(f"wer[{name} {sign} {s['threshold_s']}s]: {shown} ({part['n_utts']} utts)")
    return "\n".join(lines)
