import numpy as np
import pytest

from fsdt.config import RunConfig
from fsdt.data import SynthConfig, synthesize_corpus
from fsdt.decoding import BeamConfig, parallel_beam_search
from fsdt.errors import DataError, NumericError
from fsdt.model import FastSlowTransducer
from fsdt.pipeline import (
    base_utterance_loss,
    build_model_config,
    decode_records,
    delib_utterance_loss,
    evaluate_hypotheses,
    train_base,
    train_delib,
)
from fsdt.tensor import reset_tape


def tiny_run(**train_overrides) -> RunConfig:
    run = RunConfig()
    run.model.model_dim = 16
    run.model.encoder_heads = 2
    run.model.predictor_layers = 2
    run.model.fast_chunk_frames = 4
    run.model.slow_chunk_factor = 2
    run.train.epochs = 2
    run.train.batch_size = 4
    run.train.lr = 2e-3
    for key, value in train_overrides.items():
        setattr(run.train, key, value)
    run.beam.fast_beam = 3
    run.beam.slow_beam = 3
    return run


def tiny_corpus(n=6, seed=0, **kw):
    cfg = SynthConfig(n_utts=n, seed=seed, min_tokens=4, max_tokens=8,
                      frames_per_token=3, feature_dim=6, noise_std=0.05, **kw)
    return synthesize_corpus(cfg)


def test_train_base_smoke_and_loss_finite():
    records, vocab, _ = tiny_corpus()
    run = tiny_run(epochs=1)
    logs = []
    model, history = train_base(records, vocab, run, log=logs.append)
    assert len(history) == 1 and np.isfinite(history[0])
    assert logs


def test_train_base_loss_decreases():
    records, vocab, _ = tiny_corpus(n=8, seed=1)
    run = tiny_run(epochs=8)
    _, history = train_base(records, vocab, run, log=lambda _: None)
    assert history[-1] < history[0]


def test_train_base_deterministic():
    records, vocab, _ = tiny_corpus(n=6, seed=2)
    run = tiny_run(epochs=2)
    _, h1 = train_base(records, vocab, run, log=lambda _: None)
    _, h2 = train_base(records, vocab, run, log=lambda _: None)
    assert h1 == h2  # bit-identical losses


def test_stage2_step0_continuity():
    # with zero-initialized merge outputs, the deliberation loss equals the
    # plain fast-slow loss on the same batch
    records, vocab, _ = tiny_corpus(n=4, seed=3)
    run = tiny_run(epochs=1)
    model, _ = train_base(records, vocab, run, log=lambda _: None)
    rng = np.random.default_rng(0)
    for rec in records:
        reset_tape()
        base = base_utterance_loss(model, rec.features, rec, run).item()
        reset_tape()
        delib = delib_utterance_loss(model, rec.features, rec, run, rng).item()
        assert abs(base - delib) < 1e-10
    reset_tape()


def test_stage2_decode_continuity():
    # a freshly extended model (zeroed merge outputs) decodes exactly like the
    # plain fast-slow model it came from
    records, vocab, _ = tiny_corpus(n=4, seed=4)
    run = tiny_run(epochs=1)
    model, _ = train_base(records, vocab, run, log=lambda _: None)
    beam = run.beam.resolved_for(model)
    for rec in records:
        plain = parallel_beam_search(rec.features, model, beam, use_deliberation=False)
        delib = parallel_beam_search(rec.features, model, beam, use_deliberation=True)
        assert plain.tokens == delib.tokens
        assert plain.emit_frames == delib.emit_frames
        assert plain.log_prob == delib.log_prob


def test_train_delib_runs_with_and_without_masking():
    records, vocab, _ = tiny_corpus(n=4, seed=5)
    for mask_p in (0.0, 0.1):
        run = tiny_run(epochs=1, mask_p=mask_p, stage2_epochs=1)
        model, _ = train_base(records, vocab, run, log=lambda _: None)
        history = train_delib(model, records, run, log=lambda _: None)
        assert np.isfinite(history[-1])


def test_train_delib_freeze_leaves_parameters_unchanged():
    records, vocab, _ = tiny_corpus(n=4, seed=6)
    run = tiny_run(epochs=1, stage2_epochs=1, freeze="fast_encoder,slow_encoder")
    model, _ = train_base(records, vocab, run, log=lambda _: None)
    frozen_before = {
        name: t.data.copy()
        for name, t in model.params().items()
        if name.startswith(("fast_encoder", "slow_encoder"))
    }
    train_delib(model, records, run, log=lambda _: None)
    for name, before in frozen_before.items():
        np.testing.assert_array_equal(model.params()[name].data, before)


def test_non_finite_loss_raises_numeric_error():
    records, vocab, _ = tiny_corpus(n=2, seed=7)
    records[0].features[0, 0] = np.nan
    run = tiny_run(epochs=1)
    with pytest.raises(NumericError):
        train_base(records, vocab, run, log=lambda _: None)


def test_empty_manifest_rejected():
    _, vocab, _ = tiny_corpus(n=2, seed=8)
    with pytest.raises(DataError):
        train_base([], vocab, tiny_run(), log=lambda _: None)


def test_decode_and_evaluate_roundtrip():
    records, vocab, _ = tiny_corpus(n=4, seed=9)
    run = tiny_run(epochs=1)
    model, _ = train_base(records, vocab, run, log=lambda _: None)
    entries, traces = decode_records(model, records, vocab, run.beam, collect_trace=True)
    assert len(entries) == 4
    report = evaluate_hypotheses(records, entries, vocab)
    assert 0.0 <= report["wer"]["wer"] <= 1.5
    assert report["sliced_wer"]["short"]["n_utts"] + report["sliced_wer"]["long"]["n_utts"] == 4
    assert any(t["call"] == "slow" for t in traces)


def test_evaluate_reports_missing_ids():
    records, vocab, _ = tiny_corpus(n=2, seed=10)
    with pytest.raises(DataError, match=records[1].utt_id):
        evaluate_hypotheses(records, [{"id": records[0].utt_id, "tokens": [], "text": "",
                                       "emit_frames": [], "n_frames": 5}], vocab)


def test_build_model_config_fills_corpus_fields():
    records, vocab, _ = tiny_corpus(n=2, seed=11)
    run = tiny_run()
    cfg = build_model_config(run, vocab, records[0].features.shape[1])
    assert cfg.vocab_size == vocab.size
    assert cfg.feature_dim == records[0].features.shape[1]
    run.model.vocab_size = vocab.size + 3
    with pytest.raises(DataError):
        build_model_config(run, vocab, 6)
