import numpy as np
import pytest

from fsdt.errors import ContractError, DataError
from fsdt.metrics import (
    DelayReport,
    edit_align,
    edit_counts,
    emission_delays,
    nearest_rank_percentile,
    sliced_wer,
    token_delays,
    wer,
)

RNG = np.random.default_rng(77)


def _dp_distance(a, b):
    """Distance-only Levenshtein oracle, independent of the backtrace code."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def test_wer_identical_is_zero():
    report = wer(["a b c"], ["a b c"])
    assert report.wer == 0.0 and report.errors == 0


def test_wer_single_substitution():
    report = wer(["a b c"], ["a x c"])
    assert report.substitutions == 1 and report.insertions == 0 and report.deletions == 0
    assert abs(report.wer - 1 / 3) < 1e-12


def test_wer_empty_hypothesis_all_deletions():
    report = wer(["a b c"], [""])
    assert report.deletions == 3 and report.wer == 1.0


def test_wer_empty_corpus_errors():
    with pytest.raises(DataError):
        wer([], [])


def test_wer_aggregates_counts_not_rates():
    # one perfect long utterance plus one bad short one: corpus WER is count
    # based, not the mean of per-utterance rates
    report = wer(["a b c d e f g h", "x"], ["a b c d e f g h", "y"])
    assert abs(report.wer - 1 / 9) < 1e-12


def test_wer_matches_distance_oracle_random():
    for trial in range(200):
        rng = np.random.default_rng(3000 + trial)
        ref = [str(w) for w in rng.integers(0, 5, size=rng.integers(0, 8))]
        hyp = [str(w) for w in rng.integers(0, 5, size=rng.integers(0, 8))]
        if not ref:
            continue
        counts = edit_counts(ref, hyp)
        assert counts.errors == _dp_distance(ref, hyp)


def test_edit_distance_triangle_inequality():
    for trial in range(50):
        rng = np.random.default_rng(4000 + trial)
        seqs = [
            [int(w) for w in rng.integers(0, 4, size=rng.integers(0, 7))] for _ in range(3)
        ]
        d = lambda a, b: edit_counts(a, b).errors
        assert d(seqs[0], seqs[2]) <= d(seqs[0], seqs[1]) + d(seqs[1], seqs[2])
        assert d(seqs[0], seqs[0]) == 0


def test_alignment_ops_cover_both_sequences():
    ref, hyp = ["a", "b", "c"], ["b", "c", "d"]
    steps = edit_align(ref, hyp)
    ref_seen = [i for op, i, _ in steps if i is not None]
    hyp_seen = [j for op, _, j in steps if j is not None]
    assert ref_seen == [0, 1, 2] and hyp_seen == [0, 1, 2]


# ---------------------------------------------------------------------------
# Percentiles


def test_nearest_rank_hand_case():
    values = list(range(10, 1001, 10))  # 100 values
    assert nearest_rank_percentile(values, 95) == 950
    assert nearest_rank_percentile(values, 99) == 990


def test_nearest_rank_matches_sort_index_oracle():
    for trial in range(100):
        rng = np.random.default_rng(5000 + trial)
        values = list(rng.normal(size=rng.integers(1, 40)))
        pct = float(rng.uniform(1, 100))
        got = nearest_rank_percentile(values, pct)
        ordered = sorted(values)
        expect = ordered[max(1, int(np.ceil(pct / 100 * len(values)))) - 1]
        assert got == expect


def test_nearest_rank_rejects_empty():
    with pytest.raises(ContractError):
        nearest_rank_percentile([], 50)


# ---------------------------------------------------------------------------
# Emission delays


def test_delay_zero_when_emit_equals_alignment():
    delays = token_delays([2], [5], [2], [5], frame_ms=40.0)
    assert delays == [0.0]


def test_delay_percentiles_hand_case():
    report = DelayReport(delays=[float(d) for d in range(10, 1001, 10)])
    assert report.p95 == 950 and report.p99 == 990


def test_delay_single_token():
    report = DelayReport(delays=[120.0])
    assert report.avg == report.p95 == report.p99 == 120.0


def test_delays_only_for_matched_tokens():
    # ref a b c vs hyp a x c: only a and c are matched
    delays = token_delays([2, 3, 4], [0, 3, 6], [2, 5, 4], [2, 4, 9], frame_ms=40.0)
    assert delays == [(2 - 0) * 40.0, (9 - 6) * 40.0]


def test_empty_delay_report_flagged():
    report = emission_delays([([2], [0], [3], [5])])  # substitution only
    assert report.empty and report.n_tokens == 0
    assert report.avg is None


def test_delay_report_min_avg_max_ordering():
    report = DelayReport(delays=[40.0, 80.0, 200.0, -40.0])
    assert min(report.delays) <= report.avg <= max(report.delays)
    assert report.p95 <= report.p99


# ---------------------------------------------------------------------------
# Sliced reports


def test_sliced_all_on_one_side():
    out = sliced_wer([("a b", "a b", 5.0), ("c", "c", 4.0)], threshold_s=3.0)
    assert out["short"].n_utts == 0 and out["short"].wer is None
    assert out["long"].n_utts == 2 and out["long"].wer == 0.0


def test_sliced_hand_counts():
    items = [
        ("a b", "a b", 1.0),       # short, perfect
        ("a b", "a x", 2.0),       # short, 1 sub of 2
        ("c d e", "c d e", 4.0),   # long, perfect
        ("c d e", "c e", 5.0),     # long, 1 del of 3
    ]
    out = sliced_wer(items, threshold_s=3.0)
    assert abs(out["short"].wer - 1 / 4) < 1e-12
    assert abs(out["long"].wer - 1 / 6) < 1e-12


def test_sliced_threshold_zero_puts_all_long():
    out = sliced_wer([("a", "a", 0.5), ("b", "b", 2.0)], threshold_s=0.0)
    assert out["short"].n_utts == 0 and out["long"].n_utts == 2
