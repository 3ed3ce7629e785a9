# test/test_ensemble.py
import itertools

import numpy as np

from src.flowtsvad.ensemble import _overlap, align_speakers, rank_weights, vote, vote_files
from src.flowtsvad.errors import ScoringError
from src.flowtsvad.scoring import DiarizationHypothesis, Segment, compute_der, segments_to_frames


def _hyp(*segments, file_id="f"):
    return DiarizationHypothesis(file_id, [Segment(*s) for s in segments])


def test_permuted_labels_vote_back_to_first():
    h1 = _hyp(("A", 0.0, 2.0), ("B", 2.0, 4.0))
    h2 = _hyp(("X", 0.0, 2.0), ("Y", 2.0, 4.0))
    h3 = _hyp(("Q", 0.0, 2.0), ("P", 2.0, 4.0))
    out = vote([h1, h2, h3])
    assert out.sorted_segments() == h1.sorted_segments()


def test_alignment_matches_brute_force_two_speakers():
    rng = np.random.default_rng(0)
    for _ in range(50):
        def random_pair(names):
            segs = []
            for name in names:
                a = float(rng.integers(0, 50)) / 10
                segs.append((name, a, a + float(rng.integers(1, 30)) / 10))
            return _hyp(*segs)

        first, second = random_pair(["A", "B"]), random_pair(["x", "y"])
        aligned = align_speakers([first, second])[1]
        own = {n: [s for s in second.segments if s.speaker == n] for n in ("x", "y")}
        ref = {n: [s for s in first.segments if s.speaker == n] for n in ("A", "B")}
        straight = _overlap(ref["A"], own["x"]) + _overlap(ref["B"], own["y"])
        crossed = _overlap(ref["A"], own["y"]) + _overlap(ref["B"], own["x"])
        got = sum(_overlap(ref[lab], [s for s in aligned.segments if s.speaker == lab]) for lab in ("A", "B"))
        assert abs(got - max(straight, crossed)) < 1e-9


def test_zero_overlap_speaker_gets_fresh_label():
    aligned = align_speakers([_hyp(("A", 0.0, 1.0)), _hyp(("A", 2.0, 3.0))])
    assert aligned[1].speakers == ["A#1"]


def test_hand_vote_with_equal_weights():
    h1 = _hyp(("A", 0.0, 3.0), ("B", 2.0, 5.0))
    h2 = _hyp(("A", 0.0, 2.0), ("B", 3.0, 5.0))
    h3 = _hyp(("A", 0.0, 4.0))
    out = vote([h1, h2, h3], weights=[1.0, 1.0, 1.0], frame_resolution=1.0)
    assert out.sorted_segments() == [Segment("A", 0.0, 3.0), Segment("B", 3.0, 5.0)]


def test_half_count_rounds_down():
    out = vote([_hyp(("A", 0.0, 1.0)), _hyp()], weights=[1.0, 1.0], frame_resolution=1.0)
    assert out.segments == []


def test_vote_ties_break_by_label():
    out = vote([_hyp(("B", 0.0, 1.0)), _hyp(("A", 0.0, 1.0))], weights=[1.0, 1.0], frame_resolution=1.0)
    assert out.segments == [Segment("A", 0.0, 1.0)]


def test_identical_and_single_inputs():
    h = _hyp(("A", 0.0, 1.5), ("B", 1.0, 2.5))
    assert vote([h, h, h]).sorted_segments() == h.sorted_segments()
    single = vote([h])
    assert compute_der(h, single, collar=0.0).der < 1e-6


def test_rank_weights():
    good = _hyp(("A", 0.0, 4.0))
    near = _hyp(("A", 0.0, 3.8))
    far = _hyp(("A", 2.0, 6.0))
    weights = rank_weights([far, good, near])
    assert weights == [1 / 3, 1.0, 0.5]
    assert rank_weights([good]) == [1.0]


def test_rank_weights_share_tied_ranks():
    good = _hyp(("A", 0.0, 4.0))
    far = _hyp(("A", 2.0, 6.0))
    assert rank_weights([good, good]) == [1.0, 1.0]
    weights = rank_weights([good, good, far])
    assert np.allclose(weights, [2 / 3, 2 / 3, 1 / 3], rtol=0, atol=1e-12)


def _random_hyp(rng, labels=("A", "B", "C")):
    segs = []
    for lab in labels[: int(rng.integers(1, len(labels) + 1))]:
        for _ in range(int(rng.integers(1, 4))):
            start = int(rng.integers(0, 10))
            segs.append((lab, float(start), float(start + rng.integers(1, 5))))
    return _hyp(*segs)


def _frame_counts(hyp, num_frames):
    labels = sorted({s.speaker for s in hyp.segments})
    counts = np.zeros(num_frames, dtype=np.int64)
    for lab in labels:
        counts += segments_to_frames(hyp.segments, num_frames, 1.0, lab)
    return counts


def test_vote_speaker_count_within_input_range():
    rng = np.random.default_rng(7)
    for _ in range(40):
        hyps = [_random_hyp(rng) for _ in range(int(rng.integers(2, 5)))]
        out = vote(hyps, frame_resolution=1.0)
        num_frames = int(max(s.end for h in hyps for s in h.segments))
        inputs = np.stack([_frame_counts(h, num_frames) for h in hyps])
        got = _frame_counts(out, num_frames)
        lo, hi = inputs.min(axis=0), inputs.max(axis=0)
        assert ((got >= lo) & (got <= hi)).all()
        agree = lo == hi
        assert np.array_equal(got[agree], lo[agree])
        speech = inputs.sum(axis=1)
        assert lo.sum() <= got.sum() <= hi.sum()
        assert speech.min() - (hi - lo).sum() <= got.sum() <= speech.max() + (hi - lo).sum()
        assert got[agree].sum() == lo[agree].sum()


def test_vote_ignores_order_of_equal_weights():
    rng = np.random.default_rng(11)
    for _ in range(20):
        hyps = [_random_hyp(rng) for _ in range(3)]
        outs = [vote(list(p), weights=[1.0, 1.0, 1.0], frame_resolution=1.0).sorted_segments()
                for p in itertools.permutations(hyps)]
        assert all(o == outs[0] for o in outs)

    a = _hyp(("A", 0.0, 4.0), ("B", 3.0, 7.0))
    b = _hyp(("A", 0.0, 5.0), ("B", 4.0, 7.0))
    outs = [vote(list(p), frame_resolution=1.0).sorted_segments() for p in ([a, a, b], [a, b, a], [b, a, a])]
    assert outs[0] == outs[1] == outs[2]


def test_vote_errors():
    for args in ([], [_hyp(file_id="a"), _hyp(file_id="b")]):
        try:
            vote(args)
        except ScoringError:
            continue
        raise AssertionError(f"{args} accepted")
    try:
        vote([_hyp(("A", 0, 1))], weights=[0.0])
    except ScoringError:
        pass
    else:
        raise AssertionError("zero weight accepted")


def test_vote_files_missing_file_is_silence():
    h = _hyp(("A", 0.0, 2.0), file_id="seg1")
    out = vote_files([{"seg1": h}, {"seg1": h}, {}], frame_resolution=0.5)
    assert list(out) == ["seg1"]
    assert out["seg1"].sorted_segments() == h.sorted_segments()
    # one run against one silent run: tied ranks, count 0.5 rounds down
    assert vote_files([{"seg1": h}, {}], frame_resolution=0.5)["seg1"].segments == []


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"[ok] {name}")
