# src/flowtsvad/ensemble.py
"""
Rank-weighted, overlap-aware frame voting over several diarization hypotheses
of the same file (one hypothesis per sampling run).
"""
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from src.flowtsvad.errors import ScoringError
from src.flowtsvad.parallel_process import process_items_parallel
from src.flowtsvad.scoring import (
    DiarizationHypothesis,
    Segment,
    der_seconds,
    frames_to_segments,
    segments_to_frames,
)

DEFAULT_RESOLUTION = 0.01
ROUND_TOLERANCE = 1e-9
RANK_DECIMALS = 9


def _check_same_file(hypotheses: Sequence[DiarizationHypothesis]) -> str:
    if not hypotheses:
        raise ScoringError("ensemble needs at least one hypothesis")
    file_ids = {h.file_id for h in hypotheses}
    if len(file_ids) > 1:
        raise ScoringError(f"ensemble over different files: {sorted(file_ids)}")
    return hypotheses[0].file_id


def _overlap(a: List[Segment], b: List[Segment]) -> float:
    return sum(max(0.0, min(x.end, y.end) - max(x.start, y.start)) for x in a for y in b)


def align_speakers(hypotheses: Sequence[DiarizationHypothesis]) -> List[DiarizationHypothesis]:
    """
    The first hypothesis fixes the label space. Each later hypothesis is mapped
    onto the labels accumulated so far by the assignment maximizing total
    overlap time; speakers left unassigned, or assigned with zero overlap,
    get fresh labels.
    """
    _check_same_file(hypotheses)
    aligned = [hypotheses[0]]
    by_label: Dict[str, List[Segment]] = {}
    for s in hypotheses[0].segments:
        by_label.setdefault(s.speaker, []).append(s)

    for hyp in hypotheses[1:]:
        labels = sorted(by_label)
        speakers = hyp.speakers
        own = {spk: [s for s in hyp.segments if s.speaker == spk] for spk in speakers}
        mapping: Dict[str, str] = {}
        if labels and speakers:
            gain = np.array([[_overlap(by_label[lab], own[spk]) for spk in speakers] for lab in labels])
            rows, cols = linear_sum_assignment(gain, maximize=True)
            for r, c in zip(rows, cols):
                if gain[r, c] > 0:
                    mapping[speakers[c]] = labels[r]
        for spk in speakers:
            if spk not in mapping:
                fresh, k = spk, 1
                while fresh in by_label or fresh in mapping.values():
                    fresh, k = f"{spk}#{k}", k + 1
                mapping[spk] = fresh
        relabeled = [Segment(mapping[s.speaker], s.start, s.end) for s in hyp.segments]
        for s in relabeled:
            by_label.setdefault(s.speaker, []).append(s)
        aligned.append(DiarizationHypothesis(hyp.file_id, relabeled))
    return aligned


def _pairwise_der(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis) -> float:
    report = der_seconds(reference, hypothesis, collar=0.0, mapping="optimal")
    if report.total_s <= 0:
        return 0.0 if hypothesis.speech_time() == 0 else 100.0
    return report.der


def rank_weights(hypotheses: Sequence[DiarizationHypothesis]) -> List[float]:
    """1/rank, ranking by mean DER against every other hypothesis (lowest first); tied DERs share the average rank."""
    n = len(hypotheses)
    if n == 1:
        return [1.0]
    mean_der = [
        np.mean([_pairwise_der(hypotheses[i], hypotheses[j]) for j in range(n) if j != i])
        for i in range(n)
    ]
    ranks = rankdata(np.round(mean_der, RANK_DECIMALS), method="average")
    return [1.0 / r for r in ranks.tolist()]


def vote(
    hypotheses: Sequence[DiarizationHypothesis],
    weights: Optional[Sequence[float]] = None,
    frame_resolution: float = DEFAULT_RESOLUTION,
) -> DiarizationHypothesis:
    """
    Without weights the hypotheses are aligned first and weighted by rank_weights;
    explicit weights mean the hypotheses already share one label space.

    Per frame: k = weighted mean of active-speaker counts, rounded half down;
    the k speakers with the largest weighted vote are active (ties by label).
    """
    file_id = _check_same_file(hypotheses)
    if frame_resolution <= 0:
        raise ScoringError(f"frame_resolution must be positive, got {frame_resolution}")
    if weights is None:
        hypotheses = align_speakers(hypotheses)
        weights = rank_weights(hypotheses)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(hypotheses):
        raise ScoringError(f"{len(weights)} weights for {len(hypotheses)} hypotheses")
    if (weights <= 0).any():
        raise ScoringError(f"ensemble weights must be positive, got {weights.tolist()}")

    labels = sorted({s.speaker for h in hypotheses for s in h.segments})
    end = max((s.end for h in hypotheses for s in h.segments), default=0.0)
    num_frames = int(math.ceil(end / frame_resolution))
    if not labels or num_frames == 0:
        return DiarizationHypothesis(file_id)

    # activity: hypotheses × speakers × frames
    activity = np.stack([
        np.stack([segments_to_frames(h.segments, num_frames, frame_resolution, lab) for lab in labels])
        for h in hypotheses
    ]).astype(np.float64)
    w = weights / weights.sum()
    counts = np.einsum("h,hf->f", w, activity.sum(axis=1))
    k = np.ceil(counts - 0.5 - ROUND_TOLERANCE).astype(np.int64)
    votes = np.einsum("h,hsf->sf", w, activity)

    # stable sort on -votes keeps lexicographic label order among ties
    order = np.argsort(-votes, axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(len(labels))[:, None].repeat(num_frames, axis=1), axis=0)
    active = (rank < k[None, :]) & (votes > 0)

    segments = []
    for lab, track in zip(labels, active):
        segments.extend(frames_to_segments(track, frame_resolution, lab))
    return DiarizationHypothesis(file_id, segments)


def _vote_one_file(item: str, hypothesis_sets, frame_resolution: float, **kwargs):
    hyps = [hs.get(item, DiarizationHypothesis(item)) for hs in hypothesis_sets]
    result = vote(hyps, frame_resolution=frame_resolution)
    return result, [{"type": "status", "description": item}]


def vote_files(
    hypothesis_sets: Sequence[Dict[str, DiarizationHypothesis]],
    frame_resolution: float = DEFAULT_RESOLUTION,
    workers: int = 1,
) -> Dict[str, DiarizationHypothesis]:
    """Ensemble every file id found in any set; a set without the file contributes silence."""
    if not hypothesis_sets:
        raise ScoringError("ensemble needs at least one hypothesis set")
    file_ids = sorted({fid for hs in hypothesis_sets for fid in hs})
    results = process_items_parallel(
        file_ids,
        _vote_one_file,
        workers=workers,
        desc="[ensemble]",
        hypothesis_sets=hypothesis_sets,
        frame_resolution=frame_resolution,
    )
    return dict(zip(file_ids, results))
