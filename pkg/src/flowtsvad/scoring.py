# src/flowtsvad/scoring.py
"""
Diarization scoring: RTTM I/O, frame/segment conversion and DER
(miss / false alarm / confusion) with a reference-boundary collar.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from src.flowtsvad.errors import ScoringError

DEFAULT_COLLAR = 0.25
MAPPINGS = ("optimal", "identity")


@dataclass(frozen=True)
class Segment:
    speaker: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class DiarizationHypothesis:
    file_id: str
    segments: List[Segment] = field(default_factory=list)

    def __post_init__(self):
        for s in self.segments:
            if s.start < 0 or s.end <= s.start:
                raise ScoringError(
                    f"{self.file_id}: invalid segment {s.speaker} [{s.start}, {s.end})"
                )

    @property
    def speakers(self) -> List[str]:
        return sorted({s.speaker for s in self.segments})

    def speech_time(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def sorted_segments(self) -> List[Segment]:
        return sorted(self.segments, key=lambda s: (s.start, s.end, s.speaker))


@dataclass
class DerReport:
    """Error time in seconds; percentages are relative to scored reference speech."""

    miss_s: float = 0.0
    false_alarm_s: float = 0.0
    confusion_s: float = 0.0
    total_s: float = 0.0
    missing_files: List[str] = field(default_factory=list)

    def _pct(self, seconds: float) -> float:
        if self.total_s <= 0:
            raise ScoringError("DER undefined: no scored reference speech")
        return 100.0 * seconds / self.total_s

    @property
    def miss(self) -> float:
        return self._pct(self.miss_s)

    @property
    def false_alarm(self) -> float:
        return self._pct(self.false_alarm_s)

    @property
    def confusion(self) -> float:
        return self._pct(self.confusion_s)

    @property
    def der(self) -> float:
        return self.miss + self.false_alarm + self.confusion

    def __add__(self, other: "DerReport") -> "DerReport":
        return DerReport(
            self.miss_s + other.miss_s,
            self.false_alarm_s + other.false_alarm_s,
            self.confusion_s + other.confusion_s,
            self.total_s + other.total_s,
            self.missing_files + other.missing_files,
        )

    def to_dict(self) -> dict:
        return {
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "der": self.der,
            "total_reference_speech": self.total_s,
            "missing_files": list(self.missing_files),
        }


def format_report(report: DerReport) -> str:
    lines = [
        f"{'MS':>8} {'FA':>8} {'Conf.':>8} {'DER':>8} {'speech(s)':>10}",
        f"{report.miss:8.2f} {report.false_alarm:8.2f} {report.confusion:8.2f} "
        f"{report.der:8.2f} {report.total_s:10.2f}",
    ]
    if report.missing_files:
        lines.append(f"missing hypothesis files (scored as miss): {', '.join(report.missing_files)}")
    return "\n".join(lines)


# --------------------------
# RTTM
# --------------------------
def parse_rttm(text: str) -> Dict[str, DiarizationHypothesis]:
    """
    SPEAKER <file> <chan> <tbeg> <tdur> <NA> <NA> <speaker> <NA> <NA>
    Blank lines and lines starting with '#' are ignored; zero-duration records are skipped.
    """
    result: Dict[str, DiarizationHypothesis] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 8 or fields[0] != "SPEAKER":
            raise ScoringError(f"rttm line {lineno}: malformed record: {line!r}")
        try:
            tbeg = float(fields[3])
            tdur = float(fields[4])
        except ValueError:
            raise ScoringError(f"rttm line {lineno}: non-numeric onset/duration: {line!r}")
        if tdur < 0:
            raise ScoringError(f"rttm line {lineno}: negative duration {tdur}")
        if tbeg < 0:
            raise ScoringError(f"rttm line {lineno}: negative onset {tbeg}")
        file_id = fields[1]
        hyp = result.setdefault(file_id, DiarizationHypothesis(file_id))
        if tdur == 0:
            continue
        hyp.segments.append(Segment(fields[7], tbeg, tbeg + tdur))
    return result


def emit_rttm(
    hypotheses: Union[Dict[str, DiarizationHypothesis], Iterable[DiarizationHypothesis]]
) -> str:
    if isinstance(hypotheses, dict):
        hypotheses = hypotheses.values()
    lines = []
    for hyp in sorted(hypotheses, key=lambda h: h.file_id):
        for s in hyp.sorted_segments():
            lines.append(
                f"SPEAKER {hyp.file_id} 1 {s.start:.3f} {s.duration:.3f} "
                f"<NA> <NA> {s.speaker} <NA> <NA>\n"
            )
    return "".join(lines)


def read_rttm(path) -> Dict[str, DiarizationHypothesis]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_rttm(f.read())


def write_rttm(hypotheses, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(emit_rttm(hypotheses))


# --------------------------
# frames <-> segments
# --------------------------
def frames_to_segments(labels, frame_duration: float, speaker: str) -> List[Segment]:
    """Maximal runs of 1s become segments [i·Δ, (i+run)·Δ)."""
    if frame_duration <= 0:
        raise ScoringError(f"frame_duration must be positive, got {frame_duration}")
    y = np.asarray(labels).astype(np.int8).reshape(-1)
    padded = np.concatenate([[0], y, [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [
        Segment(speaker, float(a) * frame_duration, float(b) * frame_duration)
        for a, b in zip(edges[0::2], edges[1::2])
    ]


def segments_to_frames(
    segments: Iterable[Segment],
    num_frames: int,
    frame_duration: float,
    speaker: Optional[str] = None,
) -> np.ndarray:
    """A frame is active when its midpoint lies inside a segment (of `speaker`, if given)."""
    if frame_duration <= 0:
        raise ScoringError(f"frame_duration must be positive, got {frame_duration}")
    mids = (np.arange(num_frames) + 0.5) * frame_duration
    active = np.zeros(num_frames, dtype=bool)
    for s in segments:
        if speaker is not None and s.speaker != speaker:
            continue
        active |= (mids >= s.start) & (mids < s.end)
    return active.astype(np.uint8)


def labels_to_hypothesis(
    file_id: str, labels, names: List[Optional[str]], frame_duration: float
) -> DiarizationHypothesis:
    """Per-slot binary tracks to a hypothesis; slots without a name are dropped."""
    segments = []
    for track, name in zip(labels, names):
        if name is None:
            continue
        segments.extend(frames_to_segments(track, frame_duration, name))
    return DiarizationHypothesis(file_id, segments)


# --------------------------
# DER
# --------------------------
def _activity(segments: List[Segment], speakers: List[str], mids: np.ndarray) -> np.ndarray:
    act = np.zeros((len(speakers), len(mids)), dtype=bool)
    index = {s: i for i, s in enumerate(speakers)}
    for seg in segments:
        act[index[seg.speaker]] |= (mids >= seg.start) & (mids < seg.end)
    return act


def der_seconds(
    reference: DiarizationHypothesis,
    hypothesis: DiarizationHypothesis,
    collar: float,
    mapping: str,
) -> DerReport:
    if mapping not in MAPPINGS:
        raise ScoringError(f"unknown mapping {mapping!r}, expected one of {MAPPINGS}")
    if collar < 0:
        raise ScoringError(f"collar must be >= 0, got {collar}")

    ref_bounds = np.array(
        sorted({s.start for s in reference.segments} | {s.end for s in reference.segments}),
        dtype=np.float64,
    )
    points = set(ref_bounds.tolist())
    points |= {s.start for s in hypothesis.segments} | {s.end for s in hypothesis.segments}
    if collar > 0:
        points |= set((ref_bounds - collar).tolist()) | set((ref_bounds + collar).tolist())
    points = np.array(sorted(points), dtype=np.float64)
    if len(points) < 2:
        return DerReport()

    starts, ends = points[:-1], points[1:]
    durs = ends - starts
    mids = (starts + ends) / 2.0
    keep = durs > 0
    if collar > 0 and len(ref_bounds):
        keep &= ~(np.abs(mids[:, None] - ref_bounds[None, :]) < collar).any(axis=1)
    durs, mids = durs[keep], mids[keep]

    ref_spk = reference.speakers
    hyp_spk = hypothesis.speakers
    ref_act = _activity(reference.segments, ref_spk, mids)
    hyp_act = _activity(hypothesis.segments, hyp_spk, mids)
    n_ref = ref_act.sum(axis=0)
    n_hyp = hyp_act.sum(axis=0)

    pairs = []
    if ref_spk and hyp_spk:
        if mapping == "optimal":
            overlap = (ref_act * durs) @ hyp_act.T.astype(np.float64)
            rows, cols = linear_sum_assignment(overlap, maximize=True)
            pairs = list(zip(rows.tolist(), cols.tolist()))
        else:
            hyp_index = {s: j for j, s in enumerate(hyp_spk)}
            pairs = [(i, hyp_index[s]) for i, s in enumerate(ref_spk) if s in hyp_index]
    matched = np.zeros(len(durs), dtype=np.int64)
    for i, j in pairs:
        matched += ref_act[i] & hyp_act[j]

    return DerReport(
        miss_s=float((np.maximum(0, n_ref - n_hyp) * durs).sum()),
        false_alarm_s=float((np.maximum(0, n_hyp - n_ref) * durs).sum()),
        confusion_s=float(((np.minimum(n_ref, n_hyp) - matched) * durs).sum()),
        total_s=float((n_ref * durs).sum()),
    )


def compute_der(
    reference: DiarizationHypothesis,
    hypothesis: DiarizationHypothesis,
    collar: float = DEFAULT_COLLAR,
    mapping: str = "optimal",
) -> DerReport:
    if reference.file_id != hypothesis.file_id:
        raise ScoringError(
            f"reference file {reference.file_id!r} vs hypothesis file {hypothesis.file_id!r}"
        )
    report = der_seconds(reference, hypothesis, collar, mapping)
    if report.total_s <= 0:
        raise ScoringError(f"{reference.file_id}: DER undefined, no scored reference speech")
    return report


def score_corpus(
    references: Dict[str, DiarizationHypothesis],
    hypotheses: Dict[str, DiarizationHypothesis],
    collar: float = DEFAULT_COLLAR,
    mapping: str = "optimal",
) -> DerReport:
    """Time-weighted aggregate: error seconds are summed over files before normalizing."""
    total = DerReport()
    for file_id in sorted(references):
        ref = references[file_id]
        hyp = hypotheses.get(file_id)
        if hyp is None:
            hyp = DiarizationHypothesis(file_id)
            total.missing_files.append(file_id)
        total = total + der_seconds(ref, hyp, collar, mapping)
    if total.total_s <= 0:
        raise ScoringError("DER undefined: no scored reference speech in corpus")
    return total
