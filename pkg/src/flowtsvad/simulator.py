# src/flowtsvad/simulator.py
"""
Synthetic multi-speaker conversations.

Labels come from a turn-taking process with exponential turn and pause lengths
and occasional overlapping turn starts; acoustic frames are the sum of the
active speakers' signature vectors plus Gaussian noise; enrollment embeddings
are signatures plus Gaussian noise.

Dataset directory:
  manifest.json     version, dims, config, per-segment records, sha256 checksums
  labels.bin        raw {0,1} bytes, n × S × L
  features.bin      tensor file, n × (R·L) × F
  enrollments.bin   tensor file, n × S × c
  speakers.bin      tensor file, pool × F (speaker signatures)
Tensor file: b"FTSV", uint16 version, uint16 ndim, ndim × uint32 dims, then <f4 data.
"""
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from src.flowtsvad.errors import ConfigError, DataError
from src.flowtsvad.parallel_process import process_items_parallel
from src.flowtsvad.scoring import DiarizationHypothesis, Segment, labels_to_hypothesis, segments_to_frames

LABEL_LEN = 200
FRAME_DURATION = 0.08
TENSOR_MAGIC = b"FTSV"
TENSOR_VERSION = 1
DATASET_VERSION = 1
POOL_KEY = 0xA11
STATS_KEY = 0xE57
SEGMENT_KEY = 0x5E6
WRITE_CHUNK = 256


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass
class ConversationSpec:
    num_speakers: int = 3
    duration: float = 16.0
    mean_turn: float = 2.0
    mean_pause: float = 0.8
    overlap_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ConfigError(f"num_speakers must be >= 1, got {self.num_speakers}")
        for name in ("duration", "mean_turn", "mean_pause"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigError(f"overlap_prob must be in [0, 1], got {self.overlap_prob}")


@dataclass
class SimulationConfig:
    spec: ConversationSpec = field(default_factory=ConversationSpec)
    num_segments: int = 100
    feat_dim: int = 16
    downsample: int = 8
    speaker_pool: int = 64
    signature_scale: float = 1.0
    feature_noise: float = 0.5
    enroll_noise: float = 0.1
    held_out_fraction: float = 0.1
    workers: int = 4

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = ConversationSpec(**self.spec)
        if self.num_segments < 0:
            raise ConfigError(f"num_segments must be >= 0, got {self.num_segments}")
        if self.speaker_pool < self.spec.num_speakers:
            raise ConfigError(
                f"speaker_pool {self.speaker_pool} smaller than num_speakers {self.spec.num_speakers}"
            )
        if not 0.0 <= self.held_out_fraction <= 1.0:
            raise ConfigError(f"held_out_fraction must be in [0, 1], got {self.held_out_fraction}")

    @property
    def num_frames(self) -> int:
        return int(round(self.spec.duration / FRAME_DURATION))


@dataclass
class SimulatedSegment:
    segment_id: str
    features: np.ndarray
    labels: np.ndarray
    enrollments: np.ndarray
    speakers: List[str]
    pool_ids: List[int]


# --------------------------
# labels
# --------------------------
def label_statistics(tracks: np.ndarray) -> Dict[str, float]:
    """speech_fraction: frames with >=1 speaker; overlap_fraction: >=2 speakers among speech frames."""
    counts = np.asarray(tracks).sum(axis=-2).reshape(-1)
    speech = int((counts >= 1).sum())
    overlap = int((counts >= 2).sum())
    return {
        "speech_fraction": speech / counts.size if counts.size else 0.0,
        "overlap_fraction": overlap / speech if speech else 0.0,
    }


def simulate_labels(
    spec: ConversationSpec, rng: np.random.Generator, frame_duration: float = FRAME_DURATION
) -> Tuple[np.ndarray, Dict[str, float]]:
    """
    Per-speaker binary frame tracks (S × L) and their realized statistics.
    Turns alternate between distinct speakers; with probability overlap_prob a
    turn starts min(Exp(mean_pause), previous turn / 2) before the previous one ends.
    """
    num_frames = int(round(spec.duration / frame_duration))
    S = spec.num_speakers
    segments: List[Segment] = []

    t = rng.exponential(spec.mean_pause)
    prev = None
    while t < spec.duration:
        if prev is None or S == 1:
            spk = int(rng.integers(S)) if prev is None else 0
        else:
            spk = int(rng.integers(S - 1))
            spk = spk if spk < prev else spk + 1
        turn = max(rng.exponential(spec.mean_turn), frame_duration)
        end = t + turn
        segments.append(Segment(str(spk), t, min(end, spec.duration)))
        if S > 1 and rng.random() < spec.overlap_prob:
            t = end - min(rng.exponential(spec.mean_pause), 0.5 * turn)
        else:
            t = end + rng.exponential(spec.mean_pause)
        prev = spk

    tracks = np.stack(
        [segments_to_frames(segments, num_frames, frame_duration, str(s)) for s in range(S)]
    )
    return tracks, label_statistics(tracks)


def expected_statistics(spec: ConversationSpec, trials: int = 200, seed: int = 0) -> Dict[str, float]:
    """Monte Carlo estimate of the label statistics implied by a spec (frames pooled over trials)."""
    tracks = [simulate_labels(spec, derive_rng(seed, STATS_KEY, i))[0] for i in range(trials)]
    return label_statistics(np.concatenate(tracks, axis=-1))


# --------------------------
# features / enrollments
# --------------------------
def speaker_pool(config: SimulationConfig) -> np.ndarray:
    rng = derive_rng(config.spec.seed, POOL_KEY)
    pool = rng.standard_normal((config.speaker_pool, config.feat_dim)) * config.signature_scale
    return pool.astype(np.float32)


def simulate_features(
    labels: np.ndarray,
    signatures: np.ndarray,
    noise_sigma: float,
    rng: np.random.Generator,
    downsample: int = 8,
) -> np.ndarray:
    """(R·L) × F frames: sum of active speakers' signatures + N(0, σ² I)."""
    labels = np.asarray(labels)
    signatures = np.asarray(signatures, dtype=np.float64)
    if labels.shape[0] != signatures.shape[0]:
        raise ConfigError(
            f"simulate_features: {labels.shape[0]} label tracks but {signatures.shape[0]} signatures"
        )
    activity = np.repeat(labels, downsample, axis=1).astype(np.float64)
    noise = rng.standard_normal((activity.shape[1], signatures.shape[1]))
    return (activity.T @ signatures + noise_sigma * noise).astype(np.float32)


def simulate_segment(index: int, config: SimulationConfig, pool: np.ndarray) -> SimulatedSegment:
    rng = derive_rng(config.spec.seed, SEGMENT_KEY, index)
    pool_ids = sorted(rng.choice(len(pool), size=config.spec.num_speakers, replace=False).tolist())
    labels, _ = simulate_labels(config.spec, rng)
    signatures = pool[pool_ids]
    features = simulate_features(labels, signatures, config.feature_noise, rng, config.downsample)
    enrollments = signatures + config.enroll_noise * rng.standard_normal(signatures.shape)
    return SimulatedSegment(
        segment_id=f"seg{index:06d}",
        features=features,
        labels=labels.astype(np.uint8),
        enrollments=enrollments.astype(np.float32),
        speakers=[f"spk{i:03d}" for i in pool_ids],
        pool_ids=pool_ids,
    )


def _process_one_segment(item: int, config: SimulationConfig, pool: np.ndarray, **kwargs):
    segment = simulate_segment(item, config, pool)
    stats = label_statistics(segment.labels)
    return segment, [
        {"type": "status", "description": f"{segment.segment_id}"},
        {"type": "status", "name": "overlap", "description": f"{stats['overlap_fraction']:.3f}"},
    ]


# --------------------------
# tensor files
# --------------------------
def write_tensor_header(f, shape):
    f.write(struct.pack("<4sHH", TENSOR_MAGIC, TENSOR_VERSION, len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise DataError(f"{path}: truncated tensor header")
        magic, version, ndim = struct.unpack("<4sHH", head)
        if magic != TENSOR_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != TENSOR_VERSION:
            raise DataError(f"{path}: tensor version {version}, expected {TENSOR_VERSION}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    offset = 8 + 4 * ndim
    if math.prod(shape) == 0:
        return np.zeros(shape, dtype="<f4")
    return np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=tuple(shape))


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_dataset(out_dir: str, config: SimulationConfig) -> str:
    """
    Simulate config.num_segments segments (each from SeedSequence([seed, index]))
    and write them to out_dir. The last ceil(n·held_out_fraction) segments are held out.
    """
    os.makedirs(out_dir, exist_ok=True)
    n = config.num_segments
    S = config.spec.num_speakers
    L = config.num_frames
    RL = config.downsample * L
    F = config.feat_dim
    pool = speaker_pool(config)
    n_held = int(math.ceil(n * config.held_out_fraction))

    paths = {name: os.path.join(out_dir, name) for name in
             ("labels.bin", "features.bin", "enrollments.bin", "speakers.bin")}
    records = []
    with open(paths["labels.bin"], "wb") as f_lab, \
            open(paths["features.bin"], "wb") as f_feat, \
            open(paths["enrollments.bin"], "wb") as f_enr:
        write_tensor_header(f_feat, (n, RL, F))
        write_tensor_header(f_enr, (n, S, F))
        feat_offset, enr_offset = f_feat.tell(), f_enr.tell()
        for lo in range(0, n, WRITE_CHUNK):
            chunk = list(range(lo, min(n, lo + WRITE_CHUNK)))
            segments = process_items_parallel(
                chunk,
                _process_one_segment,
                workers=config.workers,
                desc=f"[simulate] {lo}-{chunk[-1]}",
                config=config,
                pool=pool,
            )
            for seg, index in zip(segments, chunk):
                f_lab.write(seg.labels.tobytes())
                f_feat.write(seg.features.astype("<f4").tobytes())
                f_enr.write(seg.enrollments.astype("<f4").tobytes())
                records.append({
                    "id": seg.segment_id,
                    "index": index,
                    "split": "held_out" if index >= n - n_held else "train",
                    "speakers": seg.speakers,
                    "pool_ids": seg.pool_ids,
                    "offsets": {
                        "labels.bin": index * S * L,
                        "features.bin": feat_offset + index * RL * F * 4,
                        "enrollments.bin": enr_offset + index * S * F * 4,
                    },
                })
    with open(paths["speakers.bin"], "wb") as f:
        write_tensor_header(f, pool.shape)
        f.write(pool.astype("<f4").tobytes())

    manifest = {
        "format": "flowtsvad-dataset",
        "version": DATASET_VERSION,
        "num_segments": n,
        "num_speakers": S,
        "label_len": L,
        "frame_duration": FRAME_DURATION,
        "downsample": config.downsample,
        "feat_dim": F,
        "embed_dim": F,
        "config": asdict(config),
        "segments": records,
        "checksums": {name: file_sha256(p) for name, p in sorted(paths.items())},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"[simulate] wrote {n} segments ({n - n_held} train / {n_held} held-out) to {out_dir}")
    return out_dir


# --------------------------
# reading
# --------------------------
class SegmentDataset:
    def __init__(self, path: str, verify: bool = False):
        self.path = path
        manifest_path = os.path.join(path, "manifest.json")
        if not os.path.exists(manifest_path):
            raise DataError(f"no dataset manifest at {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            self.manifest = json.load(f)
        if self.manifest.get("version") != DATASET_VERSION:
            raise DataError(
                f"{path}: dataset version {self.manifest.get('version')}, expected {DATASET_VERSION}"
            )
        if verify:
            for name, digest in self.manifest["checksums"].items():
                if file_sha256(os.path.join(path, name)) != digest:
                    raise DataError(f"{path}/{name}: checksum mismatch")

        m = self.manifest
        self.num_speakers = m["num_speakers"]
        self.label_len = m["label_len"]
        self.frame_duration = m["frame_duration"]
        self.downsample = m["downsample"]
        self.feat_dim = m["feat_dim"]
        self.embed_dim = m["embed_dim"]
        self.segments = m["segments"]
        n = len(self.segments)
        shape = (n, self.num_speakers, self.label_len)
        if n == 0:
            self.labels = np.zeros(shape, dtype=np.uint8)
        else:
            self.labels = np.memmap(os.path.join(path, "labels.bin"), dtype=np.uint8, mode="r", shape=shape)
        self.features = read_tensor(os.path.join(path, "features.bin"))
        self.enrollments = read_tensor(os.path.join(path, "enrollments.bin"))
        self.pool = np.asarray(read_tensor(os.path.join(path, "speakers.bin")))
        self.enroll_noise = m["config"]["enroll_noise"]

    def __len__(self) -> int:
        return len(self.segments)

    def indices(self, split: Optional[str] = None) -> List[int]:
        return [i for i, s in enumerate(self.segments) if split is None or s["split"] == split]

    def label_sequences(self, split: Optional[str] = None) -> np.ndarray:
        """Every speaker track of the chosen segments as an (m·S) × L array."""
        idx = self.indices(split)
        return np.asarray(self.labels[idx]).reshape(-1, self.label_len)

    def batch(self, indices: List[int]) -> Dict[str, object]:
        idx = list(indices)
        return {
            "features": torch.as_tensor(np.asarray(self.features[idx])),
            "labels": torch.as_tensor(np.asarray(self.labels[idx])),
            "enrollments": torch.as_tensor(np.asarray(self.enrollments[idx])),
            "speakers": [self.segments[i]["speakers"] for i in idx],
            "pool_ids": [self.segments[i]["pool_ids"] for i in idx],
        }

    def foreign_pool(self, pool_ids: List[int], rng: np.random.Generator) -> np.ndarray:
        """Enrollment-like embeddings of every pool speaker not in pool_ids."""
        others = np.setdiff1d(np.arange(len(self.pool)), np.asarray(pool_ids, dtype=np.int64))
        sig = self.pool[others]
        return (sig + self.enroll_noise * rng.standard_normal(sig.shape)).astype(np.float32)

    def reference(self, index: int) -> DiarizationHypothesis:
        seg = self.segments[index]
        return labels_to_hypothesis(seg["id"], self.labels[index], seg["speakers"], self.frame_duration)

    def references(self, split: Optional[str] = None) -> Dict[str, DiarizationHypothesis]:
        return {self.segments[i]["id"]: self.reference(i) for i in self.indices(split)}
