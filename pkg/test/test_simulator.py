# test/test_simulator.py
import json
import os
import shutil
import tempfile

import numpy as np

from src.flowtsvad.errors import ConfigError, DataError
from src.flowtsvad.pipeline import segment_seed
from src.flowtsvad.simulator import (
    LABEL_LEN,
    POOL_KEY,
    SEGMENT_KEY,
    STATS_KEY,
    ConversationSpec,
    SegmentDataset,
    SimulationConfig,
    derive_rng,
    expected_statistics,
    label_statistics,
    make_dataset,
    read_tensor,
    simulate_features,
    simulate_labels,
    simulate_segment,
    speaker_pool,
)
from src.flowtsvad.tsvad_model import PROBE_KEY, STAGE_KEY, _stream_seed


def _config(**kwargs):
    base = dict(spec=ConversationSpec(num_speakers=2), num_segments=8, feat_dim=4, downsample=2,
                speaker_pool=8, held_out_fraction=0.25, workers=1)
    base.update(kwargs)
    return SimulationConfig(**base)


def test_labels_shape_and_determinism():
    spec = ConversationSpec(num_speakers=3)
    a, stats = simulate_labels(spec, derive_rng(0, 1))
    b, _ = simulate_labels(spec, derive_rng(0, 1))
    assert a.shape == (3, LABEL_LEN)
    assert set(np.unique(a).tolist()) <= {0, 1}
    assert np.array_equal(a, b)
    assert 0.0 <= stats["speech_fraction"] <= 1.0
    assert stats == label_statistics(a)


def test_no_overlap_without_overlap_turns():
    stats = expected_statistics(ConversationSpec(num_speakers=3, overlap_prob=0.0), trials=50)
    assert stats["overlap_fraction"] == 0.0
    assert stats["speech_fraction"] > 0.5


def test_overlap_grows_with_overlap_prob():
    low = expected_statistics(ConversationSpec(num_speakers=2, overlap_prob=0.1), trials=100)
    high = expected_statistics(ConversationSpec(num_speakers=2, overlap_prob=0.6), trials=100)
    assert high["overlap_fraction"] > low["overlap_fraction"] > 0.0


def test_single_speaker_never_overlaps():
    tracks, stats = simulate_labels(ConversationSpec(num_speakers=1, overlap_prob=1.0), derive_rng(3))
    assert tracks.shape == (1, LABEL_LEN)
    assert stats["overlap_fraction"] == 0.0


def test_label_statistics_by_hand():
    tracks = np.array([[1, 1, 0, 0], [0, 1, 1, 0]])
    stats = label_statistics(tracks)
    assert stats["speech_fraction"] == 0.75
    assert abs(stats["overlap_fraction"] - 1 / 3) < 1e-12


def test_spec_validation():
    for bad in ({"num_speakers": 0}, {"duration": 0.0}, {"overlap_prob": 1.5}, {"mean_turn": -1.0}):
        try:
            ConversationSpec(**bad)
        except ConfigError:
            continue
        raise AssertionError(f"{bad} accepted")
    try:
        _config(speaker_pool=1)
    except ConfigError:
        pass
    else:
        raise AssertionError("pool smaller than speakers accepted")


def test_features_without_noise_are_signature_sums():
    labels = np.array([[1, 0, 1], [0, 1, 1]], dtype=np.uint8)
    signatures = np.array([[1.0, 2.0], [10.0, 20.0]])
    x = simulate_features(labels, signatures, 0.0, np.random.default_rng(0), downsample=2)
    assert x.shape == (6, 2)
    assert x[:2].tolist() == [[1.0, 2.0]] * 2
    assert x[2:4].tolist() == [[10.0, 20.0]] * 2
    assert x[4:].tolist() == [[11.0, 22.0]] * 2


def test_features_reject_track_mismatch():
    try:
        simulate_features(np.zeros((3, 4)), np.zeros((2, 5)), 0.1, np.random.default_rng(0))
    except ConfigError:
        pass
    else:
        raise AssertionError("3 tracks with 2 signatures accepted")


def test_segment_is_seeded_by_index():
    config = _config()
    pool = speaker_pool(config)
    a = simulate_segment(3, config, pool)
    b = simulate_segment(3, config, pool)
    c = simulate_segment(4, config, pool)
    assert a.segment_id == "seg000003"
    assert np.array_equal(a.features, b.features) and a.pool_ids == b.pool_ids
    assert not np.array_equal(a.features, c.features)
    assert a.features.shape == (2 * LABEL_LEN, 4)
    assert a.speakers == [f"spk{i:03d}" for i in a.pool_ids]


def test_segment_streams_have_their_own_namespace():
    config = _config()
    pool = speaker_pool(config)
    seg = simulate_segment(5, config, pool)
    rng = derive_rng(config.spec.seed, SEGMENT_KEY, 5)
    assert seg.pool_ids == sorted(rng.choice(len(pool), size=2, replace=False).tolist())
    for key in (POOL_KEY, STATS_KEY):
        segment = derive_rng(config.spec.seed, SEGMENT_KEY, key).integers(0, 2 ** 62, 4)
        named = derive_rng(config.spec.seed, key).integers(0, 2 ** 62, 4)
        assert not np.array_equal(segment, named)
    assert segment_seed(0, PROBE_KEY) != _stream_seed(0, PROBE_KEY)
    assert segment_seed(0, 1) != _stream_seed(0, STAGE_KEY, 1)


def test_dataset_round_trip():
    out = tempfile.mkdtemp(prefix="flowtsvad_sim_")
    try:
        config = _config()
        make_dataset(out, config)
        ds = SegmentDataset(out, verify=True)
        assert len(ds) == 8
        assert ds.indices("held_out") == [6, 7]
        assert len(ds.indices("train")) == 6
        assert ds.label_sequences("train").shape == (12, LABEL_LEN)

        seg = simulate_segment(5, config, speaker_pool(config))
        batch = ds.batch([5])
        assert np.array_equal(batch["features"][0].numpy(), seg.features)
        assert np.array_equal(batch["labels"][0].numpy(), seg.labels)
        assert np.array_equal(batch["enrollments"][0].numpy(), seg.enrollments)
        assert batch["speakers"][0] == seg.speakers

        foreign = ds.foreign_pool(seg.pool_ids, np.random.default_rng(0))
        assert foreign.shape == (6, 4)

        refs = ds.references("held_out")
        assert sorted(refs) == ["seg000006", "seg000007"]
        assert set(refs["seg000006"].speakers) <= set(ds.segments[6]["speakers"])
    finally:
        shutil.rmtree(out)


def test_dataset_independent_of_workers():
    a, b = tempfile.mkdtemp(), tempfile.mkdtemp()
    try:
        make_dataset(a, _config(workers=1))
        make_dataset(b, _config(workers=3))
        with open(os.path.join(a, "manifest.json")) as f:
            ma = json.load(f)
        with open(os.path.join(b, "manifest.json")) as f:
            mb = json.load(f)
        assert ma["checksums"] == mb["checksums"]
        assert ma["segments"] == mb["segments"]
    finally:
        shutil.rmtree(a)
        shutil.rmtree(b)


def test_tampered_dataset_fails_verification():
    out = tempfile.mkdtemp()
    try:
        make_dataset(out, _config(num_segments=2, held_out_fraction=0.0))
        path = os.path.join(out, "labels.bin")
        with open(path, "r+b") as f:
            first = f.read(1)
            f.seek(0)
            f.write(bytes([1 - first[0]]))
        SegmentDataset(out)
        try:
            SegmentDataset(out, verify=True)
        except DataError as e:
            assert "checksum" in str(e)
        else:
            raise AssertionError("tampered labels passed verification")
    finally:
        shutil.rmtree(out)


def test_bad_tensor_file():
    out = tempfile.mkdtemp()
    try:
        path = os.path.join(out, "x.bin")
        with open(path, "wb") as f:
            f.write(b"NOPE\x01\x00\x01\x00\x02\x00\x00\x00")
        try:
            read_tensor(path)
        except DataError as e:
            assert "magic" in str(e)
        else:
            raise AssertionError("bad magic accepted")
        try:
            SegmentDataset(out)
        except DataError:
            pass
        else:
            raise AssertionError("directory without manifest accepted")
    finally:
        shutil.rmtree(out)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"[ok] {name}")
