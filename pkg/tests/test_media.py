import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxface.errors import AlignmentError, ShapeError
from voxface.media import (DatasetSplit, Utterance, align_audio_to_frames, export_frames, export_utterance,
                           frame_center, load_frames, load_utterance, split_dataset, synth_toy_dataset,
                           utterance_chunks)


def brute_chunks(audio, sr, fps, T, window):
    # one sample at a time, zero outside the signal
    out = np.zeros((T, window), dtype=np.float32)
    for t in range(T):
        center = int(np.floor((t + 0.5) * sr / fps + 0.5))
        for j in range(window):
            idx = center - window // 2 + j
            if 0 <= idx < len(audio):
                out[t, j] = audio[idx]
    return out


def test_hop_and_chunk_count():
    a = align_audio_to_frames(np.ones(16000), 16000, 30, 30, window=533)
    assert a.hop == 533
    assert a.chunks.shape == (30, 533)


def test_single_frame():
    a = align_audio_to_frames(np.random.default_rng(0).normal(size=700), 16000, 30, 1)
    assert len(a) == 1


def test_left_padding_matches_hand_computation():
    audio = np.arange(1, 8001, dtype=np.float32)
    a = align_audio_to_frames(audio, 16000, 25, 12, window=1280)
    assert a.hop == 640 and a.chunks.shape == (12, 1280)
    # first centre sits half a hop in: 320 - 640 = -320
    assert np.all(a.chunks[0, :320] == 0)
    assert a.chunks[0, 320] == audio[0]
    np.testing.assert_array_equal(a.chunks, brute_chunks(audio, 16000, 25, 12, 1280))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(600, 6000), sr=st.sampled_from([8000, 16000, 22050]), fps=st.sampled_from([24.0, 25.0, 30.0]),
       T=st.integers(1, 20), extra=st.integers(0, 400))
def test_alignment_matches_brute_force(n, sr, fps, T, extra):
    hop = int(round(sr / fps))
    if n < hop:
        return
    window = hop + extra
    audio = np.random.default_rng(n).normal(size=n).astype(np.float32)
    a = align_audio_to_frames(audio, sr, fps, T, window)
    assert a.chunks.shape == (T, window)
    np.testing.assert_array_equal(a.chunks, brute_chunks(audio, sr, fps, T, window))


def test_short_audio_error_names_counts():
    with pytest.raises(AlignmentError, match="533.*100"):
        align_audio_to_frames(np.zeros(100), 16000, 30, 4)


def test_window_shorter_than_hop():
    with pytest.raises(ValueError):
        align_audio_to_frames(np.zeros(2000), 16000, 30, 2, window=100)


def test_frame_center():
    assert frame_center(0, 16000, 25) == 320
    assert frame_center(1, 16000, 25) == 960


@pytest.mark.parametrize("n,sizes", [(100, (70, 15, 15)), (0, (0, 0, 0)), (7, (4, 1, 2))])
def test_split_sizes(n, sizes):
    assert split_dataset(range(n), seed=3).sizes() == sizes


def test_split_sizes_by_enumeration():
    for n in range(60):
        tr, va, te = split_dataset(range(n)).sizes()
        assert tr == int(7 * n // 10) and va == int(15 * n // 100) and tr + va + te == n


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 1000), seed=st.integers(0, 2 ** 31))
def test_split_partitions(n, seed):
    s = split_dataset(list(range(n)), seed=seed)
    parts = [set(s.train), set(s.val), set(s.test)]
    assert set().union(*parts) == set(range(n))
    assert sum(map(len, parts)) == n
    assert split_dataset(list(range(n)), seed=seed).to_dict() == s.to_dict()


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ValueError):
        split_dataset(range(10), (0.5, 0.2, 0.2))


def test_split_roundtrip(tmp_path):
    s = split_dataset([f"c{i}" for i in range(9)], seed=5)
    s.save(tmp_path / "split.json")
    assert DatasetSplit.load(tmp_path / "split.json") == s
    assert set(json.loads((tmp_path / "split.json").read_text())) == {"train", "val", "test", "seed"}


def test_toy_dataset_deterministic():
    a = synth_toy_dataset(2, 8, 32, 32, seed=7)
    b = synth_toy_dataset(2, 8, 32, 32, seed=7)
    for u, v in zip(a, b):
        assert u.audio.tobytes() == v.audio.tobytes()
        assert u.frames.tobytes() == v.frames.tobytes()
    c = synth_toy_dataset(2, 8, 32, 32, seed=8)
    assert a[0].audio.tobytes() != c[0].audio.tobytes()


def test_toy_dataset_valid():
    for u in synth_toy_dataset(5, 6, 32, 48, seed=1):
        u.validate()
        assert u.frames.shape == (6, 32, 48, 3)
        assert len(u.audio) == round(6 * u.sample_rate / u.fps)


def test_toy_dataset_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_toy_dataset(0, 8)
    with pytest.raises(ValueError):
        synth_toy_dataset(2, 1)


def _mouth_darkness(frames):
    # mean brightness drop over the lower-middle face region
    H, W = frames.shape[1:3]
    region = frames[:, int(0.5 * H):int(0.95 * H), int(0.25 * W):int(0.75 * W)]
    return -region.mean(axis=(1, 2, 3))


def test_audio_predicts_frames():
    data = synth_toy_dataset(10, 10, 32, 32, seed=0)
    rms, dark = [], []
    for u in data:
        chunks = utterance_chunks(u).chunks
        rms.append(np.sqrt((chunks ** 2).mean(axis=1)))
        dark.append(_mouth_darkness(u.frames))
    # 100 pairs; centre within each clip so the static speaker pattern drops out
    rms = np.concatenate([r - r.mean() for r in rms])
    dark = np.concatenate([d - d.mean() for d in dark])
    aligned = np.corrcoef(rms, dark)[0, 1]
    shuffled = np.corrcoef(rms, np.random.default_rng(0).permutation(dark))[0, 1]
    assert aligned > 0.5
    assert aligned > abs(shuffled) + 0.3


def test_frames_roundtrip(tmp_path):
    u = synth_toy_dataset(1, 30, 64, 64, seed=2)[0]
    export_frames(u.frames, tmp_path / "clip")
    back = load_frames(tmp_path / "clip")
    assert back.shape == (30, 64, 64, 3)
    assert np.abs(back - u.frames).max() <= 1 / 255 + 1e-7


def test_utterance_roundtrip(tmp_path):
    u = synth_toy_dataset(1, 8, 32, 32, seed=3)[0]
    export_utterance(u, tmp_path / "clip_00000")
    v = load_utterance(tmp_path / "clip_00000")
    np.testing.assert_array_equal(v.audio, u.audio)
    assert v.fps == u.fps and v.sample_rate == u.sample_rate and v.speaker_id == u.speaker_id
    assert v.clip_id == "00000"
    assert np.abs(v.frames - u.frames).max() <= 1 / 255 + 1e-7


def test_missing_paths_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_frames(tmp_path / "nowhere")
    with pytest.raises(FileNotFoundError, match="gone"):
        load_utterance(tmp_path / "gone")


def test_empty_frame_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(IOError, match="empty"):
        load_frames(tmp_path / "empty")


def test_utterance_invariants():
    with pytest.raises(ShapeError):
        Utterance(audio=np.zeros(2000), frames=np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        Utterance(audio=np.zeros(2000), frames=np.full((2, 8, 8, 3), 1.5))
    with pytest.raises(AlignmentError):
        Utterance(audio=np.zeros(10), frames=np.zeros((4, 8, 8, 3)))
