"""Utterance loading, audio/frame alignment, dataset splits and the toy dataset.

An utterance is an audio waveform paired with the face frames of the same
clip.  On disk a clip is a directory::

    clip_<id>/frame_00000.png ...
    clip_<id>/audio.raw        # little-endian float32 mono
    clip_<id>/meta.json        # fps, sample_rate, speaker_id, emotion_id
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import AlignmentError, ShapeError

SAMPLE_RATE = 16000
FPS = 30.0


@dataclass
class Utterance:
    audio: np.ndarray
    frames: np.ndarray
    fps: float = FPS
    sample_rate: int = SAMPLE_RATE
    speaker_id: str = "0"
    emotion_id: Optional[str] = None
    clip_id: Optional[str] = None

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float32).reshape(-1)
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.validate()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def hop(self) -> float:
        return self.sample_rate / self.fps

    def validate(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] == 0:
            raise ShapeError(f"frames must be a non-empty (T, H, W, 3) array, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.sample_rate <= 0 or self.fps <= 0:
            raise ValueError("sample_rate and fps must be positive")
        needed = self.n_frames * self.hop - self.hop
        if len(self.audio) < needed:
            raise AlignmentError(
                f"audio has {len(self.audio)} samples, {needed:.0f} required for {self.n_frames} frames"
            )


@dataclass
class AlignedChunks:
    chunks: np.ndarray  # (T, L)
    hop: int

    @property
    def window(self) -> int:
        return self.chunks.shape[1]

    def __len__(self):
        return self.chunks.shape[0]


@dataclass
class DatasetSplit:
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    seed: int = 0

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["train"], d["val"], d["test"], int(d["seed"]))


def frame_center(t: int, sample_rate: float, fps: float) -> int:
    """Sample index at the middle of frame ``t``'s audio interval (0-based t)."""
    return int(math.floor((t + 0.5) * sample_rate / fps + 0.5))


def align_audio_to_frames(audio, sample_rate, fps, T, window=None) -> AlignedChunks:
    """Cut one fixed-length audio window per video frame.

    Window ``t`` is centred on the midpoint of frame ``t``'s interval and
    zero-padded where it runs past either end of the signal.  ``window``
    defaults to two hops.
    """
    if sample_rate <= 0 or fps <= 0:
        raise ValueError("sample_rate and fps must be positive")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    hop = int(round(sample_rate / fps))
    if window is None:
        window = 2 * hop
    if window < hop:
        raise ValueError(f"window ({window}) must be >= hop ({hop})")
    audio = np.asarray(audio, dtype=np.float32).reshape(-1)
    if len(audio) < hop:
        raise AlignmentError(f"audio too short: {hop} samples required for one frame, {len(audio)} available")

    half = window // 2
    starts = np.array([frame_center(t, sample_rate, fps) - half for t in range(T)])
    pad_left = max(0, -int(starts[0]))
    pad_right = max(0, int(starts[-1]) + window - len(audio))
    padded = np.pad(audio, (pad_left, pad_right))
    idx = starts[:, None] + pad_left + np.arange(window)[None, :]
    return AlignedChunks(chunks=padded[idx], hop=hop)


def utterance_chunks(utt: Utterance, window=None) -> AlignedChunks:
    return align_audio_to_frames(utt.audio, utt.sample_rate, utt.fps, utt.n_frames, window)


def split_dataset(ids: Sequence, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    ids = list(ids)
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


# --------------------------------------------------------------------------
# toy dataset

N_EMOTIONS = 3
MOUTH_WIDTH = 0.4
MOUTH_CENTER_Y = 0.72
# open/close alternation: the next level is a noisy mirror of the current one
MOUTH_RHO = -0.85
MOUTH_NOISE = 0.25


def _speaker_code(seed, speaker):
    rng = np.random.default_rng([seed, 7919, speaker])
    return {
        "background": rng.uniform(0.15, 0.85, 3),
        "skin": rng.uniform(0.35, 0.95, 3),
        "stripe_freq": rng.uniform(1.0, 4.0),
        "stripe_angle": rng.uniform(0, np.pi),
        "face_width": rng.uniform(0.30, 0.42),
        "f0": rng.uniform(110.0, 320.0),
        "harmonics": rng.uniform(0.1, 1.0, 4),
    }


def _reflect(v):
    v = np.mod(v, 2.0)
    return np.where(v > 1.0, 2.0 - v, v)


def mouth_levels(T, rng):
    """Per-frame mouth levels in (0, 1) for one clip.

    A mean-reverting AR(1) walk around 0.5 with negative lag-1 correlation
    (open/close alternation), reflected into [0, 1], then rank-spread onto
    the even grid ``(rank + 0.5) / T`` so no two frames of a clip share a level.
    """
    m = np.empty(T)
    m[0] = rng.uniform()
    noise = MOUTH_NOISE * rng.standard_normal(T - 1)
    for t in range(1, T):
        m[t] = _reflect(0.5 + MOUTH_RHO * (m[t - 1] - 0.5) + noise[t - 1])
    ranks = np.empty(T)
    ranks[np.argsort(m, kind="stable")] = np.arange(T)
    return (ranks + 0.5) / T


def mouth_opening(m):
    """Mouth patch height as a fraction of the frame height."""
    return 0.04 + 0.30 * m




def _render_frame(code, emotion, m, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    y = (yy + 0.5) / H
    x = (xx + 0.5) / W
    a = code["stripe_angle"]
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * code["stripe_freq"] * (x * np.cos(a) + y * np.sin(a)))
    img = code["background"][None, None, :] * (0.8 + 0.2 * stripes[..., None])

    face = ((x - 0.5) / code["face_width"]) ** 2 + ((y - 0.55) / 0.40) ** 2 <= 1.0
    img[face] = code["skin"]

    # eyes and brows in the upper half; brow tilt carries the emotion
    for ex in (0.38, 0.62):
        eye = ((x - ex) / 0.05) ** 2 + ((y - 0.42) / 0.035) ** 2 <= 1.0
        img[eye] = 0.05
        tilt = (emotion - 1) * 0.06 * (1 if ex < 0.5 else -1)
        brow_y = 0.34 + tilt * (x - ex) / 0.08
        brow = (np.abs(x - ex) <= 0.07) & (np.abs(y - brow_y) <= 0.012 + 0.004 * emotion)
        img[brow] = 0.1

    # anti-aliased: fractional pixel coverage keeps the opening continuous at low resolution
    cover = (_interval_cover(yy, H, MOUTH_CENTER_Y, mouth_opening(m))
             * _interval_cover(xx, W, 0.5, MOUTH_WIDTH))[..., None]
    img = img * (1 - cover) + cover * np.array([0.45, 0.05, 0.08])
    return np.clip(img, 0.0, 1.0)


def _interval_cover(idx, n, center, extent):
    """Fraction of pixel ``[idx/n, (idx+1)/n]`` inside ``center +- extent/2``."""
    lo = np.maximum(idx / n, center - extent / 2)
    hi = np.minimum((idx + 1) / n, center + extent / 2)
    return np.clip((hi - lo) * n, 0.0, 1.0)


def _render_audio(code, emotion, mouth, sample_rate, fps, rng):
    T = len(mouth)
    n = int(round(T * sample_rate / fps))
    t = np.arange(n) / sample_rate
    f0 = code["f0"] * (1.0, 1.18, 0.88)[emotion]
    amps = code["harmonics"] / np.linalg.norm(code["harmonics"])
    bounds = [int(round(k * sample_rate / fps)) for k in range(T + 1)]
    # fresh harmonic phases every frame: no waveform continuity to exploit
    phases = rng.uniform(0, 2 * np.pi, (T, len(amps) + 1))
    audio = np.zeros(n)
    for k in range(T):
        seg = slice(bounds[k], bounds[k + 1])
        carrier = np.sin(2 * np.pi * f0 * t[seg] + phases[k, 0])
        carrier += sum(a * np.sin(2 * np.pi * (h + 2) * f0 * t[seg] + phases[k, h + 1]) for h, a in enumerate(amps))
        # bump peaked mid-frame so a centred window is dominated by its own frame
        L = bounds[k + 1] - bounds[k]
        bump = np.sin(np.pi * (np.arange(L) + 0.5) / L) ** 2
        audio[seg] = (0.05 + 0.95 * mouth[k]) * bump * carrier / np.sqrt(2.0)
    audio += 0.003 * rng.standard_normal(n)
    return audio.astype(np.float32)


def synth_toy_dataset(n_utterances, T, H=32, W=32, seed=0, sample_rate=SAMPLE_RATE, fps=FPS,
                      n_speakers=None) -> List[Utterance]:
    """Deterministic synthetic talking-face clips.

    Each speaker has a fixed visual pattern and voice timbre.  Per frame a
    mouth-opening level drives both the audio envelope and the height of the
    mouth patch, so audio windows predict their frames.  Mouth levels follow
    a noisy open/close alternation: the current level linearly predicts the
    next one, yet the levels of a clip stay spread out.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if T < 2:
        raise ValueError("T must be >= 2")
    if n_speakers is None:
        n_speakers = max(2, n_utterances // 4)
    n_speakers = min(n_speakers, n_utterances) if n_utterances > 1 else 1
    codes = [_speaker_code(seed, s) for s in range(n_speakers)]
    out = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        spk = i % n_speakers
        emotion = (i // n_speakers) % N_EMOTIONS
        mouth = mouth_levels(T, rng)
        frames = np.stack([_render_frame(codes[spk], emotion, m, H, W) for m in mouth])
        audio = _render_audio(codes[spk], emotion, mouth, sample_rate, fps, rng)
        out.append(Utterance(audio=audio, frames=frames.astype(np.float32), fps=fps,
                             sample_rate=sample_rate, speaker_id=f"spk{spk:03d}",
                             emotion_id=f"emo{emotion}", clip_id=f"{i:05d}"))
    return out


# --------------------------------------------------------------------------
# frame-directory I/O

def _to_uint8(frame):
    return np.clip(np.floor(np.asarray(frame, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_frames(frames, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"frames must be (T, H, W, 3), got {frames.shape}")
    for t, frame in enumerate(frames):
        Image.fromarray(_to_uint8(frame), mode="RGB").save(directory / f"frame_{t:05d}.png")
    return directory


def load_frames(directory) -> np.ndarray:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such frame directory: {directory}")
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise IOError(f"no frame_*.png files in {directory}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        except OSError as exc:
            raise IOError(f"cannot decode frame {p}: {exc}") from exc
    return np.stack(frames)


def export_utterance(utt: Utterance, directory):
    directory = Path(directory)
    export_frames(utt.frames, directory)
    utt.audio.astype("<f4").tofile(directory / "audio.raw")
    meta = {"fps": utt.fps, "sample_rate": utt.sample_rate, "speaker_id": utt.speaker_id,
            "emotion_id": utt.emotion_id}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_audio(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    audio = np.fromfile(path, dtype="<f4")
    if audio.size == 0:
        raise IOError(f"empty audio file: {path}")
    return audio.astype(np.float32)


def load_utterance(path) -> Utterance:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such clip directory: {path}")
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise IOError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    clip_id = path.name[5:] if path.name.startswith("clip_") else path.name
    return Utterance(audio=load_audio(path / "audio.raw"), frames=load_frames(path),
                     fps=float(meta["fps"]), sample_rate=int(meta["sample_rate"]),
                     speaker_id=str(meta.get("speaker_id", "0")), emotion_id=meta.get("emotion_id"),
                     clip_id=clip_id)


def clip_dir(root, clip_id) -> Path:
    return Path(root) / f"clip_{clip_id}"


def list_clips(root) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such data directory: {root}")
    return sorted(p.name[5:] for p in root.iterdir() if p.is_dir() and p.name.startswith("clip_"))


def load_dataset(root, ids=None) -> List[Utterance]:
    ids = list_clips(root) if ids is None else ids
    return [load_utterance(clip_dir(root, i)) for i in ids]
