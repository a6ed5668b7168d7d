"""Clip evaluation: SSIM, PSNR and a sync-confidence proxy."""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .composer.losses import DEFAULT_LABELS, Labels
from .errors import ShapeError
from .media import load_frames

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _gauss_kernel():
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter2(img):
    """Separable Gaussian filter over the two leading axes, mirror padding."""
    k = _gauss_kernel()
    r = SSIM_RADIUS
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def ssim(a, b) -> float:
    """Mean SSIM of two ``(H, W)`` or ``(H, W, C)`` images in [0, 1].

    Gaussian-weighted local statistics; the mean skips a window radius at
    the borders, and colour channels are averaged.
    """
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C) images, got {a.shape}")
    if min(a.shape[:2]) <= 2 * SSIM_RADIUS:
        raise ShapeError(f"images of size {a.shape[:2]} are smaller than the SSIM window")
    mu_a, mu_b = _filter2(a), _filter2(b)
    var_a = _filter2(a * a) - mu_a ** 2
    var_b = _filter2(b * b) - mu_b ** 2
    cov = _filter2(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    r = SSIM_RADIUS
    s = (num / den)[r:-r, r:-r]
    return float(np.clip(s.mean(), -1.0, 1.0))


def psnr(a, b, peak=1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak ** 2 / mse)))


def sync_confidence(frames, C, scorer, labels: Labels = DEFAULT_LABELS) -> float:
    """Median over t of (mean mismatched-pair score - matched-pair score).

    ``frames``: (T, H, W, 3) array or (T, 3, H, W) tensor; ``C``: (T, d_c);
    ``scorer(c, frames)`` scores row-aligned pairs.  The sign is oriented so
    that larger means better synchronized under either label convention.
    """
    frames = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames, dtype=torch.float32)
    if frames.ndim == 4 and frames.shape[-1] == 3 and frames.shape[1] != 3:
        frames = frames.permute(0, 3, 1, 2)
    C = torch.as_tensor(C, dtype=torch.float32)
    T = frames.shape[0]
    if T < 2:
        raise ValueError(f"sync_confidence needs at least two frames, got {T}")
    if C.shape[0] != T:
        raise ShapeError(f"{C.shape[0]} contexts for {T} frames")
    with torch.no_grad():
        # scores[i, t] = scorer(c_i, phi_t)
        scores = scorer(C.repeat_interleave(T, 0), frames.repeat(T, 1, 1, 1)).reshape(T, T).double()
    matched = scores.diagonal()
    mismatched = (scores.sum(0) - matched) / (T - 1)
    sign = 1.0 if labels.fake > labels.real else -1.0
    return float(sign * (mismatched - matched).median())


@dataclass
class EvalReport:
    ssim: float
    psnr: float
    sync_confidence: Optional[float]
    n_frames: int
    per_frame_ssim: List[float] = field(default_factory=list)
    per_frame_psnr: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("EvalReport needs at least one frame")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if not 0.0 <= self.psnr <= PSNR_CAP:
            raise ValueError(f"psnr {self.psnr} outside [0, {PSNR_CAP}]")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())


def evaluate_frames(generated, reference, C=None, scorer=None, labels: Labels = DEFAULT_LABELS) -> EvalReport:
    """Per-frame SSIM/PSNR averaged; the sync proxy needs both ``C`` and ``scorer``."""
    generated = np.asarray(generated)
    reference = np.asarray(reference)
    if len(generated) != len(reference):
        raise ShapeError(f"{len(generated)} generated frames vs {len(reference)} reference frames")
    if len(generated) == 0:
        raise ValueError("no frames to evaluate")
    s = [ssim(g, r) for g, r in zip(generated, reference)]
    p = [psnr(g, r) for g, r in zip(generated, reference)]
    conf = None
    if scorer is not None and C is not None:
        conf = sync_confidence(generated, C, scorer, labels)
    return EvalReport(ssim=float(np.mean(s)), psnr=float(np.mean(p)), sync_confidence=conf,
                      n_frames=len(s), per_frame_ssim=s, per_frame_psnr=p)


def evaluate_clip(generated_dir, reference_dir, C=None, scorer=None, labels: Labels = DEFAULT_LABELS) -> EvalReport:
    return evaluate_frames(load_frames(generated_dir), load_frames(reference_dir), C, scorer, labels)
