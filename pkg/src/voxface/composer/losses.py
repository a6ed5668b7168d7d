"""Stage-2 losses: least-squares adversarial terms, half-frame L1, gradient loss.

Images are channel-first, ``(C, H, W)`` or batched ``(N, C, H, W)``; batched
pixel losses are per-frame sums averaged over ``N``.

Discriminator targets follow the labelling of the loss definitions: real
data is pushed to ``REAL = 0`` and generated or mismatched inputs to
``FAKE = 1``.  ``Labels(conventional=True)`` swaps them.
"""
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from ..errors import ShapeError


@dataclass(frozen=True)
class Labels:
    real: float = 0.0
    fake: float = 1.0

    @classmethod
    def make(cls, conventional=False):
        return cls(1.0, 0.0) if conventional else cls()


DEFAULT_LABELS = Labels()


def _maps(x):
    return x.maps if hasattr(x, "maps") else x


def adv_loss_id(d_id, inflated, reference, labels=DEFAULT_LABELS):
    """0.5*E[(D(inflated) - fake)^2] + 0.5*E[(D(reference) - real)^2]."""
    inflated, reference = _maps(inflated), _maps(reference)
    if len(inflated) != len(reference):
        raise ShapeError(f"{len(inflated)} inflated maps vs {len(reference)} reference maps")
    for a, b in zip(inflated, reference):
        if a.shape[-3:] != b.shape[-3:]:
            raise ShapeError(f"inflated map {tuple(a.shape)} vs reference map {tuple(b.shape)}")
    d_fake = torch.as_tensor(d_id(inflated))
    d_real = torch.as_tensor(d_id(reference))
    return 0.5 * ((d_fake - labels.fake) ** 2).mean() + 0.5 * ((d_real - labels.real) ** 2).mean()


def _time_batched(frames):
    # (T, C, H, W) -> (1, T, C, H, W)
    return frames.unsqueeze(0) if frames.ndim == 4 else frames


def adv_loss_frame(d_fr, generated, real, labels=DEFAULT_LABELS):
    """0.5 * sum_t (E[(D(F_t) - fake)^2] + E[(D(phi_t) - real)^2]).

    Frames are ``(T, C, H, W)`` or ``(B, T, C, H, W)``; the expectation runs
    over ``B`` and the sum over ``T``.
    """
    generated, real = _time_batched(generated), _time_batched(real)
    if generated.shape[:2] != real.shape[:2]:
        raise ShapeError(f"generated {tuple(generated.shape[:2])} and real {tuple(real.shape[:2])} "
                         "differ in batch or frame count")
    d_fake = torch.as_tensor(d_fr(generated)).reshape(generated.shape[:2])
    d_real = torch.as_tensor(d_fr(real)).reshape(real.shape[:2])
    per_t = ((d_fake - labels.fake) ** 2).mean(0) + ((d_real - labels.real) ** 2).mean(0)
    return 0.5 * per_t.sum()


def _pick(x, idx):
    # x: (B, T, ...); idx: int or (B,) long tensor
    if isinstance(idx, int):
        return x[:, idx]
    return x[torch.arange(x.shape[0]), idx]


def adv_loss_sync(d_sync, C, real_frames, generated_frames, tau, tau_prime, labels=DEFAULT_LABELS):
    """E[(D(c_tau, phi_tau) - real)^2] + 0.5*E[(D(c_tau', phi_tau) - fake)^2]
    + 0.5*E[(D(c_tau, F_tau) - fake)^2].

    ``tau``/``tau_prime`` are 0-based frame indices (ints or per-batch tensors).
    """
    if C.ndim == 2:
        C = C.unsqueeze(0)
    real_frames, generated_frames = _time_batched(real_frames), _time_batched(generated_frames)
    T = C.shape[1]
    taus = torch.as_tensor(tau).reshape(-1)
    primes = torch.as_tensor(tau_prime).reshape(-1)
    if (taus == primes).any():
        raise ValueError("tau and tau_prime must differ")
    if taus.min() < 0 or primes.min() < 0 or taus.max() >= T or primes.max() >= T:
        raise ValueError(f"tau and tau_prime must lie in [0, {T})")
    c_tau, c_prime = _pick(C, tau), _pick(C, tau_prime)
    phi_tau, f_tau = _pick(real_frames, tau), _pick(generated_frames, tau)
    d_sync_real = torch.as_tensor(d_sync(c_tau, phi_tau))
    d_mismatch = torch.as_tensor(d_sync(c_prime, phi_tau))
    d_generated = torch.as_tensor(d_sync(c_tau, f_tau))
    return (((d_sync_real - labels.real) ** 2).mean()
            + 0.5 * ((d_mismatch - labels.fake) ** 2).mean()
            + 0.5 * ((d_generated - labels.fake) ** 2).mean())


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W) images, got {tuple(a.shape)}")


def _batch_mean(per_frame_sum, ndim):
    return per_frame_sum.mean() if ndim == 4 else per_frame_sum


def frame_similarity_loss(generated, real, region=0.5):
    """L1 over the top ``floor(region * H)`` rows (the stable upper face), summed over channels."""
    _check_pair(generated, real)
    rows = int(math.floor(region * generated.shape[-2]))
    diff = (generated[..., :rows, :] - real[..., :rows, :]).abs()
    return _batch_mean(diff.sum(dim=(-3, -2, -1)), generated.ndim)


def box_smooth(x):
    """3x3 box filter with replicate padding, per channel."""
    c = x.shape[-3]
    flat = x.reshape(-1, c, *x.shape[-2:])
    k = torch.full((c, 1, 3, 3), 1.0 / 9.0, dtype=x.dtype, device=x.device)
    out = F.conv2d(F.pad(flat, (1, 1, 1, 1), mode="replicate"), k, groups=c)
    return out.reshape(x.shape)


def central_gradients(x):
    """(d/dx, d/dy) by central differences with replicate padding."""
    c = x.shape[-3]
    flat = x.reshape(-1, c, *x.shape[-2:])
    p = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    return gx.reshape(x.shape), gy.reshape(x.shape)


def gradient_loss(generated, real):
    """sum |grad(smooth(F)) - grad(smooth(phi))| over both directions, channels and pixels."""
    _check_pair(generated, real)
    gx_f, gy_f = central_gradients(box_smooth(generated))
    gx_r, gy_r = central_gradients(box_smooth(real))
    per = (gx_f - gx_r).abs() + (gy_f - gy_r).abs()
    return _batch_mean(per.sum(dim=(-3, -2, -1)), generated.ndim)


@dataclass
class LossReport:
    l_adv_id: float
    l_adv_fr: float
    l_adv_sync: float
    l_sim: float
    l_grad: float
    l_adv_total: float
    l_total: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


PART_NAMES = ("l_adv_id", "l_adv_fr", "l_adv_sync", "l_sim", "l_grad")


def total_losses(parts, weights=None):
    """Combine the five parts into a LossReport (unit weights unless given).

    ``parts`` is a mapping keyed by PART_NAMES or a 5-sequence in that order.
    """
    if not isinstance(parts, dict):
        parts = dict(zip(PART_NAMES, parts))
    weights = weights or {}
    values = {}
    for name in PART_NAMES:
        v = float(parts[name])
        if not math.isfinite(v):
            raise ValueError(f"loss part {name} is not finite ({v})")
        values[name] = v
    adv = sum(weights.get(n, 1.0) * values[n] for n in PART_NAMES[:3])
    total = adv + weights.get("l_sim", 1.0) * values["l_sim"] + weights.get("l_grad", 1.0) * values["l_grad"]
    return LossReport(**values, l_adv_total=adv, l_total=total)
