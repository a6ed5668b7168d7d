"""Contrastive predictive coding over per-frame audio windows.

``g_enc`` maps every aligned audio window to a latent ``z_t``; ``g_ar`` (a
GRU) summarizes ``z_1..z_t`` into the context ``c_t``.  The utterance summary
``omega`` is the last context row.  Training scores the true future latent
``z_{t+k}`` against negatives drawn from other time steps of the batch with
one bilinear scorer per horizon ``k``.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import NumericalError, ShapeError
from .media import AlignedChunks, Utterance, utterance_chunks

log = logging.getLogger(__name__)


@dataclass
class CpcConfig:
    window: int = 1066
    d_z: int = 64
    d_c: int = 128
    k_steps: int = 3
    n_negatives: int = 15
    channels: int = 32

    def __post_init__(self):
        for name in ("window", "d_z", "d_c", "k_steps", "n_negatives", "channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"CpcConfig.{name} must be a positive integer")


@dataclass
class AudioContext:
    z: torch.Tensor      # (T, d_z)
    C: torch.Tensor      # (T, d_c)
    omega: torch.Tensor  # (d_c,)


# (kernel, stride) of the strided encoder stack
_ENCODER_LAYERS = ((10, 5), (8, 4), (4, 2), (4, 2))


def _conv_out_len(n):
    for k, s in _ENCODER_LAYERS:
        n = (n - k) // s + 1
    return n


class AudioEncoder(nn.Module):
    """g_enc: strided 1-D conv stack over one raw window, flattened to ``d_z``."""

    def __init__(self, window, d_z, channels=32):
        super().__init__()
        n_out = _conv_out_len(window)
        if n_out < 1:
            raise ValueError(f"window of {window} samples is too short for the encoder")
        layers = []
        c_in = 1
        for k, s in _ENCODER_LAYERS:
            layers += [nn.Conv1d(c_in, channels, k, stride=s), nn.ReLU()]
            c_in = channels
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(channels * n_out, d_z)
        self.window = window

    def forward(self, x):
        # x: (N, window)
        if x.shape[-1] != self.window:
            raise ShapeError(f"audio window has {x.shape[-1]} samples, encoder expects {self.window}")
        h = self.convs(x.unsqueeze(1))
        return self.proj(h.flatten(1))


class CPC(nn.Module):
    def __init__(self, config: CpcConfig):
        super().__init__()
        self.config = config
        self.g_enc = AudioEncoder(config.window, config.d_z, config.channels)
        self.g_ar = nn.GRU(config.d_z, config.d_c, batch_first=True)
        self.scorers = nn.ModuleList(nn.Linear(config.d_c, config.d_z, bias=False)
                                     for _ in range(config.k_steps))

    @property
    def dtype(self):
        return self.scorers[0].weight.dtype

    def forward(self, chunks):
        z = encode_latents(chunks, self)
        C, omega = aggregate_context(z, self)
        return z, C, omega


def _as_tensor(chunks, dtype):
    if isinstance(chunks, AlignedChunks):
        chunks = chunks.chunks
    return torch.as_tensor(np.asarray(chunks) if not torch.is_tensor(chunks) else chunks, dtype=dtype)


def encode_latents(chunks, model: CPC) -> torch.Tensor:
    """``(T, L)`` or ``(B, T, L)`` windows -> latents of shape ``(..., T, d_z)``."""
    x = _as_tensor(chunks, model.dtype)
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (T, L) or (B, T, L) windows, got {tuple(x.shape)}")
    lead = x.shape[:-1]
    z = model.g_enc(x.reshape(-1, x.shape[-1]))
    return z.reshape(*lead, -1)


def aggregate_context(z: torch.Tensor, model: CPC):
    """Causal summary of ``z``: returns ``(C, omega)`` with ``omega = C[..., -1, :]``."""
    if z.ndim not in (2, 3) or z.shape[-2] == 0:
        raise ValueError(f"aggregate_context needs a non-empty latent sequence, got shape {tuple(z.shape)}")
    batched = z.ndim == 3
    C, _ = model.g_ar(z if batched else z.unsqueeze(0))
    if not batched:
        C = C.squeeze(0)
    return C, C[..., -1, :]


@torch.no_grad()
def encode_utterance(model: CPC, utt: Utterance) -> AudioContext:
    was_training = model.training
    model.eval()
    z = encode_latents(utterance_chunks(utt, model.config.window), model)
    C, omega = aggregate_context(z, model)
    model.train(was_training)
    return AudioContext(z=z, C=C, omega=omega)


def info_nce_from_scores(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of picking the positive among ``1 + n_neg`` candidates.

    ``pos`` has shape ``(...)`` and ``neg`` ``(..., n_neg)``.
    """
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - pos).mean()


def sample_negatives(B, T, k, n_neg, generator=None):
    """Flat indices into the ``B*T`` latents, never hitting the positive ``(b, t+k)``."""
    n_t = T - k
    if B * T < 2:
        raise ValueError("need at least two latents to draw negatives")
    r = torch.randint(0, B * T - 1, (B, n_t, n_neg), generator=generator)
    positive = (torch.arange(B)[:, None] * T + torch.arange(k, T)[None, :])[..., None]
    return r + (r >= positive).long()


def cpc_infonce_loss(z: torch.Tensor, C: torch.Tensor, model: CPC, config: Optional[CpcConfig] = None,
                     generator: Optional[torch.Generator] = None, negatives=None) -> torch.Tensor:
    """InfoNCE averaged over batch, time steps and horizons ``1..k_steps``.

    ``negatives`` optionally fixes the sampled indices (list, one per horizon).
    """
    config = config or model.config
    if z.ndim == 2:
        z, C = z.unsqueeze(0), C.unsqueeze(0)
    B, T, _ = z.shape
    K = config.k_steps
    if T <= K:
        raise ValueError(f"sequence length T={T} must exceed k_steps={K}")
    if config.n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    z_flat = z.reshape(B * T, -1)
    losses = []
    for k in range(1, K + 1):
        pred = model.scorers[k - 1](C[:, :T - k])  # (B, T-k, d_z)
        pos = (pred * z[:, k:]).sum(-1)
        idx = negatives[k - 1] if negatives is not None else sample_negatives(B, T, k, config.n_negatives, generator)
        neg = torch.einsum("btd,btnd->btn", pred, z_flat[idx])
        losses.append(info_nce_from_scores(pos, neg))
    return torch.stack(losses).mean()


def _batches(chunk_list, batch_size, rng):
    by_len = {}
    for i, c in enumerate(chunk_list):
        by_len.setdefault(c.shape[0], []).append(i)
    batches = []
    for idx in by_len.values():
        idx = [idx[j] for j in rng.permutation(len(idx))]
        batches += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def train_cpc(dataset: List[Utterance], config: CpcConfig, epochs=100, lr=3e-4, batch_size=8, seed=0,
              model: Optional[CPC] = None, optimizer=None, start_epoch=0):
    """Train CPC with RMSProp; returns ``(model, optimizer, per-epoch mean losses)``."""
    if not dataset:
        raise ValueError("train_cpc needs a non-empty dataset")
    torch.manual_seed(seed)
    model = model or CPC(config)
    model.train()
    optimizer = optimizer or torch.optim.RMSprop(model.parameters(), lr=lr)
    chunk_list = [torch.as_tensor(utterance_chunks(u, config.window).chunks) for u in dataset]
    gen = torch.Generator().manual_seed(seed)
    curve = []
    step = 0
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        total, count = 0.0, 0
        for batch in _batches(chunk_list, batch_size, rng):
            x = torch.stack([chunk_list[i] for i in batch]).to(model.dtype)
            z = encode_latents(x, model)
            C, _ = aggregate_context(z, model)
            loss = cpc_infonce_loss(z, C, model, config, generator=gen)
            if not torch.isfinite(loss):
                raise NumericalError(step, "cpc_infonce_loss", loss.item())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
            step += 1
        curve.append(total / count)
        log.info("cpc epoch %d loss %.5f", epoch, curve[-1])
    model.eval()
    return model, optimizer, curve


def save_cpc(path, model: CPC, optimizer=None, meta=None):
    tensors = checkpoint.module_tensors("model", model)
    header_meta = dict(meta or {})
    if optimizer is not None:
        opt_t, opt_info = checkpoint.optimizer_tensors("optim", optimizer)
        tensors.update(opt_t)
        header_meta["optimizer"] = opt_info
    return checkpoint.save(path, tensors, kind="cpc", config=asdict(model.config), meta=header_meta)


def load_cpc(path, with_optimizer=False, lr=3e-4):
    tensors, header = checkpoint.load(path, kind="cpc")
    model = CPC(CpcConfig(**header["config"]))
    checkpoint.load_module(model, tensors, "model")
    model.eval()
    if not with_optimizer:
        return model, header
    opt = torch.optim.RMSprop(model.parameters(), lr=lr)
    if "optimizer" in header["meta"]:
        checkpoint.load_optimizer(opt, tensors, "optim", header["meta"]["optimizer"])
    return model, opt, header


def freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def uniform_loss(n_negatives):
    return math.log(n_negatives + 1)
