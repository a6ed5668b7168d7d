"""Alternating least-squares GAN training of the frame composer."""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .. import checkpoint
from ..cpc import CPC, encode_utterance
from ..distill import IdentityTeacher, Students
from ..errors import NumericalError
from ..media import Utterance
from .losses import (Labels, LossReport, adv_loss_frame, adv_loss_id, adv_loss_sync, frame_similarity_loss,
                     gradient_loss, total_losses)
from .networks import Composer, ComposerConfig

log = logging.getLogger(__name__)


@dataclass
class Stage2Config:
    lr_generator: float = 3e-4
    lr_id: float = 3e-4
    lr_frame: float = 1e-4
    lr_sync: float = 1e-5
    epochs: int = 100
    max_steps: Optional[int] = None
    batch_size: int = 4
    weights: Dict[str, float] = field(default_factory=dict)
    sim_region: float = 0.5
    conventional_targets: bool = False
    sync_warmup_steps: int = 0
    sync_warmup_lr: float = 1e-3
    seed: int = 0

    @property
    def labels(self):
        return Labels.make(self.conventional_targets)


@dataclass
class ClipTensors:
    C: torch.Tensor          # (T, d_c)
    frames: torch.Tensor     # (T, 3, H, W)
    nu: torch.Tensor         # (d_id,)
    mu: torch.Tensor         # (d_emo,)
    reference: List[torch.Tensor]  # 3 maps (c, h, w), ascending size


@torch.no_grad()
def prepare_clips(dataset: List[Utterance], cpc: CPC, students: Students, id_teacher: IdentityTeacher):
    clips = []
    for utt in dataset:
        ctx = encode_utterance(cpc, utt)
        nu, mu = students(ctx.omega.float())
        frames = torch.as_tensor(utt.frames).permute(0, 3, 1, 2).contiguous()
        reference = [m[0] for m in id_teacher.features(utt.frames[0])]
        clips.append(ClipTensors(ctx.C.float(), frames, nu, mu, reference))
    return clips


def make_optimizers(composer: Composer, config: Stage2Config):
    rms = torch.optim.RMSprop
    return {
        "generator": rms(composer.generator_parameters(), lr=config.lr_generator),
        "d_id": rms(composer.d_id.parameters(), lr=config.lr_id),
        "d_fr": rms(composer.d_fr.parameters(), lr=config.lr_frame),
        "d_sync": rms(composer.d_sync.parameters(), lr=config.lr_sync),
    }


def sample_pair(T, rng):
    """(tau, tau') uniformly with tau != tau'."""
    tau = int(rng.integers(T))
    prime = int(rng.integers(T - 1))
    return tau, prime + (prime >= tau)


def _stack(clips):
    return (torch.stack([c.C for c in clips]), torch.stack([c.frames for c in clips]),
            torch.stack([c.nu for c in clips]), torch.stack([c.mu for c in clips]),
            [torch.stack([c.reference[i] for c in clips]) for i in range(3)])


def _generate(composer, C, nu, mu):
    B, T = C.shape[:2]
    inflated = composer.inflater(nu)
    frames = composer.generator(C.reshape(B * T, -1), inflated.expand(T), mu.repeat_interleave(T, dim=0))
    return inflated, frames.reshape(B, T, *frames.shape[1:])


def _check(step, values):
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NumericalError(step, name, float(v.detach().reshape(-1)[0]))


def stage2_step(composer: Composer, optimizers, clips: List[ClipTensors], tau, tau_prime,
                config: Stage2Config, step=0):
    """One discriminator update followed by one generator update.

    Returns ``(generator LossReport, discriminator losses)``.
    """
    labels = config.labels
    C, real, nu, mu, reference = _stack(clips)
    inflated, fake = _generate(composer, C, nu, mu)

    # discriminators: the three adversarial losses as defined, generator detached
    d_losses = {
        "d_id": adv_loss_id(composer.d_id, inflated.detach(), reference, labels),
        "d_fr": adv_loss_frame(composer.d_fr, fake.detach(), real, labels),
        "d_sync": adv_loss_sync(composer.d_sync, C, real, fake.detach(), tau, tau_prime, labels),
    }
    _check(step, d_losses)
    for name in ("d_id", "d_fr", "d_sync"):
        optimizers[name].zero_grad()
    sum(d_losses.values()).backward()
    for name in ("d_id", "d_fr", "d_sync"):
        optimizers[name].step()

    # generator: its own outputs are pushed to the "real" target
    tgt = labels.real
    g_parts = {
        "l_adv_id": 0.5 * ((composer.d_id(inflated) - tgt) ** 2).mean(),
        "l_adv_fr": 0.5 * ((composer.d_fr(fake) - tgt) ** 2).mean(0).sum(),
        "l_adv_sync": 0.5 * ((composer.d_sync(C[:, tau], fake[:, tau]) - tgt) ** 2).mean(),
        "l_sim": frame_similarity_loss(fake.flatten(0, 1), real.flatten(0, 1), config.sim_region),
        "l_grad": gradient_loss(fake.flatten(0, 1), real.flatten(0, 1)),
    }
    _check(step, g_parts)
    w = config.weights
    g_total = sum(w.get(k, 1.0) * v for k, v in g_parts.items())
    optimizers["generator"].zero_grad()
    g_total.backward()
    optimizers["generator"].step()
    report = total_losses({k: v.item() for k, v in g_parts.items()}, w)
    return report, {k: v.item() for k, v in d_losses.items()}


def _batches(clips, batch_size, rng):
    by_len = {}
    for i, c in enumerate(clips):
        by_len.setdefault(c.C.shape[0], []).append(i)
    out = []
    for idx in by_len.values():
        idx = [idx[j] for j in rng.permutation(len(idx))]
        out += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    return [out[j] for j in rng.permutation(len(out))]


def train_sync_discriminator(d_sync, clips: List[ClipTensors], steps, lr=1e-3, batch_size=16, seed=0,
                             labels: Labels = Labels(), optimizer=None):
    """Fit D_sync on real pairs only: aligned -> real label, mismatched -> fake label.

    Uses the real-data terms of the synchronization loss with the same 1 : 1/2
    weighting.  Returns the per-step loss curve.
    """
    optimizer = optimizer or torch.optim.RMSprop(d_sync.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 4099])
    curve = []
    for step in range(steps):
        picks = rng.integers(len(clips), size=batch_size)
        c_match, c_mis, phi = [], [], []
        for i in picks:
            T = clips[i].C.shape[0]
            tau, prime = sample_pair(T, rng)
            c_match.append(clips[i].C[tau])
            c_mis.append(clips[i].C[prime])
            phi.append(clips[i].frames[tau])
        c_match, c_mis, phi = torch.stack(c_match), torch.stack(c_mis), torch.stack(phi)
        loss = (((d_sync(c_match, phi) - labels.real) ** 2).mean()
                + 0.5 * ((d_sync(c_mis, phi) - labels.fake) ** 2).mean())
        if not torch.isfinite(loss):
            raise NumericalError(step, "sync_loss", loss.item())
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(loss.item())
    return curve


@torch.no_grad()
def sync_accuracy(d_sync, clips: List[ClipTensors], labels: Labels = Labels()):
    """Balanced accuracy over every aligned pair and every mismatched (tau' != tau) pair."""
    mid = 0.5 * (labels.real + labels.fake)
    real_is_low = labels.real < labels.fake
    hits_match, n_match, hits_mis, n_mis = 0, 0, 0, 0
    for clip in clips:
        T = clip.C.shape[0]
        scores = d_sync(clip.C.repeat(T, 1), clip.frames.repeat_interleave(T, dim=0)).reshape(T, T)
        # scores[frame, context]
        said_real = scores < mid if real_is_low else scores > mid
        eye = torch.eye(T, dtype=torch.bool)
        hits_match += int(said_real[eye].sum())
        n_match += T
        hits_mis += int((~said_real[~eye]).sum())
        n_mis += T * (T - 1)
    return 0.5 * (hits_match / n_match + hits_mis / n_mis)


def train_stage2(dataset: List[Utterance], cpc: CPC, students: Students, id_teacher: IdentityTeacher,
                 config: Stage2Config = Stage2Config(), composer_config: Optional[ComposerConfig] = None,
                 composer: Optional[Composer] = None, optimizers=None, clips=None, callback=None):
    """Train the composer; returns ``(composer, optimizers, history)``.

    ``history`` holds the generator LossReport and discriminator losses of
    every step.  Stops after ``config.epochs`` or ``config.max_steps``
    generator steps, whichever comes first.
    """
    clips = clips if clips is not None else prepare_clips(dataset, cpc, students, id_teacher)
    if not clips:
        raise ValueError("train_stage2 needs a non-empty dataset")
    torch.manual_seed(config.seed)
    if composer is None:
        composer_config = composer_config or ComposerConfig(
            image_size=clips[0].frames.shape[-1], d_c=clips[0].C.shape[-1], d_id=clips[0].nu.shape[-1],
            d_emo=clips[0].mu.shape[-1], ref_channels=tuple(m.shape[0] for m in clips[0].reference))
        composer = Composer(composer_config)
    composer.inflater.check_reference(clips[0].reference)
    composer.train()
    optimizers = optimizers or make_optimizers(composer, config)
    history = {"generator": [], "discriminator": []}

    if config.sync_warmup_steps:
        history["sync_warmup"] = train_sync_discriminator(
            composer.d_sync, clips, config.sync_warmup_steps, config.sync_warmup_lr, seed=config.seed,
            labels=config.labels)

    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        for batch in _batches(clips, config.batch_size, rng):
            if config.max_steps is not None and step >= config.max_steps:
                break
            T = clips[batch[0]].C.shape[0]
            tau, prime = sample_pair(T, rng)
            report, d_losses = stage2_step(composer, optimizers, [clips[i] for i in batch], tau, prime,
                                           config, step)
            history["generator"].append(report)
            history["discriminator"].append(d_losses)
            if callback is not None:
                callback(step, report, d_losses)
            step += 1
        else:
            continue
        break
    composer.eval()
    return composer, optimizers, history


GROUPS = {
    "generator": ("inflater", "generator"),
    "d_id": ("d_id",),
    "d_fr": ("d_fr",),
    "d_sync": ("d_sync",),
}


def save_composer(directory, composer: Composer, optimizers=None, meta=None):
    """One checkpoint per parameter group: generator, d_id, d_fr, d_sync."""
    directory = Path(directory)
    paths = {}
    for group, parts in GROUPS.items():
        tensors = {}
        for part in parts:
            tensors.update(checkpoint.module_tensors(part, getattr(composer, part)))
        header_meta = dict(meta or {})
        if optimizers is not None:
            opt_t, opt_info = checkpoint.optimizer_tensors("optim", optimizers[group])
            tensors.update(opt_t)
            header_meta["optimizer"] = opt_info
        paths[group] = checkpoint.save(directory / f"{group}.ckpt", tensors, kind=f"composer/{group}",
                                       config=composer.config.to_dict(), meta=header_meta)
    return paths


def load_composer(directory, groups=tuple(GROUPS), config: Optional[Stage2Config] = None):
    """Rebuild a Composer from per-group checkpoints; returns ``(composer, optimizers)``."""
    directory = Path(directory)
    composer = None
    loaded = {}
    for group in groups:
        tensors, header = checkpoint.load(directory / f"{group}.ckpt", kind=f"composer/{group}")
        if composer is None:
            composer = Composer(ComposerConfig(**header["config"]))
        for part in GROUPS[group]:
            checkpoint.load_module(getattr(composer, part), tensors, part)
        loaded[group] = (tensors, header)
    optimizers = None
    if config is not None:
        optimizers = make_optimizers(composer, config)
        for group, (tensors, header) in loaded.items():
            if "optimizer" in header["meta"]:
                checkpoint.load_optimizer(optimizers[group], tensors, "optim", header["meta"]["optimizer"])
    composer.eval()
    return composer, optimizers
