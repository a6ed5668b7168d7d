"""Identity inflation branch, frame generator and the three discriminators."""
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


@dataclass
class ComposerConfig:
    image_size: int = 32
    d_c: int = 128
    d_id: int = 4096
    d_emo: int = 512
    # channels of the reference feature maps at s, 2s, 4s
    ref_channels: Tuple[int, int, int] = (64, 32, 16)
    inflate_channels: Tuple[int, int, int] = (128, 64, 32)
    gen_channels: Tuple[int, int, int, int, int] = (128, 96, 64, 32, 32)
    disc_channels: Tuple[int, int, int] = (16, 32, 64)
    sync_embed: int = 64

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError(f"image_size must be a multiple of 16, got {self.image_size}")
        for name in ("ref_channels", "inflate_channels", "gen_channels", "disc_channels"):
            setattr(self, name, tuple(int(c) for c in getattr(self, name)))
        seed = self.seed_size
        if self.d_id % (seed * seed):
            raise ValueError(f"d_id={self.d_id} cannot be reshaped onto a {seed}x{seed} seed map")

    @property
    def seed_size(self):
        return self.image_size // 16

    @property
    def base_size(self):
        return self.image_size // 8

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class InflatedIdentity:
    maps: List[torch.Tensor]
    base_size: int

    def expand(self, n):
        """Repeat each map ``n`` times along the batch axis (per-frame copies)."""
        return InflatedIdentity([m.repeat_interleave(n, dim=0) for m in self.maps], self.base_size)

    def detach(self):
        return InflatedIdentity([m.detach() for m in self.maps], self.base_size)


def _up(c_in, c_out):
    return nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)


class IdentityInflater(nn.Module):
    """Three doubling transposed convolutions on the identity vector.

    The vector is reshaped onto a ``seed x seed`` map (``seed = H/16``); after
    every transposed convolution a 1x1 convolution aligns the channel count
    with the matching reference feature layer.
    """

    def __init__(self, config: ComposerConfig):
        super().__init__()
        self.config = config
        seed = config.seed_size
        self.c0 = config.d_id // (seed * seed)
        chans = (self.c0,) + config.inflate_channels
        self.ups = nn.ModuleList(_up(chans[i], chans[i + 1]) for i in range(3))
        self.align = nn.ModuleList(nn.Conv2d(c, r, 1) for c, r in zip(config.inflate_channels, config.ref_channels))

    def output_shapes(self):
        s = self.config.base_size
        return [(r, s * 2 ** i, s * 2 ** i) for i, r in enumerate(self.config.ref_channels)]

    def check_reference(self, reference: Sequence[torch.Tensor]):
        got = [tuple(m.shape[-3:]) for m in reference]
        want = self.output_shapes()
        if got != want:
            raise ShapeError(f"reference feature shapes {got} do not match inflated identity shapes {want}")

    def forward(self, nu):
        if nu.shape[-1] != self.config.d_id:
            raise ShapeError(f"identity vector has dimension {nu.shape[-1]}, expected {self.config.d_id}")
        seed = self.config.seed_size
        x = nu.reshape(-1, self.c0, seed, seed)
        maps = []
        for up, align in zip(self.ups, self.align):
            x = F.leaky_relu(up(x), 0.2)
            maps.append(align(x))
        return InflatedIdentity(maps, self.config.base_size)


class FrameGenerator(nn.Module):
    """F(c_t, nu, mu): decoder from (context, emotion) with identity maps concatenated.

    ``c_t`` and ``mu`` are projected to seed maps and concatenated; four
    doubling transposed convolutions follow, the inflated identity maps being
    concatenated before the 2nd, 3rd and 4th.  Two 1x1 convolutions and a
    sigmoid produce the RGB frame.
    """

    def __init__(self, config: ComposerConfig):
        super().__init__()
        self.config = config
        seed = config.seed_size
        g = config.gen_channels
        self.context_proj = nn.Linear(config.d_c, (g[0] // 2) * seed * seed)
        self.emotion_proj = nn.Linear(config.d_emo, (g[0] - g[0] // 2) * seed * seed)
        r = config.ref_channels
        self.ups = nn.ModuleList([
            _up(g[0], g[1]),
            _up(g[1] + r[0], g[2]),
            _up(g[2] + r[1], g[3]),
            _up(g[3] + r[2], g[4]),
        ])
        self.out1 = nn.Conv2d(g[4], g[4], 1)
        self.out2 = nn.Conv2d(g[4], 3, 1)

    def forward(self, c, inflated: InflatedIdentity, mu):
        """``c``: (N, d_c); ``mu``: (N, d_emo); maps batched to N. Returns (N, 3, H, W)."""
        n = c.shape[0]
        seed = self.config.seed_size
        g0 = self.config.gen_channels[0]
        if mu.shape[0] != n:
            raise ShapeError(f"batch mismatch: {n} contexts, {mu.shape[0]} emotion vectors")
        x = torch.cat([
            F.leaky_relu(self.context_proj(c), 0.2).reshape(n, g0 // 2, seed, seed),
            F.leaky_relu(self.emotion_proj(mu), 0.2).reshape(n, g0 - g0 // 2, seed, seed),
        ], dim=1)
        x = F.leaky_relu(self.ups[0](x), 0.2)
        for up, m in zip(self.ups[1:], inflated.maps):
            if m.shape[0] != n or m.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"inflated identity map {tuple(m.shape)} does not fit decoder "
                                 f"layer {tuple(x.shape)}")
            x = F.leaky_relu(up(torch.cat([x, m], dim=1)), 0.2)
        x = F.leaky_relu(self.out1(x), 0.2)
        return torch.sigmoid(self.out2(x))


def _conv_stack(c_in, channels):
    layers = []
    for c in channels:
        layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c_in = c
    return nn.Sequential(*layers)


class FrameDiscriminator(nn.Module):
    def __init__(self, config: ComposerConfig):
        super().__init__()
        self.body = _conv_stack(3, config.disc_channels)
        self.head = nn.Linear(config.disc_channels[-1], 1)

    def forward(self, frames):
        lead = frames.shape[:-3]
        h = self.body(frames.reshape(-1, *frames.shape[-3:])).mean(dim=(2, 3))
        return self.head(h).reshape(lead)


class IdentityDiscriminator(nn.Module):
    """Scores a triple of identity feature maps (inflated or reference)."""

    def __init__(self, config: ComposerConfig, width=32):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(r, width, 3, padding=1), nn.LeakyReLU(0.2),
                          nn.Conv2d(width, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2))
            for r in config.ref_channels)
        self.head = nn.Linear(3 * width, 1)

    def forward(self, maps):
        if isinstance(maps, InflatedIdentity):
            maps = maps.maps
        h = torch.cat([b(m).mean(dim=(2, 3)) for b, m in zip(self.branches, maps)], dim=1)
        return self.head(h).squeeze(-1)


class SyncDiscriminator(nn.Module):
    """Scores an (audio context, frame) pair.

    Both inputs are embedded separately; the head reads the concatenation of
    the two embeddings and their elementwise product.
    """

    def __init__(self, config: ComposerConfig):
        super().__init__()
        e = config.sync_embed
        self.audio = nn.Sequential(nn.Linear(config.d_c, e), nn.LeakyReLU(0.2), nn.Linear(e, e))
        self.frame_body = _conv_stack(3, config.disc_channels)
        side = config.image_size // 2 ** len(config.disc_channels)
        self.frame_proj = nn.Linear(config.disc_channels[-1] * side * side, e)
        self.head = nn.Sequential(nn.Linear(3 * e, e), nn.LeakyReLU(0.2), nn.Linear(e, 1))

    def forward(self, c, frames):
        lead = frames.shape[:-3]
        # flattened, not pooled: where the mouth is matters
        f = self.frame_proj(self.frame_body(frames.reshape(-1, *frames.shape[-3:])).flatten(1))
        a = self.audio(c.reshape(-1, c.shape[-1]))
        # unit-scale embeddings keep the product features O(1) from the start
        scale = a.shape[-1] ** 0.5
        a, f = scale * F.normalize(a, dim=-1), scale * F.normalize(f, dim=-1)
        return self.head(torch.cat([a, f, a * f], dim=1)).reshape(lead)


class Composer(nn.Module):
    """Every stage-2 network, with the generator side split from the discriminators."""

    def __init__(self, config: ComposerConfig):
        super().__init__()
        self.config = config
        self.inflater = IdentityInflater(config)
        self.generator = FrameGenerator(config)
        self.d_id = IdentityDiscriminator(config)
        self.d_fr = FrameDiscriminator(config)
        self.d_sync = SyncDiscriminator(config)

    def generator_parameters(self):
        return list(self.inflater.parameters()) + list(self.generator.parameters())

    def generate(self, c, nu, mu):
        """Frames for contexts ``c`` (T, d_c) of one utterance with vectors ``nu``, ``mu``."""
        inflated = self.inflater(nu.reshape(1, -1)).expand(c.shape[0])
        return self.generator(c, inflated, mu.reshape(1, -1).expand(c.shape[0], -1))


@dataclass
class GeneratorInput:
    c_t: torch.Tensor
    nu: torch.Tensor
    mu: torch.Tensor


def generate_frame(inp: GeneratorInput, inflated: InflatedIdentity, generator: FrameGenerator) -> np.ndarray:
    """One (H, W, 3) frame in [0, 1]; ``inflated`` must come from ``inp.nu``."""
    with torch.no_grad():
        out = generator(inp.c_t.reshape(1, -1), inflated, inp.mu.reshape(1, -1))
    return out[0].permute(1, 2, 0).cpu().numpy()
