"""Cross-modal distillation of identity and emotion features from speech.

Frozen image teachers produce targets from the video frames: the identity
teacher embeds the first frame, the emotion teacher averages its embedding
over ``K`` randomly sampled frames.  Two student MLPs map the CPC summary
``omega`` to the same spaces and are trained jointly on the loss::

    lam*|n(mu) - n(mu*)|^2 + xent(mu, mu*) + lam*|n(nu) - n(nu*)|^2 + xent(nu, nu*)

where ``n`` is L2 normalization and ``xent`` the softmax cross-entropy.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .cpc import CPC, encode_utterance
from .errors import NumericalError, ShapeError
from .media import Utterance

log = logging.getLogger(__name__)

LAMBDA = 0.025
IDENTITY_DIM = 4096
EMOTION_DIM = 512
DEFAULT_K = 5


def to_image_batch(images, dtype=torch.float32):
    """(H, W, 3) / (N, H, W, 3) arrays or (N, 3, H, W) tensors -> (N, 3, H, W)."""
    if torch.is_tensor(images) and images.ndim == 4 and images.shape[1] == 3:
        return images.to(dtype)
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) or (N, H, W, 3) images, got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


class _Teacher(nn.Module):
    kind = ""

    def __init__(self, image_size, resize, seed):
        super().__init__()
        self.image_size = image_size
        self.resize = resize
        self.seed = seed

    def _prepare(self, images):
        x = to_image_batch(images, self.dtype)
        if x.shape[-2:] != (self.image_size, self.image_size):
            if not self.resize:
                raise ShapeError(f"{self.kind} teacher expects {self.image_size}x{self.image_size} "
                                 f"images, got {tuple(x.shape[-2:])}")
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear",
                              align_corners=False)
        return x - 0.5

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _finish_init(self):
        # zero biases and He-scaled weights keep the surrogate's outputs input-driven
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def embed(self, images):
        return self(self._prepare(images))


class IdentityTeacher(_Teacher):
    """VGG-style surrogate: three conv stages with max-pooling and a 4096-d head.

    ``features`` exposes the three stage outputs (H/2, H/4, H/8), which serve as
    reference maps for the identity inflation branch.
    """

    kind = "identity"

    def __init__(self, image_size=32, dim=IDENTITY_DIM, channels=(16, 32, 64), seed=0, resize=True):
        super().__init__(image_size, resize, seed)
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.dim = dim
        self.channels = tuple(channels)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages = []
            c_in = 3
            for c in self.channels:
                stages.append(nn.Sequential(
                    nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(),
                    nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
                    nn.MaxPool2d(2)))
                c_in = c
            self.stages = nn.ModuleList(stages)
            s = image_size // 8
            self.head = nn.Linear(c_in * s * s, dim)
            self._finish_init()

    def stage_outputs(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x):
        return self.head(self.stage_outputs(x)[-1].flatten(1))

    @torch.no_grad()
    def features(self, images):
        """Stage maps ordered by increasing spatial size (H/8, H/4, H/2)."""
        return self.stage_outputs(self._prepare(images))[::-1]

    def reference_shapes(self):
        s = self.image_size
        return [(c, s // f, s // f) for c, f in zip(self.channels[::-1], (8, 4, 2))]


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        self.fc1 = nn.Linear(channels, max(1, channels // reduction))
        self.fc2 = nn.Linear(max(1, channels // reduction), channels)

    def forward(self, x):
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3))))))
        return x * w[:, :, None, None]


class EmotionTeacher(_Teacher):
    """SE-style surrogate: conv blocks with squeeze-excitation, pooled to ``dim``."""

    kind = "emotion"

    def __init__(self, image_size=32, dim=EMOTION_DIM, channels=(16, 32, 64), seed=1, resize=True):
        super().__init__(image_size, resize, seed)
        self.dim = dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            blocks = []
            c_in = 3
            for c in channels:
                blocks += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), SqueezeExcite(c), nn.MaxPool2d(2)]
                c_in = c
            self.blocks = nn.Sequential(*blocks)
            self.head = nn.Linear(c_in * 4 * 4, dim)
            self._finish_init()

    def forward(self, x):
        h = F.adaptive_avg_pool2d(self.blocks(x), 4)
        return self.head(h.flatten(1))


def teacher_identity(teacher: IdentityTeacher, first_frame) -> torch.Tensor:
    return teacher.embed(first_frame)[0]


def sample_frames(T, K, seed):
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > T:
        raise ValueError(f"cannot sample K={K} frames without replacement from T={T}")
    return np.random.default_rng(seed).choice(T, size=K, replace=False)


def teacher_emotion(teacher: EmotionTeacher, frames, K=DEFAULT_K, seed=0) -> torch.Tensor:
    """Average teacher embedding over ``K`` frames sampled without replacement."""
    frames = np.asarray(frames) if not torch.is_tensor(frames) else frames
    idx = sample_frames(len(frames), K, seed)
    return teacher.embed(frames[np.sort(idx)]).mean(dim=0)


class Students(nn.Module):
    """S_id and S_emo: two-layer perceptrons reading the CPC summary."""

    def __init__(self, d_c=128, d_id=IDENTITY_DIM, d_emo=EMOTION_DIM, hidden=256):
        super().__init__()
        self.d_c = d_c
        self.s_id = nn.Sequential(nn.Linear(d_c, hidden), nn.Tanh(), nn.Linear(hidden, d_id))
        self.s_emo = nn.Sequential(nn.Linear(d_c, hidden), nn.Tanh(), nn.Linear(hidden, d_emo))

    def forward(self, omega):
        if omega.shape[-1] != self.d_c:
            raise ShapeError(f"omega has dimension {omega.shape[-1]}, students expect {self.d_c}")
        return self.s_id(omega), self.s_emo(omega)

    def config(self):
        return {"d_c": self.d_c, "d_id": self.s_id[-1].out_features,
                "d_emo": self.s_emo[-1].out_features, "hidden": self.s_id[0].out_features}


def student_forward(students: Students, omega):
    return students(omega)


@dataclass
class FeatureBundle:
    nu: torch.Tensor
    mu: torch.Tensor
    nu_star: torch.Tensor
    mu_star: torch.Tensor

    def __post_init__(self):
        if self.nu.shape[-1] != self.nu_star.shape[-1] or self.mu.shape[-1] != self.mu_star.shape[-1]:
            raise ShapeError("student and teacher vectors must share dimensions")


def normalize(v, eps=1e-12):
    v = torch.as_tensor(v)
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def softmax_xent(x, y):
    """``-sum_i softmax(x)_i * log softmax(y)_i`` over the last axis."""
    x, y = torch.as_tensor(x), torch.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"softmax_xent needs equal shapes, got {tuple(x.shape)} and {tuple(y.shape)}")
    return -(F.softmax(x, dim=-1) * F.log_softmax(y, dim=-1)).sum(-1)


def normalized_mse(x, y):
    return ((normalize(x) - normalize(y)) ** 2).sum(-1)


def distill_terms(bundle: FeatureBundle, lam=LAMBDA):
    """The four terms of the joint loss, each averaged over any batch axis."""
    for name in ("nu", "mu", "nu_star", "mu_star"):
        if not torch.isfinite(getattr(bundle, name)).all():
            raise ValueError(f"non-finite values in {name}")
    return {
        "mse_emo": lam * normalized_mse(bundle.mu, bundle.mu_star).mean(),
        "xent_emo": softmax_xent(bundle.mu, bundle.mu_star).mean(),
        "mse_id": lam * normalized_mse(bundle.nu, bundle.nu_star).mean(),
        "xent_id": softmax_xent(bundle.nu, bundle.nu_star).mean(),
    }


def distill_loss(bundle: FeatureBundle, lam=LAMBDA):
    return sum(distill_terms(bundle, lam).values())


# --------------------------------------------------------------------------
# training

@torch.no_grad()
def prepare_targets(dataset: List[Utterance], cpc: CPC, id_teacher, emo_teacher):
    """Per utterance: omega, identity target and per-frame emotion embeddings."""
    omegas, nu_stars, emo_frames = [], [], []
    for utt in dataset:
        omegas.append(encode_utterance(cpc, utt).omega.float())
        nu_stars.append(teacher_identity(id_teacher, utt.frames[0]).float())
        emo_frames.append(emo_teacher.embed(utt.frames).float())
    return torch.stack(omegas), torch.stack(nu_stars), emo_frames


def epoch_emotion_targets(emo_frames, K, seed, epoch):
    """Pooled emotion targets with a fresh K-frame draw per epoch."""
    out = []
    for i, per_frame in enumerate(emo_frames):
        idx = np.sort(sample_frames(per_frame.shape[0], K, [seed, epoch, i]))
        out.append(per_frame[idx].mean(0))
    return torch.stack(out)


def distill_step(students, optimizer, omega, nu_star, mu_star, lam=LAMBDA):
    nu, mu = students(omega)
    terms = distill_terms(FeatureBundle(nu, mu, nu_star, mu_star), lam)
    loss = sum(terms.values())
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss, terms


def train_distiller(dataset: List[Utterance], cpc: CPC, teachers, epochs=100, lr=3e-4, K=DEFAULT_K,
                    lam=LAMBDA, batch_size=8, hidden=256, seed=0, students: Optional[Students] = None,
                    optimizer=None, start_epoch=0):
    """Train both students simultaneously; CPC and teachers stay frozen.

    Returns ``(students, optimizer, curve)``; ``curve`` maps ``loss``,
    ``mse_id``, ``mse_emo``, ``xent_id``, ``xent_emo`` to per-epoch means.
    """
    if not dataset:
        raise ValueError("train_distiller needs a non-empty dataset")
    id_teacher, emo_teacher = teachers
    omegas, nu_stars, emo_frames = prepare_targets(dataset, cpc, id_teacher, emo_teacher)
    torch.manual_seed(seed)
    if students is None:
        students = Students(omegas.shape[1], id_teacher.dim, emo_teacher.dim, hidden)
    students.train()
    optimizer = optimizer or torch.optim.RMSprop(students.parameters(), lr=lr)
    curve = {k: [] for k in ("loss", "mse_id", "mse_emo", "xent_id", "xent_emo")}
    n = len(dataset)
    step = 0
    for epoch in range(start_epoch, epochs):
        mu_stars = epoch_emotion_targets(emo_frames, K, seed, epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        sums = {k: 0.0 for k in curve}
        for s in range(0, n, batch_size):
            idx = torch.as_tensor(order[s:s + batch_size])
            loss, terms = distill_step(students, optimizer, omegas[idx], nu_stars[idx], mu_stars[idx], lam)
            if not torch.isfinite(loss):
                raise NumericalError(step, "distill_loss", loss.item())
            w = len(idx) / n
            sums["loss"] += loss.item() * w
            for k, v in terms.items():
                sums[k] += v.item() * w
            step += 1
        for k in curve:
            curve[k].append(sums[k])
        log.info("distill epoch %d loss %.5f", epoch, sums["loss"])
    students.eval()
    return students, optimizer, curve


def save_students(path, students: Students, optimizer=None, meta=None):
    tensors = checkpoint.module_tensors("model", students)
    header_meta = dict(meta or {})
    if optimizer is not None:
        opt_t, opt_info = checkpoint.optimizer_tensors("optim", optimizer)
        tensors.update(opt_t)
        header_meta["optimizer"] = opt_info
    return checkpoint.save(path, tensors, kind="students", config=students.config(), meta=header_meta)


def load_students(path, with_optimizer=False, lr=3e-4):
    tensors, header = checkpoint.load(path, kind="students")
    students = Students(**header["config"])
    checkpoint.load_module(students, tensors, "model")
    students.eval()
    if not with_optimizer:
        return students, header
    opt = torch.optim.RMSprop(students.parameters(), lr=lr)
    if "optimizer" in header["meta"]:
        checkpoint.load_optimizer(opt, tensors, "optim", header["meta"]["optimizer"])
    return students, opt, header


def build_teachers(image_size, seed=0, d_emo=EMOTION_DIM, d_id=IDENTITY_DIM):
    return (IdentityTeacher(image_size, dim=d_id, seed=seed),
            EmotionTeacher(image_size, dim=d_emo, seed=seed + 1))


def save_teachers(path, teachers):
    id_t, emo_t = teachers
    tensors = {**checkpoint.module_tensors("identity", id_t), **checkpoint.module_tensors("emotion", emo_t)}
    config = {"image_size": id_t.image_size, "id_dim": id_t.dim, "id_channels": list(id_t.channels),
              "emo_dim": emo_t.dim}
    return checkpoint.save(path, tensors, kind="teachers", config=config)


def load_teachers(path):
    """Load teacher weights (surrogate or converted pretrained) from a checkpoint."""
    tensors, header = checkpoint.load(path, kind="teachers")
    cfg = header["config"]
    id_t = IdentityTeacher(cfg["image_size"], dim=cfg["id_dim"], channels=cfg["id_channels"])
    emo_t = EmotionTeacher(cfg["image_size"], dim=cfg["emo_dim"])
    checkpoint.load_module(id_t, tensors, "identity")
    checkpoint.load_module(emo_t, tensors, "emotion")
    return id_t, emo_t
