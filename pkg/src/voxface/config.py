"""Run configuration: a sectioned ``key = value`` file mapped onto dataclasses.

Training defaults: RMSProp, 100 epochs per stage, lambda = 0.025 and the
four stage-2 learning rates; model sizes are small enough for a desk-scale
toy run.
"""
import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

OUTPUT_ENV = "VOXFACE_OUTPUT"


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"
    threads: int = 1
    log_level: str = "INFO"


@dataclass
class DataSection:
    # empty root: synthesize the toy set under <output_dir>/data
    root: str = ""
    n_utterances: int = 32
    n_frames: int = 16
    image_size: int = 32
    n_speakers: int = 0
    train_ratio: float = 0.70
    val_ratio: float = 0.15
    test_ratio: float = 0.15


@dataclass
class CpcSection:
    window: int = 1066
    d_z: int = 64
    d_c: int = 128
    k_steps: int = 3
    n_negatives: int = 15
    channels: int = 32
    epochs: int = 100
    lr: float = 3e-4
    batch_size: int = 1


@dataclass
class DistillSection:
    epochs: int = 100
    lr: float = 3e-4
    lam: float = 0.025
    k_frames: int = 5
    batch_size: int = 8
    hidden: int = 256
    d_id: int = 4096
    d_emo: int = 512


@dataclass
class ComposerSection:
    epochs: int = 100
    max_steps: int = 0
    batch_size: int = 4
    lr_generator: float = 3e-4
    lr_id: float = 3e-4
    lr_frame: float = 1e-4
    lr_sync: float = 1e-5
    sim_region: float = 0.5
    conventional_targets: bool = False
    sync_warmup_steps: int = 0
    sync_warmup_lr: float = 1e-3
    w_adv_id: float = 1.0
    w_adv_fr: float = 1.0
    w_adv_sync: float = 1.0
    w_sim: float = 1.0
    w_grad: float = 1.0

    def weights(self):
        return {"l_adv_id": self.w_adv_id, "l_adv_fr": self.w_adv_fr, "l_adv_sync": self.w_adv_sync,
                "l_sim": self.w_sim, "l_grad": self.w_grad}


@dataclass
class EvalSection:
    # sync-confidence proxy needs the trained D_sync
    sync_proxy: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    cpc: CpcSection = field(default_factory=CpcSection)
    distill: DistillSection = field(default_factory=DistillSection)
    composer: ComposerSection = field(default_factory=ComposerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.run.output_dir)

    @property
    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.output_dir / "data"

    def to_dict(self):
        return dataclasses.asdict(self)

    def section_hash(self, *names):
        """Stable hash of the named sections (plus the seed)."""
        d = self.to_dict()
        payload = {"seed": self.run.seed, **{n: d[n] for n in names}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self):
        cp = configparser.ConfigParser()
        for name, values in self.to_dict().items():
            cp[name] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in values.items()}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini())


_BOOLS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(section, key, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in _BOOLS:
                raise ValueError
            return _BOOLS[raw.lower()]
        return typ(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from None


def _validate(cfg: RunConfig):
    def need(ok, section, key, what):
        if not ok:
            raise ConfigError(f"[{section}] {key}: {what} (got {getattr(getattr(cfg, section), key)!r})")

    for section in ("cpc", "distill", "composer"):
        sec = getattr(cfg, section)
        need(sec.epochs >= 1, section, "epochs", "must be >= 1")
        need(sec.batch_size >= 1, section, "batch_size", "must be >= 1")
        for f in dataclasses.fields(sec):
            if f.name.startswith("lr"):
                need(getattr(sec, f.name) > 0, section, f.name, "learning rate must be > 0")
    for key in ("window", "d_z", "d_c", "k_steps", "n_negatives", "channels"):
        need(getattr(cfg.cpc, key) >= 1, "cpc", key, "must be >= 1")
    need(cfg.data.n_frames > cfg.cpc.k_steps, "data", "n_frames", f"must exceed cpc.k_steps={cfg.cpc.k_steps}")
    need(cfg.data.n_utterances >= 1, "data", "n_utterances", "must be >= 1")
    need(cfg.data.image_size % 16 == 0 and cfg.data.image_size > 0, "data", "image_size",
         "must be a positive multiple of 16")
    ratios = (cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio)
    need(all(r >= 0 for r in ratios) and abs(sum(ratios) - 1.0) < 1e-6, "data", "train_ratio",
         "split ratios must be non-negative and sum to 1")
    need(cfg.distill.lam >= 0, "distill", "lam", "must be >= 0")
    need(cfg.distill.k_frames >= 1, "distill", "k_frames", "must be >= 1")
    need(cfg.distill.k_frames <= cfg.data.n_frames, "distill", "k_frames", "cannot exceed data.n_frames")
    seed_cells = (cfg.data.image_size // 16) ** 2
    need(cfg.distill.d_id % seed_cells == 0, "distill", "d_id",
         f"must be divisible by {seed_cells} to fold onto the identity seed map")
    need(0.0 < cfg.composer.sim_region <= 1.0, "composer", "sim_region", "must lie in (0, 1]")
    need(cfg.composer.max_steps >= 0, "composer", "max_steps", "must be >= 0 (0 = no limit)")
    need(cfg.run.threads >= 1, "run", "threads", "must be >= 1")
    need(cfg.run.device == "cpu", "run", "device", "only 'cpu' is supported")
    if cfg.data.root:
        need(Path(cfg.data.root).is_dir(), "data", "root", "directory does not exist")
    return cfg


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from None
    cfg = RunConfig()
    hints = typing.get_type_hints(RunConfig)
    for section in cp.sections():
        if section not in hints:
            raise ConfigError(f"unknown section [{section}]")
        sec = getattr(cfg, section)
        types = {f.name: typing.get_type_hints(type(sec))[f.name] for f in dataclasses.fields(sec)}
        for key, raw in cp[section].items():
            if key not in types:
                raise ConfigError(f"[{section}] {key}: unknown key")
            setattr(sec, key, _coerce(section, key, raw, types[key]))
    return _validate(cfg)


def load_config(path=None) -> RunConfig:
    if path is None:
        return _validate(RunConfig())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())
