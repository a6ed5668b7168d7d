"""Command-line pipeline: prepare-data, train-cpc, train-distill, train-composer, generate, evaluate.

Every artifact lives under the output directory (``[run] output_dir`` or
the ``VOXFACE_OUTPUT`` environment variable) and every completed command is
recorded in ``manifest.json``.  A command whose manifest entry is complete
and whose configuration hash matches is skipped unless ``--force`` is given.
"""
import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError
from .composer import Stage2Config, load_composer, save_composer, train_stage2
from .config import RunConfig, load_config
from .cpc import CPC, CpcConfig, encode_utterance, load_cpc, save_cpc, train_cpc
from .distill import build_teachers, load_students, load_teachers, save_students, save_teachers, train_distiller
from .errors import ConfigError, MissingDependencyError, NumericalError, VoxfaceError
from .media import (FPS, SAMPLE_RATE, DatasetSplit, Utterance, clip_dir, export_utterance, list_clips, load_audio,
                    load_dataset, split_dataset, synth_toy_dataset)
from .metrics import evaluate_clip

log = logging.getLogger("voxface")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

# sections each stage depends on, for the manifest hash
STAGE_SECTIONS = {
    "prepare-data": ("data",),
    "train-cpc": ("data", "cpc"),
    "train-distill": ("data", "cpc", "distill"),
    "train-composer": ("data", "cpc", "distill", "composer"),
}


# --------------------------------------------------------------------------
# manifest

class Manifest:
    def __init__(self, root: Path):
        self.path = root / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.is_file() else {"format": 1, "stages": {}}

    def entry(self, key):
        return self.data["stages"].get(key)

    def is_complete(self, key, config_hash):
        e = self.entry(key)
        if not e or e.get("status") != "complete":
            return False
        if e.get("config_hash") != config_hash:
            raise ConfigError(f"'{key}' was completed with a different configuration "
                              f"(hash {e.get('config_hash')} vs {config_hash}); rerun with --force")
        return all(Path(p).exists() for p in e.get("artifacts", []))

    def record(self, key, config_hash, started, artifacts, extra=None):
        self.data["stages"][key] = {
            "status": "complete",
            "config_hash": config_hash,
            "started": started,
            "finished": _now(),
            "versions": _versions(),
            "artifacts": [str(a) for a in artifacts],
            **(extra or {}),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _versions():
    return {"voxface": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# helpers

def _setup(cfg: RunConfig):
    logging.basicConfig(level=getattr(logging, cfg.run.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.manual_seed(cfg.run.seed)
    torch.set_num_threads(cfg.run.threads)
    torch.use_deterministic_algorithms(True)


def _paths(cfg: RunConfig):
    out = cfg.output_dir
    return {
        "out": out,
        "data": cfg.data_root,
        "split": out / "split.json",
        "cpc": out / "cpc" / "cpc.ckpt",
        "teachers": out / "distill" / "teachers.ckpt",
        "students": out / "distill" / "students.ckpt",
        "composer": out / "composer",
    }


def _require(path, stage, what):
    if not Path(path).exists():
        raise MissingDependencyError(f"no {what} at {path}; run `{stage}` first")
    return Path(path)


def _train_set(cfg: RunConfig, paths):
    split = DatasetSplit.load(_require(paths["split"], "prepare-data", "dataset split"))
    _require(paths["data"], "prepare-data", "dataset")
    return load_dataset(paths["data"], split.train)


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _cpc_config(cfg: RunConfig):
    c = cfg.cpc
    return CpcConfig(window=c.window, d_z=c.d_z, d_c=c.d_c, k_steps=c.k_steps, n_negatives=c.n_negatives,
                     channels=c.channels)


def _stage2_config(cfg: RunConfig):
    c = cfg.composer
    return Stage2Config(lr_generator=c.lr_generator, lr_id=c.lr_id, lr_frame=c.lr_frame, lr_sync=c.lr_sync,
                        epochs=c.epochs, max_steps=c.max_steps or None, batch_size=c.batch_size,
                        weights=c.weights(), sim_region=c.sim_region, conventional_targets=c.conventional_targets,
                        sync_warmup_steps=c.sync_warmup_steps, sync_warmup_lr=c.sync_warmup_lr, seed=cfg.run.seed)


# --------------------------------------------------------------------------
# commands

def cmd_prepare_data(cfg: RunConfig, args, paths):
    d = cfg.data
    root = paths["data"]
    if not cfg.data.root:
        dataset = synth_toy_dataset(d.n_utterances, d.n_frames, d.image_size, d.image_size, seed=cfg.run.seed,
                                    n_speakers=d.n_speakers or None)
        for utt in dataset:
            export_utterance(utt, clip_dir(root, utt.clip_id))
    ids = list_clips(root)
    if not ids:
        raise ConfigError(f"[data] root: no clip_* directories under {root}")
    split = split_dataset(ids, (d.train_ratio, d.val_ratio, d.test_ratio), seed=cfg.run.seed)
    paths["split"].parent.mkdir(parents=True, exist_ok=True)
    split.save(paths["split"])
    log.info("prepared %d clips under %s; split %s", len(ids), root, split.sizes())
    return [root, paths["split"]], {"split_sizes": list(split.sizes())}


def cmd_train_cpc(cfg: RunConfig, args, paths):
    train = _train_set(cfg, paths)
    model, opt, curve = train_cpc(train, _cpc_config(cfg), epochs=cfg.cpc.epochs, lr=cfg.cpc.lr,
                                  batch_size=cfg.cpc.batch_size, seed=cfg.run.seed)
    paths["cpc"].parent.mkdir(parents=True, exist_ok=True)
    save_cpc(paths["cpc"], model, opt, meta={"loss_curve": curve})
    csv_path = paths["cpc"].parent / "loss.csv"
    _write_csv(csv_path, ["epoch", "loss"], [(i, f"{v:.8f}") for i, v in enumerate(curve)])
    return [paths["cpc"], csv_path], {"final_loss": curve[-1]}


def cmd_train_distill(cfg: RunConfig, args, paths):
    cpc_path = Path(args.cpc) if getattr(args, "cpc", None) else paths["cpc"]
    cpc, _ = load_cpc(_require(cpc_path, "train-cpc", "CPC checkpoint"))
    train = _train_set(cfg, paths)
    d = cfg.distill
    teachers = build_teachers(cfg.data.image_size, seed=cfg.run.seed, d_emo=d.d_emo, d_id=d.d_id)
    students, opt, curve = train_distiller(train, cpc, teachers, epochs=d.epochs, lr=d.lr, K=d.k_frames, lam=d.lam,
                                           batch_size=d.batch_size, hidden=d.hidden, seed=cfg.run.seed)
    paths["students"].parent.mkdir(parents=True, exist_ok=True)
    save_teachers(paths["teachers"], teachers)
    save_students(paths["students"], students, opt, meta={"loss_curve": curve})
    csv_path = paths["students"].parent / "loss.csv"
    keys = list(curve)
    _write_csv(csv_path, ["epoch"] + keys,
               [[i] + [f"{curve[k][i]:.8f}" for k in keys] for i in range(len(curve["loss"]))])
    return [paths["teachers"], paths["students"], csv_path], {"final_loss": curve["loss"][-1]}


def cmd_train_composer(cfg: RunConfig, args, paths):
    cpc_path = Path(args.cpc) if getattr(args, "cpc", None) else paths["cpc"]
    cpc, _ = load_cpc(_require(cpc_path, "train-cpc", "CPC checkpoint"))
    students, _ = load_students(_require(paths["students"], "train-distill", "student checkpoint"))
    id_teacher, _ = load_teachers(_require(paths["teachers"], "train-distill", "teacher checkpoint"))
    train = _train_set(cfg, paths)
    composer, optimizers, history = train_stage2(train, cpc, students, id_teacher, _stage2_config(cfg))
    reports = history["generator"]
    if not reports:
        raise ConfigError("[composer] epochs/max_steps: no generator steps were run")
    save_composer(paths["composer"], composer, optimizers)
    csv_path = paths["composer"] / "losses.csv"
    cols = ["l_adv_id", "l_adv_fr", "l_adv_sync", "l_sim", "l_grad", "l_total"]
    _write_csv(csv_path, ["step"] + cols,
               [[i] + [f"{getattr(r, c):.8f}" for c in cols] for i, r in enumerate(reports)])
    artifacts = [paths["composer"] / f"{g}.ckpt" for g in ("generator", "d_id", "d_fr", "d_sync")] + [csv_path]
    return artifacts, {"final_loss": reports[-1].l_total}


def _load_models(cfg, paths, groups=("generator",)):
    cpc, _ = load_cpc(_require(paths["cpc"], "train-cpc", "CPC checkpoint"))
    students, _ = load_students(_require(paths["students"], "train-distill", "student checkpoint"))
    _require(paths["composer"] / "generator.ckpt", "train-composer", "composer checkpoint")
    composer, _ = load_composer(paths["composer"], groups)
    return cpc, students, composer


def _audio_meta(audio_path):
    meta_path = Path(audio_path).parent / "meta.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        return float(meta.get("fps", FPS)), int(meta.get("sample_rate", SAMPLE_RATE))
    return FPS, SAMPLE_RATE


@torch.no_grad()
def generate_from_audio(audio, fps, sample_rate, cpc: CPC, students, composer, clip_id="generated"):
    """Frames for a raw waveform; returns an Utterance carrying the audio and the generated frames."""
    T = int(round(len(audio) * fps / sample_rate))
    if T < 1:
        raise ConfigError(f"audio of {len(audio)} samples is shorter than one frame")
    size = composer.config.image_size
    placeholder = Utterance(audio=audio, frames=np.zeros((T, size, size, 3), np.float32), fps=fps,
                            sample_rate=sample_rate, clip_id=clip_id)
    ctx = encode_utterance(cpc, placeholder)
    nu, mu = students(ctx.omega.float())
    frames = composer.generate(ctx.C.float(), nu, mu).permute(0, 2, 3, 1).numpy()
    return Utterance(audio=audio, frames=frames, fps=fps, sample_rate=sample_rate, clip_id=clip_id)


def cmd_generate(cfg: RunConfig, args, paths):
    cpc, students, composer = _load_models(cfg, paths)
    fps, sr = _audio_meta(args.audio)
    audio = load_audio(args.audio)
    out = Path(args.out)
    utt = generate_from_audio(audio, fps, sr, cpc, students, composer, clip_id=out.name)
    export_utterance(utt, out)
    log.info("wrote %d frames to %s", utt.n_frames, out)
    return [out], {"n_frames": utt.n_frames}


def cmd_evaluate(cfg: RunConfig, args, paths):
    C = scorer = None
    if cfg.eval.sync_proxy:
        cpc, _ = load_cpc(_require(paths["cpc"], "train-cpc", "CPC checkpoint"))
        _require(paths["composer"] / "d_sync.ckpt", "train-composer", "sync discriminator checkpoint")
        composer, _ = load_composer(paths["composer"], ("d_sync",))
        fps, sr = _audio_meta(Path(args.generated) / "audio.raw")
        audio = load_audio(_require(Path(args.generated) / "audio.raw", "generate", "generated audio"))
        frames_n = len(list(Path(args.generated).glob("frame_*.png")))
        size = composer.config.image_size
        utt = Utterance(audio=audio, frames=np.zeros((frames_n, size, size, 3), np.float32), fps=fps,
                        sample_rate=sr)
        C = encode_utterance(cpc, utt).C.float()
        scorer = composer.d_sync
    report = evaluate_clip(args.generated, args.reference, C, scorer,
                           labels=_stage2_config(cfg).labels)
    report.save(args.out)
    log.info("ssim %.4f psnr %.3f sync %s", report.ssim, report.psnr, report.sync_confidence)
    return [Path(args.out)], {"ssim": report.ssim, "psnr": report.psnr}


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-cpc": cmd_train_cpc,
    "train-distill": cmd_train_distill,
    "train-composer": cmd_train_composer,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="voxface", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name) for name in COMMANDS}
    for sp in parsers.values():
        sp.add_argument("--config", help="INI run configuration (defaults apply when omitted)")
        sp.add_argument("--force", action="store_true", help="rerun even if the manifest says complete")
    parsers["train-distill"].add_argument("--cpc", help="CPC checkpoint (default: <output>/cpc/cpc.ckpt)")
    parsers["train-composer"].add_argument("--cpc", help="CPC checkpoint (default: <output>/cpc/cpc.ckpt)")
    parsers["generate"].add_argument("--audio", required=True, help="raw little-endian float32 mono audio")
    parsers["generate"].add_argument("--out", required=True, help="output frame directory")
    parsers["evaluate"].add_argument("--generated", required=True)
    parsers["evaluate"].add_argument("--reference", required=True)
    parsers["evaluate"].add_argument("--out", required=True, help="JSON report path")
    return p


def _stage_key_and_hash(cfg: RunConfig, args):
    cmd = args.command
    if cmd in STAGE_SECTIONS:
        return cmd, cfg.section_hash(*STAGE_SECTIONS[cmd])
    base = cfg.section_hash("data", "cpc", "distill", "composer", "eval")
    if cmd == "generate":
        return f"generate:{Path(args.out).resolve()}", f"{base}:{_file_digest(args.audio)}"
    return f"evaluate:{Path(args.out).resolve()}", base


def run(command, args, cfg: RunConfig) -> int:
    paths = _paths(cfg)
    manifest = Manifest(paths["out"])
    key, config_hash = _stage_key_and_hash(cfg, args)
    if not args.force and manifest.is_complete(key, config_hash):
        log.info("%s already complete (manifest %s); use --force to rerun", key, manifest.path)
        return EXIT_OK
    started = _now()
    artifacts, extra = COMMANDS[command](cfg, args, paths)
    manifest.record(key, config_hash, started, artifacts, extra)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _setup(cfg)
        return run(args.command, args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingDependencyError, CheckpointError, OSError) as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VoxfaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
