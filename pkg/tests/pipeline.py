"""Tiny end-to-end CLI runs for the CLI and determinism tests."""
from pathlib import Path

from voxface.cli import main

TINY_CONFIG = """\
[run]
seed = {seed}
output_dir = {out}

[data]
n_utterances = 6
n_frames = 8
image_size = 32

[cpc]
d_z = 16
d_c = 24
channels = 8
epochs = 3
lr = 1e-3

[distill]
epochs = 4
batch_size = 2
hidden = 16
d_id = 64
d_emo = 8
k_frames = 3

[composer]
max_steps = 4
batch_size = 2
"""


def write_config(directory, seed=0, extra=""):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.ini"
    path.write_text(TINY_CONFIG.format(seed=seed, out=directory / "out") + extra)
    return path


def run_pipeline(directory, seed=0):
    """prepare -> cpc -> distill -> composer -> generate -> evaluate; returns exit codes and paths."""
    cfg = str(write_config(directory, seed))
    out = Path(directory) / "out"
    codes = [main([cmd, "--config", cfg]) for cmd in ("prepare-data", "train-cpc", "train-distill", "train-composer")]
    clip = sorted((out / "data").glob("clip_*"))[0]
    gen = out / "generated" / clip.name
    codes.append(main(["generate", "--config", cfg, "--audio", str(clip / "audio.raw"), "--out", str(gen)]))
    report = out / "report.json"
    codes.append(main(["evaluate", "--config", cfg, "--generated", str(gen), "--reference", str(clip),
                       "--out", str(report)]))
    return codes, {"out": out, "config": Path(cfg), "clip": clip, "generated": gen, "report": report}
