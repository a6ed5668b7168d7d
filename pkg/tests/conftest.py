import time

import pytest
import torch

from voxface.composer import ComposerConfig, SyncDiscriminator, prepare_clips, train_sync_discriminator
from voxface.cpc import CpcConfig, train_cpc
from voxface.distill import Students, build_teachers
from voxface.media import split_dataset, synth_toy_dataset

# toy sync protocol shared by the metrics tests and the acceptance suite
SYNC_CPC_EPOCHS = 20
SYNC_CPC_LR = 1e-3
SYNC_STEPS = 2000
SYNC_LR = 1e-3
SYNC_BATCH = 64


@pytest.fixture(scope="session")
def sync_setup():
    start = time.perf_counter()
    data = synth_toy_dataset(32, 16, 32, 32, seed=0)
    cpc, _, _ = train_cpc(data, CpcConfig(), epochs=SYNC_CPC_EPOCHS, lr=SYNC_CPC_LR, batch_size=1, seed=0)
    id_teacher, _ = build_teachers(32)
    clips = prepare_clips(data, cpc, Students(), id_teacher)
    split = split_dataset(range(len(data)), seed=0)
    train = [clips[i] for i in split.train]
    heldout = [clips[i] for i in split.val + split.test]
    torch.manual_seed(0)
    d_sync = SyncDiscriminator(ComposerConfig())
    curve = train_sync_discriminator(d_sync, train, SYNC_STEPS, lr=SYNC_LR, batch_size=SYNC_BATCH, seed=0)
    d_sync.eval()
    return {"data": data, "cpc": cpc, "clips": clips, "split": split, "train": train, "heldout": heldout,
            "d_sync": d_sync, "curve": curve,
            "seconds": time.perf_counter() - start}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
