"""Shared fixtures: the two-style toy dataset and the models trained on it.

Training is expensive, so the VAE and the toy diffusion model are built once
per session and only when a test asks for them.
"""

import time

import numpy as np
import pytest
import torch

from scenegen.diffusion import Denoiser, DenoiserConfig, train_diffusion
from scenegen.formats import assign_split
from scenegen.toy import build_quads, synth_scene
from scenegen.training import ChunkData, encode_chunks, train_vae
from scenegen.vae import ChunkVAE, VaeConfig

# toy VAE budget: the acceptance bound is 30 minutes of CPU training; the step
# count is only an upper bound, the learning-rate decay follows the clock
VAE_TIME_LIMIT = 1800.0
VAE_STEPS = 40000
VAE_QUERIES = 1024
VAE_HEAD_WIDTH = 64
QUADS_PER_SCENE = 150

ACCEPTANCE = {}


def record(name: str, ok: bool, detail: str = ""):
    """Remember one acceptance outcome; printed in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE[name] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_dataset():
    scenes = [synth_scene(0, "towers"), synth_scene(1, "blocks")]
    quads = build_quads(scenes, QUADS_PER_SCENE)
    split = assign_split(quads)
    train = [q for q, s in zip(quads, split) if s == "train"]
    val = [q for q, s in zip(quads, split) if s == "val"]
    return {"train": train, "val": val, "train_data": ChunkData.from_quads(train, 32),
            "val_data": ChunkData.from_quads(val, 32)}


@pytest.fixture(scope="session")
def toy_vae(toy_dataset):
    torch.manual_seed(0)
    model = ChunkVAE(VaeConfig(latents=8, channels=32, chunk=32, head_width=VAE_HEAD_WIDTH))
    t0 = time.perf_counter()
    history = train_vae(model, toy_dataset["train_data"], VAE_STEPS, batch_size=16, lr=1e-3,
                        n_queries=VAE_QUERIES, time_limit=VAE_TIME_LIMIT, bf16=True)
    return {"model": model, "history": history, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def toy_diffusion(toy_dataset, toy_vae):
    """Denoiser trained jointly on the latents of both styles."""
    vae = toy_vae["model"]
    z = encode_chunks(vae, toy_dataset["train_data"], seed=0)
    quads = torch.as_tensor(z.reshape(-1, 4, *z.shape[1:]))
    styles = np.repeat([q.scene for q in toy_dataset["train"]], 4)
    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(latents=8, channels=32))
    t0 = time.perf_counter()
    history = train_diffusion(den, quads, steps=3000, batch_size=64, lr=1e-3, seed=0)
    return {"model": den, "latents": z, "styles": styles, "history": history,
            "seconds": time.perf_counter() - t0}
