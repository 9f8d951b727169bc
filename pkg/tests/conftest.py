import os
import shutil

import numpy as np
import pytest
import torch

from config import RunConfig, RunLayout, validate_config
from manifest import read_manifest
from prepare_data import prepare_dataset
from spectral import AudioClip
from synth_data import make_synthetic_corpus
from train_gan import train_gan
from train_vqcpc import extract_tokens, train_vqcpc

# Catalog must land in the temporary run directory
os.environ.pop('DATABASE_URL', None)

# 0.128 s clips at hop 64 keep the 32-frame sequence length of the full geometry
TINY = dict(
    experiment='desk',
    fft_size=256,
    clip_seconds=0.128,
    cqt_octaves=3,
    cqt_bins_per_octave=12,
    cqt_fmin=220.0,
    pitch_min=57,
    pitch_max=69,
    train_fraction=0.75,
    encoder_channels=(16,),
    embed_dim=4,
    codebook_size=4,
    context_hidden=8,
    context_dim=8,
    context_layers=1,
    predict_steps=2,
    n_negatives=4,
    vq_batch_size=4,
    vq_steps=6,
    vq_checkpoint_every=3,
    vq_reseed_every=2,
    kmeans_warmup_batches=2,
    latent_dim=4,
    base_freq=16,
    feature_maps=(8, 8, 8, 8),
    batch_ladder=(4, 4, 4, 4),
    iterations_per_scale=4,
    iteration_divisor=1,
    checkpoint_every=3,
    inception_embed_dim=8,
    inception_freq_pool=2,
    inception_steps=5,
    inception_batch_size=4,
    eval_samples=4,
)
N_TINY_CLIPS = 16


def make_tiny_config(**changes):
    config = RunConfig(**dict(TINY, **changes))
    validate_config(config)
    return config


def sine_clip(freq, seconds=1.0, rate=16000, amplitude=0.5, pitch=-1):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioClip((amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32), rate, pitch)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope='session')
def prepared_run(tmp_path_factory):
    """Synthetic corpus -> features -> encoder -> token files, at the tiny geometry."""
    config = make_tiny_config()
    layout = RunLayout(str(tmp_path_factory.mktemp('prepared'))).ensure()
    corpus = os.path.join(layout.root, 'data', 'synthetic')
    make_synthetic_corpus(corpus, N_TINY_CLIPS, seed=0, pitch_min=config.pitch_min, pitch_max=config.pitch_max,
                          rate=config.sample_rate, duration=config.clip_seconds)
    prepare_dataset(layout, corpus, config)
    ckpt = train_vqcpc(layout, config)
    extract_tokens(ckpt, read_manifest(layout.manifest('all')), layout)
    return layout, config


@pytest.fixture(scope='session')
def trained_run(prepared_run, tmp_path_factory):
    layout, config = prepared_run
    dest = tmp_path_factory.mktemp('trained') / 'run'
    shutil.copytree(layout.root, dest)
    trained = RunLayout(str(dest))
    final = train_gan(trained, config)
    return trained, config, final


@pytest.fixture
def run_copy(prepared_run, tmp_path):
    """A private, writable copy of the prepared run."""
    layout, config = prepared_run
    dest = tmp_path / 'run'
    shutil.copytree(layout.root, dest)
    return RunLayout(str(dest)), config


@pytest.fixture
def fd_check():
    """Compares autograd gradients with central finite differences on sampled entries."""

    def check(loss_fn, params, n_entries=6, eps=1e-6, rtol=1e-3, atol=1e-8, seed=0):
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        rng = np.random.default_rng(seed)
        checked = 0
        for param, grad in zip(params, grads):
            grad = torch.zeros_like(param) if grad is None else grad
            flat = param.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                original = flat[idx].item()
                flat[idx] = original + eps
                up = loss_fn().item()
                flat[idx] = original - eps
                down = loss_fn().item()
                flat[idx] = original
                numeric = (up - down) / (2 * eps)
                analytic = grad.reshape(-1)[idx].item()
                assert abs(numeric - analytic) <= rtol * max(abs(numeric), abs(analytic)) + atol, \
                    f"entry {idx}: analytic {analytic:.8g} vs numeric {numeric:.8g}"
                checked += 1
        return checked

    return check
