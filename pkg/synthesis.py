import logging

import numpy as np
import torch
import torch.nn.functional as F

from gan_models import assemble_input, resample_tokens
from spectral import AudioClip, SpectroTensor, fit_length, invert_magif

# CONFIG
RENDER_BATCH = 16


def latent(seed, dim):
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(dim, generator=generator)


def interpolate_latents(z_from, z_to, steps):
    if steps < 2:
        return [z_from]
    return [z_from + (z_to - z_from) * (i / (steps - 1)) for i in range(steps)]


def constant_tokens(token, length, codebook_size):
    if not 0 <= token < codebook_size:
        raise ValueError(f"Constant token {token} outside [0, {codebook_size}).")
    return np.full(length, token, dtype=np.uint8)


def synthesize_specs(generator, config, labels, pitches, token_arrays, latents, scale=None, alpha=1.0):
    """
    Runs the generator for a batch of requests that share one frame count and
    returns (B, 2, freq_bins, L) numpy spectrograms. Outputs below the top
    scale are repeated along frequency up to the full bin count.
    """
    pitch_idx = torch.tensor([labels.pitch_index(p) for p in pitches])
    onehot = F.one_hot(pitch_idx, labels.n_pitches).float()
    tokens = torch.from_numpy(np.stack([np.asarray(t, dtype=np.int64) for t in token_arrays]))
    z = torch.stack(list(latents))
    cond = assemble_input(z, onehot, tokens, config.codebook_size)
    with torch.no_grad():
        spec = generator(cond, scale, alpha).numpy()
    if spec.shape[2] < config.freq_bins:
        spec = np.repeat(spec, config.freq_bins // spec.shape[2], axis=2)
    return spec


def render_batch(generator, config, labels, pitches, token_arrays, latents, duration, scale=None, alpha=1.0):
    """Waves for requests sharing one duration; tokens are resampled to its frame count."""
    frames = config.frames_for_duration(duration)
    n_samples = int(round(duration * config.sample_rate))
    resampled = [resample_tokens(np.asarray(getattr(t, 'tokens', t)), frames) for t in token_arrays]

    clips = []
    for start in range(0, len(pitches), RENDER_BATCH):
        stop = start + RENDER_BATCH
        specs = synthesize_specs(generator, config, labels, pitches[start:stop], resampled[start:stop],
                                 latents[start:stop], scale, alpha)
        for spec, pitch in zip(specs, pitches[start:stop]):
            audio = invert_magif(SpectroTensor(spec), config.fft_size, config.overlap, config.mag_floor_db,
                                 config.sample_rate)
            clips.append(AudioClip(fit_length(audio.samples, n_samples), config.sample_rate, int(pitch)))
    logging.debug(f"Rendered {len(clips)} clips of {duration}s ({frames} frames).")
    return clips
