"""Synthetic stand-in for an NSynth-format corpus: same file layout and examples.json keys."""

import json
import logging
import os

import librosa
import numpy as np

from containers import atomic_path
from logger_config import setup_logger
from spectral import AudioClip, write_clip

# CONFIG
FAMILIES = {
    # name: (harmonic amplitudes, envelope kind)
    'mallet': ((1.0, 0.5, 0.25, 0.12), 'decaying'),
    'organ': ((1.0, 0.0, 0.6, 0.0, 0.4, 0.0, 0.2), 'sustained'),
    'string': ((1.0, 0.5, 0.33, 0.25, 0.2, 0.16), 'swelling'),
}
PEAK_LEVEL = 0.8
VELOCITY = 100


def envelope(kind, n_samples, rate, rng):
    t = np.arange(n_samples) / rate
    duration = n_samples / rate
    release = np.clip((duration - t) / 0.05, 0.0, 1.0)
    if kind == 'decaying':
        attack = np.clip(t / 0.005, 0.0, 1.0)
        return attack * np.exp(-t * rng.uniform(4.0, 9.0))
    if kind == 'sustained':
        attack = np.clip(t / 0.02, 0.0, 1.0)
        fade = np.exp(-t * rng.uniform(1.0, 2.0) / duration)
        return attack * fade * release * rng.uniform(0.85, 1.0)
    if kind == 'swelling':
        return np.clip(t / (duration * rng.uniform(0.6, 0.9)), 0.0, 1.0) ** 2 * release
    raise ValueError(f"Unknown envelope kind '{kind}'")


def render_note(pitch, family, rate=16000, duration=1.0, rng=None):
    rng = rng or np.random.default_rng(0)
    harmonics, kind = FAMILIES[family]
    n_samples = int(round(rate * duration))
    t = np.arange(n_samples) / rate
    f0 = float(librosa.midi_to_hz(pitch))

    tone = np.zeros(n_samples)
    for k, amp in enumerate(harmonics, start=1):
        if amp == 0.0 or k * f0 >= rate / 2:
            continue
        tone += amp * np.sin(2.0 * np.pi * k * f0 * t + rng.uniform(0, 2.0 * np.pi))

    samples = tone * envelope(kind, n_samples, rate, rng)
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples * (PEAK_LEVEL / peak)
    return samples.astype(np.float32)


def make_synthetic_corpus(out_dir, n_clips, seed=0, pitch_min=44, pitch_max=70, rate=16000, duration=1.0,
                          pitches=None):
    """
    Writes `n_clips` notes, families assigned round-robin and pitches drawn
    uniformly. A `pitches` list replaces the draw: note i gets
    pitches[(i // n_families) % len(pitches)], so every family meets every pitch.
    """
    rng = np.random.default_rng(seed)
    family_names = sorted(FAMILIES)
    index = {}

    logging.info(f"Rendering {n_clips} synthetic notes into {out_dir}...")
    for i in range(n_clips):
        family = family_names[i % len(family_names)]
        if pitches:
            pitch = int(pitches[(i // len(family_names)) % len(pitches)])
        else:
            pitch = int(rng.integers(pitch_min, pitch_max + 1))
        note_id = f"{family}_synthetic_{i:03d}-{pitch:03d}-{VELOCITY:03d}"
        samples = render_note(pitch, family, rate, duration, rng)
        write_clip(AudioClip(samples, rate, pitch, family, note_id),
                   os.path.join(out_dir, 'audio', f"{note_id}.wav"))
        index[note_id] = {
            'note_str': note_id,
            'pitch': pitch,
            'velocity': VELOCITY,
            'sample_rate': rate,
            'instrument_family': family_names.index(family),
            'instrument_family_str': family,
            'instrument_source_str': 'synthetic',
        }

    with atomic_path(os.path.join(out_dir, 'examples.json')) as tmp_path:
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(index, f, indent=1, sort_keys=True)
    logging.info(f"Synthetic corpus written: {len(index)} notes, {len(family_names)} families.")
    return index


if __name__ == "__main__":
    setup_logger()
    logging.info("--- Starting Synthetic Corpus Build ---")
    make_synthetic_corpus('data/synthetic', 64)
    logging.info("--- Synthetic Corpus Build Finished ---")
