import logging
import math
import os
import tempfile
from dataclasses import dataclass

import librosa
import numpy as np
import soundfile as sf

from errors import AudioFormatError, GeometryError

# CONFIG
DEFAULT_RATE = 16000
DEFAULT_FFT = 2048
DEFAULT_OVERLAP = 0.75
DEFAULT_FLOOR_DB = -80.0
CQT_FMIN = 32.703  # C1, six octaves end at C7


@dataclass
class AudioClip:
    samples: np.ndarray
    rate: int = DEFAULT_RATE
    pitch: int = -1
    instrument_family: str = ''
    source_id: str = ''

    @property
    def duration(self):
        return len(self.samples) / float(self.rate)


@dataclass
class SpectroTensor:
    """(2, F, L) grid: channel 0 log-magnitude in [-1, 1], channel 1 IF deviation in [-1, 1]."""
    values: np.ndarray

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def freq_bins(self):
        return self.values.shape[1]

    @property
    def frames(self):
        return self.values.shape[2]


@dataclass
class CqtSequence:
    values: np.ndarray  # (bins, L) magnitudes

    @property
    def bins(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]


# ==========================================
# AUDIO I/O
# ==========================================

def load_clip(path, expected_rate=DEFAULT_RATE, duration=1.0, resample=False,
              pitch=-1, instrument_family='', source_id=None):
    """Reads a mono file, normalizes it into [-1, 1] and trims or zero-pads it to `duration` seconds."""
    try:
        data, rate = sf.read(path, dtype='float32', always_2d=True)
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"Could not decode '{path}': {e}") from e

    if data.shape[1] != 1:
        raise AudioFormatError(f"'{path}' has {data.shape[1]} channels; only mono audio is supported.")
    samples = data[:, 0]

    if rate != expected_rate:
        if not resample:
            raise AudioFormatError(f"'{path}' is {rate} Hz, expected {expected_rate} Hz (enable resample to convert).")
        logging.debug(f"Resampling {path} from {rate} to {expected_rate} Hz")
        samples = librosa.resample(samples, orig_sr=rate, target_sr=expected_rate)

    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak

    n_target = int(round(expected_rate * duration))
    samples = fit_length(samples, n_target)

    if source_id is None:
        source_id = os.path.splitext(os.path.basename(path))[0]
    return AudioClip(samples.astype(np.float32), expected_rate, pitch, instrument_family, source_id)


def fit_length(samples, n_target):
    if len(samples) >= n_target:
        return samples[:n_target]
    return np.pad(samples, (0, n_target - len(samples)))


def write_clip(clip, path):
    """Writes 16-bit PCM wave atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    os.close(fd)
    try:
        sf.write(tmp_path, np.clip(clip.samples, -1.0, 1.0), clip.rate, subtype='PCM_16', format='WAV')
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


# ==========================================
# STFT MAGNITUDE + INSTANTANEOUS FREQUENCY
# ==========================================

def hop_length(fft_size, overlap):
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise GeometryError(f"fft_size must be a power of two, got {fft_size}")
    if not 0.0 <= overlap < 1.0:
        raise GeometryError(f"overlap must lie in [0, 1), got {overlap}")
    return int(round(fft_size * (1.0 - overlap)))


def magnitude_reference(fft_size):
    # Largest magnitude a [-1, 1] signal can reach under a periodic Hann window
    return float(np.sum(librosa.filters.get_window('hann', fft_size, fftbins=True)))


def expected_advance(fft_size, hop):
    """Phase a bin-centred sinusoid advances per hop, one value per kept bin."""
    bins = np.arange(fft_size // 2)
    return 2.0 * np.pi * bins * hop / fft_size


def stft_magif(clip, fft_size=DEFAULT_FFT, overlap=DEFAULT_OVERLAP, floor_db=DEFAULT_FLOOR_DB):
    hop = hop_length(fft_size, overlap)
    y = np.asarray(clip.samples, dtype=np.float64)
    if len(y) < fft_size:
        raise GeometryError(f"Clip of {len(y)} samples is shorter than one {fft_size}-sample window.")

    n_frames = math.ceil(len(y) / hop)
    stft = librosa.stft(y, n_fft=fft_size, hop_length=hop, window='hann', center=True, pad_mode='constant')
    stft = stft[:fft_size // 2, :n_frames]

    magnitude = np.abs(stft)
    db = 20.0 * np.log10(np.maximum(magnitude, 1e-12) / magnitude_reference(fft_size))
    db = np.clip(db, floor_db, 0.0)
    log_mag = 1.0 + 2.0 * db / abs(floor_db)

    unwrapped = np.unwrap(np.angle(stft), axis=1)
    dphase = np.diff(unwrapped, axis=1, prepend=0.0)
    deviation = dphase - expected_advance(fft_size, hop)[:, None]
    deviation = np.mod(deviation + np.pi, 2.0 * np.pi) - np.pi
    inst_freq = np.where(db <= floor_db, 0.0, deviation / np.pi)

    values = np.stack([log_mag, inst_freq]).astype(np.float32)
    return SpectroTensor(values)


def invert_magif(spec, fft_size=DEFAULT_FFT, overlap=DEFAULT_OVERLAP, floor_db=DEFAULT_FLOOR_DB, rate=DEFAULT_RATE):
    """Integrates IF back into phase and overlap-adds; output length is frames * hop."""
    hop = hop_length(fft_size, overlap)
    values = np.asarray(spec.values, dtype=np.float64)
    if values.ndim != 3 or values.shape[0] != 2 or values.shape[1] != fft_size // 2:
        raise GeometryError(f"Spectrogram of shape {values.shape} does not match fft_size {fft_size} "
                            f"(expected (2, {fft_size // 2}, L)).")

    log_mag, inst_freq = np.clip(values[0], -1.0, 1.0), np.clip(values[1], -1.0, 1.0)
    db = (log_mag - 1.0) / 2.0 * abs(floor_db)
    magnitude = magnitude_reference(fft_size) * 10.0 ** (db / 20.0)
    magnitude = np.where(log_mag <= -1.0, 0.0, magnitude)

    phase = np.cumsum(np.pi * inst_freq + expected_advance(fft_size, hop)[:, None], axis=1)
    stft = magnitude * np.exp(1j * phase)
    stft = np.vstack([stft, np.zeros((1, stft.shape[1]), dtype=stft.dtype)])  # restore Nyquist

    n_samples = spec.frames * hop
    y = librosa.istft(stft, hop_length=hop, n_fft=fft_size, window='hann', center=True, length=n_samples)
    return AudioClip(y.astype(np.float32), rate)


# ==========================================
# CONSTANT-Q
# ==========================================

def cqt(clip, octaves=6, bins_per_octave=24, hop=512, fmin=CQT_FMIN, frames=None):
    nyquist = clip.rate / 2.0
    if fmin * 2 ** octaves > nyquist:
        raise GeometryError(f"{octaves} octaves from {fmin:.1f} Hz exceed the {nyquist:.0f} Hz Nyquist limit.")

    y = np.asarray(clip.samples, dtype=np.float64)
    n_bins = octaves * bins_per_octave
    if not np.any(y):
        grid = np.zeros((n_bins, 1 + len(y) // hop))
    else:
        grid = np.abs(librosa.cqt(y, sr=clip.rate, hop_length=hop, fmin=fmin,
                                  n_bins=n_bins, bins_per_octave=bins_per_octave))

    # Reconcile with the STFT frame count
    target = frames if frames is not None else math.ceil(len(y) / hop)
    if grid.shape[1] >= target:
        grid = grid[:, :target]
    else:
        grid = np.pad(grid, ((0, 0), (0, target - grid.shape[1])))
    return CqtSequence(grid.astype(np.float32))


# ==========================================
# FREQUENCY PYRAMID
# ==========================================

def downscale_freq(spec, factor):
    """Average-pools along frequency only."""
    if factor < 1 or factor & (factor - 1):
        raise GeometryError(f"Downscale factor must be a power of two, got {factor}")
    channels, freq_bins, frames = spec.values.shape
    if freq_bins % factor:
        raise GeometryError(f"{freq_bins} frequency bins are not divisible by {factor}")
    pooled = spec.values.reshape(channels, freq_bins // factor, factor, frames).mean(axis=2)
    return SpectroTensor(pooled.astype(np.float32))
