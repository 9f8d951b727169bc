import dataclasses
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from typing import Tuple
from urllib.parse import urlparse

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

# --- PRESETS ---
# 'full' is the 6 x 200k-iteration schedule; 'desk' is sized for a laptop CPU.
PRESETS = {
    'full': {},
    'desk': {
        'iteration_divisor': 1000,
        'batch_ladder': (8, 8, 6, 6, 4, 4),
        'feature_maps': (64, 32, 32, 32, 32, 16),
        'vq_steps': 2000,
        'vq_learning_rate': 1e-3,
        'inception_steps': 400,
        'eval_samples': 64,
    },
}

DEFAULT_RUN_DIR = 'runs/default'


@dataclass
class RunConfig:
    experiment: str = 'desk'
    seed: int = 0

    # --- Audio & features ---
    sample_rate: int = 16000
    clip_seconds: float = 1.0
    resample: bool = False
    fft_size: int = 2048
    overlap: float = 0.75
    mag_floor_db: float = -80.0
    cqt_octaves: int = 6
    cqt_bins_per_octave: int = 24
    cqt_fmin: float = 32.703
    pitch_min: int = 44
    pitch_max: int = 70
    n_pitches: int = 0  # 0 = distinct pitches found in the filtered manifest
    train_fraction: float = 0.9
    prepare_workers: int = 0

    # --- VQCPC encoder ---
    encoder_channels: Tuple[int, ...] = (512, 512, 256)
    embed_dim: int = 32
    codebook_size: int = 16
    context_hidden: int = 256
    context_dim: int = 512
    context_layers: int = 2
    predict_steps: int = 5
    n_negatives: int = 16
    commitment_beta: float = 0.25
    negative_sampling: str = 'intra'
    negative_sharing: str = 'per_step'
    kmeans_warmup_batches: int = 4
    vq_learning_rate: float = 2e-4
    vq_warmup_steps: int = 100
    vq_reseed_every: int = 50  # 0 = never move unused centroids
    vq_batch_size: int = 32
    vq_steps: int = 50000
    vq_checkpoint_every: int = 500

    # --- GAN ---
    latent_dim: int = 128
    base_freq: int = 32
    feature_maps: Tuple[int, ...] = (512, 256, 256, 256, 256, 128)
    batch_ladder: Tuple[int, ...] = (30, 30, 20, 20, 12, 12)
    iterations_per_scale: int = 200000
    iteration_divisor: int = 1
    fade_fraction: float = 0.5
    gan_learning_rate: float = 0.001
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    gp_lambda: float = 10.0
    ce_weight: float = 1.0
    drift_epsilon: float = 0.001
    d_steps: int = 1
    checkpoint_every: int = 100
    loader_workers: int = 0

    # --- Evaluation ---
    inception_embed_dim: int = 128
    inception_freq_pool: int = 8
    inception_steps: int = 3000
    inception_batch_size: int = 32
    inception_learning_rate: float = 1e-3
    eval_samples: int = 25000
    eval_duration: float = 1.0

    # --- Derived geometry ---
    @property
    def hop(self):
        return int(round(self.fft_size * (1.0 - self.overlap)))

    @property
    def clip_samples(self):
        return int(round(self.sample_rate * self.clip_seconds))

    @property
    def frames(self):
        return math.ceil(self.clip_samples / self.hop)

    @property
    def freq_bins(self):
        # Nyquist bin dropped so the grid halves cleanly down the pyramid
        return self.fft_size // 2

    @property
    def cqt_bins(self):
        return self.cqt_octaves * self.cqt_bins_per_octave

    @property
    def n_scales(self):
        return len(self.feature_maps)

    def scale_freq(self, scale_index):
        return self.base_freq * 2 ** (scale_index - 1)

    def frames_for_duration(self, seconds):
        """Frame count for a generation request, 32 frames per training second by default."""
        return max(1, int(round(seconds * self.frames / self.clip_seconds)))

    # --- Serialization ---
    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def dump(self):
        lines = [f"{key}={_format_value(value)}" for key, value in sorted(self.to_dict().items())]
        return "\n".join(lines) + "\n"

    def fingerprint(self):
        return hashlib.sha256(self.dump().encode('utf-8')).hexdigest()

    def replace(self, **changes):
        return apply_overrides(self, {k: v for k, v in changes.items()})


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(name, kind, raw):
    if not isinstance(raw, str):
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in raw)
        return kind(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if raw.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in raw.split(',') if v.strip())
        if kind is int:
            return int(float(raw)) if 'e' in raw.lower() else int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"Config key '{name}' expects {getattr(kind, '__name__', kind)}, got '{raw}'")


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def apply_overrides(config, overrides):
    values = config.to_dict()
    for key, raw in overrides.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"Unknown config key '{key}'. Run 'dump-config' to list valid keys.")
        values[key] = _coerce(key, FIELD_TYPES[key], raw)
    resolved = RunConfig(**values)
    validate_config(resolved)
    return resolved


def validate_config(config):
    if config.experiment not in PRESETS:
        raise ConfigError(f"experiment must be one of {sorted(PRESETS)}, got '{config.experiment}'")
    if config.fft_size <= 0 or config.fft_size & (config.fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {config.fft_size}")
    if not 0.0 <= config.overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {config.overlap}")
    if not 0.0 < config.train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {config.train_fraction}")
    if config.negative_sampling not in ('intra', 'dataset'):
        raise ConfigError(f"negative_sampling must be 'intra' or 'dataset', got '{config.negative_sampling}'")
    if config.negative_sharing not in ('per_step', 'shared'):
        raise ConfigError(f"negative_sharing must be 'per_step' or 'shared', got '{config.negative_sharing}'")
    if config.vq_warmup_steps < 0 or config.vq_reseed_every < 0:
        raise ConfigError("vq_warmup_steps and vq_reseed_every must be >= 0")
    if config.iteration_divisor < 1:
        raise ConfigError("iteration_divisor must be >= 1")
    if config.d_steps < 1:
        raise ConfigError("d_steps must be >= 1")
    if not 0.0 <= config.fade_fraction <= 1.0:
        raise ConfigError(f"fade_fraction must lie in [0, 1], got {config.fade_fraction}")


def parse_set_overrides(pairs):
    """Turns repeated `--set key=value` strings into a dict."""
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path=None, overrides=None):
    """
    Resolves a RunConfig: defaults, then the experiment preset, then the
    key=value config file, then command-line overrides.
    """
    raw = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        raw.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    raw.update(overrides or {})

    experiment = raw.get('experiment', RunConfig.experiment)
    if experiment not in PRESETS:
        raise ConfigError(f"experiment must be one of {sorted(PRESETS)}, got '{experiment}'")

    config = apply_overrides(RunConfig(), dict(PRESETS[experiment], experiment=experiment))
    config = apply_overrides(config, raw)
    logging.debug(f"Resolved config {config.fingerprint()[:12]} ({experiment} preset).")
    return config


def get_database_url(run_dir):
    """Catalog database URL from the environment, defaulting to SQLite inside the run dir."""
    load_dotenv()
    db_url = os.getenv('DATABASE_URL', f"sqlite:///{os.path.join(run_dir, 'catalog.db')}")

    # SQLAlchemy expects "postgresql://" but some environments provide "postgres://"
    if db_url.startswith('postgres://'):
        db_url = db_url.replace('postgres://', 'postgresql://', 1)

    scheme = urlparse(db_url).scheme or db_url.split(':')[0]
    logging.debug(f"Catalog backend: {scheme}")
    return db_url


def default_run_dir():
    load_dotenv()
    return os.getenv('SYNTH_RUN_DIR', DEFAULT_RUN_DIR)


# ==========================================
# RUN DIRECTORY LAYOUT
# ==========================================

@dataclass
class RunLayout:
    """Paths inside one run directory. Nothing is created until `ensure()`."""
    root: str

    def _join(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def config_file(self):
        return self._join('config.env')

    @property
    def checkpoints(self):
        return self._join('checkpoints')

    @property
    def train_log(self):
        return self._join('logs', 'train.tsv')

    @property
    def vq_log(self):
        return self._join('logs', 'vqcpc.tsv')

    @property
    def run_log(self):
        return self._join('logs', 'run.log')

    @property
    def labels(self):
        return self._join('data', 'labels.json')

    @property
    def generated(self):
        return self._join('generated')

    @property
    def reports(self):
        return self._join('reports')

    def manifest(self, split):
        return self._join('data', 'manifests', f"{split}.tsv")

    def cqt_path(self, source_id):
        return self._join('data', 'features', 'cqt', f"{source_id}.bin")

    def stft_path(self, scale_index, source_id):
        return self._join('data', 'features', f"stft_s{scale_index}", f"{source_id}.bin")

    def token_path(self, source_id):
        return self._join('data', 'tokens', f"{source_id}.tok")

    def checkpoint(self, prefix, step):
        return os.path.join(self.checkpoints, f"{prefix}_{step:08d}.ckpt")

    def ensure(self):
        for sub in ('checkpoints', 'logs', 'generated', 'reports', os.path.join('data', 'manifests')):
            os.makedirs(self._join(sub), exist_ok=True)
        return self
