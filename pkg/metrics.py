import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from scipy.special import rel_entr

from checkpoints import checkpoint_load, checkpoint_save
from config import RunConfig
from containers import load_tensor, read_token_sequence, save_tensor
from errors import DatasetError, GeometryError
from loaders import step_loader, step_seed
from manifest import LabelSpace
from spectral import stft_magif
from synthesis import latent, render_batch

# CONFIG
FAD_REGULARIZER = 1e-6
EMBED_BATCH = 64


# ==========================================
# 1. CLASSIFIER
# ==========================================

class InceptionClassifier(nn.Module):
    """Log-magnitude in, frequency-pooled conv stack, time-averaged, two softmax heads."""

    def __init__(self, freq_bins, n_pitches, n_families, embed_dim=128, freq_pool=8):
        super().__init__()
        if freq_bins % (freq_pool * 8):
            raise GeometryError(f"{freq_bins} bins do not pool by {freq_pool} x 8")
        self.freq_bins = freq_bins
        self.freq_pool = freq_pool
        blocks = []
        for in_ch, out_ch in ((1, 32), (32, 64), (64, 128)):
            blocks += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d((2, 1))]
        self.features = nn.Sequential(*blocks)
        self.embedding = nn.Linear(128 * freq_bins // (freq_pool * 8), embed_dim)
        self.pitch_head = nn.Linear(embed_dim, n_pitches)
        self.family_head = nn.Linear(embed_dim, n_families)

    def embed(self, log_mag):
        # log_mag: (B, F, L), any L >= 1
        if log_mag.shape[1] != self.freq_bins:
            raise GeometryError(f"Classifier expects {self.freq_bins} bins, got {log_mag.shape[1]}")
        x = F.avg_pool2d(log_mag.unsqueeze(1), (self.freq_pool, 1))
        x = self.features(x).mean(dim=3)  # pool over time
        return F.relu(self.embedding(x.flatten(1)))

    def forward(self, log_mag):
        emb = self.embed(log_mag)
        return emb, self.pitch_head(emb), self.family_head(emb)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray       # (N, d_e)
    pitch_probs: np.ndarray   # (N, P)
    family_probs: np.ndarray  # (N, F)

    def __len__(self):
        return len(self.vectors)

    def to_matrix(self):
        return np.concatenate([self.vectors, self.pitch_probs, self.family_probs], axis=1)

    @classmethod
    def from_matrix(cls, matrix, embed_dim, n_pitches):
        return cls(matrix[:, :embed_dim], matrix[:, embed_dim:embed_dim + n_pitches],
                   matrix[:, embed_dim + n_pitches:])


@dataclass
class MetricReport:
    label: str
    pis: float
    iis: float
    kid: float
    fad: float
    n_samples: int
    duration: float
    embedder_fingerprint: str

    COLUMNS = ('label', 'pis', 'iis', 'kid', 'fad', 'n_samples', 'duration', 'embedder_fingerprint')

    def tsv_row(self):
        return "\t".join(str(getattr(self, c)) for c in self.COLUMNS)

    def summary(self):
        return (f"{self.label}: PIS {self.pis:.3f} | IIS {self.iis:.3f} | KID {self.kid:.3e} | FAD {self.fad:.4f} "
                f"({self.n_samples} samples, {self.duration:g}s, embedder {self.embedder_fingerprint[:12]})")


class SpectrumDataset(torch.utils.data.Dataset):
    def __init__(self, layout, manifest, labels, scale_index):
        self.paths = [layout.stft_path(scale_index, sid) for sid in manifest.source_ids]
        self.pitch = [labels.pitch_index(p) for p in manifest.entries['pitch']]
        self.family = [labels.family_index(f) for f in manifest.entries['family']]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        spec = load_tensor(self.paths[index], mmap=True)
        return torch.from_numpy(np.array(spec[0])), self.pitch[index], self.family[index]


def parameter_fingerprint(model):
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ==========================================
# 2. TRAINING & EMBEDDING
# ==========================================

def accuracy(model, dataset):
    if len(dataset) == 0:
        return float('nan'), float('nan')
    model.eval()
    hits_p = hits_f = 0
    with torch.no_grad():
        for start in range(0, len(dataset), EMBED_BATCH):
            items = [dataset[i] for i in range(start, min(start + EMBED_BATCH, len(dataset)))]
            specs = torch.stack([it[0] for it in items])
            _, pitch_logits, family_logits = model(specs)
            hits_p += int((pitch_logits.argmax(1) == torch.tensor([it[1] for it in items])).sum())
            hits_f += int((family_logits.argmax(1) == torch.tensor([it[2] for it in items])).sum())
    return hits_p / len(dataset), hits_f / len(dataset)


def train_inception(layout, config, labels, train_manifest, test_manifest, out_path):
    """Trains the evaluation classifier on real top-scale features and writes its checkpoint."""
    if train_manifest.entries['pitch'].nunique() < 2:
        raise DatasetError("The classifier needs at least two pitch classes in the training data.")
    if train_manifest.entries['family'].nunique() < 2:
        logging.warning("Only one instrument family present; the instrument score will be 1 by construction.")

    train_set = SpectrumDataset(layout, train_manifest, labels, config.n_scales)
    test_set = SpectrumDataset(layout, test_manifest, labels, config.n_scales)

    torch.manual_seed(config.seed)
    model = InceptionClassifier(config.freq_bins, labels.n_pitches, labels.n_families,
                                config.inception_embed_dim, config.inception_freq_pool)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.inception_learning_rate)

    model.train()
    for step, (specs, pitch, family) in enumerate(step_loader(train_set, config.inception_batch_size,
                                                               config.seed + 2, 0, config.inception_steps)):
        _, pitch_logits, family_logits = model(specs)
        loss = F.cross_entropy(pitch_logits, pitch) + F.cross_entropy(family_logits, family)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if (step + 1) % 100 == 0:
            logging.info(f"[{step + 1}/{config.inception_steps}] classifier loss {float(loss):.4f}")

    pitch_acc, family_acc = accuracy(model, test_set)
    logging.info(f"Classifier held-out accuracy: pitch {pitch_acc:.3f}, family {family_acc:.3f}")

    checkpoint_save({'kind': 'inception', 'config': config.to_dict(), 'labels': labels.to_dict(),
                     'model': model.state_dict(), 'fingerprint': parameter_fingerprint(model),
                     'accuracy': {'pitch': pitch_acc, 'family': family_acc}}, out_path)
    return out_path, pitch_acc, family_acc


def load_inception(path):
    state = checkpoint_load(path, expected_kind='inception')
    config = RunConfig(**state['config'])
    labels = LabelSpace.from_dict(state['labels'])
    model = InceptionClassifier(config.freq_bins, labels.n_pitches, labels.n_families,
                                config.inception_embed_dim, config.inception_freq_pool)
    model.load_state_dict(state['model'])
    model.eval()
    return model, state['fingerprint']


def embed(model, log_mags):
    """
    log_mags: iterable of (F, L) log-magnitude grids (L may differ between
    items). Returns penultimate vectors and both softmax outputs per item.
    """
    vectors, pitch_probs, family_probs = [], [], []
    model.eval()
    with torch.no_grad():
        for grid in log_mags:
            emb, pitch_logits, family_logits = model(torch.as_tensor(np.asarray(grid, dtype=np.float32))[None])
            vectors.append(emb[0].double().numpy())
            pitch_probs.append(F.softmax(pitch_logits[0].double(), dim=0).numpy())
            family_probs.append(F.softmax(family_logits[0].double(), dim=0).numpy())
    if not vectors:
        raise DatasetError("Nothing to embed.")
    return EmbeddingSet(np.stack(vectors), np.stack(pitch_probs), np.stack(family_probs))


# ==========================================
# 3. METRICS
# ==========================================

def inception_score(probs):
    """exp(mean_i KL(p(y|x_i) || mean_j p(y|x_j)))."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("Inception score needs a non-empty (N, K) probability matrix.")
    marginal = probs.mean(axis=0, keepdims=True)
    kl = rel_entr(probs, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


def _vectors(x):
    v = np.asarray(getattr(x, 'vectors', x), dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


def polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(a, b):
    """Unbiased squared MMD with a cubic polynomial kernel; within-set diagonals excluded."""
    x, y = _vectors(a), _vectors(b)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise DatasetError(f"KID needs at least 2 samples per set, got {m} and {n}.")
    k_xx, k_yy, k_xy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


def gaussian_stats(vectors):
    if not np.all(np.isfinite(vectors)):
        raise DatasetError("Embeddings contain non-finite values.")
    if len(vectors) < 2:
        raise DatasetError("FAD needs at least 2 samples per set.")
    mu = vectors.mean(axis=0)
    sigma = np.atleast_2d(np.cov(vectors, rowvar=False))
    if len(vectors) <= vectors.shape[1]:
        sigma = sigma + FAD_REGULARIZER * np.eye(sigma.shape[0])
    return mu, sigma


def _psd_sqrt(matrix):
    w, v = linalg.eigh((matrix + matrix.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b):
    """Tr((S_a S_b)^1/2) through the symmetric form S_a^1/2 S_b S_a^1/2, negative eigenvalues clipped."""
    root_a = _psd_sqrt(sigma_a)
    middle = root_a @ sigma_b @ root_a
    eig = np.clip(linalg.eigvalsh((middle + middle.T) / 2.0), 0.0, None)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.sum(np.sqrt(eig))
    return float(max(value, 0.0))


def fad(a, b):
    mu_a, sigma_a = gaussian_stats(_vectors(a))
    mu_b, sigma_b = gaussian_stats(_vectors(b))
    return frechet_distance(mu_a, sigma_a, mu_b, sigma_b)


# ==========================================
# 4. REPORTS
# ==========================================

def real_embeddings(layout, config, manifest, model, fingerprint, cache_tag):
    """Embeds real top-scale features, cached per classifier fingerprint and manifest contents."""
    ids_hash = hashlib.sha256("\n".join(manifest.source_ids).encode()).hexdigest()[:12]
    cache = os.path.join(layout.reports, f"embeddings_{fingerprint[:12]}_{cache_tag}_{ids_hash}.bin")
    n_pitches = model.pitch_head.out_features
    if os.path.exists(cache):
        matrix = load_tensor(cache)[0].astype(np.float64)
        return EmbeddingSet.from_matrix(matrix, config.inception_embed_dim, n_pitches)

    grids = (load_tensor(layout.stft_path(config.n_scales, sid), mmap=True)[0] for sid in manifest.source_ids)
    matrix = embed(model, grids).to_matrix()
    save_tensor(matrix, cache)
    # same float32 precision as a cache hit
    return EmbeddingSet.from_matrix(matrix.astype(np.float32).astype(np.float64), config.inception_embed_dim,
                                    n_pitches)


def evaluate(generator, gen_config, labels, cursor, layout, test_manifest, inception_path, n_samples,
             duration=1.0, seed=0):
    """Generates `n_samples` clips with pitches and token sequences drawn from the real test set, then scores them."""
    if n_samples < 2:
        raise DatasetError(f"At least 2 generated samples are needed for KID/FAD, got {n_samples}.")
    model, fingerprint = load_inception(inception_path)
    real = real_embeddings(layout, gen_config, test_manifest, model, fingerprint, 'test')

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(test_manifest), size=n_samples)
    entries = test_manifest.entries.iloc[picks]
    pitches = entries['pitch'].astype(int).tolist()
    token_arrays = [read_token_sequence(layout.token_path(sid)).tokens for sid in entries['source_id']]
    latents = [latent(step_seed(seed, i, stream=3), gen_config.latent_dim)
               for i in range(n_samples)]

    logging.info(f"Generating {n_samples} evaluation clips of {duration}s...")
    clips = render_batch(generator, gen_config, labels, pitches, token_arrays, latents, duration,
                         cursor.get('scale_index'), cursor.get('alpha', 1.0))
    grids = (stft_magif(c, gen_config.fft_size, gen_config.overlap, gen_config.mag_floor_db).values[0]
             for c in clips)
    fake = embed(model, grids)

    return MetricReport('generated', inception_score(fake.pitch_probs), inception_score(fake.family_probs),
                        kid(real, fake), fad(real, fake), n_samples, duration, fingerprint)


def reference_report(layout, config, train_manifest, test_manifest, inception_path):
    """Real-data row: PIS/IIS of the test set, KID/FAD between real train and real test."""
    model, fingerprint = load_inception(inception_path)
    test = real_embeddings(layout, config, test_manifest, model, fingerprint, 'test')
    train = real_embeddings(layout, config, train_manifest, model, fingerprint, 'train')
    return MetricReport('reference', inception_score(test.pitch_probs), inception_score(test.family_probs),
                        kid(train, test), fad(train, test), len(test), config.clip_seconds, fingerprint)
