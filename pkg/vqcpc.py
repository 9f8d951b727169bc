import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import GeometryError

# CONFIG
CQT_LOG_FLOOR = 1e-4    # magnitudes this small map to ~0 after log compression
HEAD_INIT_SCALE = 0.01  # near-uniform scores at init


@dataclass
class QuantizeResult:
    tokens: torch.Tensor       # (..., ) long
    quantized: torch.Tensor    # (..., d) straight-through
    vq_loss: torch.Tensor
    commit_loss: torch.Tensor


# ==========================================
# NETWORK PARTS
# ==========================================

class FrameEncoder(nn.Module):
    """Four kernel-1 convolution blocks; output at t depends only on frame t."""

    def __init__(self, in_bins=144, channels=(512, 512, 256), embed_dim=32):
        super().__init__()
        self.in_bins = in_bins
        widths = [in_bins] + list(channels) + [embed_dim]
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Conv1d(widths[i], widths[i + 1], kernel_size=1))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, cqt):
        # cqt: (B, bins, L) -> (B, L, d_z)
        if cqt.shape[1] != self.in_bins:
            raise GeometryError(f"Encoder expects {self.in_bins} CQT bins, got {cqt.shape[1]}")
        return self.net(torch.log1p(cqt / CQT_LOG_FLOOR)).transpose(1, 2)


class Codebook(nn.Module):
    def __init__(self, size=16, dim=32):
        super().__init__()
        self.centroids = nn.Parameter(torch.randn(size, dim))

    @property
    def size(self):
        return self.centroids.shape[0]

    def forward(self, embeddings):
        return quantize(embeddings, self.centroids)


class ContextNetwork(nn.Module):
    """2-layer GRU (hidden 256) projected to 512-d context vectors; strictly causal."""

    def __init__(self, embed_dim=32, hidden=256, out_dim=512, layers=2):
        super().__init__()
        self.gru = nn.GRU(embed_dim, hidden, num_layers=layers, batch_first=True)
        self.proj = nn.Linear(hidden, out_dim)

    def forward(self, quantized):
        if quantized.shape[1] == 0:
            raise GeometryError("Context network needs a non-empty sequence.")
        out, _ = self.gru(quantized)
        return self.proj(out)


class PredictionHeads(nn.Module):
    """K bilinear maps W_k of shape (d_z, d_h): score = a^T W_k h."""

    def __init__(self, steps=5, embed_dim=32, context_dim=512):
        super().__init__()
        init = torch.randn(steps, embed_dim, context_dim) * HEAD_INIT_SCALE / math.sqrt(context_dim)
        self.weights = nn.Parameter(init)

    @property
    def steps(self):
        return self.weights.shape[0]

    def predictions(self, context):
        # context (..., d_h) -> (..., K, d_z)
        return torch.einsum('kzh,...h->...kz', self.weights, context)


class VQCPC(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.encoder = FrameEncoder(config.cqt_bins, config.encoder_channels, config.embed_dim)
        self.codebook = Codebook(config.codebook_size, config.embed_dim)
        self.context = ContextNetwork(config.embed_dim, config.context_hidden, config.context_dim,
                                      config.context_layers)
        self.heads = PredictionHeads(config.predict_steps, config.embed_dim, config.context_dim)

    def forward(self, cqt):
        embeddings = self.encoder(cqt)
        result = self.codebook(embeddings)
        context = self.context(result.quantized)
        return embeddings, result, context

    @torch.no_grad()
    def tokens(self, cqt):
        return self.codebook(self.encoder(cqt)).tokens


# ==========================================
# OPERATIONS
# ==========================================

def encode_frames(encoder, cqt):
    """(bins, L) or (B, bins, L) CQT magnitudes -> per-frame embeddings."""
    squeeze = cqt.dim() == 2
    if squeeze:
        cqt = cqt.unsqueeze(0)
    embeddings = encoder(cqt)
    return embeddings[0] if squeeze else embeddings


def quantize(embeddings, centroids):
    """
    Nearest-centroid assignment with straight-through gradients.
    Ties resolve to the lowest centroid index.
    """
    if centroids.shape[0] == 0:
        raise GeometryError("Cannot quantize against an empty codebook.")
    if embeddings.shape[-1] != centroids.shape[-1]:
        raise GeometryError(f"Embedding dim {embeddings.shape[-1]} != codebook dim {centroids.shape[-1]}")

    flat = embeddings.reshape(-1, embeddings.shape[-1])
    distances = ((flat.detach().unsqueeze(1) - centroids.detach().unsqueeze(0)) ** 2).sum(-1)
    tokens = torch.argmin(distances, dim=1)  # first minimum wins
    chosen = centroids[tokens]

    vq_loss = ((flat.detach() - chosen) ** 2).sum(-1).mean()
    commit_loss = ((flat - chosen.detach()) ** 2).sum(-1).mean()
    quantized = flat + (chosen - flat).detach()

    return QuantizeResult(tokens.reshape(embeddings.shape[:-1]),
                          quantized.reshape(embeddings.shape),
                          vq_loss, commit_loss)


@torch.no_grad()
def reseed_dead_centroids(codebook, embeddings, tokens, generator=None):
    """
    Moves every centroid that no frame in the batch was assigned to onto a
    randomly chosen encoder output from the batch. Returns the moved indices.
    """
    flat = embeddings.reshape(-1, embeddings.shape[-1])
    counts = torch.bincount(tokens.reshape(-1), minlength=codebook.size)
    dead = torch.nonzero(counts == 0).flatten()
    if len(dead) == 0 or len(flat) == 0:
        return []
    picks = torch.randint(0, len(flat), (len(dead),), generator=generator)
    codebook.centroids[dead] = flat[picks].to(codebook.centroids.dtype)
    return dead.tolist()


def context(context_net, quantized):
    squeeze = quantized.dim() == 2
    if squeeze:
        quantized = quantized.unsqueeze(0)
    out = context_net(quantized)
    return out[0] if squeeze else out


def sample_negatives_intra(seq_len, positive_index, n_neg=16, seed=0, generator=None):
    """
    Uniform draws with replacement from [0, seq_len) minus the positive index.
    positive_index may be an int or an index tensor; the result gains a
    trailing n_neg axis. An explicit generator takes precedence over seed.
    """
    if seq_len < 2:
        raise GeometryError("Intra-sequence negatives need a sequence of at least 2 frames.")
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed))
    positive = torch.as_tensor(positive_index, dtype=torch.long)
    draws = torch.randint(0, seq_len - 1, tuple(positive.shape) + (n_neg,), generator=generator)
    return draws + (draws >= positive.unsqueeze(-1)).long()


def infonce_loss(h_t, positives, negatives, heads):
    """
    h_t: (B, d_h); positives: (B, K, d_z); negatives: (B, K, N-1, d_z).
    Returns the batch mean of -sum_k log softmax(positive score).
    """
    if positives.shape[0] == 0 or positives.shape[1] == 0:
        raise GeometryError("InfoNCE needs a non-empty candidate set.")
    predicted = heads.predictions(h_t)                                   # (B, K, d_z)
    candidates = torch.cat([positives.unsqueeze(2), negatives], dim=2)   # (B, K, N, d_z)
    logits = torch.einsum('bknz,bkz->bkn', candidates, predicted)
    log_probs = F.log_softmax(logits, dim=-1)
    return -log_probs[..., 0].sum(dim=1).mean()


def gather_frames(sequence, index):
    """sequence (B, L, d), index (B, ...) -> (B, ..., d)."""
    batch = sequence.shape[0]
    flat = index.reshape(batch, -1)
    picked = torch.gather(sequence, 1, flat.unsqueeze(-1).expand(-1, -1, sequence.shape[-1]))
    return picked.reshape(tuple(index.shape) + (sequence.shape[-1],))


def draw_negatives(targets, steps, n_neg, generator, sampling='intra', sharing='per_step'):
    """
    Negative embeddings for every (batch, anchor t, step k).
    targets: (B, L, d). Returns (B, T, K, n_neg, d) with T = L - K.
    """
    batch, seq_len, dim = targets.shape
    anchors = seq_len - steps
    t = torch.arange(anchors).view(1, anchors, 1)
    k = torch.arange(1, steps + 1).view(1, 1, steps)
    positive_index = (t + k).expand(batch, anchors, steps)

    if sampling == 'dataset':
        # Uniform over every frame in the batch except the positive itself
        flat_targets = targets.reshape(1, batch * seq_len, dim)
        owner = torch.arange(batch).view(batch, 1, 1)
        flat_positive = owner * seq_len + positive_index
        idx = sample_negatives_intra(batch * seq_len, flat_positive, n_neg, generator=generator)
        return gather_frames(flat_targets, idx.reshape(1, -1)).reshape(batch, anchors, steps, n_neg, dim)

    if sharing == 'shared':
        # One set per anchor, avoiding all K future frames, reused for every step
        draws = torch.randint(0, seq_len - steps, (batch, anchors, n_neg), generator=generator)
        first = (t[..., 0] + 1).unsqueeze(-1)
        idx = draws + (draws >= first).long() * steps
        negatives = gather_frames(targets, idx)
        return negatives.unsqueeze(2).expand(batch, anchors, steps, n_neg, dim)

    idx = sample_negatives_intra(seq_len, positive_index, n_neg, generator=generator)
    return gather_frames(targets, idx)


def vqcpc_step_loss(model, cqt_batch, config, generator=None):
    """
    Total = InfoNCE + VQ + beta * commitment. Context and contrastive targets
    both use the quantized embeddings.
    """
    steps = model.heads.steps
    if cqt_batch.shape[-1] <= steps + 1:
        raise GeometryError(f"Sequences of {cqt_batch.shape[-1]} frames are too short for {steps}-step prediction.")

    embeddings, result, ctx = model(cqt_batch)
    targets = result.quantized
    batch, seq_len, dim = targets.shape
    anchors = seq_len - steps

    t = torch.arange(anchors).view(anchors, 1)
    k = torch.arange(1, steps + 1).view(1, steps)
    positives = targets[:, (t + k)]                                          # (B, T, K, d)
    negatives = draw_negatives(targets, steps, config.n_negatives, generator,
                               config.negative_sampling, config.negative_sharing)

    h = ctx[:, :anchors].reshape(batch * anchors, -1)
    infonce = infonce_loss(h, positives.reshape(batch * anchors, steps, dim),
                           negatives.reshape(batch * anchors, steps, config.n_negatives, dim),
                           model.heads)

    total = infonce + result.vq_loss + config.commitment_beta * result.commit_loss
    parts = {'infonce': infonce, 'vq': result.vq_loss, 'commit': result.commit_loss}
    return total, parts


def codebook_perplexity(token_sequences, codebook_size=None):
    """exp(entropy) of the token histogram, in [1, C]."""
    tokens = np.concatenate([np.asarray(getattr(s, 'tokens', s)).ravel() for s in token_sequences])
    if tokens.size == 0:
        raise GeometryError("Perplexity needs at least one token.")
    counts = np.bincount(tokens.astype(np.int64), minlength=codebook_size or 0)
    probs = counts[counts > 0] / tokens.size
    return float(np.exp(-np.sum(probs * np.log(probs))))
