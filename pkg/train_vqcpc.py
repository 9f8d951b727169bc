import logging
import math
import os

import numpy as np
import torch
from sklearn.cluster import KMeans

from checkpoints import checkpoint_load, checkpoint_save, latest_checkpoint
from config import RunConfig, RunLayout, load_config
from containers import TokenSequence, load_tensor, write_tokens
from errors import CheckpointError, DatasetError, GeometryError, TrainingDiverged
from loaders import CqtDataset, step_generator, step_loader
from logger_config import append_tsv_row, setup_logger, truncate_tsv_log
from manifest import read_manifest
from plots import plot_loss_curves
from spectral import cqt
from vqcpc import VQCPC, codebook_perplexity, quantize, reseed_dead_centroids, vqcpc_step_loss

# CONFIG
CHECKPOINT_PREFIX = 'vqcpc'
LOG_COLUMNS = ['step', 'total', 'infonce', 'vq', 'commit']


# ==========================================
# 1. CODEBOOK WARM START
# ==========================================

def kmeans_init_codebook(model, dataset, config):
    """Sets the centroids to k-means centres of encoder outputs from a few warm-up batches."""
    vectors = []
    with torch.no_grad():
        for batch in step_loader(dataset, config.vq_batch_size, config.seed + 1, 0,
                                 config.kmeans_warmup_batches):
            vectors.append(model.encoder(batch).reshape(-1, config.embed_dim).numpy())
    if not vectors:
        return

    # Silent or repeated frames give identical vectors; k-means needs distinct points
    points = np.unique(np.concatenate(vectors).astype(np.float64), axis=0)
    if len(points) < config.codebook_size:
        logging.warning(f"Only {len(points)} distinct warm-up embeddings for {config.codebook_size} "
                        f"centroids; keeping random initialization.")
        return

    kmeans = KMeans(n_clusters=config.codebook_size, n_init=10, random_state=config.seed).fit(points)
    with torch.no_grad():
        model.codebook.centroids.copy_(torch.from_numpy(kmeans.cluster_centers_).float())
    logging.info(f"Codebook initialized by k-means over {len(points)} embeddings.")


def warmup_lr(config, step):
    if config.vq_warmup_steps == 0:
        return config.vq_learning_rate
    return config.vq_learning_rate * min(1.0, (step + 1) / config.vq_warmup_steps)


def reseed_codebook(model, batch, config, step):
    """Re-places centroids the current batch never selects."""
    with torch.no_grad():
        embeddings = model.encoder(batch)
        tokens = quantize(embeddings, model.codebook.centroids).tokens
    moved = reseed_dead_centroids(model.codebook, embeddings, tokens, step_generator(config.seed, step, stream=3))
    if moved:
        logging.debug(f"Step {step}: reseeded centroids {moved}")
    return moved


# ==========================================
# 2. CHECKPOINT HELPERS
# ==========================================

def vqcpc_state(model, optimizer, config, step):
    return {
        'kind': 'vqcpc',
        'config': config.to_dict(),
        'fingerprint': config.fingerprint(),
        'model': model.state_dict(),
        'optimizer': optimizer.state_dict(),
        'cursor': {'step': step},
    }


def load_vqcpc(path):
    """Rebuilds an encoder from its checkpoint; returns (model, config)."""
    state = checkpoint_load(path, expected_kind='vqcpc')
    config = RunConfig(**state['config'])
    model = VQCPC(config)
    model.load_state_dict(state['model'])
    model.eval()
    return model, config


# ==========================================
# 3. TRAINING
# ==========================================

def train_vqcpc(layout, config, resume=True):
    manifest = read_manifest(layout.manifest('train'))
    if len(manifest) == 0:
        raise DatasetError("The train manifest is empty.")
    dataset = CqtDataset(layout, manifest)

    torch.manual_seed(config.seed)
    model = VQCPC(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.vq_learning_rate)

    start_step = 0
    ckpt_path = latest_checkpoint(layout.checkpoints, CHECKPOINT_PREFIX) if resume else None
    if ckpt_path:
        state = checkpoint_load(ckpt_path, expected_kind='vqcpc')
        if state['fingerprint'] != config.fingerprint():
            raise CheckpointError(f"{ckpt_path} was written with a different config; use --force to restart.")
        model.load_state_dict(state['model'])
        optimizer.load_state_dict(state['optimizer'])
        start_step = state['cursor']['step']
        truncate_tsv_log(layout.vq_log, start_step)
        logging.info(f"Resuming encoder training from step {start_step}.")
    else:
        kmeans_init_codebook(model, dataset, config)

    model.train()
    step = start_step
    for batch in step_loader(dataset, config.vq_batch_size, config.seed, start_step, config.vq_steps,
                             config.loader_workers):
        negatives_rng = step_generator(config.seed, step, stream=1)
        total, parts = vqcpc_step_loss(model, batch, config, negatives_rng)

        values = {k: float(v.detach()) for k, v in parts.items()}
        values['total'] = float(total.detach())
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(step + 1, values)

        for group in optimizer.param_groups:
            group['lr'] = warmup_lr(config, step)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        step += 1
        if config.vq_reseed_every and step % config.vq_reseed_every == 0:
            reseed_codebook(model, batch, config, step)

        append_tsv_row(layout.vq_log, dict(step=step, **values), LOG_COLUMNS)
        if step % config.vq_checkpoint_every == 0:
            checkpoint_save(vqcpc_state(model, optimizer, config, step), layout.checkpoint(CHECKPOINT_PREFIX, step))
        if step % 100 == 0:
            logging.info(f"[{step}/{config.vq_steps}] total={values['total']:.4f} "
                         f"infonce={values['infonce']:.4f} vq={values['vq']:.4f}")

    final_path = layout.checkpoint(CHECKPOINT_PREFIX, step)
    checkpoint_save(vqcpc_state(model, optimizer, config, step), final_path)
    logging.info(f"Encoder checkpoint written to {final_path}")

    if os.path.exists(layout.vq_log):
        plot_loss_curves(layout.vq_log, os.path.join(layout.reports, 'vqcpc_losses.png'), LOG_COLUMNS[1:])
    return final_path


# ==========================================
# 4. TOKEN EXTRACTION
# ==========================================

def tokens_for_grid(model, grid):
    """(bins, L) CQT magnitudes -> uint8 token array of length L."""
    batch = torch.from_numpy(np.asarray(grid, dtype=np.float32)).unsqueeze(0)
    return model.tokens(batch)[0].numpy().astype(np.uint8)


def tokens_for_clip(model, config, clip):
    grid = cqt(clip, config.cqt_octaves, config.cqt_bins_per_octave, config.hop, config.cqt_fmin)
    return TokenSequence(tokens_for_grid(model, grid.values), clip.source_id, clip.pitch)


def extract_tokens(ckpt_path, manifest, layout):
    """Writes one token file per manifest entry and returns the sequences."""
    model, config = load_vqcpc(ckpt_path)
    sequences = []
    for i, entry in enumerate(manifest):
        grid = load_tensor(layout.cqt_path(entry.source_id))[0]
        if grid.shape[0] != config.cqt_bins:
            raise GeometryError(f"'{entry.source_id}' has {grid.shape[0]} CQT bins, encoder expects {config.cqt_bins}.")
        seq = TokenSequence(tokens_for_grid(model, grid), entry.source_id, int(entry.pitch))
        write_tokens(seq, layout.token_path(entry.source_id))
        sequences.append(seq)
        if (i + 1) % 500 == 0:
            logging.info(f"[{i + 1}/{len(manifest)}] clips encoded")

    if sequences:
        logging.info(f"Extracted tokens for {len(sequences)} clips; codebook perplexity "
                     f"{codebook_perplexity(sequences, config.codebook_size):.2f}/{config.codebook_size}.")
    return sequences


if __name__ == "__main__":
    setup_logger()
    logging.info("--- Starting Encoder Training ---")
    run_layout = RunLayout('runs/default')
    train_vqcpc(run_layout, load_config())
    logging.info("--- Encoder Training Finished ---")
