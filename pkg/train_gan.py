import logging
import os
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from checkpoints import checkpoint_load, checkpoint_save, latest_checkpoint
from config import RunConfig, RunLayout, load_config
from errors import CheckpointError, ConfigError, TrainingDiverged
from gan_models import (GanLossReport, LossWeights, assemble_input, build_models, critic_loss, critic_outputs,
                        generator_loss, gradient_penalty, make_report)
from loaders import PyramidDataset, step_generator, step_loader
from logger_config import append_tsv_row, setup_logger, truncate_tsv_log
from manifest import LabelSpace, read_manifest
from plots import plot_loss_curves
from prepare_data import read_label_space

# CONFIG
CHECKPOINT_PREFIX = 'gan'
LOG_COLUMNS = ['step', 'scale', 'alpha'] + GanLossReport.columns()


@dataclass
class ScalePhase:
    scale_index: int
    iterations: int
    batch_size: int
    fade_iterations: int

    def alpha(self, step_in_phase):
        if self.scale_index == 1 or self.fade_iterations == 0:
            return 1.0
        return min(1.0, step_in_phase / self.fade_iterations)


def progressive_schedule(config):
    if len(config.batch_ladder) != config.n_scales:
        raise ConfigError(f"batch_ladder has {len(config.batch_ladder)} entries for {config.n_scales} scales.")
    iterations = config.iterations_per_scale // config.iteration_divisor
    fade = int(iterations * config.fade_fraction)
    return [ScalePhase(s + 1, iterations, config.batch_ladder[s], fade) for s in range(config.n_scales)]


def locate_step(schedule, global_step):
    """(phase index, step within phase) for a global step; past the end maps to the last phase."""
    start = 0
    for i, phase in enumerate(schedule):
        if global_step < start + phase.iterations:
            return i, global_step - start
        start += phase.iterations
    return len(schedule) - 1, schedule[-1].iterations


# ==========================================
# CHECKPOINTS
# ==========================================

def gan_state(models, optimizers, config, labels, schedule, global_step):
    generator, local_critic, global_critic = models
    phase_idx, in_phase = locate_step(schedule, global_step)
    phase = schedule[phase_idx]
    return {
        'kind': 'gan',
        'config': config.to_dict(),
        'fingerprint': config.fingerprint(),
        'labels': labels.to_dict(),
        'generator': generator.state_dict(),
        'local_critic': local_critic.state_dict(),
        'global_critic': global_critic.state_dict(),
        'opt_g': optimizers[0].state_dict(),
        'opt_d': optimizers[1].state_dict(),
        'cursor': {'global_step': global_step, 'phase': phase_idx, 'step_in_phase': in_phase,
                   'scale_index': phase.scale_index, 'alpha': phase.alpha(in_phase),
                   'schedule': [asdict(p) for p in schedule]},
    }


def load_generator(path):
    """Returns (generator, config, labels, cursor) from a GAN checkpoint."""
    state = checkpoint_load(path, expected_kind='gan')
    config = RunConfig(**state['config'])
    labels = LabelSpace.from_dict(state['labels'])
    generator, _, _ = build_models(config, labels.n_pitches)
    generator.load_state_dict(state['generator'])
    generator.eval()
    return generator, config, labels, state['cursor']


# ==========================================
# ONE ITERATION
# ==========================================

def gan_iteration(models, optimizers, batch, phase, alpha, config, n_pitches, rng):
    """One critic update (repeated d_steps times) followed by one generator update."""
    generator, local_critic, global_critic = models
    opt_g, opt_d = optimizers
    weights = LossWeights.from_config(config)
    real, pitch, tokens = batch
    scale = phase.scale_index
    onehot = F.one_hot(pitch, n_pitches).float()

    def noise():
        return torch.randn(real.shape[0], config.latent_dim, generator=rng)

    for _ in range(config.d_steps):
        cond = assemble_input(noise(), onehot, tokens, config.codebook_size)
        with torch.no_grad():
            fake = generator(cond, scale, alpha)
        real_out = critic_outputs(local_critic, global_critic, real, scale, alpha)
        fake_out = critic_outputs(local_critic, global_critic, fake, scale, alpha)
        gp_local = gradient_penalty(lambda x: local_critic(x, scale, alpha)[0], real, fake, rng, per_frame=True)
        gp_global = gradient_penalty(lambda x: global_critic(x, scale, alpha)[0], real, fake, rng)
        d_total, parts = critic_loss(real_out, fake_out, pitch, tokens, tokens, gp_local, gp_global, weights)
        if not torch.isfinite(d_total):
            return make_report(parts, float('nan'), d_total)
        opt_d.zero_grad()
        d_total.backward()
        opt_d.step()

    cond = assemble_input(noise(), onehot, tokens, config.codebook_size)
    fake_out = critic_outputs(local_critic, global_critic, generator(cond, scale, alpha), scale, alpha)
    g_total = generator_loss(fake_out, pitch, tokens, weights)
    report = make_report(parts, g_total, d_total)
    if report.is_finite():
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()
    return report


# ==========================================
# TRAINING
# ==========================================

def train_gan(layout, config, resume=True):
    labels = read_label_space(layout.labels)
    manifest = read_manifest(layout.manifest('train'))
    schedule = progressive_schedule(config)
    total_steps = sum(p.iterations for p in schedule)

    torch.manual_seed(config.seed)
    models = build_models(config, labels.n_pitches)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(models[0].parameters(), lr=config.gan_learning_rate, betas=betas)
    opt_d = torch.optim.Adam(list(models[1].parameters()) + list(models[2].parameters()),
                             lr=config.gan_learning_rate, betas=betas)
    optimizers = (opt_g, opt_d)

    global_step = 0
    ckpt_path = latest_checkpoint(layout.checkpoints, CHECKPOINT_PREFIX) if resume else None
    if ckpt_path:
        state = checkpoint_load(ckpt_path, expected_kind='gan')
        if state['fingerprint'] != config.fingerprint():
            raise CheckpointError(f"{ckpt_path} was written with a different config; use --force to restart.")
        if state['labels'] != labels.to_dict():
            raise CheckpointError(f"{ckpt_path} was trained on a different label space.")
        for model, key in zip(models, ('generator', 'local_critic', 'global_critic')):
            model.load_state_dict(state[key])
        opt_g.load_state_dict(state['opt_g'])
        opt_d.load_state_dict(state['opt_d'])
        global_step = state['cursor']['global_step']
        truncate_tsv_log(layout.train_log, global_step)
        logging.info(f"Resuming GAN training at step {global_step}/{total_steps}.")

    phase_start = 0
    for phase_idx, phase in enumerate(schedule):
        phase_end = phase_start + phase.iterations
        if global_step >= phase_end:
            phase_start = phase_end
            continue

        logging.info(f"--- Scale {phase.scale_index}/{len(schedule)}: {config.scale_freq(phase.scale_index)} bins, "
                     f"batch {phase.batch_size}, steps {global_step - phase_start}..{phase.iterations} ---")
        dataset = PyramidDataset(layout, manifest, labels, phase.scale_index)
        loader = step_loader(dataset, phase.batch_size, config.seed, global_step, phase_end, config.loader_workers)

        for batch in loader:
            alpha = phase.alpha(global_step - phase_start)
            rng = step_generator(config.seed, global_step, stream=2)
            report = gan_iteration(models, optimizers, batch, phase, alpha, config, labels.n_pitches, rng)
            if not report.is_finite():
                raise TrainingDiverged(global_step + 1, report.as_row())
            global_step += 1

            append_tsv_row(layout.train_log, dict(step=global_step, scale=phase.scale_index, alpha=alpha,
                                                  **report.as_row()), LOG_COLUMNS)
            if global_step % config.checkpoint_every == 0:
                checkpoint_save(gan_state(models, optimizers, config, labels, schedule, global_step),
                                layout.checkpoint(CHECKPOINT_PREFIX, global_step))
            if global_step % 50 == 0:
                logging.info(f"[{global_step}/{total_steps}] d={report.d_total:.3f} g={report.g_total:.3f} "
                             f"alpha={alpha:.2f}")
        phase_start = phase_end

    final_path = layout.checkpoint(CHECKPOINT_PREFIX, global_step)
    checkpoint_save(gan_state(models, optimizers, config, labels, schedule, global_step), final_path)
    logging.info(f"GAN checkpoint written to {final_path}")

    if os.path.exists(layout.train_log):
        plot_loss_curves(layout.train_log, os.path.join(layout.reports, 'gan_losses.png'),
                         ['d_total', 'g_total', 'w_local', 'w_global', 'ce_token', 'ce_pitch'])
    return final_path


if __name__ == "__main__":
    setup_logger()
    logging.info("--- Starting GAN Training ---")
    train_gan(RunLayout('runs/default'), load_config())
    logging.info("--- GAN Training Finished ---")
