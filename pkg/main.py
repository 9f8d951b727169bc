import argparse
import glob
import logging
import os
import sys

from catalog import init_db, metric_history, record_metrics
from checkpoints import latest_checkpoint
from config import RunLayout, default_run_dir, get_database_url, load_config, parse_set_overrides
from containers import atomic_path, read_token_sequence
from errors import ConfigError, OutputExistsError, SynthError
from logger_config import setup_logger
from manifest import read_manifest
from metrics import evaluate, reference_report, train_inception
from plots import plot_token_usage
from prepare_data import prepare_dataset, read_label_space
from spectral import load_clip, write_clip
from synth_data import make_synthetic_corpus
from synthesis import constant_tokens, interpolate_latents, latent, render_batch
from train_gan import load_generator, train_gan
from train_gan import CHECKPOINT_PREFIX as GAN_PREFIX
from train_vqcpc import extract_tokens, load_vqcpc, tokens_for_clip, train_vqcpc
from train_vqcpc import CHECKPOINT_PREFIX as VQ_PREFIX

# CONFIG
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
HISTORY_COLUMNS = ['row_id', 'label', 'duration', 'n_samples', 'pis', 'iis', 'kid', 'fad', 'checkpoint']
SUBCOMMANDS = ('prepare', 'train-vqcpc', 'encode', 'train-gan', 'generate', 'evaluate', 'dump-config')


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit code."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = CliParser(add_help=False)
    common.add_argument('--config', help="key=value config file")
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help="override one config key")
    common.add_argument('--run-dir', default=None, help="run directory (default: $SYNTH_RUN_DIR or runs/default)")
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--force', action='store_true', help="overwrite outputs / restart training")

    parser = CliParser(prog='synth', description="Token-conditioned variable-length note synthesis.")
    sub = parser.add_subparsers(dest='command', parser_class=CliParser)

    p = sub.add_parser('prepare', parents=[common], help="ingest audio into manifests and features")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--audio-dir', help="NSynth-format directory (examples.json + audio/)")
    source.add_argument('--synthetic', type=int, metavar='N', help="render N synthetic notes first")

    sub.add_parser('train-vqcpc', parents=[common], help="train the token encoder")

    p = sub.add_parser('encode', parents=[common], help="extract token files for every clip")
    p.add_argument('--checkpoint', help="encoder checkpoint (default: latest)")

    sub.add_parser('train-gan', parents=[common], help="progressive GAN training")

    p = sub.add_parser('generate', parents=[common], help="render audio from pitch, tokens and noise")
    p.add_argument('--pitch', type=int, nargs='+', required=True)
    p.add_argument('--duration', type=float, default=1.0, help="seconds")
    tokens = p.add_mutually_exclusive_group(required=True)
    tokens.add_argument('--tokens', help="token file")
    tokens.add_argument('--reference-clip', help="wave file to encode into tokens")
    tokens.add_argument('--constant-token', type=int)
    p.add_argument('--z-seed', type=int, default=None)
    p.add_argument('--z-to', type=int, default=None, help="second noise seed for interpolation")
    p.add_argument('--steps', type=int, default=5, help="interpolation points with --z-to")
    p.add_argument('--checkpoint', help="GAN checkpoint (default: latest)")
    p.add_argument('--encoder', help="encoder checkpoint for --reference-clip (default: latest)")
    p.add_argument('--out', help="output wave path (default: <run>/generated/...)")

    p = sub.add_parser('evaluate', parents=[common], help="PIS / IIS / KID / FAD report")
    p.add_argument('--checkpoint', help="GAN checkpoint (default: latest)")
    p.add_argument('--inception', help="classifier checkpoint (trained on first use)")
    p.add_argument('--n-samples', type=int, default=None)
    p.add_argument('--duration', type=float, default=None)
    p.add_argument('--reference', action='store_true', help="score real train vs real test instead")
    p.add_argument('--history', action='store_true', help="print earlier metric runs from the catalog and exit")

    sub.add_parser('dump-config', parents=[common], help="print the resolved config")
    return parser


# ==========================================
# HELPERS
# ==========================================

def resolve(args):
    layout = RunLayout(args.run_dir or default_run_dir())
    path = args.config
    if path is None and os.path.exists(layout.config_file):
        path = layout.config_file
    overrides = parse_set_overrides(args.set)
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    return layout, load_config(path, overrides)


def snapshot_config(layout, config, force):
    """Writes config.env once; a different config for an existing run needs --force."""
    text = config.dump()
    if os.path.exists(layout.config_file) and not force:
        with open(layout.config_file, encoding='utf-8') as f:
            if f.read() != text:
                raise OutputExistsError(f"{layout.config_file} exists with a different config; use --force.")
        return
    with atomic_path(layout.config_file) as tmp_path:
        with open(tmp_path, 'w', encoding='utf-8') as f:
            f.write(text)


def require_checkpoint(explicit, layout, prefix):
    path = explicit or latest_checkpoint(layout.checkpoints, prefix)
    if not path:
        raise SynthError(f"No '{prefix}' checkpoint in {layout.checkpoints}; train one first.")
    return path


def clear_training(layout, prefix, log_path):
    for path in glob.glob(os.path.join(layout.checkpoints, f"{prefix}_*.ckpt")):
        os.remove(path)
    if os.path.exists(log_path):
        os.remove(log_path)


# ==========================================
# SUBCOMMANDS
# ==========================================

def cmd_prepare(args, layout, config):
    snapshot_config(layout.ensure(), config, args.force)
    audio_dir = args.audio_dir
    if args.synthetic is not None:
        audio_dir = os.path.join(layout.root, 'data', 'synthetic')
        if not os.path.exists(os.path.join(audio_dir, 'examples.json')) or args.force:
            make_synthetic_corpus(audio_dir, args.synthetic, config.seed, config.pitch_min, config.pitch_max,
                                  config.sample_rate, config.clip_seconds)
    prepare_dataset(layout, audio_dir, config, args.force)


def cmd_train_vqcpc(args, layout, config):
    snapshot_config(layout.ensure(), config, args.force)
    if args.force:
        clear_training(layout, VQ_PREFIX, layout.vq_log)
    train_vqcpc(layout, config, resume=not args.force)


def cmd_encode(args, layout, config):
    ckpt = require_checkpoint(args.checkpoint, layout, VQ_PREFIX)
    sequences = extract_tokens(ckpt, read_manifest(layout.manifest('all')), layout)
    plot_token_usage(sequences, config.codebook_size, os.path.join(layout.reports, 'token_usage.png'))


def cmd_train_gan(args, layout, config):
    snapshot_config(layout.ensure(), config, args.force)
    if args.force:
        clear_training(layout, GAN_PREFIX, layout.train_log)
    train_gan(layout, config, resume=not args.force)


def load_generation_tokens(args, layout, config):
    if args.tokens:
        return read_token_sequence(args.tokens).tokens
    if args.reference_clip:
        model, enc_config = load_vqcpc(require_checkpoint(args.encoder, layout, VQ_PREFIX))
        clip = load_clip(args.reference_clip, enc_config.sample_rate, enc_config.clip_seconds, enc_config.resample)
        return tokens_for_clip(model, enc_config, clip).tokens
    return constant_tokens(args.constant_token, config.frames, config.codebook_size)


def output_paths(args, layout, count_pitch, count_z):
    if args.out and count_pitch * count_z == 1:
        return [[args.out]]
    stem = args.out[:-4] if args.out and args.out.endswith('.wav') else (
        args.out or os.path.join(layout.generated, f"gen_{args.duration:g}s"))
    return [[f"{stem}_p{p}_z{k}.wav" for k in range(count_z)] for p in args.pitch]


def cmd_generate(args, layout, config):
    generator, gen_config, labels, cursor = load_generator(require_checkpoint(args.checkpoint, layout, GAN_PREFIX))
    tokens = load_generation_tokens(args, layout, gen_config)

    z_seed = args.z_seed if args.z_seed is not None else gen_config.seed
    z_from = latent(z_seed, gen_config.latent_dim)
    latents = [z_from] if args.z_to is None else interpolate_latents(
        z_from, latent(args.z_to, gen_config.latent_dim), args.steps)

    paths = output_paths(args, layout, len(args.pitch), len(latents))
    flat_paths = [p for row in paths for p in row]
    existing = [p for p in flat_paths if os.path.exists(p)]
    if existing and not args.force:
        raise OutputExistsError(f"{existing[0]} exists; use --force to overwrite.")

    pitches = [p for p in args.pitch for _ in latents]
    clips = render_batch(generator, gen_config, labels, pitches, [tokens] * len(pitches), latents * len(args.pitch),
                         args.duration, cursor.get('scale_index'), cursor.get('alpha', 1.0))
    for clip, path in zip(clips, flat_paths):
        write_clip(clip, path)
        print(path)
    logging.info(f"Wrote {len(clips)} files ({len(tokens)} source tokens -> "
                 f"{gen_config.frames_for_duration(args.duration)} frames).")


def cmd_evaluate(args, layout, config):
    if args.history:
        history = metric_history(init_db(get_database_url(layout.root)))
        if history.empty:
            logging.info("No metric runs recorded yet.")
        else:
            print(history[HISTORY_COLUMNS].to_string(index=False))
        return

    train_manifest = read_manifest(layout.manifest('train'))
    test_manifest = read_manifest(layout.manifest('test'))
    inception_path = args.inception or os.path.join(layout.checkpoints, 'inception.ckpt')
    if not os.path.exists(inception_path):
        logging.info("No evaluation classifier yet; training one.")
        train_inception(layout, config, read_label_space(layout.labels), train_manifest, test_manifest,
                        inception_path)

    if args.reference:
        report = reference_report(layout, config, train_manifest, test_manifest, inception_path)
        checkpoint = 'real-data'
    else:
        checkpoint = require_checkpoint(args.checkpoint, layout, GAN_PREFIX)
        generator, gen_config, labels, cursor = load_generator(checkpoint)
        report = evaluate(generator, gen_config, labels, cursor, layout, test_manifest, inception_path,
                          args.n_samples or config.eval_samples, args.duration or config.eval_duration,
                          config.seed)

    metrics_path = os.path.join(layout.reports, 'metrics.tsv')
    os.makedirs(layout.reports, exist_ok=True)
    with open(metrics_path, 'a', encoding='utf-8') as f:
        if f.tell() == 0:
            f.write("\t".join(report.COLUMNS) + "\n")
        f.write(report.tsv_row() + "\n")
    record_metrics(init_db(get_database_url(layout.root)), report, checkpoint, report.label)

    print(report.tsv_row())
    print(report.summary())


def cmd_dump_config(args, layout, config):
    sys.stdout.write(config.dump())


HANDLERS = {
    'prepare': cmd_prepare,
    'train-vqcpc': cmd_train_vqcpc,
    'encode': cmd_encode,
    'train-gan': cmd_train_gan,
    'generate': cmd_generate,
    'evaluate': cmd_evaluate,
    'dump-config': cmd_dump_config,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        layout, config = resolve(args)
    except (UsageError, ConfigError) as e:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE

    if args.command != 'dump-config':
        os.makedirs(os.path.dirname(layout.run_log), exist_ok=True)
        setup_logger(layout.run_log)
        logging.info(f"--- Starting {args.command} (config {config.fingerprint()[:12]}) ---")

    try:
        HANDLERS[args.command](args, layout, config)
    except OutputExistsError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except ConfigError as e:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except SynthError as e:
        logging.error(f"{args.command} failed: {e}")
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE
    except Exception as e:
        logging.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE

    if args.command != 'dump-config':
        logging.info(f"--- {args.command} finished ---")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
