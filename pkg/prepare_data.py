import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial

from catalog import get_existing_clips, init_db, register_clips
from config import RunLayout, get_database_url, load_config
from containers import atomic_path, save_tensor
from errors import AudioFormatError, GeometryError, SynthError
from logger_config import setup_logger
from manifest import (LabelSpace, filter_dataset, make_manifest, scan_nsynth, split_dataset,
                      write_manifest)
from spectral import cqt, downscale_freq, load_clip, stft_magif

# CONFIG
SKIPPABLE_ERRORS = (AudioFormatError, GeometryError)


def _features_present(layout, config, source_id):
    paths = [layout.cqt_path(source_id)]
    paths += [layout.stft_path(s, source_id) for s in range(1, config.n_scales + 1)]
    return all(os.path.exists(p) for p in paths)


def process_clip(row, layout, config):
    """
    Computes the CQT grid and the full frequency pyramid of STFT features for
    one manifest row. Returns (source_id, error message or None).
    """
    source_id, path, pitch, family = row
    try:
        clip = load_clip(path, config.sample_rate, config.clip_seconds, config.resample,
                         pitch, family, source_id)
        spec = stft_magif(clip, config.fft_size, config.overlap, config.mag_floor_db)
        if spec.frames != config.frames or spec.freq_bins != config.freq_bins:
            raise GeometryError(f"{source_id}: got {spec.freq_bins}x{spec.frames}, "
                                f"expected {config.freq_bins}x{config.frames}")

        grid = cqt(clip, config.cqt_octaves, config.cqt_bins_per_octave, config.hop,
                   config.cqt_fmin, frames=spec.frames)
        save_tensor(grid.values, layout.cqt_path(source_id))

        for scale in range(1, config.n_scales + 1):
            factor = config.freq_bins // config.scale_freq(scale)
            save_tensor(downscale_freq(spec, factor).values, layout.stft_path(scale, source_id))
        return source_id, None
    except SKIPPABLE_ERRORS as e:
        return source_id, str(e)


def write_label_space(labels, path):
    with atomic_path(path) as tmp_path:
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(labels.to_dict(), f, indent=1)


def read_label_space(path):
    if not os.path.exists(path):
        raise SynthError(f"Label space not found at {path}; run 'prepare' first.")
    with open(path, encoding='utf-8') as f:
        return LabelSpace.from_dict(json.load(f))


def prepare_dataset(layout, audio_dir, config, force=False):
    """
    Ingests an NSynth-format directory into the run: manifests, label space,
    CQT features and the STFT pyramid. Clips already catalogued with features
    on disk are skipped unless `force` is set, so re-runs are incremental.
    """
    layout.ensure()
    engine = init_db(get_database_url(layout.root))

    scanned = scan_nsynth(audio_dir)
    filtered = filter_dataset(scanned, config.pitch_min, config.pitch_max)

    done_ids = set() if force else get_existing_clips(engine)
    rows = [(e.source_id, e.path, int(e.pitch), e.family) for e in filtered]
    missing = [r for r in rows if force or r[0] not in done_ids or not _features_present(layout, config, r[0])]

    if not missing:
        logging.info("All clips already have features. Nothing to compute.")
    else:
        logging.info(f"Computing features for {len(missing)}/{len(rows)} clips...")

    worker = partial(process_clip, layout=layout, config=config)
    if config.prepare_workers > 0 and len(missing) > 1:
        with ProcessPoolExecutor(max_workers=config.prepare_workers) as pool:
            results = list(pool.map(worker, missing))
    else:
        results = []
        for i, row in enumerate(missing):
            results.append(worker(row))
            if (i + 1) % 100 == 0:
                logging.info(f"[{i + 1}/{len(missing)}] clips processed")

    failed = {source_id for source_id, err in results if err}
    for source_id, err in results:
        if err:
            logging.warning(f"Skipping clip {source_id}: {err}")
    usable = make_manifest([r for r in rows if r[0] not in failed])
    if len(usable) == 0:
        raise SynthError("No usable clips after feature extraction.")

    train, test = split_dataset(usable, config.train_fraction, config.seed)
    write_manifest(usable, layout.manifest('all'))
    write_manifest(train, layout.manifest('train'))
    write_manifest(test, layout.manifest('test'))

    labels = LabelSpace.from_manifest(usable, config.pitch_min, config.n_pitches)
    write_label_space(labels, layout.labels)

    register_clips(engine, train, 'train')
    register_clips(engine, test, 'test')
    logging.info(f"Prepared {len(train)} train / {len(test)} test clips, "
                 f"{labels.n_pitches} pitch classes, {labels.n_families} families.")
    return train, test, labels


if __name__ == "__main__":
    setup_logger()
    logging.info("--- Starting Dataset Preparation ---")
    prepare_dataset(RunLayout('runs/default'), 'data/synthetic', load_config())
    logging.info("--- Dataset Preparation Finished ---")
