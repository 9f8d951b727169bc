import os

import numpy as np
import pytest
import soundfile as sf

from config import RunLayout
from conftest import make_tiny_config
from containers import load_tensor
from errors import DatasetError, SynthError
from manifest import read_manifest
from prepare_data import prepare_dataset, read_label_space
from spectral import SpectroTensor, downscale_freq
from synth_data import make_synthetic_corpus


def test_prepared_run_layout(prepared_run):
    layout, config = prepared_run
    all_ids = set(read_manifest(layout.manifest('all')).source_ids)
    train_ids = set(read_manifest(layout.manifest('train')).source_ids)
    test_ids = set(read_manifest(layout.manifest('test')).source_ids)
    assert len(all_ids) == 16
    assert train_ids | test_ids == all_ids
    assert not train_ids & test_ids
    assert (len(train_ids), len(test_ids)) == (12, 4)

    labels = read_label_space(layout.labels)
    assert labels.families == ['mallet', 'organ', 'string']
    assert all(config.pitch_min <= p <= config.pitch_max for p in labels.pitches)


def test_feature_geometry(prepared_run):
    layout, config = prepared_run
    source_id = read_manifest(layout.manifest('all')).source_ids[0]
    assert load_tensor(layout.cqt_path(source_id)).shape == (1, config.cqt_bins, config.frames)
    for scale in range(1, config.n_scales + 1):
        spec = load_tensor(layout.stft_path(scale, source_id))
        assert spec.shape == (2, config.scale_freq(scale), config.frames)


def test_pyramid_levels_are_consistent(prepared_run):
    layout, config = prepared_run
    source_id = read_manifest(layout.manifest('all')).source_ids[0]
    top = SpectroTensor(load_tensor(layout.stft_path(config.n_scales, source_id)))
    base = load_tensor(layout.stft_path(1, source_id))
    np.testing.assert_allclose(downscale_freq(top, config.freq_bins // config.base_freq).values, base, atol=1e-6)


def test_rerun_is_incremental(run_copy):
    layout, config = run_copy
    corpus = os.path.join(layout.root, 'data', 'synthetic')
    feature = layout.cqt_path(read_manifest(layout.manifest('all')).source_ids[0])
    os.utime(feature, (1_000_000, 1_000_000))

    prepare_dataset(layout, corpus, config)
    assert os.path.getmtime(feature) == 1_000_000

    prepare_dataset(layout, corpus, config, force=True)
    assert os.path.getmtime(feature) != 1_000_000


def test_missing_feature_is_recomputed(run_copy):
    layout, config = run_copy
    source_id = read_manifest(layout.manifest('all')).source_ids[3]
    os.remove(layout.stft_path(2, source_id))
    prepare_dataset(layout, os.path.join(layout.root, 'data', 'synthetic'), config)
    assert os.path.exists(layout.stft_path(2, source_id))


def test_bad_clips_are_skipped(tmp_path):
    config = make_tiny_config()
    corpus = str(tmp_path / 'corpus')
    index = make_synthetic_corpus(corpus, 6, seed=2, pitch_min=60, pitch_max=62, duration=config.clip_seconds)
    broken = sorted(index)[0]
    sf.write(os.path.join(corpus, 'audio', f"{broken}.wav"), np.zeros((2048, 2), dtype=np.float32), 16000)

    train, test, labels = prepare_dataset(RunLayout(str(tmp_path / 'run')), corpus, config)
    kept = set(train.source_ids) | set(test.source_ids)
    assert broken not in kept
    assert len(kept) == 5


def test_pitch_filter_can_empty_the_corpus(tmp_path):
    config = make_tiny_config(pitch_min=90, pitch_max=100)
    corpus = str(tmp_path / 'corpus')
    make_synthetic_corpus(corpus, 3, seed=0, pitch_min=60, pitch_max=62, duration=config.clip_seconds)
    with pytest.raises(DatasetError):
        prepare_dataset(RunLayout(str(tmp_path / 'run')), corpus, config)


def test_label_space_required(tmp_path):
    with pytest.raises(SynthError):
        read_label_space(str(tmp_path / 'labels.json'))
