import numpy as np
import pytest
import torch

from containers import read_token_sequence
from errors import DatasetError
from manifest import read_manifest
from synthesis import constant_tokens, interpolate_latents, latent, render_batch, synthesize_specs
from train_gan import load_generator


@pytest.fixture
def generator_bundle(trained_run):
    layout, _, final = trained_run
    generator, config, labels, cursor = load_generator(final)
    seq = read_token_sequence(layout.token_path(read_manifest(layout.manifest('test')).source_ids[0]))
    return generator, config, labels, seq


def _render_one(generator, config, labels, pitch, seq, z, duration):
    clips = render_batch(generator, config, labels, [pitch], [seq], [z], duration)
    assert len(clips) == 1
    return clips[0]


def test_latent_is_seeded():
    assert torch.equal(latent(3, 8), latent(3, 8))
    assert not torch.equal(latent(3, 8), latent(4, 8))


def test_interpolation_endpoints():
    a, b = latent(0, 4), latent(1, 4)
    path = interpolate_latents(a, b, 5)
    assert len(path) == 5
    assert torch.equal(path[0], a)
    assert torch.allclose(path[-1], b)
    assert torch.allclose(path[2], (a + b) / 2)
    assert len(interpolate_latents(a, b, 1)) == 1


def test_constant_tokens():
    tokens = constant_tokens(2, 10, 4)
    assert tokens.dtype == np.uint8
    assert tokens.tolist() == [2] * 10
    with pytest.raises(ValueError):
        constant_tokens(4, 10, 4)
    with pytest.raises(ValueError):
        constant_tokens(-1, 10, 4)


@pytest.mark.parametrize('duration', [0.064, 0.128, 0.256])
def test_render_length_follows_duration(generator_bundle, duration):
    generator, config, labels, seq = generator_bundle
    clip = _render_one(generator, config, labels, labels.pitches[0], seq, latent(0, config.latent_dim), duration)
    assert len(clip.samples) == int(round(duration * config.sample_rate))
    assert clip.rate == config.sample_rate
    assert clip.pitch == labels.pitches[0]
    assert np.all(np.isfinite(clip.samples))


def test_render_is_deterministic(generator_bundle):
    generator, config, labels, seq = generator_bundle
    z = latent(5, config.latent_dim)
    first = _render_one(generator, config, labels, labels.pitches[-1], seq, z, 0.128)
    second = _render_one(generator, config, labels, labels.pitches[-1], seq, z, 0.128)
    np.testing.assert_array_equal(first.samples, second.samples)


def test_batch_matches_single_renders(generator_bundle):
    generator, config, labels, seq = generator_bundle
    pitches = [labels.pitches[0], labels.pitches[-1]]
    latents = [latent(i, config.latent_dim) for i in range(2)]
    batch = render_batch(generator, config, labels, pitches, [seq, seq], latents, 0.128)
    for clip, pitch, z in zip(batch, pitches, latents):
        single = _render_one(generator, config, labels, pitch, seq, z, 0.128)
        np.testing.assert_allclose(clip.samples, single.samples, atol=1e-5)


def test_lower_scales_are_repeated_along_frequency(generator_bundle):
    generator, config, labels, seq = generator_bundle
    spec = synthesize_specs(generator, config, labels, [labels.pitches[0]], [seq.tokens],
                            [latent(0, config.latent_dim)], scale=2)
    assert spec.shape == (1, 2, config.freq_bins, len(seq))
    repeat = config.freq_bins // config.scale_freq(2)
    np.testing.assert_array_equal(spec[0, :, 0], spec[0, :, repeat - 1])


def test_unknown_pitch(generator_bundle):
    generator, config, labels, seq = generator_bundle
    with pytest.raises(DatasetError):
        _render_one(generator, config, labels, 20, seq, latent(0, config.latent_dim), 0.128)
