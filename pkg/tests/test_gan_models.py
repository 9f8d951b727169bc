import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from containers import TokenSequence
from errors import GeometryError
from gan_models import (CriticOutputs, GanLossReport, Generator, GlobalCritic, InputBlock, LocalCritic, LossWeights,
                        assemble_input, build_models, critic_loss, critic_outputs, d_global_forward, d_local_forward,
                        gan_losses, generator_forward, generator_loss, gradient_penalty, pixel_norm,
                        resample_tokens)

# Full 32 -> 1024 frequency ladder with narrow layers
NARROW = (8, 8, 8, 8, 8, 8)


def _cond(n_pitches, latent_dim, n_tokens, frames, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, latent_dim, generator=g)
    pitch = F.one_hot(torch.randint(0, n_pitches, (batch,), generator=g), n_pitches).float()
    tokens = torch.randint(0, n_tokens, (batch, frames), generator=g)
    return assemble_input(z, pitch, tokens, n_tokens)


# --- conditioning ---

def test_assemble_input_layout():
    z = torch.randn(128)
    pitch = F.one_hot(torch.tensor(4), 27).float()
    tokens = torch.arange(32) % 16
    grid = assemble_input(z, pitch, tokens, 16)
    assert grid.shape == (1, 171, 1, 32)

    static = grid[0, :27 + 128, 0, :]
    assert torch.equal(static, static[:, :1].expand(-1, 32))
    assert torch.equal(grid[0, 27 + 128:, 0, :], F.one_hot(tokens, 16).float().T)


def test_assemble_input_constant_tokens():
    grid = assemble_input(torch.randn(1, 4), F.one_hot(torch.tensor([0]), 3).float(), torch.full((1, 8), 2), 5)
    dynamic = grid[0, 7:, 0, :]
    assert torch.equal(dynamic, dynamic[:, :1].expand(-1, 8))


def test_assemble_input_rejects_bad_labels():
    with pytest.raises(ValueError):
        assemble_input(torch.randn(4), torch.tensor([1.0, 1.0, 0.0]), torch.zeros(8, dtype=torch.long), 5)
    with pytest.raises(ValueError):
        assemble_input(torch.randn(4), torch.tensor([0.5, 0.5, 0.0]), torch.zeros(8, dtype=torch.long), 5)
    with pytest.raises(ValueError):
        assemble_input(torch.randn(4), torch.tensor([1.0, 0.0, 0.0]), torch.full((8,), 5), 5)


def test_resample_tokens_index_map():
    tokens = np.arange(32, dtype=np.uint8)
    np.testing.assert_array_equal(resample_tokens(tokens, 128), np.repeat(tokens, 4))
    np.testing.assert_array_equal(resample_tokens(tokens, 32), tokens)
    np.testing.assert_array_equal(resample_tokens(tokens, 16), tokens[::2])


def test_resample_keeps_sequence_metadata():
    seq = resample_tokens(TokenSequence(np.array([1, 2], dtype=np.uint8), 'clip', 60), 4)
    assert isinstance(seq, TokenSequence)
    assert (seq.source_id, seq.pitch) == ('clip', 60)
    assert seq.tokens.tolist() == [1, 1, 2, 2]


def test_resample_rejects_degenerate_requests():
    with pytest.raises(GeometryError):
        resample_tokens(np.array([], dtype=np.uint8), 4)
    with pytest.raises(GeometryError):
        resample_tokens(np.array([1, 2]), 0)


def test_pixel_norm_contract():
    assert torch.equal(pixel_norm(torch.ones(2, 5, 3, 4)), torch.ones(2, 5, 3, 4))
    assert torch.equal(pixel_norm(torch.zeros(2, 5, 3, 4)), torch.zeros(2, 5, 3, 4))
    normed = pixel_norm(torch.randn(2, 16, 3, 4) * 7)
    assert torch.allclose(normed.pow(2).mean(dim=1), torch.ones(2, 3, 4), atol=1e-5)


# --- generator ---

@pytest.mark.parametrize('frames', [16, 32, 64, 128])
def test_generator_variable_length(frames):
    torch.manual_seed(0)
    generator = Generator(27, 16, 16, NARROW, base_freq=32)
    local = LocalCritic(16, NARROW, base_freq=32)
    with torch.no_grad():
        out = generator_forward(generator, _cond(27, 16, 16, frames))
        scores, logits = d_local_forward(local, out)
    assert out.shape == (1, 2, 1024, frames)
    assert scores.shape == (1, frames)
    assert logits.shape == (1, frames, 16)
    assert float(out.abs().max()) <= 1.0


def test_generator_scale_shapes():
    torch.manual_seed(0)
    generator = Generator(27, 16, 16, NARROW, base_freq=32)
    cond = _cond(27, 16, 16, 32)
    with torch.no_grad():
        assert generator(cond, scale=1).shape == (1, 2, 32, 32)
        assert generator(cond, scale=3).shape == (1, 2, 128, 32)
    assert generator.output_freq(6) == 1024
    with pytest.raises(GeometryError):
        generator(cond, scale=7)


def test_input_block_fills_the_base_grid():
    torch.manual_seed(3)
    block = InputBlock(6, 16, base_freq=8).double()
    cond = torch.zeros(1, 6, 1, 5, dtype=torch.float64, requires_grad=True)
    with torch.no_grad():
        cond[0, :, 0, 2] = torch.randn(6, dtype=torch.float64)
    out = block(cond)
    assert out.shape == (1, 16, 8, 5)
    # every frequency row of frame 2 sees the conditioning column
    for row in range(8):
        grad = torch.autograd.grad(out[0, :, row, 2].sum(), cond, retain_graph=True)[0]
        assert float(grad[0, :, 0, 2].abs().sum()) > 0.0, row
    with pytest.raises(GeometryError):
        block(torch.zeros(1, 6, 2, 5, dtype=torch.float64))


def test_generator_rejects_channel_mismatch():
    generator = Generator(27, 16, 16, NARROW, base_freq=32)
    with pytest.raises(GeometryError):
        generator(_cond(26, 16, 16, 32))


def test_generator_is_deterministic():
    torch.manual_seed(1)
    generator = Generator(5, 4, 4, (8, 8, 8), base_freq=8)
    cond = _cond(5, 4, 4, 12)
    with torch.no_grad():
        assert torch.equal(generator(cond), generator(cond))


def test_fade_in_at_zero_is_previous_scale_upsampled():
    torch.manual_seed(2)
    generator = Generator(5, 4, 4, (8, 8, 8), base_freq=8)
    cond = _cond(5, 4, 4, 10)
    with torch.no_grad():
        faded = generator(cond, scale=3, alpha=0.0)
        previous = generator(cond, scale=2)
        full = generator(cond, scale=3, alpha=1.0)
        half = generator(cond, scale=3, alpha=0.5)
    upsampled = F.interpolate(previous, scale_factor=(2, 1), mode='nearest')
    assert torch.allclose(faded, upsampled, atol=1e-6)
    assert torch.allclose(half, 0.5 * full + 0.5 * upsampled, atol=1e-6)


def test_generator_reacts_to_tokens():
    torch.manual_seed(3)
    generator = Generator(5, 4, 4, (8, 8, 8), base_freq=8)
    z = torch.randn(1, 4)
    pitch = F.one_hot(torch.tensor([1]), 5).float()
    with torch.no_grad():
        a = generator(assemble_input(z, pitch, torch.zeros(1, 12, dtype=torch.long), 4))
        b = generator(assemble_input(z, pitch, torch.full((1, 12), 3), 4))
    assert float((a - b).pow(2).sum()) > 0.0


# --- critics ---

def test_local_critic_is_time_local():
    torch.manual_seed(4)
    local = LocalCritic(4, (8, 8, 8), base_freq=8)
    x = torch.rand(1, 2, 32, 20) * 2 - 1
    y = x.clone()
    y[..., 7] = -x[..., 7]
    with torch.no_grad():
        sx, _ = local(x)
        sy, _ = local(y)
    others = [t for t in range(20) if t != 7]
    assert torch.allclose(sx[:, others], sy[:, others], atol=1e-6)
    assert not torch.allclose(sx[:, 7], sy[:, 7])


def test_local_critic_accepts_other_lengths():
    local = LocalCritic(16, NARROW, base_freq=32)
    with torch.no_grad():
        scores, logits = local(torch.zeros(2, 2, 1024, 64))
    assert scores.shape == (2, 64)
    assert logits.shape == (2, 64, 16)


def test_critic_rejects_wrong_frequency():
    local = LocalCritic(4, (8, 8, 8), base_freq=8)
    with pytest.raises(GeometryError):
        local(torch.zeros(1, 2, 16, 10))


def test_global_critic_outputs():
    torch.manual_seed(5)
    critic = GlobalCritic(27, 32, NARROW, base_freq=32)
    x = torch.rand(3, 2, 1024, 32)
    with torch.no_grad():
        score, logits = d_global_forward(critic, x)
        permuted, _ = critic(x[[2, 0, 1]])
    assert score.shape == (3,)
    assert logits.shape == (3, 27)
    assert torch.allclose(permuted, score[[2, 0, 1]], atol=1e-6)
    with pytest.raises(GeometryError):
        critic(torch.rand(1, 2, 1024, 64))


def test_build_models_checks_ladder(tiny_config):
    generator, local, global_ = build_models(tiny_config, 5)
    assert generator.output_freq(tiny_config.n_scales) == tiny_config.freq_bins
    assert global_.frames == tiny_config.frames
    with pytest.raises(GeometryError):
        build_models(tiny_config.replace(base_freq=32), 5)


# --- gradient penalty ---

def test_gradient_penalty_unit_gradient_critic():
    real, fake = torch.randn(4, 2, 8, 5), torch.randn(4, 2, 8, 5)
    dim = 2 * 8 * 5
    gp = gradient_penalty(lambda x: x.sum(dim=(1, 2, 3)) / math.sqrt(dim), real, fake)
    assert abs(gp.item()) < 1e-5


def test_gradient_penalty_constant_critic():
    real, fake = torch.randn(4, 2, 8, 5), torch.randn(4, 2, 8, 5)
    assert abs(gradient_penalty(lambda x: torch.zeros(x.shape[0]), real, fake).item() - 1.0) < 1e-5
    assert abs(gradient_penalty(lambda x: 0.0 * x.sum(dim=(1, 2, 3)) + 3.0, real, fake).item() - 1.0) < 1e-5


def test_gradient_penalty_per_frame():
    real, fake = torch.randn(3, 2, 8, 6), torch.randn(3, 2, 8, 6)
    per_frame_critic = lambda x: x.sum(dim=(1, 2)) / 4.0  # noqa: E731
    assert abs(gradient_penalty(per_frame_critic, real, fake, per_frame=True).item()) < 1e-5
    whole = gradient_penalty(per_frame_critic, real, fake, per_frame=False).item()
    assert whole == pytest.approx((math.sqrt(6) - 1.0) ** 2, rel=1e-5)


def test_gradient_penalty_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    weights = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    real = torch.randn(2, 2, 3, 4, generator=g, dtype=torch.float64)
    fake = torch.randn(2, 2, 3, 4, generator=g, dtype=torch.float64)

    def critic(x):
        return torch.tanh(x * weights).sum(dim=(1, 2, 3)) + (x ** 2).sum(dim=(1, 2, 3)) * 0.1

    gp = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(9)).item()

    u = torch.rand((2, 1, 1, 1), generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    x_hat = u * real + (1.0 - u) * fake
    eps = 1e-6
    norms = []
    for b in range(2):
        grad = np.zeros(x_hat[b].numel())
        for i in range(grad.size):
            delta = torch.zeros(x_hat[b].numel(), dtype=torch.float64)
            delta[i] = eps
            delta = delta.reshape(x_hat[b].shape)
            up = critic((x_hat[b] + delta).unsqueeze(0)).item()
            down = critic((x_hat[b] - delta).unsqueeze(0)).item()
            grad[i] = (up - down) / (2 * eps)
        norms.append(np.linalg.norm(grad))
    expected = float(np.mean((np.array(norms) - 1.0) ** 2))
    assert gp == pytest.approx(expected, rel=1e-3)


def test_gradient_penalty_is_differentiable_in_critic(fd_check):
    torch.manual_seed(6)
    local = LocalCritic(3, (4, 4), base_freq=4).double()
    real = torch.rand(2, 2, 8, 5, dtype=torch.float64)
    fake = torch.rand(2, 2, 8, 5, dtype=torch.float64)

    def loss_fn():
        return gradient_penalty(lambda x: local(x)[0], real, fake, torch.Generator().manual_seed(1), per_frame=True)

    assert fd_check(loss_fn, list(local.trunk.base_conv.parameters()) + list(local.out.parameters()),
                    n_entries=3) > 0


# --- losses ---

def _hand_outputs():
    real = CriticOutputs(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.zeros(2, 2, 4),
                         torch.tensor([1.0, -1.0]), torch.zeros(2, 3))
    fake = CriticOutputs(torch.tensor([[0.0, 0.0], [1.0, 1.0]]), torch.zeros(2, 2, 4),
                         torch.tensor([0.5, 0.5]), torch.zeros(2, 3))
    return real, fake


def test_gan_losses_hand_case():
    real, fake = _hand_outputs()
    pitch = torch.tensor([0, 2])
    tokens = torch.tensor([[0, 1], [2, 3]])
    d_total, g_total, report = gan_losses(real, fake, pitch, tokens, tokens, torch.tensor(0.2), torch.tensor(0.1),
                                          LossWeights(10.0, 1.0, 0.001))
    ce = math.log(3) + math.log(4)
    assert report.w_local == pytest.approx(2.0)
    assert report.w_global == pytest.approx(-0.5)
    assert report.ce_pitch == pytest.approx(math.log(3), rel=1e-6)
    assert report.ce_token == pytest.approx(math.log(4), rel=1e-6)
    assert report.d_total == pytest.approx(-1.5 + 10 * 0.3 + ce + 0.001 * 8.5, rel=1e-6)
    assert report.g_total == pytest.approx(-1.0 + ce, rel=1e-6)
    assert d_total.item() == pytest.approx(report.d_total)
    assert g_total.item() == pytest.approx(report.g_total)
    assert report.is_finite()


def test_gan_losses_balanced_critics_and_perfect_classifiers():
    pitch = torch.tensor([1, 0])
    tokens = torch.tensor([[2, 0, 1]] * 2)
    pitch_logits = F.one_hot(pitch, 4).float() * 100.0
    token_logits = F.one_hot(tokens, 3).float() * 100.0
    outputs = CriticOutputs(torch.ones(2, 3), token_logits, torch.ones(2), pitch_logits)
    _, _, report = gan_losses(outputs, outputs, pitch, tokens, tokens, torch.tensor(0.0), torch.tensor(0.0),
                              LossWeights())
    assert report.w_local == 0.0
    assert report.w_global == 0.0
    assert report.ce_pitch < 1e-6
    assert report.ce_token < 1e-6


def test_uniform_pitch_logits_give_log_p():
    outputs = CriticOutputs(torch.zeros(4, 2), torch.zeros(4, 2, 16), torch.zeros(4), torch.zeros(4, 27))
    pitch = torch.tensor([0, 5, 11, 26])
    tokens = torch.zeros(4, 2, dtype=torch.long)
    _, _, report = gan_losses(outputs, outputs, pitch, tokens, tokens, torch.tensor(0.0), torch.tensor(0.0),
                              LossWeights())
    assert report.ce_pitch == pytest.approx(math.log(27), rel=1e-6)


def test_losses_require_labels():
    real, fake = _hand_outputs()
    with pytest.raises(ValueError):
        critic_loss(real, fake, None, torch.zeros(2, 2), torch.zeros(2, 2), 0.0, 0.0, LossWeights())


def test_report_columns():
    assert GanLossReport.columns() == ['w_local', 'w_global', 'gp_local', 'gp_global', 'ce_token', 'ce_pitch',
                                       'g_total', 'd_total']
    report = GanLossReport(0, 0, 0, 0, 0, 0, float('nan'), 0)
    assert not report.is_finite()


def _micro_gan(seed):
    torch.manual_seed(seed)
    generator = Generator(3, 2, 2, (3, 3), base_freq=4).double()
    local = LocalCritic(2, (3, 3), base_freq=4).double()
    global_ = GlobalCritic(3, frames=4, feature_maps=(3, 3), base_freq=4).double()
    g = torch.Generator().manual_seed(seed)
    pitch = torch.tensor([0, 2])
    tokens = torch.randint(0, 2, (2, 4), generator=g)
    cond = assemble_input(torch.randn(2, 2, generator=g, dtype=torch.float64), F.one_hot(pitch, 3).double(),
                          tokens, 2)
    real = torch.rand(2, 2, 8, 4, generator=g, dtype=torch.float64) * 2 - 1
    return generator, local, global_, cond, real, pitch, tokens


def test_critic_total_matches_finite_differences(fd_check):
    generator, local, global_, cond, real, pitch, tokens = _micro_gan(seed=11)
    with torch.no_grad():
        fake = generator(cond, scale=2, alpha=0.5)

    def loss_fn():
        real_out = critic_outputs(local, global_, real, 2, 0.5)
        fake_out = critic_outputs(local, global_, fake, 2, 0.5)
        gp_local = gradient_penalty(lambda x: local(x, 2, 0.5)[0], real, fake, torch.Generator().manual_seed(3),
                                    per_frame=True)
        gp_global = gradient_penalty(lambda x: global_(x, 2, 0.5)[0], real, fake, torch.Generator().manual_seed(4))
        return critic_loss(real_out, fake_out, pitch, tokens, tokens, gp_local, gp_global, LossWeights())[0]

    params = [local.out.weight, local.trunk.from_spec[1].weight, global_.dense2.weight, global_.dense1.bias,
              global_.trunk.collapse.weight]
    assert fd_check(loss_fn, params, n_entries=3) == 15


def test_generator_total_matches_finite_differences(fd_check):
    generator, local, global_, cond, _, pitch, tokens = _micro_gan(seed=12)

    def loss_fn():
        fake_out = critic_outputs(local, global_, generator(cond, scale=2, alpha=0.5), 2, 0.5)
        return generator_loss(fake_out, pitch, tokens, LossWeights())

    params = [generator.input_block.conv1.weight, generator.blocks[0].conv2.weight, generator.heads[1].weight,
              generator.heads[0].bias]
    assert fd_check(loss_fn, params, n_entries=3) == 11
