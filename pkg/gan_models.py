import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from containers import TokenSequence
from errors import GeometryError

# CONFIG
LEAKY_SLOPE = 0.2
PIXEL_NORM_EPS = 1e-8
GP_NORM_EPS = 1e-12


# ==========================================
# CONDITIONING
# ==========================================

def assemble_input(z, pitch_onehot, tokens, n_tokens):
    """
    Builds the (B, P + Z + C, 1, L) conditioning grid. Static rows (pitch, noise)
    are repeated over frames; token rows are one-hot per frame.
    """
    if z.dim() == 1:
        z, pitch_onehot, tokens = z.unsqueeze(0), pitch_onehot.unsqueeze(0), tokens.unsqueeze(0)
    tokens = tokens.long()

    ones = (pitch_onehot == 1).sum(dim=1)
    zeros = (pitch_onehot == 0).sum(dim=1)
    if not bool(torch.all(ones == 1)) or not bool(torch.all(ones + zeros == pitch_onehot.shape[1])):
        raise ValueError("Pitch conditioning must be a valid one-hot vector.")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= n_tokens):
        raise ValueError(f"Token values must lie in [0, {n_tokens}).")

    frames = tokens.shape[1]
    static = torch.cat([pitch_onehot.to(z.dtype), z], dim=1)
    static = static.unsqueeze(-1).expand(-1, -1, frames)
    dynamic = F.one_hot(tokens, n_tokens).to(z.dtype).transpose(1, 2)
    return torch.cat([static, dynamic], dim=1).unsqueeze(2)


def resample_tokens(tokens, target_len):
    """Nearest-neighbour index map: src = floor(i * len / target_len)."""
    is_sequence = isinstance(tokens, TokenSequence)
    values = np.asarray(tokens.tokens if is_sequence else tokens)
    if values.size == 0:
        raise GeometryError("Cannot resample an empty token sequence.")
    if target_len < 1:
        raise GeometryError(f"target_len must be >= 1, got {target_len}")
    src = (np.arange(target_len) * len(values)) // target_len
    out = values[src]
    if is_sequence:
        return TokenSequence(out, tokens.source_id, tokens.pitch)
    return out


def pixel_norm(features, epsilon=PIXEL_NORM_EPS):
    """Divides each (freq, frame) channel vector by its root mean square."""
    return features / torch.sqrt(torch.mean(features ** 2, dim=1, keepdim=True) + epsilon)


# ==========================================
# LAYERS
# ==========================================

class EqualizedConv2d(nn.Module):
    """Convolution with runtime He scaling (equalized learning rate)."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, gain=math.sqrt(2)):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kh, kw))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = gain / math.sqrt(in_ch * kh * kw)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, self.stride, self.padding)


class EqualizedLinear(nn.Module):
    def __init__(self, in_features, out_features, gain=math.sqrt(2)):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.scale = gain / math.sqrt(in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class PixelNorm(nn.Module):
    def forward(self, x):
        return pixel_norm(x)


def _upsample_freq(x):
    return F.interpolate(x, scale_factor=(2, 1), mode='nearest')


def _downsample_freq(x):
    return F.avg_pool2d(x, kernel_size=(2, 1))


# ==========================================
# GENERATOR
# ==========================================

class InputBlock(nn.Module):
    """
    Zero-pads the single conditioning row by base_freq - 1 on both sides and
    applies a full-height (base_freq, 3) kernel, so each of the base_freq output
    rows gets its own view of the conditioning; then one 3x3 conv. ReLU on both.
    """

    def __init__(self, in_ch, out_ch, base_freq):
        super().__init__()
        self.base_freq = base_freq
        self.conv1 = EqualizedConv2d(in_ch, out_ch, (base_freq, 3), padding=(0, 1))
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        if x.shape[2] != 1:
            raise GeometryError(f"Conditioning must have a single frequency row, got {x.shape[2]}")
        x = F.pad(x, (0, 0, self.base_freq - 1, self.base_freq - 1))
        x = pixel_norm(F.relu(self.conv1(x)))
        return pixel_norm(F.relu(self.conv2(x)))


class ScaleBlock(nn.Module):
    """Nearest-neighbour x2 along frequency, then two 3x3 convs with leaky ReLU and pixel norm."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = _upsample_freq(x)
        x = pixel_norm(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return pixel_norm(F.leaky_relu(self.conv2(x), LEAKY_SLOPE))


class Generator(nn.Module):
    def __init__(self, n_pitches, latent_dim=128, n_tokens=16, feature_maps=(512, 256, 256, 256, 256, 128),
                 base_freq=32):
        super().__init__()
        self.n_pitches = n_pitches
        self.latent_dim = latent_dim
        self.n_tokens = n_tokens
        self.base_freq = base_freq
        self.in_channels = n_pitches + latent_dim + n_tokens
        self.n_scales = len(feature_maps)

        self.input_block = InputBlock(self.in_channels, feature_maps[0], base_freq)
        self.blocks = nn.ModuleList(
            [ScaleBlock(feature_maps[i - 1], feature_maps[i]) for i in range(1, self.n_scales)])
        self.heads = nn.ModuleList([EqualizedConv2d(fm, 2, 1, gain=1.0) for fm in feature_maps])

    def output_freq(self, scale):
        return self.base_freq * 2 ** (scale - 1)

    def forward(self, cond, scale=None, alpha=1.0):
        scale = scale or self.n_scales
        if cond.shape[1] != self.in_channels:
            raise GeometryError(f"Conditioning has {cond.shape[1]} channels, generator expects "
                                f"{self.in_channels} ({self.n_pitches} pitch + {self.latent_dim} noise + "
                                f"{self.n_tokens} token).")
        if not 1 <= scale <= self.n_scales:
            raise GeometryError(f"Scale {scale} outside 1..{self.n_scales}")

        h = self.input_block(cond)
        prev = h
        for s in range(2, scale + 1):
            prev = h
            h = self.blocks[s - 2](h)

        out = torch.tanh(self.heads[scale - 1](h))
        if scale > 1 and alpha < 1.0:
            skip = _upsample_freq(torch.tanh(self.heads[scale - 2](prev)))
            out = alpha * out + (1.0 - alpha) * skip
        return out


def generator_forward(generator, cond, scale=None, alpha=1.0):
    return generator(cond, scale, alpha)


# ==========================================
# CRITICS
# ==========================================

class CriticBlock(nn.Module):
    """Conv + frequency-strided conv halving the frequency axis; time stride 1."""

    def __init__(self, in_ch, out_ch, time_kernel):
        super().__init__()
        pad_t = time_kernel // 2
        self.conv = EqualizedConv2d(in_ch, in_ch, (3, time_kernel), padding=(1, pad_t))
        self.down = EqualizedConv2d(in_ch, out_ch, (4, time_kernel), stride=(2, 1), padding=(1, pad_t))

    def forward(self, x):
        x = F.leaky_relu(self.conv(x), LEAKY_SLOPE)
        return F.leaky_relu(self.down(x), LEAKY_SLOPE)


class CriticTrunk(nn.Module):
    """Mirror of the generator ladder; ends in a (B, fm0, 1, L) feature row."""

    def __init__(self, feature_maps, base_freq, time_kernel):
        super().__init__()
        self.base_freq = base_freq
        self.n_scales = len(feature_maps)
        pad_t = time_kernel // 2
        self.from_spec = nn.ModuleList([EqualizedConv2d(2, fm, 1) for fm in feature_maps])
        self.blocks = nn.ModuleList(
            [CriticBlock(feature_maps[i], feature_maps[i - 1], time_kernel) for i in range(1, self.n_scales)])
        self.base_conv = EqualizedConv2d(feature_maps[0], feature_maps[0], (3, time_kernel), padding=(1, pad_t))
        self.collapse = EqualizedConv2d(feature_maps[0], feature_maps[0], (base_freq, 1))

    def forward(self, x, scale=None, alpha=1.0):
        scale = scale or self.n_scales
        expected = self.base_freq * 2 ** (scale - 1)
        if x.dim() != 4 or x.shape[1] != 2 or x.shape[2] != expected:
            raise GeometryError(f"Critic at scale {scale} expects (B, 2, {expected}, L), got {tuple(x.shape)}")

        h = F.leaky_relu(self.from_spec[scale - 1](x), LEAKY_SLOPE)
        if scale > 1:
            h = self.blocks[scale - 2](h)
            if alpha < 1.0:
                skip = F.leaky_relu(self.from_spec[scale - 2](_downsample_freq(x)), LEAKY_SLOPE)
                h = alpha * h + (1.0 - alpha) * skip
            for s in range(scale - 1, 1, -1):
                h = self.blocks[s - 2](h)

        h = F.leaky_relu(self.base_conv(h), LEAKY_SLOPE)
        return F.leaky_relu(self.collapse(h), LEAKY_SLOPE)


class LocalCritic(nn.Module):
    """Fully convolutional and time-local: one score and C token logits per frame."""

    def __init__(self, n_tokens=16, feature_maps=(512, 256, 256, 256, 256, 128), base_freq=32):
        super().__init__()
        self.n_tokens = n_tokens
        self.trunk = CriticTrunk(feature_maps, base_freq, time_kernel=1)
        self.hidden = EqualizedConv2d(feature_maps[0], feature_maps[0], 1)
        self.out = EqualizedConv2d(feature_maps[0], 1 + n_tokens, 1, gain=1.0)

    def forward(self, x, scale=None, alpha=1.0):
        h = self.trunk(x, scale, alpha)
        h = F.leaky_relu(self.hidden(h), LEAKY_SLOPE)
        out = self.out(h)[:, :, 0, :]               # (B, 1 + C, L)
        return out[:, 0, :], out[:, 1:, :].transpose(1, 2)


class GlobalCritic(nn.Module):
    """Scores a whole L-frame sequence through two dense layers and predicts its pitch."""

    def __init__(self, n_pitches, frames=32, feature_maps=(512, 256, 256, 256, 256, 128), base_freq=32):
        super().__init__()
        self.frames = frames
        self.n_pitches = n_pitches
        self.trunk = CriticTrunk(feature_maps, base_freq, time_kernel=3)
        self.dense1 = EqualizedLinear(feature_maps[0] * frames, feature_maps[0])
        self.dense2 = EqualizedLinear(feature_maps[0], 1 + n_pitches, gain=1.0)

    def forward(self, x, scale=None, alpha=1.0):
        if x.dim() == 4 and x.shape[-1] != self.frames:
            raise GeometryError(f"Global critic is built for {self.frames} frames, got {x.shape[-1]}")
        h = self.trunk(x, scale, alpha).flatten(1)
        h = F.leaky_relu(self.dense1(h), LEAKY_SLOPE)
        out = self.dense2(h)
        return out[:, 0], out[:, 1:]


def d_local_forward(critic, spec, scale=None, alpha=1.0):
    return critic(spec, scale, alpha)


def d_global_forward(critic, spec, scale=None, alpha=1.0):
    return critic(spec, scale, alpha)


def build_models(config, n_pitches):
    generator = Generator(n_pitches, config.latent_dim, config.codebook_size, config.feature_maps, config.base_freq)
    local = LocalCritic(config.codebook_size, config.feature_maps, config.base_freq)
    global_ = GlobalCritic(n_pitches, config.frames, config.feature_maps, config.base_freq)
    top = config.scale_freq(config.n_scales)
    if top != config.freq_bins:
        raise GeometryError(f"Frequency ladder ends at {top} bins but the STFT keeps {config.freq_bins}; "
                            f"adjust base_freq or feature_maps.")
    return generator, local, global_


# ==========================================
# LOSSES
# ==========================================

def gradient_penalty(critic, real, fake, generator=None, per_frame=False):
    """
    Mean of (||grad critic(x_hat)|| - 1)^2 on random interpolates. With
    per_frame the norm is taken per frame column, which is exact for a
    time-local critic returning (B, L) scores.
    """
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    u = torch.rand(shape, generator=generator, dtype=real.dtype)
    x_hat = (u * real.detach() + (1.0 - u) * fake.detach()).requires_grad_(True)

    scores = critic(x_hat)
    grads = None
    if scores.requires_grad:
        grads = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(x_hat)

    if per_frame:
        norms = torch.sqrt(grads.pow(2).sum(dim=tuple(range(1, grads.dim() - 1))) + GP_NORM_EPS)
    else:
        norms = torch.sqrt(grads.reshape(grads.shape[0], -1).pow(2).sum(dim=1) + GP_NORM_EPS)
    return ((norms - 1.0) ** 2).mean()


@dataclass
class CriticOutputs:
    local_scores: torch.Tensor    # (B, L)
    token_logits: torch.Tensor    # (B, L, C)
    global_scores: torch.Tensor   # (B,)
    pitch_logits: torch.Tensor    # (B, P)


@dataclass
class LossWeights:
    gp_lambda: float = 10.0
    ce_weight: float = 1.0
    drift_epsilon: float = 0.001

    @classmethod
    def from_config(cls, config):
        return cls(config.gp_lambda, config.ce_weight, config.drift_epsilon)


@dataclass
class GanLossReport:
    w_local: float
    w_global: float
    gp_local: float
    gp_global: float
    ce_token: float
    ce_pitch: float
    g_total: float
    d_total: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return {name: getattr(self, name) for name in self.columns()}

    def is_finite(self):
        return all(math.isfinite(v) for v in self.as_row().values())


def critic_outputs(local_critic, global_critic, spec, scale=None, alpha=1.0):
    local_scores, token_logits = local_critic(spec, scale, alpha)
    global_scores, pitch_logits = global_critic(spec, scale, alpha)
    return CriticOutputs(local_scores, token_logits, global_scores, pitch_logits)


def _token_ce(logits, tokens):
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens.reshape(-1).long())


def critic_loss(real, fake, pitch, real_tokens, fake_tokens, gp_local, gp_global, weights):
    """
    Wasserstein terms of both critics, gradient penalties, auxiliary cross
    entropy on real and fake samples, and the drift term on real scores.
    """
    if pitch is None or real_tokens is None or fake_tokens is None:
        raise ValueError("Critic loss needs pitch labels and both token label sequences.")

    w_local = real.local_scores.mean() - fake.local_scores.mean()
    w_global = real.global_scores.mean() - fake.global_scores.mean()

    ce_pitch = F.cross_entropy(torch.cat([real.pitch_logits, fake.pitch_logits]), torch.cat([pitch, pitch]).long())
    ce_token = _token_ce(torch.cat([real.token_logits, fake.token_logits]),
                         torch.cat([real_tokens, fake_tokens]))
    drift = (real.local_scores ** 2).mean() + (real.global_scores ** 2).mean()

    d_total = (-(w_local + w_global)
               + weights.gp_lambda * (gp_local + gp_global)
               + weights.ce_weight * (ce_pitch + ce_token)
               + weights.drift_epsilon * drift)
    parts = {'w_local': w_local, 'w_global': w_global, 'gp_local': gp_local, 'gp_global': gp_global,
             'ce_token': ce_token, 'ce_pitch': ce_pitch}
    return d_total, parts


def generator_loss(fake, pitch, fake_tokens, weights):
    if pitch is None or fake_tokens is None:
        raise ValueError("Generator loss needs the conditioning pitch and tokens as targets.")
    adversarial = -(fake.local_scores.mean() + fake.global_scores.mean())
    ce = F.cross_entropy(fake.pitch_logits, pitch.long()) + _token_ce(fake.token_logits, fake_tokens)
    return adversarial + weights.ce_weight * ce


def gan_losses(real, fake, pitch, real_tokens, fake_tokens, gp_local, gp_global, weights):
    """Returns (d_total, g_total, GanLossReport) evaluated on one set of critic outputs."""
    d_total, parts = critic_loss(real, fake, pitch, real_tokens, fake_tokens, gp_local, gp_global, weights)
    g_total = generator_loss(fake, pitch, fake_tokens, weights)
    report = make_report(parts, g_total, d_total)
    return d_total, g_total, report


def make_report(parts, g_total, d_total):
    def scalar(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)
    return GanLossReport(**{k: scalar(v) for k, v in parts.items()},
                         g_total=scalar(g_total), d_total=scalar(d_total))
