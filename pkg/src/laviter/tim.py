"""
Text-to-image branch: a cascade of conditional generators, one discriminator per
stage, and the adversarial losses that train them.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBlock, Linear, Module
from .tensor import Tensor, as_tensor, clip, concat, leaky_relu, sigmoid, softmax, tanh, upsample_nearest
from .tensor import log as natural_log

log = logging.getLogger(__name__)

PROBABILITY_EPS = 1e-7
STEM_RESOLUTION = 4


@dataclass(frozen=True)
class GanConfig:
    stages: int = 2
    first_resolution: int = 16
    noise_dim: int = 32
    d_model: int = 256
    channels: int = 32
    disc_channels: int = 16
    cond_dim: int = 32
    word_attention: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"a GAN cascade needs at least one stage, got {self.stages}")
        ratio = self.first_resolution / STEM_RESOLUTION
        if ratio < 1 or not math.log2(ratio).is_integer():
            raise ConfigError(f"first_resolution {self.first_resolution} must be {STEM_RESOLUTION} times a power of two")

    @property
    def resolutions(self) -> list[int]:
        return [self.first_resolution * 2**i for i in range(self.stages)]


def sample_noise(rng: np.random.Generator, batch: int, noise_dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(batch, noise_dim))


class WordAttention(Module):
    """Word-context features for every spatial location of a stage's hidden map."""

    def __init__(self, d_model: int, channels: int, rng: np.random.Generator):
        self.word_projection = Linear(d_model, channels, rng, bias=False)

    def forward(self, hidden: Tensor, w: Tensor, mask=None) -> Tensor:
        batch, channels, height, width = hidden.shape
        words = self.word_projection(w.swapaxes(1, 2))
        locations = hidden.reshape(batch, channels, height * width).swapaxes(1, 2)
        key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
        weights = softmax(locations @ words.swapaxes(1, 2), axis=-1, mask=key_mask)
        context = (weights @ words).swapaxes(1, 2)
        return context.reshape(batch, channels, height, width)


class UpBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = ConvBlock(in_channels, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(upsample_nearest(x, 2))


class Generator(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        self.config = config
        width = config.channels
        self.stem = Linear(config.d_model + config.noise_dim, width * STEM_RESOLUTION**2, rng)
        steps = int(math.log2(config.first_resolution // STEM_RESOLUTION))
        self.stem_blocks = [UpBlock(width, width, rng) for _ in range(steps)]
        self.attention = []
        if config.word_attention:
            self.attention = [WordAttention(config.d_model, width, rng) for _ in range(config.stages - 1)]
        stage_in = 2 * width if config.word_attention else width
        self.stage_blocks = [UpBlock(stage_in, width, rng) for _ in range(config.stages - 1)]
        self.to_rgb = [Conv2d(width, 3, rng) for _ in range(config.stages)]

    def forward(self, w, s, z, mask=None) -> list[Tensor]:
        return self.generate(w, s, z, mask)

    def generate(self, w, s, z, mask=None) -> list[Tensor]:
        """Images at every stage resolution, pixel values in [-1, 1]."""
        s, z = as_tensor(s), as_tensor(z)
        if s.ndim != 2 or z.shape != (s.shape[0], self.config.noise_dim):
            raise DimensionError(f"sentence features {s.shape} and noise {z.shape} do not form a batch")
        batch = s.shape[0]

        hidden = leaky_relu(self.stem(concat([s, z], axis=1)), 0.2)
        hidden = hidden.reshape(batch, self.config.channels, STEM_RESOLUTION, STEM_RESOLUTION)
        for block in self.stem_blocks:
            hidden = block(hidden)

        images = [tanh(self.to_rgb[0](hidden))]
        for stage, block in enumerate(self.stage_blocks):
            if self.attention:
                hidden = concat([hidden, self.attention[stage](hidden, as_tensor(w), mask)], axis=1)
            hidden = block(hidden)
            images.append(tanh(self.to_rgb[stage + 1](hidden)))
        return images


class Discriminator(Module):
    """Scores one stage resolution; separate unconditional and sentence-conditioned heads."""

    def __init__(self, resolution: int, config: GanConfig, rng: np.random.Generator):
        self.resolution = resolution
        widths = [3]
        size = resolution
        while size > STEM_RESOLUTION:
            widths.append(min(config.disc_channels * 2 ** (len(widths) - 1), config.disc_channels * 8))
            size //= 2
        self.blocks = [ConvBlock(widths[i], widths[i + 1], rng, stride=2) for i in range(len(widths) - 1)]
        features = widths[-1]
        self.uncond_head = Linear(features * STEM_RESOLUTION**2, 1, rng)
        self.cond_projection = Linear(config.d_model, config.cond_dim, rng)
        self.joint = ConvBlock(features + config.cond_dim, features, rng)
        self.cond_head = Linear(features * STEM_RESOLUTION**2, 1, rng)

    def features(self, images) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, self.resolution, self.resolution):
            raise DimensionError(f"discriminator for {self.resolution}px got images of shape {images.shape}")
        x = images
        for block in self.blocks:
            x = block(x)
        return x

    def unconditional(self, features: Tensor) -> Tensor:
        batch = features.shape[0]
        return sigmoid(self.uncond_head(features.reshape(batch, -1))).reshape(batch)

    def conditional(self, features: Tensor, s) -> Tensor:
        batch, _, height, width = features.shape
        cond = self.cond_projection(as_tensor(s))
        tiled = cond.reshape(batch, cond.shape[1], 1, 1) * np.ones((1, 1, height, width))
        joint = self.joint(concat([features, tiled], axis=1))
        return sigmoid(self.cond_head(joint.reshape(batch, -1))).reshape(batch)

    def forward(self, images, s) -> tuple[Tensor, Tensor]:
        x = self.features(images)
        return self.unconditional(x), self.conditional(x, s)


def _safe_log(p) -> Tensor:
    return natural_log(clip(as_tensor(p), PROBABILITY_EPS, 1.0 - PROBABILITY_EPS))


def generator_loss(d_uncond, d_cond) -> Tensor:
    """-½·E[log D(Î)] - ½·E[log D(Î, s)] for one stage."""
    return -0.5 * _safe_log(d_uncond).mean() - 0.5 * _safe_log(d_cond).mean()


def discriminator_loss(d_real_u, d_fake_u, d_real_c, d_fake_c) -> Tensor:
    real = _safe_log(d_real_u).mean() + _safe_log(d_real_c).mean()
    fake = _safe_log(1.0 - as_tensor(d_fake_u)).mean() + _safe_log(1.0 - as_tensor(d_fake_c)).mean()
    return -0.5 * (real + fake)


def tim_total_loss(generator_term, fake_image_matching, lambda_fake_image: float):
    return generator_term + lambda_fake_image * fake_image_matching


def resize_real(images: np.ndarray, resolution: int) -> np.ndarray:
    """Bring (B, C, H, H) real images to a discriminator's ``resolution``.

    Integer shrink factors average-pool exactly; anything else goes through a PIL box filter per channel.
    """
    batch, channels, size, _ = images.shape
    if size == resolution:
        return images
    if size % resolution == 0:
        factor = size // resolution
        return images.reshape(batch, channels, resolution, factor, resolution, factor).mean(axis=(3, 5))
    out = np.empty((batch, channels, resolution, resolution), dtype=images.dtype)
    for b in range(batch):
        for c in range(channels):
            plane = Image.fromarray(images[b, c].astype(np.float32), mode="F")
            out[b, c] = np.asarray(plane.resize((resolution, resolution), Image.Resampling.BOX))
    return out


class GanCascade(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        self.config = config
        self.generator = Generator(config, rng)
        self.discriminators = [Discriminator(size, config, rng) for size in config.resolutions]

    @property
    def resolutions(self) -> list[int]:
        return self.config.resolutions

    def generate(self, w, s, z, mask=None) -> list[Tensor]:
        return self.generator.generate(w, s, z, mask)

    def generator_loss_for(self, fakes: list[Tensor], s) -> Tensor:
        """L_G summed over every stage."""
        total = None
        for fake, disc in zip(fakes, self.discriminators):
            stage = generator_loss(*disc(fake, s))
            total = stage if total is None else total + stage
        return total

    def discriminator_loss_for(self, real_images: np.ndarray, fakes: list[Tensor], s) -> Tensor:
        """L_D summed over every stage; ``fakes`` and ``s`` should be detached by the caller."""
        total = None
        for fake, disc in zip(fakes, self.discriminators):
            real_u, real_c = disc(resize_real(real_images, disc.resolution), s)
            fake_u, fake_c = disc(fake, s)
            stage = discriminator_loss(real_u, fake_u, real_c, fake_c)
            total = stage if total is None else total + stage
        return total
