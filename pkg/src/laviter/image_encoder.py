"""
The image encoder F_I: a small strided convolutional backbone with two projection
layers producing region features ``r`` (D x M) and a global feature ``v`` (D).
"""

import io
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError
from .nn import ConvBlock, Linear, Module
from .tensor import Tensor, upsample_nearest
from .utils import atomic_write_bytes

log = logging.getLogger(__name__)

# r is read after the third stride-2 block
REGION_STRIDE = 8


class Trainability(Enum):
    FROZEN_BACKBONE = "frozen-backbone"
    FULL = "full"
    FIRST_K_FROZEN = "first-k-frozen"

    @classmethod
    def choices(cls):
        return [choice.value for choice in cls]


@dataclass(frozen=True)
class ImageSpec:
    size: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.size <= 0 or self.size % REGION_STRIDE:
            raise ConfigError(f"image size {self.size} must be a positive multiple of {REGION_STRIDE}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels, self.size, self.size

    def check(self, images: np.ndarray) -> None:
        if images.ndim != 4 or images.shape[1:] != self.shape:
            raise DimensionError(f"expected images of shape (B, {', '.join(map(str, self.shape))}), got {images.shape}")


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 64
    base_channels: int = 16
    d_model: int = 256

    @property
    def spec(self) -> ImageSpec:
        return ImageSpec(self.image_size)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(4))

    @property
    def grid(self) -> int:
        return self.image_size // REGION_STRIDE

    @property
    def regions(self) -> int:
        return self.grid * self.grid


@dataclass
class EncodedImage:
    """Region features ``r`` (..., D, M) and global feature ``v`` (..., D)."""

    r: Tensor
    v: Tensor

    def __len__(self) -> int:
        return self.r.shape[0]

    def __getitem__(self, index) -> "EncodedImage":
        return EncodedImage(self.r[index], self.v[index])

    def detach(self) -> "EncodedImage":
        return EncodedImage(self.r.detach(), self.v.detach())


class ImageEncoder(Module):
    def __init__(self, config: ImageEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.spec = config.spec
        widths = (self.spec.channels, *config.channels)
        self.blocks = [ConvBlock(widths[i], widths[i + 1], rng, stride=2) for i in range(4)]
        self.region_projection = Linear(config.channels[2], config.d_model, rng)
        self.global_projection = Linear(config.channels[3], config.d_model, rng)

    @property
    def output_layers(self) -> list[Module]:
        return [self.region_projection, self.global_projection]

    def forward(self, images) -> EncodedImage:
        return self.encode(images)

    def encode(self, images) -> EncodedImage:
        """Encode a (B, 3, H, W) batch in the [-1, 1] pixel range."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        self.spec.check(images.data)

        x = images
        for block in self.blocks[:3]:
            x = block(x)
        batch, channels, height, width = x.shape
        regions = x.reshape(batch, channels, height * width).swapaxes(1, 2)
        r = self.region_projection(regions).swapaxes(1, 2)

        pooled = self.blocks[3](x).mean(axis=(2, 3))
        v = self.global_projection(pooled)
        return EncodedImage(r=r, v=v)

    def encode_image(self, image) -> EncodedImage:
        """Encode one (3, H, W) image; ``r`` is (D, M) and ``v`` is (D,)."""
        data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionError(f"expected one image of shape {self.spec.shape}, got {data.shape}")
        batch = image.reshape(1, *data.shape) if isinstance(image, Tensor) else data[None]
        return self.encode(batch)[0]

    def set_trainability(self, profile: Trainability | str, frozen_blocks: int = 0) -> None:
        """Flag parameter groups trainable or frozen; projections always stay trainable."""
        try:
            profile = Trainability(profile)
        except ValueError:
            raise ConfigError(f"unknown trainability profile {profile!r}; choose from {Trainability.choices()}") from None

        if profile is Trainability.FULL:
            frozen_blocks = 0
        elif profile is Trainability.FROZEN_BACKBONE:
            frozen_blocks = len(self.blocks)
        elif not 0 <= frozen_blocks <= len(self.blocks):
            raise ConfigError(f"cannot freeze {frozen_blocks} blocks of a {len(self.blocks)}-block backbone")

        for index, block in enumerate(self.blocks):
            block.set_trainable(index >= frozen_blocks)
        for layer in self.output_layers:
            layer.set_trainable(True)
        log.debug(f"image encoder trainability {profile.value}: first {frozen_blocks} blocks frozen")


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """uint8 HWC or BHWC raster(s) to float CHW/BCHW in [-1, 1]."""
    pixels = np.asarray(pixels)
    scaled = pixels.astype(np.float64) / 127.5 - 1.0
    return np.moveaxis(scaled, -1, -3)


def denormalize_pixels(images: np.ndarray) -> np.ndarray:
    """Float CHW/BCHW in [-1, 1] back to uint8 HWC/BHWC."""
    scaled = np.clip((np.asarray(images) + 1.0) * 127.5, 0.0, 255.0)
    return np.moveaxis(np.rint(scaled).astype(np.uint8), -3, -1)


def load_image(path: Path | str, spec: ImageSpec) -> np.ndarray:
    """Read an RGB raster as a (3, H, W) array in [-1, 1], resized to ``spec`` if needed."""
    with Image.open(path) as raster:
        raster = raster.convert("RGB")
        if raster.size != (spec.size, spec.size):
            log.debug(f"resizing {path} from {raster.size[0]}x{raster.size[1]} to {spec.size}x{spec.size}")
            raster = raster.resize((spec.size, spec.size), Image.Resampling.BICUBIC)
        return normalize_pixels(np.asarray(raster))


def encode_png(raster: Image.Image) -> bytes:
    buffer = io.BytesIO()
    raster.save(buffer, format="PNG")
    return buffer.getvalue()


def save_image(path: Path | str, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(Image.fromarray(denormalize_pixels(image))))


def fit_to_spec(images: Tensor, spec: ImageSpec) -> Tensor:
    """Nearest-resample generated (B, C, H, H) images to the encoder's input size."""
    size = images.shape[-1]
    if size == spec.size:
        return images
    if spec.size % size == 0:
        return upsample_nearest(images, spec.size // size)
    # pixel centres of the target grid, mapped back onto the source grid
    index = np.minimum(((np.arange(spec.size) + 0.5) * size / spec.size).astype(np.int64), size - 1)
    return images[:, :, index[:, None], index[None, :]]
