# Copyright 2022 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Learned functions: residual encoder, position decoder, critic, splice network and classifier."""
import dataclasses
import math
from typing import Dict, Iterable, Tuple

import numpy as np
import torch
from torch import nn

import imaging
import poscodes

RESIDUAL_BOUND = 0.2
MARGIN_FRACTION = 0.1
MODEL_NAMES = ('encoder', 'decoder', 'critic', 'splice_net', 'classifier')


class ShapeError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ArchConfig:
    encoder_levels: int = 3
    encoder_channels: int = 32
    decoder_channels: int = 64
    critic_channels: int = 32
    splice_levels: int = 3
    splice_channels: int = 32


def straight_through_clamp(x: torch.Tensor, low: float, high: float) -> torch.Tensor:
    """Clamps the values but passes gradients through unchanged."""
    return x + (x.clamp(low, high) - x).detach()


def receptive_field(layers: Iterable[nn.Module]) -> int:
    """Side of the input window seen by one output of a stack of convolutions."""
    size, jump = 1, 1
    for layer in layers:
        if isinstance(layer, nn.Conv2d):
            size += (layer.kernel_size[0] - 1) * layer.dilation[0] * jump
            jump *= layer.stride[0]
    return size


class _DoubleConv(nn.Sequential):

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """
    Encoder-decoder with skip connections that preserves spatial size.

    levels counts resolutions, so inputs must be divisible by 2 ** (levels - 1).
    """

    def __init__(self, in_channels: int, out_channels: int, levels: int = 3, base_channels: int = 32):
        super().__init__()
        if levels < 1:
            raise ShapeError(f'A U-Net needs at least one level, got {levels}')
        self.levels = levels
        widths = [base_channels * 2 ** i for i in range(levels)]
        self.down = nn.ModuleList()
        previous = in_channels
        for width in widths:
            self.down.append(_DoubleConv(previous, width))
            previous = width
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for level in reversed(range(levels - 1)):
            self.up.append(nn.ConvTranspose2d(widths[level + 1], widths[level], kernel_size=2, stride=2))
            self.merge.append(_DoubleConv(2 * widths[level], widths[level]))
        self.head = nn.Conv2d(widths[0], out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (self.levels - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(f'Input {tuple(x.shape[-2:])} is not divisible by {factor}')
        skips = []
        for index, block in enumerate(self.down):
            if index:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


class ResidualEncoder(UNet):
    """f~_theta: maps [I; Psi] to an unbounded residual. The zero head makes the residual 0 at step 0."""

    def __init__(self, code_depth: int = 8, levels: int = 3, base_channels: int = 32):
        super().__init__(3 + code_depth, 3, levels, base_channels)
        self.code_depth = code_depth
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        if codes.shape[0] == 1 and images.shape[0] > 1:
            codes = codes.expand(images.shape[0], -1, -1, -1)
        return super().forward(torch.cat([images, codes.to(images.dtype)], dim=1))


def embed(encoder: ResidualEncoder, images: torch.Tensor,
          codes: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Differentiable encoding: returns (stego, residual) with straight-through clamps."""
    residual = straight_through_clamp(encoder(images, codes), -RESIDUAL_BOUND, RESIDUAL_BOUND)
    stego = straight_through_clamp(images + residual, 0., 1.)
    return stego, residual


class PositionDecoder(nn.Module):
    """
    g_psi: undecimated convolutions without padding, so an N x M input gives (N - R + 1) x (M - R + 1).

    (R - 2) / 2 layers of 3x3 and one 2x2 layer give an even receptive field R exactly. The head is a
    scaled sigmoid onto the nominal coordinate range widened by a margin on each side.
    """

    def __init__(self, receptive_field_size: int = 16, width: int = 128, height: int = 128,
                 channels: int = 64, margin_fraction: float = MARGIN_FRACTION):
        super().__init__()
        if receptive_field_size < 4 or receptive_field_size % 2:
            raise ShapeError(f'Receptive field must be even and at least 4, got {receptive_field_size}')
        layers = []
        previous = 3
        for _ in range((receptive_field_size - 2) // 2):
            layers.extend([nn.Conv2d(previous, channels, kernel_size=3), nn.ReLU(inplace=True)])
            previous = channels
        layers.extend([nn.Conv2d(previous, channels, kernel_size=2), nn.ReLU(inplace=True)])
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, 2, kernel_size=1)
        self.receptive_field = receptive_field(self.features)
        assert self.receptive_field == receptive_field_size
        half = receptive_field_size // 2
        low = [half - margin_fraction * width, half - margin_fraction * height]
        high = [width - math.ceil(receptive_field_size / 2) + margin_fraction * width,
                height - math.ceil(receptive_field_size / 2) + margin_fraction * height]
        self.register_buffer('low', torch.tensor(low).view(1, 2, 1, 1), persistent=False)
        self.register_buffer('span', (torch.tensor(high) - torch.tensor(low)).view(1, 2, 1, 1),
                             persistent=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2] < self.receptive_field or images.shape[-1] < self.receptive_field:
            raise ShapeError(f'Input {tuple(images.shape[-2:])} is smaller than the receptive field '
                             f'{self.receptive_field}')
        z = self.head(self.features(images))
        return self.low.to(z.dtype) + self.span.to(z.dtype) * torch.sigmoid(z)


class PatchCritic(nn.Module):
    """d_phi: four strided convolutions, global average pooling and a sigmoid. Outputs P(unencoded)."""

    def __init__(self, channels: int = 32):
        super().__init__()
        widths = [channels, 2 * channels, 4 * channels, 4 * channels]
        layers = []
        previous = 3
        for width in widths:
            layers.extend([nn.Conv2d(previous, width, kernel_size=3, stride=2, padding=1),
                           nn.LeakyReLU(0.2, inplace=True)])
            previous = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(previous, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled = self.features(images).mean(dim=(2, 3))
        return torch.sigmoid(self.head(pooled)).squeeze(1)


class SpliceNet(UNet):
    """h_phi: canonical-size image to a soft splice mask in [0, 1]."""

    def __init__(self, size: Tuple[int, int] = (128, 128), levels: int = 3, base_channels: int = 32):
        super().__init__(3, 1, levels, base_channels)
        self.size = tuple(size)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(super().forward(images))


class StegaposClassifier(nn.Module):
    """Single affine layer with a sigmoid over the flattened canonical positional field."""

    def __init__(self, field_shape: Tuple[int, int], width: int = 128):
        super().__init__()
        self.field_shape = tuple(field_shape)
        self.scale = float(width)
        self.linear = nn.Linear(2 * field_shape[0] * field_shape[1], 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, fields: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(fields.flatten(1) / self.scale)).squeeze(1)


def build_model(name: str, spec: poscodes.CodeSpec, receptive_field_size: int,
                arch: ArchConfig = ArchConfig()) -> nn.Module:
    """Creates an untrained model whose shapes follow the code spec and architecture."""
    if name == 'encoder':
        return ResidualEncoder(spec.depth, arch.encoder_levels, arch.encoder_channels)
    if name == 'decoder':
        return PositionDecoder(receptive_field_size, spec.width, spec.height, arch.decoder_channels)
    if name == 'critic':
        return PatchCritic(arch.critic_channels)
    if name == 'splice_net':
        return SpliceNet((spec.height, spec.width), arch.splice_levels, arch.splice_channels)
    if name == 'classifier':
        shape = (spec.height - receptive_field_size + 1, spec.width - receptive_field_size + 1)
        return StegaposClassifier(shape, spec.width)
    raise ValueError(f'Unknown model {name}')


def build_models(spec: poscodes.CodeSpec, receptive_field_size: int,
                 arch: ArchConfig = ArchConfig(), names: Iterable[str] = MODEL_NAMES) -> Dict[str, nn.Module]:
    return {name: build_model(name, spec, receptive_field_size, arch) for name in names}


def codes_tensor(codes: poscodes.CodeField) -> torch.Tensor:
    """H x W x D code field as a 1 x D x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(codes.values.transpose(2, 0, 1), dtype=np.float32))[None]


def encode(image: np.ndarray, codes: poscodes.CodeField,
           model: ResidualEncoder) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hides the code field in an image.

    :param image: H x W x 3 in [0, 1]
    :param codes: code field of the same size, depth matching the model
    :param model: residual encoder
    :return: (stego, residual) with stego in [0, 1] and |residual| <= 0.2
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f'Expected an H x W x 3 image, got {image.shape}')
    if image.shape[:2] != codes.values.shape[:2]:
        raise ShapeError(f'Image {image.shape[:2]} and code field {codes.values.shape[:2]} differ in size')
    if codes.values.shape[-1] != model.code_depth:
        raise ShapeError(f'Code depth {codes.values.shape[-1]} does not match encoder depth {model.code_depth}')
    model.eval()
    with torch.no_grad():
        stego, residual = embed(model, imaging.to_tensor(image), codes_tensor(codes))
    return imaging.to_numpy(stego)[0], imaging.to_numpy(residual)[0]


def encode_batch(images: np.ndarray, codes: poscodes.CodeField, model: ResidualEncoder,
                 batch_size: int = 16) -> np.ndarray:
    """Encodes N x H x W x 3 images in chunks and returns the N x H x W x 3 stego images."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:3] != codes.values.shape[:2]:
        raise ShapeError(f'Images {images.shape} do not match code field {codes.values.shape[:2]}')
    model.eval()
    code_batch = codes_tensor(codes)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            stego, _ = embed(model, imaging.to_tensor(images[start:start + batch_size]), code_batch)
            chunks.append(imaging.to_numpy(stego))
    return np.concatenate(chunks) if chunks else np.zeros_like(images)


def decode_batch(images: np.ndarray, model: PositionDecoder, batch_size: int = 16) -> np.ndarray:
    """Decodes N same-size images into N x rows x cols x 2 fields."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(model(imaging.to_tensor(images[start:start + batch_size])).permute(0, 2, 3, 1).numpy())
    return np.concatenate(chunks)


def decode_positions(image: np.ndarray, model: PositionDecoder) -> np.ndarray:
    """Returns the (N - R + 1) x (M - R + 1) x 2 field; channel 0 is p_x (columns), channel 1 is p_y (rows)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f'Expected an H x W x 3 image, got {image.shape}')
    model.eval()
    with torch.no_grad():
        field = model(imaging.to_tensor(image))
    return field[0].permute(1, 2, 0).numpy()


def criticize(image: np.ndarray, model: PatchCritic) -> float:
    """Probability that the image is unencoded."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f'Expected an H x W x 3 image, got {image.shape}')
    model.eval()
    with torch.no_grad():
        return float(model(imaging.to_tensor(image))[0])


def splice_mask_net(image: np.ndarray, model: SpliceNet) -> np.ndarray:
    """Soft H x W splice mask; the image must have the canonical encode size."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[:2] != model.size:
        raise ShapeError(f'Splice network expects {model.size} images, got {image.shape[:2]}')
    model.eval()
    with torch.no_grad():
        return model(imaging.to_tensor(image))[0, 0].numpy()
