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

"""Raster helpers shared by every module.

Images are H x W x 3 float arrays in [0, 1]; batches are N x 3 x H x W tensors.
All resampling goes through `resize`, antialiased bilinear.
"""
import pathlib
from typing import Tuple, Union

from absl import logging
import numpy as np
from PIL import Image
import torch
import torch.nn.functional as F

PathLike = Union[str, pathlib.Path]

_BT601_LUMA = (0.299, 0.587, 0.114)
_BT601_U = 0.492
_BT601_V = 0.877


class ImageError(ValueError):
    pass


def load_image(path: PathLike) -> np.ndarray:
    """Reads an RGB image as float32 in [0, 1]. `.npy` files are read losslessly."""
    path = pathlib.Path(path)
    if path.suffix == '.npy':
        image = np.load(path, allow_pickle=False).astype(np.float32)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ImageError(f'{path} does not hold an H x W x 3 array')
        return image
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert('RGB'), dtype=np.float32) / 255.
    except (OSError, ValueError) as e:
        raise ImageError(f'Cannot read {path}: {e}') from e


def save_image(path: PathLike, image: np.ndarray) -> None:
    """Writes an image; `.npy` keeps full precision, anything else is quantized to 8 bits."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.clip(np.asarray(image, dtype=np.float32), 0., 1.)
    if path.suffix == '.npy':
        np.save(path, image)
    else:
        Image.fromarray(np.round(image * 255.).astype(np.uint8)).save(path)
    logging.debug('Wrote %s', path)


def save_mask(path: PathLike, mask: np.ndarray) -> None:
    """Writes a binary mask as a single channel 0/255 image."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask > 0, 255, 0).astype(np.uint8)).save(path)


def load_mask(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return (np.asarray(img.convert('L')) > 127).astype(np.uint8)
    except (OSError, ValueError) as e:
        raise ImageError(f'Cannot read mask {path}: {e}') from e


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """H x W x C or N x H x W x C numpy to N x C x H x W float32."""
    array = np.asarray(images, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4:
        raise ImageError(f'Expected an image or a batch of images, got shape {array.shape}')
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


def to_numpy(batch: torch.Tensor) -> np.ndarray:
    """N x C x H x W tensor to N x H x W x C numpy."""
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1)


def resize(batch: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Antialiased bilinear resampling to (rows, cols)."""
    if tuple(batch.shape[-2:]) == tuple(size):
        return batch
    return F.interpolate(batch, size=tuple(size), mode='bilinear', align_corners=False, antialias=True)


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    return to_numpy(resize(to_tensor(image), size))[0]


def rgb_to_yuv(batch: torch.Tensor) -> torch.Tensor:
    """BT.601 conversion on the channel axis (dim 1)."""
    r, g, b = batch[:, 0], batch[:, 1], batch[:, 2]
    y = _BT601_LUMA[0] * r + _BT601_LUMA[1] * g + _BT601_LUMA[2] * b
    return torch.stack([y, _BT601_U * (b - y), _BT601_V * (r - y)], dim=1)


def psnr(reference: Union[np.ndarray, torch.Tensor], test: Union[np.ndarray, torch.Tensor]) -> float:
    """Peak signal to noise ratio in dB for signals in [0, 1]."""
    reference = np.asarray(reference.detach().cpu() if torch.is_tensor(reference) else reference, dtype=np.float64)
    test = np.asarray(test.detach().cpu() if torch.is_tensor(test) else test, dtype=np.float64)
    mse = np.mean((reference - test) ** 2)
    if mse == 0:
        return float('inf')
    return float(10. * np.log10(1. / mse))
