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

"""Image corpora and synthetic crop, splice and distortion benchmarks."""
import copy
import dataclasses
import enum
import math
import pathlib
from typing import Any, Callable, Iterable, List, Mapping, Optional, Sequence, Text, Tuple, Union

from absl import logging
import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from scipy import ndimage

import imaging
import poscodes

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.bmp', '.gif', '.tif', '.tiff', '.webp', '.ppm', '.npy')
MANIFEST_COLUMNS = ('case_id', 'source', 'mu_x', 'mu_y', 'crop_w', 'crop_h', 's', 'scheme', 'mask_file')

# Encodes one H x W x 3 image with the given code field and returns the stego image.
EncodeFn = Callable[[np.ndarray, poscodes.CodeField], np.ndarray]
PathLike = Union[Text, pathlib.Path]


class CorpusError(ValueError):
    pass


class ContractError(ValueError):
    pass


class MaskShape(enum.Enum):
    CIRCLE = 'circle'
    SQUARE = 'square'
    RECTANGLE = 'rectangle'
    HALF_PLANE = 'half-plane'
    TRIANGLE = 'triangle'


TRAINING_SHAPES = (MaskShape.CIRCLE, MaskShape.SQUARE)
DONOR_SHIFT_RANGE = (0.25, 0.75)


class Scheme(enum.Enum):
    EE = 'ee'
    EU = 'eu'


class Corpus:
    """Canonical-size images in [0, 1] with the names they were loaded from."""

    def __init__(self, images: np.ndarray, names: Sequence[Text]):
        if len(images) != len(names):
            raise CorpusError(f'{len(images)} images but {len(names)} names')
        self._images = np.asarray(images, dtype=np.float32)
        self._names = list(names)

    @property
    def images(self) -> np.ndarray:
        return self._images

    @property
    def names(self) -> List[Text]:
        return copy.copy(self._names)

    @property
    def size(self) -> Optional[Tuple[int, int]]:
        return tuple(self._images.shape[1:3]) if len(self._images) else None

    def __len__(self):
        return len(self._names)

    def __getitem__(self, index: int) -> np.ndarray:
        return self._images[index]

    def split(self, held_out: int) -> Tuple['Corpus', 'Corpus']:
        """Deterministic split; the last `held_out` images form the second corpus."""
        if not 0 <= held_out <= len(self):
            raise CorpusError(f'Cannot hold out {held_out} of {len(self)} images')
        cut = len(self) - held_out
        return Corpus(self._images[:cut], self._names[:cut]), Corpus(self._images[cut:], self._names[cut:])

    def __str__(self):
        return f'{len(self)} images of {self.size}'


def _center_crop_resize(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    rows, cols = image.shape[:2]
    target = size[0] / size[1]
    if rows / cols > target:
        keep = max(1, round(cols * target))
        top = (rows - keep) // 2
        image = image[top:top + keep]
    else:
        keep = max(1, round(rows / target))
        left = (cols - keep) // 2
        image = image[:, left:left + keep]
    return np.clip(imaging.resize_image(image, size), 0., 1.)


def load_corpus(path: PathLike, size: Tuple[int, int] = (128, 128), limit: Optional[int] = None) -> Corpus:
    """
    Reads every image file in a directory, sorted by file name.

    Images are center-cropped to the aspect ratio of `size` and resampled to it. Unreadable files are
    skipped with a warning.

    :param path: directory of images
    :param size: canonical (height, width)
    :param limit: keep at most this many images, in file name order
    :return: Corpus
    """
    directory = pathlib.Path(path)
    if not directory.is_dir():
        raise CorpusError(f'{directory} is not a directory')
    files = sorted(entry for entry in directory.iterdir() if entry.suffix.lower() in IMAGE_SUFFIXES)
    images, names = [], []
    skipped = 0
    for file in files:
        if limit is not None and len(images) >= limit:
            break
        try:
            image = imaging.load_image(file)
        except imaging.ImageError as e:
            logging.warning('Skipping %s: %s', file, e)
            skipped += 1
            continue
        images.append(_center_crop_resize(image, size))
        names.append(file.name)
    if not images:
        raise CorpusError(f'No readable images in {directory}')
    logging.info('Loaded %d images from %s (%d files skipped)', len(images), directory, skipped)
    return Corpus(np.stack(images), names)


def _procedural_image(rng: np.random.Generator, size: Tuple[int, int]) -> np.ndarray:
    rows, cols = size
    ys, xs = np.mgrid[0:rows, 0:cols] / max(rows, cols)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xs + np.sin(angle) * ys
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) or 1.)
    start, end = rng.uniform(0, 1, size=3), rng.uniform(0, 1, size=3)
    image = start + ramp[..., None] * (end - start)

    sigma = rng.uniform(1., 6.)
    noise = ndimage.gaussian_filter(rng.normal(size=(rows, cols, 3)), sigma=(sigma, sigma, 0))
    image = image + rng.uniform(0.05, 0.2) * noise / (noise.std() or 1.)

    canvas = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(2, 7)):
        box = np.sort(rng.integers(0, [cols, rows, cols, rows]).reshape(2, 2), axis=0).ravel()
        x0, y0, x1, y1 = (int(v) for v in box)
        fill = tuple(int(v) for v in rng.integers(0, 256, size=3))
        kind = rng.integers(3)
        if kind == 0:
            draw.ellipse((x0, y0, x1, y1), fill=fill)
        elif kind == 1:
            draw.rectangle((x0, y0, x1, y1), fill=fill)
        else:
            points = [(int(x), int(y)) for x, y in zip(rng.integers(0, cols, 3), rng.integers(0, rows, 3))]
            draw.polygon(points, fill=fill)
    # Short pen strokes stand in for text.
    for _ in range(rng.integers(1, 4)):
        x, y = rng.integers(0, cols), rng.integers(0, rows)
        stroke = [(int(x), int(y))]
        for _ in range(rng.integers(3, 9)):
            x = int(np.clip(x + rng.integers(-8, 9), 0, cols - 1))
            y = int(np.clip(y + rng.integers(-8, 9), 0, rows - 1))
            stroke.append((x, y))
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        draw.line(stroke, fill=color, width=int(rng.integers(1, 4)))
    return np.asarray(canvas, dtype=np.float32) / 255.


def procedural_corpus(n: int, seed: int = 0, size: Tuple[int, int] = (128, 128)) -> Corpus:
    """
    Deterministic synthetic images: colour gradients, filtered noise, filled shapes and pen strokes.

    Image i depends only on (seed, i), so any slice can be generated independently.
    """
    if n < 0:
        raise CorpusError(f'Corpus size must be non-negative, got {n}')
    children = np.random.SeedSequence(seed).spawn(n)
    images = [_procedural_image(np.random.default_rng(child), size) for child in children]
    stacked = np.stack(images) if images else np.zeros((0,) + tuple(size) + (3,), dtype=np.float32)
    logging.info('Generated %d procedural images (seed %d)', n, seed)
    return Corpus(stacked, [f'procedural-{seed}-{i:05d}' for i in range(n)])


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    rows, cols = size
    if rows < 1 or cols < 1:
        raise ContractError(f'Mask size must be positive, got {size}')
    return int(rows), int(cols)


def make_mask(shape: Union[MaskShape, Text], params: Mapping[Text, Any], size: Tuple[int, int]) -> np.ndarray:
    """
    Binary uint8 mask. Parameters per shape, in pixels with pixel centres at (i + 0.5):
      circle      cx, cy, radius
      square      x0, y0, side
      rectangle   x0, y0, w, h
      half-plane  angle (radians), offset: points with (p - centre) . (cos, sin) > offset
      triangle    vertices: three (x, y) pairs
    """
    shape = MaskShape(shape)
    rows, cols = _check_size(size)
    ys, xs = np.mgrid[0:rows, 0:cols] + 0.5
    if shape is MaskShape.CIRCLE:
        mask = (xs - params['cx']) ** 2 + (ys - params['cy']) ** 2 < params['radius'] ** 2
    elif shape in (MaskShape.SQUARE, MaskShape.RECTANGLE):
        w = params['side'] if shape is MaskShape.SQUARE else params['w']
        h = params['side'] if shape is MaskShape.SQUARE else params['h']
        x0, y0 = params['x0'], params['y0']
        mask = (xs > x0) & (xs < x0 + w) & (ys > y0) & (ys < y0 + h)
    elif shape is MaskShape.HALF_PLANE:
        angle = params['angle']
        projection = (xs - cols / 2) * np.cos(angle) + (ys - rows / 2) * np.sin(angle)
        mask = projection > params['offset']
    else:
        canvas = Image.new('L', (cols, rows), 0)
        ImageDraw.Draw(canvas).polygon([tuple(map(float, v)) for v in params['vertices']], fill=1)
        mask = np.asarray(canvas) > 0
    return mask.astype(np.uint8)


def _triangle_params(rng: np.random.Generator, area: float, rows: int, cols: int) -> Mapping[Text, Any]:
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-.4, .4, 3)
    unit = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    (x1, y1), (x2, y2), (x3, y3) = unit
    unit_area = abs((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)) / 2
    radius = min(math.sqrt(area / unit_area), min(rows, cols) / 2)
    cx = rng.uniform(radius, cols - radius)
    cy = rng.uniform(radius, rows - radius)
    return {'vertices': [(cx + radius * x, cy + radius * y) for x, y in unit]}


def random_mask(rng: np.random.Generator, size: Tuple[int, int], area_range: Tuple[float, float] = (0.1, 0.5),
                shapes: Iterable[MaskShape] = tuple(MaskShape)) -> Tuple[np.ndarray, MaskShape]:
    """Draws a shape and parameters whose area is close to a fraction drawn uniformly from area_range."""
    rows, cols = _check_size(size)
    shapes = tuple(shapes)
    shape = shapes[rng.integers(len(shapes))]
    area = rng.uniform(*area_range) * rows * cols
    if shape is MaskShape.CIRCLE:
        radius = min(math.sqrt(area / math.pi), min(rows, cols) / 2)
        params = {'cx': rng.uniform(radius, cols - radius), 'cy': rng.uniform(radius, rows - radius),
                  'radius': radius}
    elif shape is MaskShape.SQUARE:
        side = min(math.sqrt(area), rows, cols)
        params = {'x0': rng.uniform(0, cols - side), 'y0': rng.uniform(0, rows - side), 'side': side}
    elif shape is MaskShape.RECTANGLE:
        w = min(math.sqrt(area * rng.uniform(0.5, 2.)), cols)
        h = min(area / w, rows)
        params = {'x0': rng.uniform(0, cols - w), 'y0': rng.uniform(0, rows - h), 'w': w, 'h': h}
    elif shape is MaskShape.HALF_PLANE:
        angle = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:rows, 0:cols] + 0.5
        projection = (xs - cols / 2) * np.cos(angle) + (ys - rows / 2) * np.sin(angle)
        params = {'angle': angle, 'offset': float(np.quantile(projection, 1 - area / (rows * cols)))}
    else:
        params = _triangle_params(rng, area, rows, cols)
    return make_mask(shape, params, size), shape


@dataclasses.dataclass(frozen=True)
class CropCase:
    case_id: Text
    source: int
    mu_x: int
    mu_y: int
    crop_w: int
    crop_h: int
    s: float = 1.

    @property
    def output_size(self) -> Tuple[int, int]:
        return int(self.s * self.crop_h), int(self.s * self.crop_w)

    def manifest_row(self) -> dict:
        return {'case_id': self.case_id, 'source': self.source, 'mu_x': self.mu_x, 'mu_y': self.mu_y,
                'crop_w': self.crop_w, 'crop_h': self.crop_h, 's': self.s, 'scheme': '', 'mask_file': ''}


def apply_crop(image: np.ndarray, case: CropCase) -> np.ndarray:
    """Crops the recorded window, then resamples by s."""
    rows, cols = image.shape[:2]
    if not (0 <= case.mu_x and case.mu_x + case.crop_w <= cols and 0 <= case.mu_y
            and case.mu_y + case.crop_h <= rows):
        raise ContractError(f'Crop window of {case.case_id} lies outside the {rows} x {cols} frame')
    crop = image[case.mu_y:case.mu_y + case.crop_h, case.mu_x:case.mu_x + case.crop_w]
    if case.s == 1.:
        return np.array(crop)
    return imaging.resize_image(crop, case.output_size)


def make_crop_benchmark(images: np.ndarray, n_cases: int, seed: int, scales: Sequence[float] = (1.,),
                        min_side: int = 1) -> Tuple[List[CropCase], List[np.ndarray]]:
    """
    Random crops with per-side sizes uniform over [W / 4, W] and offsets uniform over valid positions.

    :param images: N x H x W x 3 source images, normally already encoded
    :param scales: post-crop scales, one drawn per case
    :param min_side: crops are enlarged so that the scaled crop keeps at least this many pixels per side
    :return: (cases, cropped images)
    """
    if not len(images):
        raise CorpusError('Cannot build a crop benchmark from no images')
    rows, cols = images.shape[1:3]
    rng = np.random.default_rng(seed)
    cases, crops = [], []
    for index in range(n_cases):
        s = float(scales[rng.integers(len(scales))])
        crop_w = int(rng.integers(cols // 4, cols + 1))
        crop_h = int(rng.integers(rows // 4, rows + 1))
        crop_w = min(cols, max(crop_w, math.ceil(min_side / s)))
        crop_h = min(rows, max(crop_h, math.ceil(min_side / s)))
        case = CropCase(f'crop-{index:05d}', int(rng.integers(len(images))), int(rng.integers(0, cols - crop_w + 1)),
                        int(rng.integers(0, rows - crop_h + 1)), crop_w, crop_h, s)
        cases.append(case)
        crops.append(apply_crop(images[case.source], case))
    return cases, crops


@dataclasses.dataclass(frozen=True, eq=False)
class SpliceCase:
    case_id: Text
    sources: Tuple[int, ...]
    mask: np.ndarray
    scheme: Scheme
    shape: MaskShape
    donor_shift: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not 1 <= len(self.sources) <= 2:
            raise ContractError(f'A splice needs one or two sources, got {self.sources}')
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError(f'Mask of {self.case_id} is not binary')

    @property
    def host(self) -> int:
        return self.sources[0]

    @property
    def donor(self) -> int:
        return self.sources[-1]

    def manifest_row(self, mask_file: Text = '') -> dict:
        rows, cols = self.mask.shape
        return {'case_id': self.case_id, 'source': '+'.join(str(source) for source in self.sources), 'mu_x': 0,
                'mu_y': 0, 'crop_w': cols, 'crop_h': rows, 's': 1., 'scheme': self.scheme.value,
                'mask_file': mask_file}


def composite_splice(case: SpliceCase, images: np.ndarray, encode: EncodeFn,
                     codes: poscodes.CodeField) -> Tuple[np.ndarray, np.ndarray]:
    """
    Blends donor content into an encoded host: M * I1 + (1 - M) * I2.

    The host I2 is always encoded. The donor I1 is encoded only in the `ee` scheme and is translated by
    donor_shift (with wrap-around), so its codes disagree with where it lands.

    :return: (composite, mask)
    """
    host = images[case.host]
    if case.mask.shape != host.shape[:2]:
        raise ContractError(f'Mask {case.mask.shape} does not match image {host.shape[:2]}')
    host = encode(host, codes)
    donor = images[case.donor]
    if case.scheme is Scheme.EE:
        donor = encode(donor, codes) if case.donor != case.host else host
    dx, dy = case.donor_shift
    donor = np.roll(donor, shift=(dy, dx), axis=(0, 1))
    mask = case.mask.astype(np.float32)[..., None]
    return mask * donor + (1 - mask) * host, case.mask


def self_composite(image: np.ndarray, mask: np.ndarray, encode: EncodeFn, spec: poscodes.CodeSpec,
                   shift: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Splices an image with a copy of itself encoded at shifted positions.

    :return: (composite, plain encode, shifted encode)
    """
    if mask.shape != image.shape[:2]:
        raise ContractError(f'Mask {mask.shape} does not match image {image.shape[:2]}')
    plain = encode(image, poscodes.make_code_field(spec))
    shifted = encode(image, poscodes.make_code_field(spec, shift))
    weight = mask.astype(np.float32)[..., None]
    return weight * shifted + (1 - weight) * plain, plain, shifted


def make_splice_benchmark(n_images: int, size: Tuple[int, int], n_cases: int, seed: int,
                          schemes: Sequence[Scheme] = tuple(Scheme),
                          shapes: Sequence[MaskShape] = tuple(MaskShape),
                          area_range: Tuple[float, float] = (0.1, 0.5),
                          donor_shift_range: Tuple[float, float] = DONOR_SHIFT_RANGE) -> List[SpliceCase]:
    """
    Matched splice cases: each geometry (sources, mask, donor shift) is emitted once per scheme.

    :param donor_shift_range: donor shifts are drawn per axis from [low * W, high * W] (and likewise for H);
        (0, 0) leaves the donor in place, so a mask of ones reproduces the donor exactly
    """
    if n_images < 1:
        raise CorpusError('Cannot build a splice benchmark from no images')
    low, high = donor_shift_range
    if not 0 <= low <= high <= 1:
        raise ContractError(f'Donor shift range must satisfy 0 <= low <= high <= 1, got {donor_shift_range}')
    rows, cols = size
    rng = np.random.default_rng(seed)
    cases = []
    for index in range(n_cases):
        if n_images > 1:
            host, donor = (int(i) for i in rng.choice(n_images, size=2, replace=False))
            sources = (host, donor)
        else:
            sources = (0,)
        mask, shape = random_mask(rng, size, area_range, shapes)
        shift = (int(rng.integers(int(low * cols), int(high * cols) + 1)),
                 int(rng.integers(int(low * rows), int(high * rows) + 1)))
        for scheme in schemes:
            cases.append(SpliceCase(f'splice-{index:05d}-{scheme.value}', sources, mask, scheme, shape, shift))
    return cases


def add_noise(image: np.ndarray, sigma: float, seed: Union[int, np.random.Generator] = 0) -> np.ndarray:
    """I.i.d. zero-mean Gaussian noise with standard deviation sigma (a fraction of full range), clamped."""
    if sigma < 0:
        raise ContractError(f'Noise level must be non-negative, got {sigma}')
    if sigma == 0:
        return np.array(image, dtype=np.float32)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.clip(image + rng.normal(0., sigma, size=np.shape(image)), 0., 1.).astype(np.float32)


def adjust_tone(image: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma tone curve, a global brightness distortion."""
    if gamma <= 0:
        raise ContractError(f'Gamma must be positive, got {gamma}')
    return np.clip(np.power(np.clip(image, 0., 1.), gamma), 0., 1.).astype(np.float32)


def write_manifest(rows: Iterable[Mapping[Text, Any]], path: PathLike) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=MANIFEST_COLUMNS)
    pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logging.info('Wrote %d manifest rows to %s', len(frame), path)
    return frame
