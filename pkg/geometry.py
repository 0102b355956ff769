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

"""Ideal positional fields and the least squares crop/scale estimator.

Fields are rows x cols x 2 arrays. Channel 0 holds x (column) coordinates and
channel 1 holds y (row) coordinates, both in pixels of the original frame.
"""
import dataclasses
import math
from typing import Tuple, Union

from absl import logging
import numpy as np
from scipy import linalg

# Slopes below this (scales above 1e6) are treated as a flat field.
_MIN_SLOPE = 1e-6

Scale = Union[float, Tuple[float, float]]


class ContractError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class CropScaleEstimate:
    mu_x: float
    mu_y: float
    s_x: float
    s_y: float
    rms_residual_x: float
    rms_residual_y: float
    degenerate: bool = False

    @property
    def s(self) -> float:
        return (self.s_x + self.s_y) / 2

    @property
    def rms_residual(self) -> float:
        return math.hypot(self.rms_residual_x, self.rms_residual_y) / math.sqrt(2)

    def __str__(self):
        if self.degenerate:
            return 'not stegapos: positional field has no usable ramp'
        return (f'offset ({self.mu_x:.2f}, {self.mu_y:.2f}) scale {self.s:.4f} '
                f'(x {self.s_x:.4f}, y {self.s_y:.4f}) rms residual {self.rms_residual:.2f}px')


def _scales(s: Scale) -> Tuple[float, float]:
    s_x, s_y = (s, s) if np.isscalar(s) else s
    if s_x <= 0 or s_y <= 0:
        raise ContractError(f'Scale must be positive, got {s}')
    return float(s_x), float(s_y)


def ideal_field(mu: Tuple[float, float], s: Scale, out_shape: Tuple[int, int],
                receptive_field: int) -> np.ndarray:
    """
    Positional field of an image cropped at offset mu and downsampled by s.

    P_x(row, col) = mu_x + (R // 2 + col) / s_x and P_y(row, col) = mu_y + (R // 2 + row) / s_y.

    :param mu: (mu_x, mu_y) top-left offset in original pixels
    :param s: scale, or (s_x, s_y) for anisotropic scaling
    :param out_shape: (rows, cols) of the field
    :param receptive_field: decoder receptive field R
    :return: rows x cols x 2 field
    """
    s_x, s_y = _scales(s)
    rows, cols = out_shape
    if rows < 1 or cols < 1:
        raise ContractError(f'Field shape must be positive, got {out_shape}')
    half = receptive_field // 2
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    return np.stack([mu[0] + (half + xs) / s_x, mu[1] + (half + ys) / s_y], axis=-1)


def _fit_axis(values: np.ndarray, positions: np.ndarray) -> Tuple[float, float, float]:
    """Least squares fit of values = mu + t * positions. Returns (mu, t, rms residual)."""
    design = np.stack([np.ones_like(positions), positions], axis=-1)
    (mu, t), _, _, _ = linalg.lstsq(design, values)
    rms = math.sqrt(np.mean((values - design @ np.array([mu, t])) ** 2))
    return float(mu), float(t), rms


def regress_crop_scale(field: np.ndarray, receptive_field: int) -> CropScaleEstimate:
    """
    Estimates crop offset and scale from a decoded positional field.

    The ideal field is affine in (mu, t = 1 / s), so each axis is an ordinary least squares line fit;
    s is recovered as 1 / t. Flat or reversed ramps give an estimate flagged as degenerate.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[-1] != 2:
        raise ContractError(f'Expected a rows x cols x 2 field, got {field.shape}')
    rows, cols = field.shape[:2]
    if rows < 2 or cols < 2:
        raise ContractError(f'Need at least 2 x 2 positions to fit a ramp, got {rows} x {cols}')
    half = receptive_field // 2
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    mu_x, t_x, rms_x = _fit_axis(field[..., 0].ravel(), (half + xs).ravel())
    mu_y, t_y, rms_y = _fit_axis(field[..., 1].ravel(), (half + ys).ravel())
    slopes = np.array([t_x, t_y])
    if not np.all(np.isfinite(slopes)) or np.any(slopes <= _MIN_SLOPE):
        logging.warning('Degenerate positional field: slopes (%f, %f)', t_x, t_y)
        return CropScaleEstimate(mu_x, mu_y, float('nan'), float('nan'), rms_x, rms_y, degenerate=True)
    return CropScaleEstimate(mu_x, mu_y, 1. / t_x, 1. / t_y, rms_x, rms_y)


def field_deviation(field: np.ndarray, estimate: CropScaleEstimate, receptive_field: int) -> np.ndarray:
    """Per-position deviation from the fitted ideal field at the mean scale, max(|dx|, |dy|)."""
    if estimate.degenerate:
        raise ContractError('Cannot compute deviations from a degenerate estimate')
    ideal = ideal_field((estimate.mu_x, estimate.mu_y), estimate.s, field.shape[:2], receptive_field)
    return np.abs(np.asarray(field, dtype=np.float64) - ideal).max(axis=-1)


def objective(field: np.ndarray, mu: Tuple[float, float], s: Scale, receptive_field: int) -> float:
    """Summed squared error between a field and an ideal field."""
    ideal = ideal_field(mu, s, field.shape[:2], receptive_field)
    return float(np.sum((np.asarray(field, dtype=np.float64) - ideal) ** 2))
