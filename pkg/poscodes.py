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

"""Frequency based positional code fields.

Channel layout: for k = 1 ... D/4, the 4-block
(cos w_k x, sin w_k x, cos w_k y, sin w_k y) with w_k = w_o ** (4k / D).
Coordinates are 0-based pixel indices, x = column and y = row.
"""
import dataclasses
from typing import Tuple

from absl import logging
import numpy as np

# Coordinates start at pixel 0. Recorded in checkpoint manifests.
COORDINATE_ORIGIN = 0


class SpecError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class CodeSpec:
    depth: int = 8
    omega_base: float = 1e-4
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.depth < 4 or self.depth % 4:
            raise SpecError(f'Code depth must be a positive multiple of 4, got {self.depth}')
        if not 0 < self.omega_base < 1:
            raise SpecError(f'Base frequency must lie in (0, 1), got {self.omega_base}')
        if self.width < 1 or self.height < 1:
            raise SpecError(f'Code field size must be positive, got {self.width}x{self.height}')

    @property
    def frequencies(self) -> np.ndarray:
        """Returns w_k for k = 1 ... D/4, slowest last."""
        k = np.arange(1, self.depth // 4 + 1, dtype=np.float64)
        return self.omega_base ** (4 * k / self.depth)

    @property
    def period(self) -> float:
        """One period of the slowest frequency, in pixels."""
        return 2 * np.pi / self.frequencies[-1]


@dataclasses.dataclass(frozen=True, eq=False)
class CodeField:
    values: np.ndarray
    spec: CodeSpec
    shift: Tuple[float, float] = (0., 0.)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape


def _codes(xs: np.ndarray, ys: np.ndarray, spec: CodeSpec) -> np.ndarray:
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    blocks = []
    for omega in spec.frequencies:
        blocks.extend([np.cos(omega * xs), np.sin(omega * xs), np.cos(omega * ys), np.sin(omega * ys)])
    return np.stack(blocks, axis=-1)


def code_at(x: float, y: float, spec: CodeSpec) -> np.ndarray:
    """Gets the D-vector Psi(x, y, .)."""
    return _codes(np.asarray(x), np.asarray(y), spec)


def make_code_field(spec: CodeSpec, shift: Tuple[float, float] = (0., 0.)) -> CodeField:
    """
    Builds the H x W x D code field.

    A non-zero shift gives the phase-shifted field Psi^D(x, y) = Psi(x + dx, y + dy), used to encode
    content as though it sat at a different position.

    :param spec: Validated code parameters
    :param shift: (dx, dy) in pixels
    :return: CodeField with values in [-1, 1]
    """
    dx, dy = shift
    if max(spec.width, spec.height) > spec.period:
        logging.warning('Codes repeat every %.1f px, inside the %dx%d frame', spec.period, spec.width, spec.height)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    values = _codes(xs + dx, ys + dy, spec)
    return CodeField(values, spec, (float(dx), float(dy)))


def _rotate(pairs: np.ndarray, angle: float) -> np.ndarray:
    cos, sin = np.cos(angle), np.sin(angle)
    c, s = pairs[..., 0], pairs[..., 1]
    return np.stack([cos * c - sin * s, sin * c + cos * s], axis=-1)


def shift_code(codes_at_xy: np.ndarray, dx: float, dy: float, spec: CodeSpec) -> np.ndarray:
    """
    Moves code vectors by (dx, dy) using only the codes themselves.

    Each (cos, sin) pair is rotated by w_k * delta, so Psi(x + dx, y + dy) is a linear function of
    Psi(x, y) that depends only on the shift. Works on any array whose last axis has length D.
    """
    codes = np.asarray(codes_at_xy, dtype=np.float64)
    if codes.shape[-1] != spec.depth:
        raise SpecError(f'Expected {spec.depth} code channels, got {codes.shape[-1]}')
    shifted = np.empty_like(codes)
    for k, omega in enumerate(spec.frequencies):
        base = 4 * k
        shifted[..., base:base + 2] = _rotate(codes[..., base:base + 2], omega * dx)
        shifted[..., base + 2:base + 4] = _rotate(codes[..., base + 2:base + 4], omega * dy)
    return shifted
