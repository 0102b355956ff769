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

"""Statistics of encoder residuals: histograms, mean colour and the PCA colour plane."""
import dataclasses
import os
from typing import Text, Tuple, Union

from absl import logging
import matplotlib
matplotlib.use('Agg')
from matplotlib import pyplot as plt
import numpy as np
from scipy import linalg
from scipy import ndimage

import networks

HISTOGRAM_BINS = 64
STATS_COLUMNS = ('image', 'mean_r', 'mean_g', 'mean_b', 'residual_std', 'residual_top2', 'image_top2',
                 'image_plane_fraction', 'hist_distance_image', 'hist_distance_band_pass', 'degenerate')
_EPSILON = 1e-12

PathLike = Union[Text, os.PathLike]


class ContractError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class ColourPCA:
    """
    Principal axes of a cloud of RGB values.

    :param mean: mean colour
    :param directions: 3 x 3, column i is the i-th principal direction
    :param fractions: explained variance per direction, descending, summing to 1
    :param degenerate: the cloud has no variance; directions are the identity
    """
    mean: np.ndarray
    directions: np.ndarray
    fractions: np.ndarray
    degenerate: bool = False

    @property
    def top2(self) -> float:
        return float(self.fractions[0] + self.fractions[1])

    @property
    def plane(self) -> np.ndarray:
        return self.directions[:, :2]


def _colours(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != 3:
        raise ContractError(f'Expected RGB values in the last axis, got {values.shape}')
    colours = values.reshape(-1, 3)
    if len(colours) < 3:
        raise ContractError(f'Need at least 3 pixels, got {len(colours)}')
    return colours


def channel_histogram(values: np.ndarray, bins: int = HISTOGRAM_BINS,
                      bound: float = networks.RESIDUAL_BOUND) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-channel histograms over [-bound, bound], each normalized to sum to 1. Values outside are clipped
    into the end bins.

    :return: (3 x bins histogram, bins + 1 edges)
    """
    colours = np.clip(_colours(values), -bound, bound)
    edges = np.linspace(-bound, bound, bins + 1)
    counts = np.stack([np.histogram(colours[:, channel], bins=edges)[0] for channel in range(3)])
    return counts / counts.sum(axis=1, keepdims=True), edges


def residual_histogram(residual: np.ndarray, bins: int = HISTOGRAM_BINS) -> Tuple[np.ndarray, np.ndarray]:
    return channel_histogram(residual, bins, networks.RESIDUAL_BOUND)


def histogram_distance(first: np.ndarray, second: np.ndarray) -> float:
    """Total variation distance between normalized histograms, averaged over channels."""
    if first.shape != second.shape:
        raise ContractError(f'Histogram shapes differ: {first.shape} vs {second.shape}')
    return float(np.mean(0.5 * np.abs(first - second).sum(axis=-1)))


def colour_pca(values: np.ndarray) -> ColourPCA:
    """Eigendecomposition of the mean-centred 3 x 3 colour covariance."""
    colours = _colours(values)
    mean = colours.mean(axis=0)
    centred = colours - mean
    covariance = centred.T @ centred / len(colours)
    eigenvalues, eigenvectors = linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0., None)
    total = eigenvalues.sum()
    if total <= _EPSILON:
        logging.warning('Colour cloud of %d pixels has no variance', len(colours))
        return ColourPCA(mean, np.eye(3), np.array([1., 0., 0.]), degenerate=True)
    return ColourPCA(mean, eigenvectors[:, order], eigenvalues / total)


def residual_pca(residual: np.ndarray) -> ColourPCA:
    return colour_pca(residual)


def plane_fraction(values: np.ndarray, plane: np.ndarray) -> float:
    """Share of the mean-centred colour variance captured by projecting onto a plane (3 x 2, orthonormal)."""
    colours = _colours(values)
    centred = colours - colours.mean(axis=0)
    total = np.sum(centred ** 2)
    if total <= _EPSILON:
        return 1.
    return float(np.sum((centred @ plane) ** 2) / total)


def band_pass(image: np.ndarray, fine: float = 1., coarse: float = 3.) -> np.ndarray:
    """Difference of Gaussians per channel."""
    image = np.asarray(image, dtype=np.float64)
    return (ndimage.gaussian_filter(image, sigma=(fine, fine, 0))
            - ndimage.gaussian_filter(image, sigma=(coarse, coarse, 0)))


def residual_stats(image: np.ndarray, residual: np.ndarray, name: Text = '') -> dict:
    """One row of STATS_COLUMNS comparing a residual with the image it was added to."""
    if np.shape(image) != np.shape(residual):
        raise ContractError(f'Image {np.shape(image)} and residual {np.shape(residual)} differ in shape')
    pca = residual_pca(residual)
    image_pca = colour_pca(image)
    histogram, _ = residual_histogram(residual)
    centred_image = np.asarray(image) - np.mean(_colours(image), axis=0)
    image_histogram, _ = channel_histogram(centred_image)
    band_histogram, _ = channel_histogram(band_pass(image))
    return {
        'image': name,
        'mean_r': float(pca.mean[0]),
        'mean_g': float(pca.mean[1]),
        'mean_b': float(pca.mean[2]),
        'residual_std': float(np.std(residual)),
        'residual_top2': pca.top2,
        'image_top2': image_pca.top2,
        'image_plane_fraction': plane_fraction(image, pca.plane),
        'hist_distance_image': histogram_distance(histogram, image_histogram),
        'hist_distance_band_pass': histogram_distance(histogram, band_histogram),
        'degenerate': pca.degenerate,
    }


def plot_histograms(image: np.ndarray, residual: np.ndarray, path: PathLike) -> None:
    """Residual, mean-centred image and band-passed image histograms side by side."""
    centred_image = np.asarray(image) - np.mean(_colours(image), axis=0)
    panels = (('residual', residual), ('image (centred)', centred_image), ('band-pass', band_pass(image)))
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    for ax, (title, values) in zip(axes, panels):
        histogram, edges = channel_histogram(values)
        centres = (edges[:-1] + edges[1:]) / 2
        for channel, colour in enumerate(('red', 'green', 'blue')):
            ax.plot(centres, histogram[channel], color=colour, linewidth=1)
        ax.set_title(title)
        ax.set_xlabel('value')
    axes[0].set_ylabel('fraction of pixels')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_pca_plane(residual: np.ndarray, path: PathLike, max_points: int = 5000, seed: int = 0) -> None:
    """Residual colours projected onto their first two principal directions."""
    pca = residual_pca(residual)
    colours = _colours(residual)
    if len(colours) > max_points:
        colours = colours[np.random.default_rng(seed).choice(len(colours), max_points, replace=False)]
    projected = (colours - pca.mean) @ pca.plane
    fig, ax = plt.subplots(1, 1, figsize=(5, 5))
    ax.scatter(projected[:, 0], projected[:, 1], s=1, alpha=0.3)
    ax.set_xlabel(f'v1 ({pca.fractions[0]:.1%})')
    ax.set_ylabel(f'v2 ({pca.fractions[1]:.1%})')
    ax.set_aspect('equal')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
