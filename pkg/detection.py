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

"""Stegapos-or-not classification, crop/scale detection and splice masks."""
import abc
import dataclasses
import enum
from typing import Iterable, Optional, Sequence, Text, Tuple, Union

from absl import logging
import numpy as np
import pandas as pd
import torch

import config
import datasets
import geometry
import networks
import poscodes

ENCODED_THRESHOLD = 0.5
MASK_THRESHOLD = 0.5
ALPHA_GRID = np.geomspace(0.5, 200., 40)
RESULT_COLUMNS = ('image', 'method', 'alpha', 'f1', 'mu_x', 'mu_y', 's')


class ContractError(ValueError):
    pass


class SpliceTrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class StegaposVerdict:
    probability: float

    def __post_init__(self):
        if not 0. <= self.probability <= 1.:
            raise ContractError(f'Probability must lie in [0, 1], got {self.probability}')

    @property
    def is_encoded(self) -> bool:
        return self.probability > ENCODED_THRESHOLD

    def __str__(self):
        return f'{"encoded" if self.is_encoded else "not encoded"} (p = {self.probability:.4f})'


class SpliceMethod(enum.Enum):
    LINEAR_FIXED = 'linear-fixed'
    LINEAR_ORACLE = 'linear-oracle'
    NETWORK = 'network'


@dataclasses.dataclass(frozen=True, eq=False)
class SpliceResult:
    mask: np.ndarray
    method: SpliceMethod
    alpha: Optional[float] = None
    f1: Optional[float] = None
    estimate: Optional[geometry.CropScaleEstimate] = None

    def __post_init__(self):
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError('Splice masks must be binary')
        if self.f1 is not None and not 0. <= self.f1 <= 1.:
            raise ContractError(f'F1 must lie in [0, 1], got {self.f1}')

    def row(self, image: Text) -> dict:
        estimate = self.estimate
        usable = estimate is not None and not estimate.degenerate
        return {'image': image, 'method': self.method.value,
                'alpha': np.nan if self.alpha is None else self.alpha,
                'f1': np.nan if self.f1 is None else self.f1,
                'mu_x': estimate.mu_x if usable else np.nan,
                'mu_y': estimate.mu_y if usable else np.nan,
                's': estimate.s if usable else np.nan}


def f1_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2TP / (2TP + FP + FN); 1 when both masks are empty and 0 when exactly one is."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(f'Mask shapes differ: {pred.shape} vs {gt.shape}')
    if not pred.any() and not gt.any():
        return 1.
    if not pred.any() or not gt.any():
        return 0.
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    return 2 * tp / (2 * tp + fp + fn)


def _check_canonical(field: np.ndarray, classifier: networks.StegaposClassifier):
    if field.shape != classifier.field_shape + (2,):
        raise ContractError(f'Classifier expects a {classifier.field_shape} field, got {field.shape[:2]}')


def classify_stegapos(field: np.ndarray, classifier: networks.StegaposClassifier) -> StegaposVerdict:
    """Probability that the positional field was decoded from a stegapos image."""
    field = np.asarray(field, dtype=np.float32)
    _check_canonical(field, classifier)
    classifier.eval()
    with torch.no_grad():
        probability = float(classifier(torch.from_numpy(field)[None]))
    return StegaposVerdict(probability)


def classify_image(image: np.ndarray, decoder: networks.PositionDecoder,
                   classifier: networks.StegaposClassifier) -> StegaposVerdict:
    return classify_stegapos(_decode(image, decoder), classifier)


def _decode(image: np.ndarray, decoder: networks.PositionDecoder) -> np.ndarray:
    try:
        return networks.decode_positions(image, decoder)
    except networks.ShapeError as e:
        raise ContractError(str(e)) from e


def labelled_fields(encoder: networks.ResidualEncoder, decoder: networks.PositionDecoder, images: np.ndarray,
                    spec: poscodes.CodeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Decodes a balanced set: even-indexed images encoded (label 1), odd-indexed left plain (label 0)."""
    labels = (np.arange(len(images)) % 2 == 0).astype(np.float32)
    inputs = np.array(images, dtype=np.float32)
    encoded = labels == 1
    if encoded.any():
        inputs[encoded] = networks.encode_batch(inputs[encoded], poscodes.make_code_field(spec), encoder)
    return networks.decode_batch(inputs, decoder), labels


def train_classifier(encoder: networks.ResidualEncoder, decoder: networks.PositionDecoder, images: np.ndarray,
                     cfg: config.TrainConfig) -> networks.StegaposClassifier:
    """
    Fits the single-layer classifier with squared error against binary labels.

    Encoder and decoder stay frozen; half the images are encoded.
    """
    if len(images) < 2:
        raise ContractError('Need at least one encoded and one plain image to train the classifier')
    fields, labels = labelled_fields(encoder, decoder, images, cfg.code_spec)
    torch.manual_seed(cfg.seed)
    classifier = networks.StegaposClassifier(cfg.field_shape, cfg.width)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=cfg.classifier_learning_rate,
                                 betas=(cfg.beta1, cfg.beta2))
    inputs, targets = torch.from_numpy(fields), torch.from_numpy(labels)
    classifier.train()
    for step in range(cfg.classifier_steps):
        loss = torch.mean((classifier(inputs) - targets) ** 2)
        if not torch.isfinite(loss):
            raise SpliceTrainingError(f'Classifier loss diverged at step {step}')
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            logging.debug('classifier step %d: loss %.6f', step, float(loss))
    classifier.eval()
    logging.info('Trained classifier on %d fields: accuracy %.4f', len(fields),
                 classifier_accuracy(fields, labels, classifier))
    return classifier


def classifier_probabilities(fields: np.ndarray, classifier: networks.StegaposClassifier) -> np.ndarray:
    classifier.eval()
    with torch.no_grad():
        return classifier(torch.from_numpy(np.asarray(fields, dtype=np.float32))).numpy()


def classifier_accuracy(fields: np.ndarray, labels: np.ndarray, classifier: networks.StegaposClassifier) -> float:
    predicted = classifier_probabilities(fields, classifier) > ENCODED_THRESHOLD
    return float(np.mean(predicted == (np.asarray(labels) > 0.5)))


def balanced_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Mean of the encoded detection rate and the plain rejection rate."""
    predicted, labels = np.asarray(predicted).astype(bool), np.asarray(labels) > 0.5
    if labels.all() or not labels.any():
        raise ContractError('Balanced accuracy needs both encoded and plain examples')
    return float((np.mean(predicted[labels]) + np.mean(~predicted[~labels])) / 2)


def detect_crop(image: np.ndarray, decoder: networks.PositionDecoder) -> geometry.CropScaleEstimate:
    """Decodes the positional field and regresses crop offset and scale from it."""
    rows, cols = np.shape(image)[:2]
    if min(rows, cols) < decoder.receptive_field + 1:
        raise ContractError(f'Image {rows} x {cols} is too small for receptive field {decoder.receptive_field}')
    return geometry.regress_crop_scale(_decode(image, decoder), decoder.receptive_field)


def pad_to_image(field_map: np.ndarray, receptive_field: int) -> np.ndarray:
    """Edge-replicates a decoder-sized map back to image size: R // 2 before, R - 1 - R // 2 after."""
    before, after = receptive_field // 2, receptive_field - 1 - receptive_field // 2
    return np.pad(field_map, ((before, after), (before, after)), mode='edge')


def deviation_map(field: np.ndarray, receptive_field: int) -> Tuple[Optional[np.ndarray], geometry.CropScaleEstimate]:
    """Image-sized deviations from the fitted ideal field, or None when the fit is degenerate."""
    estimate = geometry.regress_crop_scale(field, receptive_field)
    if estimate.degenerate:
        return None, estimate
    return pad_to_image(geometry.field_deviation(field, estimate, receptive_field), receptive_field), estimate


def _untrusted(shape: Tuple[int, int]) -> np.ndarray:
    logging.warning('Degenerate positional field; marking the whole image as spliced')
    return np.ones(shape, dtype=np.uint8)


def _f1(mask: np.ndarray, gt: Optional[np.ndarray]) -> Optional[float]:
    return None if gt is None else f1_score(mask, gt)


def splice_mask_from_field(field: np.ndarray, receptive_field: int, alpha: float,
                           gt: Optional[np.ndarray] = None) -> SpliceResult:
    """Thresholds deviations from the regressed ideal field at alpha pixels."""
    if alpha <= 0:
        raise ContractError(f'alpha must be positive, got {alpha}')
    deviation, estimate = deviation_map(field, receptive_field)
    shape = (field.shape[0] + receptive_field - 1, field.shape[1] + receptive_field - 1)
    mask = _untrusted(shape) if deviation is None else (deviation > alpha).astype(np.uint8)
    return SpliceResult(mask, SpliceMethod.LINEAR_FIXED, alpha, _f1(mask, gt), estimate)


def oracle_mask_from_field(field: np.ndarray, receptive_field: int, gt: np.ndarray,
                           grid: Iterable[float] = ALPHA_GRID) -> SpliceResult:
    """Sweeps alpha over the grid and keeps the mask with the best F1 against gt."""
    if gt is None:
        raise ContractError('The oracle threshold needs a ground truth mask')
    deviation, estimate = deviation_map(field, receptive_field)
    if deviation is None:
        mask = _untrusted(np.shape(gt))
        return SpliceResult(mask, SpliceMethod.LINEAR_ORACLE, None, f1_score(mask, gt), estimate)
    best_alpha, best_f1, best_mask = None, -1., None
    for alpha in grid:
        mask = (deviation > alpha).astype(np.uint8)
        score = f1_score(mask, gt)
        if score > best_f1:
            best_alpha, best_f1, best_mask = float(alpha), score, mask
    return SpliceResult(best_mask, SpliceMethod.LINEAR_ORACLE, best_alpha, best_f1, estimate)


class MaskStrategy(abc.ABC):
    """A way of turning an image into a splice mask."""

    method: SpliceMethod

    @abc.abstractmethod
    def detect(self, image: np.ndarray, gt: Optional[np.ndarray] = None) -> SpliceResult:
        raise NotImplementedError()


class FixedThresholdStrategy(MaskStrategy):
    """Linear detector with one global alpha."""

    method = SpliceMethod.LINEAR_FIXED

    def __init__(self, decoder: networks.PositionDecoder, alpha: float):
        self._decoder = decoder
        self._alpha = alpha

    def detect(self, image: np.ndarray, gt: Optional[np.ndarray] = None) -> SpliceResult:
        return splice_mask_from_field(_decode(image, self._decoder), self._decoder.receptive_field, self._alpha, gt)


class OracleThresholdStrategy(MaskStrategy):
    """
    Linear detector with a per-image alpha chosen against the ground truth.

    The fixed alpha is swept alongside the grid, so the oracle never scores below the fixed detector.
    """

    method = SpliceMethod.LINEAR_ORACLE

    def __init__(self, decoder: networks.PositionDecoder, fixed_alpha: Optional[float] = None,
                 grid: Sequence[float] = tuple(ALPHA_GRID)):
        self._decoder = decoder
        self._grid = sorted(set(grid) | ({fixed_alpha} if fixed_alpha else set()))

    def detect(self, image: np.ndarray, gt: Optional[np.ndarray] = None) -> SpliceResult:
        if gt is None:
            raise ContractError('The oracle threshold needs a ground truth mask')
        return oracle_mask_from_field(_decode(image, self._decoder), self._decoder.receptive_field, gt, self._grid)


class NetworkStrategy(MaskStrategy):
    """Splice network output binarized at 0.5."""

    method = SpliceMethod.NETWORK

    def __init__(self, splice_net: networks.SpliceNet):
        self._splice_net = splice_net

    def detect(self, image: np.ndarray, gt: Optional[np.ndarray] = None) -> SpliceResult:
        try:
            soft = networks.splice_mask_net(image, self._splice_net)
        except networks.ShapeError as e:
            raise ContractError(str(e)) from e
        mask = (soft > MASK_THRESHOLD).astype(np.uint8)
        return SpliceResult(mask, self.method, None, _f1(mask, gt))


class SpliceDetector:
    """Runs one mask strategy over images and collects result rows."""

    def __init__(self, strategy: MaskStrategy = None) -> None:
        self._strategy = strategy

    @property
    def strategy(self) -> MaskStrategy:
        return self._strategy

    @strategy.setter
    def strategy(self, strategy: MaskStrategy) -> None:
        self._strategy = strategy

    def detect(self, image: np.ndarray, gt: Optional[np.ndarray] = None) -> SpliceResult:
        if self._strategy is None:
            raise ContractError('No splice mask strategy set')
        return self._strategy.detect(image, gt)

    def evaluate(self, images: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                 names: Sequence[Text]) -> pd.DataFrame:
        """One result row per image, in input order."""
        rows = [self.detect(image, gt).row(name) for image, gt, name in zip(images, gts, names)]
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def splice_mask_linear(image: np.ndarray, decoder: networks.PositionDecoder, alpha: Union[float, Text],
                       gt: Optional[np.ndarray] = None, fixed_alpha: Optional[float] = None) -> SpliceResult:
    """
    Linear splice detector.

    :param alpha: threshold in pixels, or 'oracle' to pick the best threshold against gt
    :param fixed_alpha: also swept in oracle mode
    """
    if alpha == 'oracle':
        strategy = OracleThresholdStrategy(decoder, fixed_alpha)
    else:
        strategy = FixedThresholdStrategy(decoder, float(alpha))
    return SpliceDetector(strategy).detect(image, gt)


def splice_mask_network(image: np.ndarray, splice_net: networks.SpliceNet,
                        gt: Optional[np.ndarray] = None) -> SpliceResult:
    return SpliceDetector(NetworkStrategy(splice_net)).detect(image, gt)


def calibrate_alpha(fields: Sequence[np.ndarray], masks: Sequence[np.ndarray], receptive_field: int,
                    grid: Iterable[float] = ALPHA_GRID) -> Tuple[float, float]:
    """
    The alpha with the highest mean F1 over a calibration set. Ties go to the smaller alpha.

    :return: (alpha, mean F1)
    """
    if not len(fields) or len(fields) != len(masks):
        raise ContractError(f'Need matching fields and masks, got {len(fields)} and {len(masks)}')
    grid = np.sort(np.asarray(list(grid), dtype=np.float64))
    scores = np.zeros(len(grid))
    for field, gt in zip(fields, masks):
        deviation, _ = deviation_map(field, receptive_field)
        for index, alpha in enumerate(grid):
            mask = np.ones_like(gt) if deviation is None else deviation > alpha
            scores[index] += f1_score(mask, gt)
    scores /= len(fields)
    best = int(np.argmax(scores))
    logging.info('Calibrated alpha %.3f with mean F1 %.4f over %d images', grid[best], scores[best], len(fields))
    return float(grid[best]), float(scores[best])


def train_splice_net(encoder: networks.ResidualEncoder, images: np.ndarray, cfg: config.TrainConfig,
                     device: Union[Text, torch.device] = 'cpu') -> networks.SpliceNet:
    """
    Trains h_phi to reproduce splice masks of `ee` composites, minimising ||M - h(I)||^2.

    The encoder is frozen: every image is encoded once and composites are blended from the encodes.
    Masks are circles and squares.
    """
    if len(images) < 2:
        raise ContractError('Need at least two images to build splice composites')
    device = torch.device(device)
    size = (cfg.height, cfg.width)
    stego = networks.encode_batch(images, poscodes.make_code_field(cfg.code_spec), encoder)

    def identity(image: np.ndarray, _: poscodes.CodeField) -> np.ndarray:
        return image

    torch.manual_seed(cfg.seed)
    model = networks.SpliceNet(size, cfg.splice_levels, cfg.splice_channels).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.splice_learning_rate, betas=(cfg.beta1, cfg.beta2))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.splice_steps)
    model.train()
    for step, seed in enumerate(seeds):
        cases = datasets.make_splice_benchmark(len(stego), size, cfg.batch_size, int(seed.generate_state(1)[0]),
                                               schemes=(datasets.Scheme.EE,), shapes=datasets.TRAINING_SHAPES,
                                               area_range=(cfg.mask_area_min, cfg.mask_area_max))
        pairs = [datasets.composite_splice(case, stego, identity, None) for case in cases]
        batch = torch.from_numpy(np.stack([image for image, _ in pairs]).transpose(0, 3, 1, 2).copy()).to(device)
        targets = torch.from_numpy(np.stack([mask for _, mask in pairs]).astype(np.float32))[:, None].to(device)
        loss = torch.mean((model(batch) - targets) ** 2)
        if not torch.isfinite(loss):
            raise SpliceTrainingError(f'Splice network loss diverged at step {step}')
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            logging.info('splice step %d: loss %.6f', step, float(loss))
    model.eval()
    return model.cpu()
