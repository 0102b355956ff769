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

"""Losses, decimation augmentation and the two-phase training loop."""
import bisect
import collections
import dataclasses
import math
import pathlib
from typing import Dict, Iterator, List, Mapping, Optional, Text, Tuple, Union

from absl import logging
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils import data

import config
import geometry
import imaging
import networks
import persist
import poscodes

LOG_FLOOR = 1e-7
PYRAMID_LEVELS = 3
EQUIVARIANCE_SCALES = (0.5, 0.75, 1.)
METRIC_COLUMNS = ('step', 'loss_pos', 'loss_gamma', 'loss_yuv', 'loss_perc', 'loss_critic', 'psnr', 'pos_rmse')
METRICS_FILE = 'metrics.csv'
FINAL_CHECKPOINT = 'final.ckpt'

_BINOMIAL = (0.25, 0.5, 0.25)


class DivergenceError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda_gamma: float = 0.
    lambda_image: float = 0.
    lambda_perceptual: float = 0.
    lambda_critic: float = 0.

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise config.ConfigError(f'{field.name} must be non-negative, got {getattr(self, field.name)}')

    @property
    def is_zero(self) -> bool:
        return not any(dataclasses.astuple(self))


class Schedule:
    """Piecewise linear loss weights over phase-2 steps; constant before the first and after the last breakpoint."""

    def __init__(self, breakpoints: List[Tuple[int, LossWeights]]):
        if not breakpoints:
            raise config.ConfigError('A schedule needs at least one breakpoint')
        breakpoints = sorted(breakpoints, key=lambda point: point[0])
        steps = [step for step, _ in breakpoints]
        if len(set(steps)) != len(steps):
            raise config.ConfigError(f'Duplicate schedule steps in {steps}')
        self._steps = steps
        self._weights = [np.array(dataclasses.astuple(weights)) for _, weights in breakpoints]

    def weights_at(self, step: int) -> LossWeights:
        index = bisect.bisect_right(self._steps, step)
        if index == 0:
            return LossWeights(*self._weights[0])
        if index == len(self._steps):
            return LossWeights(*self._weights[-1])
        start, end = self._steps[index - 1], self._steps[index]
        fraction = (step - start) / (end - start)
        values = (1 - fraction) * self._weights[index - 1] + fraction * self._weights[index]
        return LossWeights(*values.tolist())


def parse_schedule(text: Text) -> Schedule:
    """Parses `step:lambda_gamma,lambda_image,lambda_perceptual,lambda_critic; ...`."""
    breakpoints = []
    for item in text.split(';'):
        if not item.strip():
            continue
        step, _, values = item.partition(':')
        try:
            weights = [float(value) for value in values.split(',')]
            if len(weights) != 4:
                raise ValueError(f'expected 4 weights, got {len(weights)}')
            breakpoints.append((int(step), LossWeights(*weights)))
        except ValueError as e:
            if isinstance(e, config.ConfigError):
                raise
            raise config.ConfigError(f'Bad schedule entry {item.strip()!r}: {e}') from e
    return Schedule(breakpoints)


def _ideal_tensor(like: torch.Tensor, mu: Tuple[float, float], s: geometry.Scale,
                  receptive_field: int) -> torch.Tensor:
    ideal = geometry.ideal_field(mu, s, tuple(like.shape[-2:]), receptive_field)
    return torch.from_numpy(ideal.transpose(2, 0, 1)).to(like.device, like.dtype)[None]


def positional_loss(p: torch.Tensor, s: geometry.Scale, receptive_field: int, width: int,
                    mu: Tuple[float, float] = (0., 0.), frame: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """
    Mean squared error against the ideal field, divided by width squared.

    :param p: B x 2 x rows x cols decoded field
    :param s: scale the stego image was resampled by, scalar or (s_x, s_y)
    :param mu: crop offset, (0, 0) unless crop augmentation is on
    :param frame: (height, width) the crop was taken from; when given, the field shape is checked against s
    """
    if p.ndim != 4 or p.shape[1] != 2:
        raise networks.ShapeError(f'Expected a B x 2 x rows x cols field, got {tuple(p.shape)}')
    if frame is not None:
        s_x, s_y = (s, s) if np.isscalar(s) else s
        expected = (round(s_y * frame[0]) - receptive_field + 1, round(s_x * frame[1]) - receptive_field + 1)
        if tuple(p.shape[-2:]) != expected:
            raise networks.ShapeError(f'Field {tuple(p.shape[-2:])} does not match scale {s}: expected {expected}')
    return torch.mean((p - _ideal_tensor(p, mu, s, receptive_field)) ** 2) / width ** 2


def _blur(images: torch.Tensor) -> torch.Tensor:
    kernel = torch.tensor(_BINOMIAL, dtype=images.dtype, device=images.device)
    kernel = torch.outer(kernel, kernel).expand(images.shape[1], 1, 3, 3)
    return F.conv2d(F.pad(images, (1, 1, 1, 1), mode='replicate'), kernel, groups=images.shape[1])


def perceptual_distance(images: torch.Tensor, stego: torch.Tensor, levels: int = PYRAMID_LEVELS) -> torch.Tensor:
    """Mean absolute difference averaged over a blurred, downsampled pyramid."""
    total = 0.
    for level in range(levels):
        if level:
            images = F.avg_pool2d(_blur(images), 2)
            stego = F.avg_pool2d(_blur(stego), 2)
        total = total + torch.mean(torch.abs(images - stego))
    return total / levels


def fidelity_losses(images: torch.Tensor, stego: torch.Tensor,
                    residual: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (l1_residual, l1_yuv, perceptual)."""
    l1_residual = torch.mean(torch.abs(residual))
    l1_yuv = torch.mean(torch.abs(imaging.rgb_to_yuv(stego) - imaging.rgb_to_yuv(images)))
    return l1_residual, l1_yuv, perceptual_distance(images, stego)


def critic_terms(d_real: torch.Tensor, d_fake: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns (generator_term, critic_term) from critic probabilities of being unencoded."""
    generator_term = -torch.log(d_fake.clamp(min=LOG_FLOOR)).mean()
    critic_term = (-torch.log(d_real.clamp(min=LOG_FLOOR)) - torch.log((1 - d_fake).clamp(min=LOG_FLOOR))).mean()
    return generator_term, critic_term


def critic_losses(images: torch.Tensor, stego: torch.Tensor, critic: nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
    return critic_terms(critic(images), critic(stego))


def draw_scale(rng: np.random.Generator, s_min: float) -> float:
    return float(rng.uniform(s_min, 1.))


def augment_decimation(stego: torch.Tensor, rng: np.random.Generator, s_min: float, receptive_field: int,
                       max_retries: int = 10) -> Tuple[torch.Tensor, Tuple[float, float]]:
    """
    Resamples a batch by a random s in [s_min, 1].

    :return: (resampled batch, (s_x, s_y)) where s_x, s_y are the realised scales floor(s * W) / W and
        floor(s * H) / H used to build the positional target
    """
    height, width = stego.shape[-2:]
    for _ in range(max_retries):
        s = draw_scale(rng, s_min)
        size = (int(s * height), int(s * width))
        if min(size) >= receptive_field:
            return imaging.resize(stego, size), (size[1] / width, size[0] / height)
        logging.debug('Redrawing scale %f: %s is below the receptive field', s, size)
    raise networks.ShapeError(f'No scale in [{s_min}, 1] keeps {height} x {width} above {receptive_field} pixels')


def augment_crop(stego: torch.Tensor, rng: np.random.Generator,
                 min_fraction: float) -> Tuple[torch.Tensor, Tuple[float, float]]:
    """Random crop of at least min_fraction per side. Returns (crop, (mu_x, mu_y))."""
    height, width = stego.shape[-2:]
    rows = int(rng.integers(math.ceil(min_fraction * height), height + 1))
    cols = int(rng.integers(math.ceil(min_fraction * width), width + 1))
    mu_y = int(rng.integers(0, height - rows + 1))
    mu_x = int(rng.integers(0, width - cols + 1))
    return stego[..., mu_y:mu_y + rows, mu_x:mu_x + cols], (float(mu_x), float(mu_y))


def loss_terms(encoder: networks.ResidualEncoder, decoder: networks.PositionDecoder, critic: nn.Module,
               images: torch.Tensor, codes: torch.Tensor, receptive_field: int,
               rng: Optional[np.random.Generator] = None, s_min: float = 1.,
               crop_fraction: Optional[float] = None) -> Dict[str, torch.Tensor]:
    """
    Every generator loss term for one batch.

    Without rng the stego batch is decoded at full size and scale 1.
    """
    width = images.shape[-1]
    stego, residual = networks.embed(encoder, images, codes)
    seen, mu, s = stego, (0., 0.), 1.
    if rng is not None and crop_fraction is not None:
        seen, mu = augment_crop(seen, rng, crop_fraction)
    if rng is not None:
        seen, s = augment_decimation(seen, rng, s_min, receptive_field)
    l1_residual, l1_yuv, perceptual = fidelity_losses(images, stego, residual)
    generator_term, _ = critic_losses(images, stego, critic)
    return {
        'loss_pos': positional_loss(decoder(seen), s, receptive_field, width, mu),
        'loss_gamma': l1_residual,
        'loss_yuv': l1_yuv,
        'loss_perc': perceptual,
        'loss_critic': generator_term,
        'stego': stego,
    }


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    return (terms['loss_pos'] + weights.lambda_gamma * terms['loss_gamma'] + weights.lambda_image * terms['loss_yuv']
            + weights.lambda_perceptual * terms['loss_perc'] + weights.lambda_critic * terms['loss_critic'])


def random_guess_rmse(width: int) -> float:
    """RMSE of always answering the frame centre when true coordinates are uniform over the width."""
    return width / math.sqrt(12)


def positional_error(decoder: nn.Module, stego: torch.Tensor, receptive_field: int) -> Tuple[float, int]:
    """
    Squared error of the decoded field of an uncropped batch against the ideal field.

    :return: (sum of squared errors, number of compared values)
    """
    p = decoder(stego)
    return float(torch.sum((p - _ideal_tensor(p, (0., 0.), 1., receptive_field)) ** 2)), p.numel()


def equivariance_error(decoder: nn.Module, stego: torch.Tensor, s: float,
                       receptive_field: int) -> Tuple[float, int]:
    """
    Compares decoding a decimated batch with decimating the decoded field.

    The full-size field is bilinearly sampled at the original positions (R // 2 + c) / s - R // 2 that the
    decimated field's outputs stand for, so a perfectly equivariant decoder scores zero at every s.

    :return: (sum of squared differences, number of compared values)
    """
    height, width = stego.shape[-2:]
    size = (int(s * height), int(s * width))
    if min(size) < receptive_field:
        raise networks.ShapeError(f'Scale {s} takes {height} x {width} below the receptive field {receptive_field}')
    full = decoder(stego)
    small = decoder(imaging.resize(stego, size))
    s_x, s_y = size[1] / width, size[0] / height
    half = receptive_field // 2
    rows, cols = small.shape[-2:]
    u = (half + torch.arange(cols, dtype=full.dtype, device=full.device)) / s_x - half
    v = (half + torch.arange(rows, dtype=full.dtype, device=full.device)) / s_y - half
    gx = 2 * u / max(full.shape[-1] - 1, 1) - 1
    gy = 2 * v / max(full.shape[-2] - 1, 1) - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing='ij')[::-1], dim=-1)
    grid = grid[None].expand(len(full), -1, -1, -1)
    sampled = F.grid_sample(full, grid, mode='bilinear', padding_mode='border', align_corners=True)
    return float(torch.sum((sampled - small) ** 2)), small.numel()


class Trainer:
    """Owns the encoder, decoder and critic and alternates critic and generator updates."""

    def __init__(self, cfg: config.TrainConfig, models: Optional[Mapping[str, nn.Module]] = None,
                 device: Union[Text, torch.device] = 'cpu'):
        self._cfg = cfg
        self._device = torch.device(device)
        if cfg.single_threaded:
            torch.set_num_threads(1)
        torch.manual_seed(cfg.seed)
        if models is None:
            models = networks.build_models(cfg.code_spec, cfg.receptive_field, cfg.arch,
                                           names=('encoder', 'decoder', 'critic'))
        self._models = {name: model.to(self._device) for name, model in models.items()}
        self._codes = networks.codes_tensor(poscodes.make_code_field(cfg.code_spec)).to(self._device)
        generator_parameters = list(self.encoder.parameters()) + list(self.decoder.parameters())
        betas = (cfg.beta1, cfg.beta2)
        self._generator_optimizer = torch.optim.Adam(generator_parameters, lr=cfg.learning_rate, betas=betas)
        self._critic_optimizer = torch.optim.Adam(self.critic.parameters(), lr=cfg.learning_rate, betas=betas)
        self._schedule = parse_schedule(cfg.schedule)
        self._rng = np.random.default_rng(cfg.seed)
        self.step = 0

    @property
    def encoder(self) -> networks.ResidualEncoder:
        return self._models['encoder']

    @property
    def decoder(self) -> networks.PositionDecoder:
        return self._models['decoder']

    @property
    def critic(self) -> networks.PatchCritic:
        return self._models['critic']

    @property
    def models(self) -> Dict[str, nn.Module]:
        return dict(self._models)

    def _train_mode(self):
        for model in self._models.values():
            model.train()

    def critic_step(self, images: torch.Tensor) -> float:
        """One critic update; encoder and decoder parameters are untouched."""
        self._train_mode()
        with torch.no_grad():
            stego, _ = networks.embed(self.encoder, images, self._codes)
        _, critic_term = critic_losses(images, stego, self.critic)
        self._critic_optimizer.zero_grad(set_to_none=True)
        critic_term.backward()
        self._critic_optimizer.step()
        return float(critic_term)

    def generator_step(self, images: torch.Tensor, weights: LossWeights) -> Dict[str, float]:
        """One encoder/decoder update; the critic is frozen for the duration."""
        self._train_mode()
        self.critic.requires_grad_(False)
        try:
            crop = self._cfg.crop_min_fraction if self._cfg.crop_augmentation else None
            terms = loss_terms(self.encoder, self.decoder, self.critic, images, self._codes,
                               self._cfg.receptive_field, self._rng, self._cfg.s_min, crop)
            loss = total_loss(terms, weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f'Non-finite loss at step {self.step}: {float(loss)}')
            self._generator_optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self._generator_optimizer.step()
        finally:
            self.critic.requires_grad_(True)
        values = {name: float(value) for name, value in terms.items() if name != 'stego'}
        values['psnr'] = imaging.psnr(images, terms['stego'])
        return values

    def _chunks(self, images: np.ndarray) -> Iterator[torch.Tensor]:
        for start in range(0, len(images), self._cfg.batch_size):
            yield imaging.to_tensor(images[start:start + self._cfg.batch_size]).to(self._device)

    def validate(self, images: np.ndarray) -> Dict[str, float]:
        """
        Positional RMSE at s = 1 and s = 0.5, decimation equivariance RMSE for each of EQUIVARIANCE_SCALES that
        keeps the frame above the receptive field, and PSNR of the encodes, over held-out images.
        """
        for model in self._models.values():
            model.eval()
        receptive_field = self._cfg.receptive_field
        height, width = self._cfg.height, self._cfg.width
        half_size = (height // 2, width // 2)
        half_scale = (half_size[1] / width, half_size[0] / height)
        scales = [s for s in EQUIVARIANCE_SCALES if int(s * min(height, width)) >= receptive_field]
        totals = collections.defaultdict(float)
        image_error = 0.
        with torch.no_grad():
            for batch in self._chunks(images):
                stego, _ = networks.embed(self.encoder, batch, self._codes)
                image_error += float(torch.sum((stego - batch) ** 2))
                squared, count = positional_error(self.decoder, stego, receptive_field)
                totals['pos'] += squared
                totals['pos_count'] += count
                p = self.decoder(imaging.resize(stego, half_size))
                totals['half'] += float(torch.sum((p - _ideal_tensor(p, (0., 0.), half_scale,
                                                                     receptive_field)) ** 2))
                totals['half_count'] += p.numel()
                for s in scales:
                    squared, count = equivariance_error(self.decoder, stego, s, receptive_field)
                    totals[s] += squared
                    totals[(s, 'count')] += count
        mse = image_error / (images.size or 1)
        metrics = {
            'pos_rmse': math.sqrt(totals['pos'] / totals['pos_count']),
            'pos_rmse_half': math.sqrt(totals['half'] / totals['half_count']),
            'psnr': float('inf') if mse == 0 else 10. * math.log10(1. / mse),
        }
        for s in scales:
            metrics[f'equivariance_rmse_{s:g}'] = math.sqrt(totals[s] / totals[(s, 'count')])
        return metrics

    def _batches(self, images: np.ndarray) -> Iterator[torch.Tensor]:
        generator = torch.Generator().manual_seed(self._cfg.seed)
        loader = data.DataLoader(data.TensorDataset(torch.from_numpy(np.asarray(images, dtype=np.float32))),
                                 batch_size=self._cfg.batch_size, shuffle=True,
                                 drop_last=len(images) >= self._cfg.batch_size,
                                 generator=generator, num_workers=self._cfg.num_workers)
        while True:
            for (batch,) in loader:
                yield batch.permute(0, 3, 1, 2).contiguous().to(self._device)

    def _record(self, path: pathlib.Path, losses: Mapping[str, float], metrics: Mapping[str, float]):
        row = {'step': self.step, 'loss_pos': losses['loss_pos'], 'loss_gamma': losses['loss_gamma'],
               'loss_yuv': losses['loss_yuv'], 'loss_perc': losses['loss_perc'],
               'loss_critic': losses['loss_critic'], 'psnr': metrics['psnr'], 'pos_rmse': metrics['pos_rmse']}
        pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(path, mode='a', header=not path.exists(),
                                                           index=False, float_format='%.6f')
        equivariance = ' '.join(f'{key[len("equivariance_rmse_"):]}:{value:.2f}' for key, value in metrics.items()
                                if key.startswith('equivariance_rmse_'))
        logging.info('step %d: pos_rmse %.2fpx (%.2fpx at s=0.5) equivariance [%s]px psnr %.2fdB loss_pos %.6f',
                     self.step, metrics['pos_rmse'], metrics['pos_rmse_half'], equivariance, metrics['psnr'],
                     losses['loss_pos'])

    def save(self, path: Union[Text, pathlib.Path]) -> pathlib.Path:
        manifest = persist.Manifest.from_config(self._cfg, self.step)
        return persist.save_checkpoint(self._models, manifest, path)

    def _after_step(self, losses: Mapping[str, float], val_images: np.ndarray,
                    out_dir: pathlib.Path) -> Optional[Dict[str, float]]:
        """Advances the step counter, then validates and checkpoints on schedule; returns metrics if validated."""
        self.step += 1
        logging.debug('step %d: %s', self.step, losses)
        metrics = None
        if self.step % self._cfg.validate_every == 0:
            metrics = self.validate(val_images)
            self._record(out_dir / METRICS_FILE, losses, metrics)
        if self.step % self._cfg.checkpoint_every == 0:
            self.save(out_dir / f'step_{self.step:06d}.ckpt')
        return metrics

    def fit(self, train_images: np.ndarray, val_images: np.ndarray,
            out_dir: Union[Text, pathlib.Path]) -> pathlib.Path:
        """
        Phase 1 trains position only until validation RMSE drops below phase1_rmse or the budget runs out.
        Phase 2 follows the loss weight schedule with alternating critic updates. Both phases validate every
        validate_every steps and write step_*.ckpt every checkpoint_every steps.

        :return: path of the final checkpoint
        """
        cfg = self._cfg
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_FILE
        if metrics_path.exists():
            metrics_path.unlink()
        batches = self._batches(train_images)

        logging.info('Phase 1: positional loss only, up to %d steps', cfg.phase1_steps)
        zero = LossWeights()
        metrics = None
        for _ in range(cfg.phase1_steps):
            validated = self._after_step(self.generator_step(next(batches), zero), val_images, out_dir)
            if validated is not None:
                metrics = validated
                if metrics['pos_rmse'] < cfg.phase1_rmse:
                    break
        if metrics is None or metrics['pos_rmse'] >= cfg.phase1_rmse:
            metrics = self.validate(val_images)
            if metrics['pos_rmse'] > random_guess_rmse(cfg.width):
                raise DivergenceError(f'Positional RMSE {metrics["pos_rmse"]:.2f}px after {self.step} steps is '
                                      f'worse than guessing ({random_guess_rmse(cfg.width):.2f}px)')
            logging.warning('Phase 1 budget exhausted at %.2fpx, above the %.2fpx target; continuing',
                            metrics['pos_rmse'], cfg.phase1_rmse)
        logging.info('Phase 1 finished at step %d: pos_rmse %.2fpx psnr %.2fdB', self.step, metrics['pos_rmse'],
                     metrics['psnr'])

        logging.info('Phase 2: scheduled fidelity terms, %d steps', cfg.max_steps)
        for phase_step in range(cfg.max_steps):
            weights = self._schedule.weights_at(phase_step)
            batch = next(batches)
            if phase_step % cfg.critic_every == 0:
                critic_term = self.critic_step(batch)
                logging.debug('step %d: critic %.6f', self.step, critic_term)
            self._after_step(self.generator_step(batch, weights), val_images, out_dir)
        return self.save(out_dir / FINAL_CHECKPOINT)


def held_out_count(corpus_size: int, validation_size: int) -> int:
    """How many images at the end of a corpus are kept out of training: at most a fifth, at least one."""
    if corpus_size < 2:
        raise ValueError(f'Need at least 2 images to train, got {corpus_size}')
    return max(1, min(validation_size, corpus_size // 5))


def split_validation(images: np.ndarray, validation_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Holds out the last held_out_count images of the corpus."""
    held_out = held_out_count(len(images), validation_size)
    return images[:-held_out], images[-held_out:]


def train_two_phase(cfg: config.TrainConfig, images: np.ndarray, out_dir: Union[Text, pathlib.Path],
                    device: Union[Text, torch.device] = 'cpu') -> pathlib.Path:
    """
    Trains encoder, decoder and critic on canonical-size images.

    :param images: N x H x W x 3 array in [0, 1]
    :return: path of the final checkpoint
    """
    if images.shape[1:3] != (cfg.height, cfg.width):
        raise networks.ShapeError(f'Training images are {images.shape[1:3]}, config expects '
                                  f'{(cfg.height, cfg.width)}')
    train_images, val_images = split_validation(images, cfg.validation_size)
    logging.info('Training on %d images, validating on %d', len(train_images), len(val_images))
    return Trainer(cfg, device=device).fit(train_images, val_images, out_dir)
