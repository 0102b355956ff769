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

"""Benchmark drivers: crop localization, splice detection, robustness, encoded-or-not classification and residual
statistics."""
import collections
import dataclasses
import math
import os
import pathlib
from typing import Dict, List, Mapping, Sequence, Text, Tuple, Union

from absl import logging
import matplotlib
matplotlib.use('Agg')
from matplotlib import pyplot as plt
import numpy as np
import pandas as pd
import torch
from torch import nn

import analysis
import config
import datasets
import detection
import imaging
import networks
import poscodes
import training

AREA_BUCKETS = (0., 0.25, 0.5, 0.75, 1.)
NOISE_SIGMAS = (0., 0.02, 0.05, 0.1, 0.2)
TONE_GAMMAS = (0.8, 1., 1.25)

PathLike = Union[Text, os.PathLike]


class ContractError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class Report:
    """Per-case rows, an aggregated summary and named scalar checks of one benchmark."""
    name: Text
    cases: pd.DataFrame
    summary: pd.DataFrame
    checks: Dict[Text, float]

    def write(self, out_dir: PathLike) -> pathlib.Path:
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.cases.to_csv(out_dir / f'{self.name}_cases.csv', index=False)
        self.summary.to_csv(out_dir / f'{self.name}_summary.csv', index=False)
        pd.DataFrame({'check': list(self.checks), 'value': list(self.checks.values())}).to_csv(
            out_dir / f'{self.name}_checks.csv', index=False)
        logging.info('Wrote %s results for %d cases to %s', self.name, len(self.cases), out_dir)
        return out_dir

    def __str__(self):
        checks = ', '.join(f'{key} {value:.4f}' for key, value in self.checks.items())
        return f'{self.name}: {len(self.cases)} cases; {checks}'


def _require(models: Mapping[Text, nn.Module], *names: Text) -> List[nn.Module]:
    missing = [name for name in names if name not in models]
    if missing:
        raise ContractError(f'Benchmark needs models {", ".join(missing)}, which the checkpoint lacks')
    return [models[name] for name in names]


def _encode_fn(encoder: networks.ResidualEncoder) -> datasets.EncodeFn:

    def encode(image: np.ndarray, codes: poscodes.CodeField) -> np.ndarray:
        stego, _ = networks.encode(image, codes, encoder)
        return stego

    return encode


def _check_corpus(corpus: datasets.Corpus, cfg: config.TrainConfig) -> None:
    if not len(corpus):
        raise ContractError('Benchmarks need at least one image')
    if corpus.size != (cfg.height, cfg.width):
        raise ContractError(f'Corpus images are {corpus.size}, the models expect {(cfg.height, cfg.width)}')


def _save_plot(fig, path: pathlib.Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def area_bucket(area_fraction: float) -> Text:
    for low, high in zip(AREA_BUCKETS, AREA_BUCKETS[1:]):
        if low < area_fraction <= high:
            return f'({low:.2f}, {high:.2f}]'
    raise ContractError(f'Area fraction {area_fraction} lies outside (0, 1]')


def monotone_degradation(bucket_errors: Sequence[float]) -> bool:
    """True when mean errors, ordered by growing crop area, never increase. Empty buckets are skipped."""
    errors = [error for error in bucket_errors if not math.isnan(error)]
    return all(later <= earlier for earlier, later in zip(errors, errors[1:]))


def decimation_equivariance(decoder: networks.PositionDecoder, stego: np.ndarray, receptive_field: int,
                            scales: Sequence[float] = training.EQUIVARIANCE_SCALES,
                            batch_size: int = 16) -> Dict[Text, float]:
    """
    Positional RMSE of uncropped encodes against the ideal field, and per scale the RMSE between decoding the
    decimated encodes and resampling the full-size decoded field. Scales that take the frame below the
    receptive field are skipped.
    """
    rows, cols = stego.shape[1:3]
    scales = [s for s in scales if int(s * min(rows, cols)) >= receptive_field]
    totals = collections.defaultdict(float)
    decoder.eval()
    with torch.no_grad():
        for start in range(0, len(stego), batch_size):
            batch = imaging.to_tensor(stego[start:start + batch_size])
            squared, count = training.positional_error(decoder, batch, receptive_field)
            totals['uncropped'] += squared
            totals['uncropped_count'] += count
            for s in scales:
                squared, count = training.equivariance_error(decoder, batch, s, receptive_field)
                totals[s] += squared
                totals[(s, 'count')] += count
    rmse = {'uncropped_rmse': math.sqrt(totals['uncropped'] / totals['uncropped_count'])}
    for s in scales:
        rmse[f'equivariance_rmse_{s:g}'] = math.sqrt(totals[s] / totals[(s, 'count')])
    return rmse


def bench_crop(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
               out_dir: PathLike, n_cases: int = 200, scales: Sequence[float] = (1.,), seed: int = 0) -> Report:
    """
    Crops encoded images at random and compares the regressed offset and scale with the truth.

    Errors are Euclidean offset errors in original pixels, bucketed by the crop's share of the frame area.
    """
    _check_corpus(corpus, cfg)
    encoder, decoder = _require(models, 'encoder', 'decoder')
    out_dir = pathlib.Path(out_dir)
    stego = networks.encode_batch(corpus.images, poscodes.make_code_field(cfg.code_spec), encoder)
    cases, crops = datasets.make_crop_benchmark(stego, n_cases, seed, scales, min_side=cfg.receptive_field + 1)
    datasets.write_manifest([case.manifest_row() for case in cases], out_dir / 'crop_manifest.csv')
    rows = []
    for case, crop in zip(cases, crops):
        estimate = detection.detect_crop(crop, decoder)
        usable = not estimate.degenerate
        area = case.crop_w * case.crop_h / (cfg.width * cfg.height)
        rows.append({
            'case_id': case.case_id, 'image': corpus.names[case.source], 'mu_x': case.mu_x, 'mu_y': case.mu_y,
            's': case.s, 'area_fraction': area, 'bucket': area_bucket(area),
            'mu_x_hat': estimate.mu_x if usable else np.nan, 'mu_y_hat': estimate.mu_y if usable else np.nan,
            's_hat': estimate.s if usable else np.nan,
            'mu_error': math.hypot(estimate.mu_x - case.mu_x, estimate.mu_y - case.mu_y) if usable else np.nan,
            's_error': abs(estimate.s - case.s) if usable else np.nan,
            'degenerate': estimate.degenerate,
        })
    frame = pd.DataFrame(rows)
    summary = (frame.groupby('bucket', sort=True)
               .agg(mu_error=('mu_error', 'mean'), s_error=('s_error', 'mean'), cases=('case_id', 'count'))
               .reset_index())
    large = frame[frame['area_fraction'] >= 0.25]
    checks = {
        'mean_mu_error': float(frame['mu_error'].mean()),
        'mean_mu_error_quarter_area': float(large['mu_error'].mean()) if len(large) else float('nan'),
        'mean_s_error': float(frame['s_error'].mean()),
        'degenerate_fraction': float(frame['degenerate'].mean()),
        'monotone_degradation': float(monotone_degradation(summary['mu_error'].tolist())),
    }
    equivariance = decimation_equivariance(decoder, stego, cfg.receptive_field)
    checks.update(equivariance)
    checks['equivariance_within_2x'] = float(all(
        value <= 2 * equivariance['uncropped_rmse'] for key, value in equivariance.items()
        if key.startswith('equivariance_rmse_')))
    report = Report('crop', frame, summary, checks)
    report.write(out_dir)
    fig, ax = plt.subplots(1, 1, figsize=(6, 4))
    ax.scatter(frame['area_fraction'], frame['mu_error'], s=4, alpha=0.4, label='case')
    centres = [(low + high) / 2 for low, high in zip(AREA_BUCKETS, AREA_BUCKETS[1:])]
    by_bucket = dict(zip(summary['bucket'], summary['mu_error']))
    ax.plot(centres, [by_bucket.get(area_bucket(centre), np.nan) for centre in centres], 'r-o', label='bucket mean')
    ax.set_xlabel('crop area fraction')
    ax.set_ylabel('offset error (px)')
    ax.legend()
    _save_plot(fig, out_dir / 'crop_error.png')
    logging.info('%s', report)
    return report


def splice_strategies(models: Mapping[Text, nn.Module], cfg: config.TrainConfig) -> List[detection.MaskStrategy]:
    """Linear fixed and oracle strategies, plus the network one when the checkpoint has a splice network."""
    decoder, = _require(models, 'decoder')
    strategies = [detection.FixedThresholdStrategy(decoder, cfg.fixed_alpha),
                  detection.OracleThresholdStrategy(decoder, cfg.fixed_alpha)]
    if 'splice_net' in models:
        strategies.append(detection.NetworkStrategy(models['splice_net']))
    else:
        logging.warning('Checkpoint has no splice network; skipping the network detector')
    return strategies


def _composites(corpus: datasets.Corpus, encoder: networks.ResidualEncoder, cfg: config.TrainConfig,
                cases: Sequence[datasets.SpliceCase]) -> List[Tuple[np.ndarray, np.ndarray]]:
    encode = _encode_fn(encoder)
    codes = poscodes.make_code_field(cfg.code_spec)
    return [datasets.composite_splice(case, corpus.images, encode, codes) for case in cases]


def _write_masks(cases: Sequence[datasets.SpliceCase], out_dir: pathlib.Path, name: Text) -> None:
    rows = []
    for case in cases:
        mask_file = f'masks/{case.case_id}.png'
        imaging.save_mask(out_dir / mask_file, case.mask)
        rows.append(case.manifest_row(mask_file))
    datasets.write_manifest(rows, out_dir / f'{name}_manifest.csv')


def _evaluate_strategies(strategies: Sequence[detection.MaskStrategy], images: Sequence[np.ndarray],
                         masks: Sequence[np.ndarray], names: Sequence[Text]) -> pd.DataFrame:
    """Result rows of every strategy over the same images, strategy by strategy."""
    detector = detection.SpliceDetector()
    frames = []
    for strategy in strategies:
        detector.strategy = strategy
        frames.append(detector.evaluate(images, masks, names))
    return pd.concat(frames, ignore_index=True)


def shape_generalization_gaps(frame: pd.DataFrame) -> Dict[Text, float]:
    """Per method, |mean F1 on triangles - mean F1 on the shapes the splice network is trained on|."""
    trained = {shape.value for shape in datasets.TRAINING_SHAPES}
    gaps = {}
    for method, group in frame.groupby('method'):
        triangles = group.loc[group['shape'] == datasets.MaskShape.TRIANGLE.value, 'f1']
        seen = group.loc[group['shape'].isin(trained), 'f1']
        if len(triangles) and len(seen):
            gaps[f'{method}_triangle_gap'] = abs(float(triangles.mean()) - float(seen.mean()))
    return gaps


def bench_splice(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
                 out_dir: PathLike, n_cases: int = 100, seed: int = 0,
                 donor_shift_range: Tuple[float, float] = datasets.DONOR_SHIFT_RANGE) -> Report:
    """
    Matched `ee` and `eu` composites scored by every available mask strategy.

    Checks report the oracle's per-image dominance over the fixed threshold, the ee/eu F1 gap per method and
    the F1 gap between triangles and the training shapes. F1 per mask shape goes to splice_by_shape.csv.
    """
    _check_corpus(corpus, cfg)
    encoder, = _require(models, 'encoder')
    out_dir = pathlib.Path(out_dir)
    strategies = splice_strategies(models, cfg)
    cases = datasets.make_splice_benchmark(len(corpus), corpus.size, n_cases, seed,
                                           area_range=(cfg.mask_area_min, cfg.mask_area_max),
                                           donor_shift_range=donor_shift_range)
    _write_masks(cases, out_dir, 'splice')
    composites = _composites(corpus, encoder, cfg, cases)
    masks = [mask for _, mask in composites]
    frame = _evaluate_strategies(strategies, [image for image, _ in composites], masks,
                                 [case.case_id for case in cases])
    details = pd.DataFrame({'image': [case.case_id for case in cases],
                            'scheme': [case.scheme.value for case in cases],
                            'shape': [case.shape.value for case in cases],
                            'area_fraction': [float(mask.mean()) for mask in masks]})
    frame = frame.merge(details, on='image', how='left')
    summary = (frame.groupby(['method', 'scheme'], sort=True)
               .agg(f1=('f1', 'mean'), cases=('image', 'count')).reset_index())
    by_shape = (frame.groupby(['method', 'shape'], sort=True)
                .agg(f1=('f1', 'mean'), cases=('image', 'count')).reset_index())
    by_method = frame.pivot(index='image', columns='method', values='f1')
    oracle, fixed = detection.SpliceMethod.LINEAR_ORACLE.value, detection.SpliceMethod.LINEAR_FIXED.value
    checks = {'oracle_dominance': float(np.mean(by_method[oracle] >= by_method[fixed]))}
    for method, group in summary.groupby('method'):
        per_scheme = dict(zip(group['scheme'], group['f1']))
        checks[f'{method}_f1'] = float(frame.loc[frame['method'] == method, 'f1'].mean())
        if len(per_scheme) == 2:
            checks[f'{method}_scheme_gap'] = abs(per_scheme['ee'] - per_scheme['eu'])
    checks.update(shape_generalization_gaps(frame))
    report = Report('splice', frame, summary, checks)
    report.write(out_dir)
    by_shape.to_csv(out_dir / 'splice_by_shape.csv', index=False)
    fig, ax = plt.subplots(1, 1, figsize=(6, 4))
    pivot = summary.pivot(index='method', columns='scheme', values='f1')
    pivot.plot.bar(ax=ax, rot=0)
    ax.set_ylabel('mean F1')
    ax.set_ylim(0, 1)
    _save_plot(fig, out_dir / 'splice_f1.png')
    logging.info('%s', report)
    return report


def bench_noise(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
                out_dir: PathLike, sigmas: Sequence[float] = NOISE_SIGMAS, gammas: Sequence[float] = TONE_GAMMAS,
                n_cases: int = 50, seed: int = 0,
                donor_shift_range: Tuple[float, float] = datasets.DONOR_SHIFT_RANGE) -> Report:
    """
    Splice F1 of the network and the fixed linear detector on `eu` composites under additive Gaussian noise
    and under gamma tone curves.
    """
    _check_corpus(corpus, cfg)
    encoder, = _require(models, 'encoder')
    out_dir = pathlib.Path(out_dir)
    strategies = [strategy for strategy in splice_strategies(models, cfg)
                  if strategy.method is not detection.SpliceMethod.LINEAR_ORACLE]
    cases = datasets.make_splice_benchmark(len(corpus), corpus.size, n_cases, seed, schemes=(datasets.Scheme.EU,),
                                           area_range=(cfg.mask_area_min, cfg.mask_area_max),
                                           donor_shift_range=donor_shift_range)
    composites = _composites(corpus, encoder, cfg, cases)
    masks = [mask for _, mask in composites]
    case_ids = [case.case_id for case in cases]
    distortions = [('noise', sigma) for sigma in sigmas] + [('tone', gamma) for gamma in gammas]
    noise_seeds = np.random.SeedSequence(seed).spawn(len(cases))
    frames = []
    for kind, level in distortions:
        if kind == 'noise':
            distorted = [datasets.add_noise(composite, level, np.random.default_rng(noise_seed))
                         for (composite, _), noise_seed in zip(composites, noise_seeds)]
        else:
            distorted = [datasets.adjust_tone(composite, level) for composite, _ in composites]
        results = _evaluate_strategies(strategies, distorted, masks, case_ids)
        frames.append(results.assign(distortion=kind, level=level))
    frame = pd.concat(frames, ignore_index=True).rename(columns={'image': 'case_id'})
    frame = frame[['case_id', 'distortion', 'level', 'method', 'f1']]
    summary = (frame.groupby(['distortion', 'method', 'level'], sort=True)
               .agg(f1=('f1', 'mean'), cases=('case_id', 'count')).reset_index())
    checks = {}
    for method, group in summary[summary['distortion'] == 'noise'].groupby('method'):
        by_level = dict(zip(group['level'], group['f1']))
        if 0. in by_level and 0.05 in by_level:
            checks[f'{method}_drop_at_0.05'] = by_level[0.] - by_level[0.05]
    report = Report('noise', frame, summary, checks)
    report.write(out_dir)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, kind, label in zip(axes, ('noise', 'tone'), ('noise sigma', 'gamma')):
        for method, group in summary[summary['distortion'] == kind].groupby('method'):
            ax.plot(group['level'], group['f1'], '-o', label=method)
        ax.set_xlabel(label)
        ax.set_ylabel('mean F1')
        ax.set_ylim(0, 1)
        ax.legend()
    _save_plot(fig, out_dir / 'noise_f1.png')
    logging.info('%s', report)
    return report


def stats_residual(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
                   out_dir: PathLike, plot_limit: int = 4) -> Report:
    """Residual histogram and colour plane statistics per image, with plots for the first few images."""
    _check_corpus(corpus, cfg)
    encoder, = _require(models, 'encoder')
    out_dir = pathlib.Path(out_dir)
    codes = poscodes.make_code_field(cfg.code_spec)
    rows = []
    for index, (image, name) in enumerate(zip(corpus.images, corpus.names)):
        _, residual = networks.encode(image, codes, encoder)
        rows.append(analysis.residual_stats(image, residual, name))
        if index < plot_limit:
            stem = pathlib.Path(name).stem
            (out_dir / 'plots').mkdir(parents=True, exist_ok=True)
            analysis.plot_histograms(image, residual, out_dir / 'plots' / f'{stem}_histogram.png')
            analysis.plot_pca_plane(residual, out_dir / 'plots' / f'{stem}_plane.png')
    frame = pd.DataFrame(rows, columns=analysis.STATS_COLUMNS)
    summary = frame.drop(columns=['image']).astype(float).mean().to_frame('mean').reset_index()
    summary = summary.rename(columns={'index': 'statistic'})
    checks = {
        'residual_plane_wins': float(np.mean(frame['residual_top2'] > frame['image_top2'])),
        'mean_residual_top2': float(frame['residual_top2'].mean()),
        'mean_image_top2': float(frame['image_top2'].mean()),
    }
    report = Report('residual', frame, summary, checks)
    report.write(out_dir)
    logging.info('%s', report)
    return report


def bench_classify(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
                   out_dir: PathLike) -> Report:
    """
    Stegapos-or-not verdicts on a balanced set: even-indexed images encoded, odd-indexed left plain.

    Checks report plain accuracy, balanced accuracy, the encoded detection rate and the plain rejection rate.
    """
    _check_corpus(corpus, cfg)
    if len(corpus) < 2:
        raise ContractError('Classification needs at least one encoded and one plain image')
    encoder, decoder, classifier = _require(models, 'encoder', 'decoder', 'classifier')
    fields, labels = detection.labelled_fields(encoder, decoder, corpus.images, cfg.code_spec)
    probabilities = detection.classifier_probabilities(fields, classifier)
    predicted = probabilities > detection.ENCODED_THRESHOLD
    encoded = labels > 0.5
    frame = pd.DataFrame({'image': corpus.names, 'encoded': encoded, 'probability': probabilities,
                          'predicted': predicted, 'correct': predicted == encoded})
    summary = (frame.groupby('encoded', sort=True)
               .agg(probability=('probability', 'mean'), accuracy=('correct', 'mean'), cases=('image', 'count'))
               .reset_index())
    checks = {
        'accuracy': float(frame['correct'].mean()),
        'balanced_accuracy': detection.balanced_accuracy(predicted, labels),
        'encoded_detection_rate': float(np.mean(predicted[encoded])),
        'plain_rejection_rate': float(np.mean(~predicted[~encoded])),
    }
    report = Report('classify', frame, summary, checks)
    report.write(out_dir)
    logging.info('%s', report)
    return report


def calibrate_fixed_alpha(models: Mapping[Text, nn.Module], corpus: datasets.Corpus, cfg: config.TrainConfig,
                          n_cases: int = 50, seed: int = 1) -> Tuple[float, float]:
    """
    Chooses the global linear threshold on a calibration set of `ee` and `eu` composites.

    :return: (alpha, mean F1 at alpha)
    """
    _check_corpus(corpus, cfg)
    encoder, decoder = _require(models, 'encoder', 'decoder')
    cases = datasets.make_splice_benchmark(len(corpus), corpus.size, n_cases, seed,
                                           area_range=(cfg.mask_area_min, cfg.mask_area_max))
    composites = _composites(corpus, encoder, cfg, cases)
    fields = networks.decode_batch(np.stack([image for image, _ in composites]), decoder)
    return detection.calibrate_alpha(list(fields), [mask for _, mask in composites], cfg.receptive_field)
