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

# Train, embed and detect positional signatures
import dataclasses
import os
import pathlib
import sys
from typing import Callable, Dict, List, Optional, Sequence, Text, Tuple

from absl import app
from absl import flags
from absl import logging
import numpy as np
import torch

import analysis
import config
import datasets
import detection
import evaluation
import geometry
import imaging
import networks
import persist
import poscodes
import training

CKPT_ENV = 'STEGAPOS_CKPT_DIR'
DETECTORS_CHECKPOINT = 'detectors.ckpt'
EXIT_ERROR = 1
EXIT_USAGE = 2

FLAGS = flags.FLAGS
flags.DEFINE_string('config', None, 'Config file of key = value lines applied on top of the preset.')
flags.DEFINE_string('preset', 'desk', 'Base configuration: desk or full.')
flags.DEFINE_multi_string('set', [], 'Config override key=value; may be repeated.')
flags.DEFINE_string('ckpt', os.environ.get(CKPT_ENV, 'checkpoints'),
                    f'Checkpoint file, or a directory holding {DETECTORS_CHECKPOINT} or '
                    f'{training.FINAL_CHECKPOINT}. Defaults to ${CKPT_ENV}.')
flags.DEFINE_string('in', None, 'Input image.')
flags.DEFINE_string('out', None, 'Output image, mask, checkpoint or results directory.')
flags.DEFINE_string('out_field', None, 'Where decode writes the positional field (.npy).')
flags.DEFINE_string('shift', None, 'Code phase shift dx,dy for encode.')
flags.DEFINE_enum('method', 'linear', ['linear', 'linear-oracle', 'network'], 'Splice mask method.')
flags.DEFINE_float('alpha', None, 'Linear splice threshold in pixels; defaults to the calibrated one.')
flags.DEFINE_string('gt', None, 'Ground truth splice mask, required by linear-oracle.')
flags.DEFINE_string('corpus', None, 'Directory of images; procedural images are generated when absent.')
flags.DEFINE_integer('corpus_limit', None,
                     'train reads at most this many corpus images; benchmarks evaluate at most this many '
                     'held-out images.')
flags.DEFINE_integer('n_cases', 100, 'Benchmark cases.')
flags.DEFINE_integer('seed', 0, 'Benchmark case seed; procedural corpora follow the config seed.')
flags.DEFINE_list('scales', ['1.0'], 'Post-crop scales for bench-crop.')
flags.DEFINE_list('sigmas', [str(sigma) for sigma in evaluation.NOISE_SIGMAS], 'Noise levels for bench-noise.')
flags.DEFINE_list('gammas', [str(gamma) for gamma in evaluation.TONE_GAMMAS], 'Tone curves for bench-noise.')
flags.DEFINE_list('donor_shift', [str(value) for value in datasets.DONOR_SHIFT_RANGE],
                  'Donor displacement range low,high as fractions of the frame for bench-splice and bench-noise; '
                  '0,0 keeps pasted content in place.')
flags.DEFINE_string('device', 'cpu', 'Torch device for training.')
flags.DEFINE_bool('verbose', False, 'Set logging to verbose')

_ERRORS = (poscodes.SpecError, networks.ShapeError, geometry.ContractError, training.DivergenceError,
           detection.ContractError, detection.SpliceTrainingError, datasets.CorpusError, datasets.ContractError,
           analysis.ContractError, evaluation.ContractError, persist.LoadError, config.ConfigError,
           imaging.ImageError, OSError)


class UsageError(Exception):
    pass


def parse_shift(text: Text) -> Tuple[float, float]:
    try:
        dx, dy = (float(part) for part in text.split(','))
    except ValueError as e:
        raise UsageError(f'--shift expects dx,dy, got {text!r}') from e
    return dx, dy


def _floats(values: Sequence[Text], name: Text) -> List[float]:
    try:
        return [float(value) for value in values]
    except ValueError as e:
        raise UsageError(f'--{name} expects numbers, got {values}') from e


def _require_flag(name: Text) -> Text:
    value = FLAGS[name].value
    if not value:
        raise UsageError(f'--{name} is required')
    return value


def checkpoint_path() -> pathlib.Path:
    path = pathlib.Path(FLAGS.ckpt)
    if not path.is_dir():
        return path
    detectors = path / DETECTORS_CHECKPOINT
    return detectors if detectors.exists() else path / training.FINAL_CHECKPOINT


def _base_config() -> config.TrainConfig:
    return config.load_config(FLAGS.config, FLAGS.set, FLAGS.preset)


def config_for(manifest: persist.Manifest) -> config.TrainConfig:
    """The flag-selected config with geometry, architecture, corpus split and threshold taken from the checkpoint."""
    fields = ('height', 'width', 'receptive_field', 'code_depth', 'omega_base', 'encoder_levels',
              'encoder_channels', 'decoder_channels', 'critic_channels', 'splice_levels', 'splice_channels',
              'seed', 'corpus_size', 'validation_size', 'fixed_alpha')
    return dataclasses.replace(_base_config(), **{field: getattr(manifest, field) for field in fields})


def _load(*names: Text) -> Tuple[Dict[Text, torch.nn.Module], persist.Manifest]:
    return persist.load_checkpoint(checkpoint_path(), names or None)


def _corpus(cfg: config.TrainConfig, limit: Optional[int] = None) -> datasets.Corpus:
    """The --corpus directory in file name order, or procedural images seeded by the config."""
    size = (cfg.height, cfg.width)
    if FLAGS.corpus:
        return datasets.load_corpus(FLAGS.corpus, size, limit)
    return datasets.procedural_corpus(limit or cfg.corpus_size, cfg.seed, size)


def split_corpus(cfg: config.TrainConfig) -> Tuple[datasets.Corpus, datasets.Corpus]:
    """
    Rebuilds the corpus a checkpoint was trained on and splits it as training did.

    :return: (training images, held-out images)
    """
    corpus = _corpus(cfg, cfg.corpus_size)
    if len(corpus) != cfg.corpus_size or len(corpus) < 2:
        raise datasets.CorpusError(f'The checkpoint was trained on {cfg.corpus_size} images but the corpus now '
                                   f'has {len(corpus)}; the held-out images cannot be recovered')
    train, held_out = corpus.split(training.held_out_count(len(corpus), cfg.validation_size))
    logging.info('Corpus of %d images: %d for training, %d held out', len(corpus), len(train), len(held_out))
    return train, held_out


def _out_dir(default: Text) -> pathlib.Path:
    return pathlib.Path(FLAGS.out or default)


def run_train() -> int:
    cfg = _base_config()
    out_dir = pathlib.Path(FLAGS.out or FLAGS.ckpt)
    corpus = _corpus(cfg, FLAGS.corpus_limit)
    cfg = dataclasses.replace(cfg, corpus_size=len(corpus))
    path = training.train_two_phase(cfg, corpus.images, out_dir, FLAGS.device)
    print(f'Saved {path}')
    return 0


def run_train_splice_net() -> int:
    """
    Trains the splice network and classifier and calibrates the linear threshold on the training images of a
    frozen checkpoint, then reports classifier accuracy on the held-out images.
    """
    models, manifest = _load('encoder', 'decoder', 'critic')
    cfg = config_for(manifest)
    train, held_out = split_corpus(cfg)
    models['splice_net'] = detection.train_splice_net(models['encoder'], train.images, cfg, FLAGS.device)
    models['classifier'] = detection.train_classifier(models['encoder'], models['decoder'], train.images, cfg)
    alpha, score = evaluation.calibrate_fixed_alpha(models, train, cfg, seed=cfg.seed + 1)
    print(f'Calibrated alpha {alpha:.3f} (mean F1 {score:.4f})')
    if len(held_out) >= 2:
        fields, labels = detection.labelled_fields(models['encoder'], models['decoder'], held_out.images,
                                                   cfg.code_spec)
        predicted = detection.classifier_probabilities(fields, models['classifier']) > detection.ENCODED_THRESHOLD
        print(f'Held-out classifier balanced accuracy {detection.balanced_accuracy(predicted, labels):.4f} '
              f'over {len(held_out)} images')
    out = pathlib.Path(FLAGS.out) if FLAGS.out else checkpoint_path().parent / DETECTORS_CHECKPOINT
    path = persist.save_checkpoint(models, dataclasses.replace(manifest, fixed_alpha=alpha), out)
    print(f'Saved {path}')
    return 0


def run_encode() -> int:
    source, target = _require_flag('in'), _require_flag('out')
    shift = parse_shift(FLAGS.shift) if FLAGS.shift else (0., 0.)
    models, manifest = _load('encoder')
    image = imaging.load_image(source)
    stego, _ = networks.encode(image, poscodes.make_code_field(manifest.code_spec, shift), models['encoder'])
    imaging.save_image(target, stego)
    print(f'Encoded {source} -> {target} (PSNR {imaging.psnr(image, stego):.2f} dB)')
    return 0


def run_decode() -> int:
    source, target = _require_flag('in'), _require_flag('out_field')
    models, _ = _load('decoder')
    field = networks.decode_positions(imaging.load_image(source), models['decoder'])
    pathlib.Path(target).parent.mkdir(parents=True, exist_ok=True)
    np.save(target, field)
    print(f'Decoded {field.shape[0]} x {field.shape[1]} positional field to {target}')
    return 0


def run_classify() -> int:
    source = _require_flag('in')
    models, _ = _load('decoder', 'classifier')
    verdict = detection.classify_image(imaging.load_image(source), models['decoder'], models['classifier'])
    print(f'{source}: {verdict}')
    return 0


def run_detect_crop() -> int:
    source = _require_flag('in')
    models, _ = _load('decoder')
    estimate = detection.detect_crop(imaging.load_image(source), models['decoder'])
    print(f'{source}: {estimate}')
    return 0


def run_detect_splice() -> int:
    source = _require_flag('in')
    if FLAGS.method == 'linear-oracle' and not FLAGS.gt:
        raise UsageError('--method linear-oracle requires --gt')
    if FLAGS.method != 'linear' and FLAGS.alpha is not None:
        raise UsageError('--alpha only applies to --method linear')
    gt = imaging.load_mask(FLAGS.gt) if FLAGS.gt else None
    image = imaging.load_image(source)
    if FLAGS.method == 'network':
        models, _ = _load('splice_net')
        result = detection.splice_mask_network(image, models['splice_net'], gt)
    else:
        models, manifest = _load('decoder')
        if FLAGS.method == 'linear-oracle':
            alpha = 'oracle'
        else:
            alpha = manifest.fixed_alpha if FLAGS.alpha is None else FLAGS.alpha
        result = detection.splice_mask_linear(image, models['decoder'], alpha, gt, manifest.fixed_alpha)
    if FLAGS.out:
        imaging.save_mask(FLAGS.out, result.mask)
    summary = f'{source}: {result.method.value} marked {result.mask.mean():.1%} of the image'
    if result.alpha is not None:
        summary += f' at alpha {result.alpha:.3f}'
    if result.f1 is not None:
        summary += f', F1 {result.f1:.4f}'
    print(summary)
    return 0


def benchmark_corpus(cfg: config.TrainConfig) -> datasets.Corpus:
    """Held-out images of the checkpoint's corpus, at most --corpus_limit of them."""
    _, held_out = split_corpus(cfg)
    if FLAGS.corpus_limit:
        held_out = datasets.Corpus(held_out.images[:FLAGS.corpus_limit], held_out.names[:FLAGS.corpus_limit])
    return held_out


def _benchmark(run: Callable[..., evaluation.Report], default_out: Text, **kwargs) -> int:
    models, manifest = _load()
    cfg = config_for(manifest)
    report = run(models, benchmark_corpus(cfg), cfg, _out_dir(default_out), **kwargs)
    print(report)
    return 0


def donor_shift_range() -> Tuple[float, float]:
    values = _floats(FLAGS.donor_shift, 'donor_shift')
    if len(values) != 2:
        raise UsageError(f'--donor_shift expects low,high, got {FLAGS.donor_shift}')
    return values[0], values[1]


def run_bench_crop() -> int:
    return _benchmark(evaluation.bench_crop, 'results/crop', n_cases=FLAGS.n_cases,
                      scales=_floats(FLAGS.scales, 'scales'), seed=FLAGS.seed)


def run_bench_splice() -> int:
    return _benchmark(evaluation.bench_splice, 'results/splice', n_cases=FLAGS.n_cases, seed=FLAGS.seed,
                      donor_shift_range=donor_shift_range())


def run_bench_noise() -> int:
    return _benchmark(evaluation.bench_noise, 'results/noise', sigmas=_floats(FLAGS.sigmas, 'sigmas'),
                      gammas=_floats(FLAGS.gammas, 'gammas'), n_cases=FLAGS.n_cases, seed=FLAGS.seed,
                      donor_shift_range=donor_shift_range())


def run_bench_classify() -> int:
    return _benchmark(evaluation.bench_classify, 'results/classify')


def run_stats_residual() -> int:
    return _benchmark(evaluation.stats_residual, 'results/residual')


COMMANDS = {
    'train': run_train,
    'train-splice-net': run_train_splice_net,
    'encode': run_encode,
    'decode': run_decode,
    'classify': run_classify,
    'detect-crop': run_detect_crop,
    'detect-splice': run_detect_splice,
    'bench-crop': run_bench_crop,
    'bench-splice': run_bench_splice,
    'bench-noise': run_bench_noise,
    'bench-classify': run_bench_classify,
    'stats-residual': run_stats_residual,
}


def dispatch(argv: Sequence[Text]) -> int:
    """
    Runs the subcommand named by argv[1] with the already parsed flags.

    :return: 0 on success, 1 on a module error, 2 on a usage error
    """
    try:
        if len(argv) != 2 or argv[1] not in COMMANDS:
            raise UsageError(f'{pathlib.Path(argv[0]).name} <{"|".join(COMMANDS)}> [flags]')
        return COMMANDS[argv[1]]()
    except UsageError as e:
        print(f'usage: {e}', file=sys.stderr)
        return EXIT_USAGE
    except _ERRORS as e:
        logging.exception('%s failed', argv[1])
        print(f'error: {type(e).__module__}.{type(e).__name__}: {e}', file=sys.stderr)
        return EXIT_ERROR


def parse_flags(argv: List[Text]) -> List[Text]:
    try:
        return FLAGS(argv)
    except flags.Error as e:
        print(f'usage: {e}', file=sys.stderr)
        sys.exit(EXIT_USAGE)


def main(argv):
    if not FLAGS.log_dir:
        FLAGS.log_dir = 'logs'
    os.makedirs(FLAGS.log_dir, exist_ok=True)
    print('All logs being dumped to', FLAGS.log_dir, file=sys.stderr)
    logging.get_absl_handler().use_absl_log_file()
    if FLAGS.verbose:
        logging.set_verbosity(logging.DEBUG)
    return dispatch(argv)


if __name__ == '__main__':
    app.run(main, flags_parser=parse_flags)
