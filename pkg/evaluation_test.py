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

import math
import pathlib
import tempfile
import unittest

import mock
import numpy as np
import pandas as pd
import torch

import config
import datasets
import detection
import evaluation
import geometry
import networks


def _tiny_config(**overrides) -> config.TrainConfig:
    values = dict(height=16, width=16, receptive_field=4, batch_size=2, s_min=0.5,
                  encoder_levels=1, encoder_channels=4, decoder_channels=4, critic_channels=4,
                  splice_levels=2, splice_channels=4)
    values.update(overrides)
    return config.TrainConfig(**values)


def _models(cfg: config.TrainConfig, names=networks.MODEL_NAMES, seed: int = 0):
    torch.manual_seed(seed)
    models = networks.build_models(cfg.code_spec, cfg.receptive_field, cfg.arch, names)
    if 'encoder' in models:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in models['encoder'].parameters():
                param.copy_(0.2 * torch.randn(param.shape, generator=generator))
    return models


def _corpus(n: int = 4, size: int = 16) -> datasets.Corpus:
    images = np.random.default_rng(0).uniform(0.2, 0.8, size=(n, size, size, 3)).astype(np.float32)
    return datasets.Corpus(images, [f'image_{i}.png' for i in range(n)])


class HelpersTest(unittest.TestCase):

    def test_area_bucket(self):
        self.assertEqual(evaluation.area_bucket(0.1), '(0.00, 0.25]')
        self.assertEqual(evaluation.area_bucket(0.25), '(0.00, 0.25]')
        self.assertEqual(evaluation.area_bucket(1.), '(0.75, 1.00]')
        with self.assertRaises(evaluation.ContractError):
            evaluation.area_bucket(0.)

    def test_monotone_degradation(self):
        self.assertTrue(evaluation.monotone_degradation([5., 3., float('nan'), 1.]))
        self.assertTrue(evaluation.monotone_degradation([2., 2.]))
        self.assertFalse(evaluation.monotone_degradation([1., 2.]))
        self.assertTrue(evaluation.monotone_degradation([]))


class BenchCropTest(unittest.TestCase):

    def setUp(self):
        self._cfg = _tiny_config()
        self._tmp = tempfile.TemporaryDirectory()
        self._out = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_outputs(self):
        report = evaluation.bench_crop(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=6)
        self.assertEqual(len(report.cases), 6)
        self.assertTrue(set(report.cases['bucket']) <= set(report.summary['bucket']))
        self.assertEqual(report.summary['cases'].sum(), 6)
        for name in ('crop_cases.csv', 'crop_summary.csv', 'crop_checks.csv', 'crop_manifest.csv', 'crop_error.png'):
            self.assertTrue((self._out / name).exists(), name)
        written = pd.read_csv(self._out / 'crop_cases.csv')
        self.assertEqual(list(written['case_id']), list(report.cases['case_id']))

    def test_errors_against_fixed_estimate(self):
        estimate = geometry.CropScaleEstimate(0., 0., 1., 1., 0., 0.)
        with mock.patch.object(detection, 'detect_crop', return_value=estimate):
            report = evaluation.bench_crop(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=5)
        frame = report.cases
        expected = [math.hypot(x, y) for x, y in zip(frame['mu_x'], frame['mu_y'])]
        np.testing.assert_allclose(frame['mu_error'], expected)
        np.testing.assert_allclose(frame['s_error'], 0.)
        self.assertAlmostEqual(report.checks['mean_mu_error'], float(np.mean(expected)))
        self.assertEqual(report.checks['degenerate_fraction'], 0.)

    def test_degenerate_estimates_are_excluded(self):
        estimate = geometry.CropScaleEstimate(0., 0., float('nan'), float('nan'), 0., 0., degenerate=True)
        with mock.patch.object(detection, 'detect_crop', return_value=estimate):
            report = evaluation.bench_crop(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=3)
        self.assertTrue(report.cases['mu_error'].isna().all())
        self.assertEqual(report.checks['degenerate_fraction'], 1.)

    def test_equivariance_checks(self):
        report = evaluation.bench_crop(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=2)
        for key in ('uncropped_rmse', 'equivariance_rmse_0.5', 'equivariance_rmse_0.75', 'equivariance_rmse_1'):
            self.assertGreaterEqual(report.checks[key], 0., key)
        self.assertIn(report.checks['equivariance_within_2x'], (0., 1.))

    def test_decimation_equivariance_skips_small_scales(self):
        models = _models(self._cfg, ('encoder', 'decoder'))
        stego = _corpus(size=6).images
        rmse = evaluation.decimation_equivariance(models['decoder'], stego, self._cfg.receptive_field, batch_size=3)
        self.assertCountEqual(rmse, ['uncropped_rmse', 'equivariance_rmse_0.75', 'equivariance_rmse_1'])
        self.assertAlmostEqual(rmse['equivariance_rmse_1'], 0., places=4)

    def test_missing_decoder(self):
        with self.assertRaises(evaluation.ContractError):
            evaluation.bench_crop(_models(self._cfg, ('encoder',)), _corpus(), self._cfg, self._out)

    def test_wrong_corpus_size(self):
        with self.assertRaises(evaluation.ContractError):
            evaluation.bench_crop(_models(self._cfg), _corpus(size=32), self._cfg, self._out)


class BenchSpliceTest(unittest.TestCase):

    def setUp(self):
        self._cfg = _tiny_config()
        self._tmp = tempfile.TemporaryDirectory()
        self._out = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_all_methods_both_schemes(self):
        report = evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=3)
        self.assertEqual(len(report.cases), 3 * 2 * 3)
        self.assertCountEqual(set(report.cases['method']), ['linear-fixed', 'linear-oracle', 'network'])
        self.assertCountEqual(set(report.cases['scheme']), ['ee', 'eu'])
        self.assertEqual(report.checks['oracle_dominance'], 1.)
        self.assertIn('network_scheme_gap', report.checks)
        self.assertTrue((report.cases['f1'].between(0., 1.)).all())
        manifest = pd.read_csv(self._out / 'splice_manifest.csv', keep_default_na=False)
        self.assertEqual(len(manifest), 6)
        self.assertTrue((self._out / manifest['mask_file'][0]).exists())
        self.assertTrue((self._out / 'splice_f1.png').exists())

    def test_without_splice_network(self):
        models = _models(self._cfg, ('encoder', 'decoder'))
        report = evaluation.bench_splice(models, _corpus(), self._cfg, self._out, n_cases=2)
        self.assertCountEqual(set(report.cases['method']), ['linear-fixed', 'linear-oracle'])

    def test_deterministic(self):
        first = evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=2, seed=4)
        second = evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=2, seed=4)
        pd.testing.assert_frame_equal(first.cases, second.cases)

    def test_routes_through_detector(self):
        evaluate = detection.SpliceDetector.evaluate
        with mock.patch.object(detection.SpliceDetector, 'evaluate', autospec=True, side_effect=evaluate) as spy:
            evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=2)
        self.assertEqual(spy.call_count, 3)

    def test_f1_by_shape(self):
        report = evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=4)
        by_shape = pd.read_csv(self._out / 'splice_by_shape.csv')
        self.assertEqual(list(by_shape.columns), ['method', 'shape', 'f1', 'cases'])
        self.assertEqual(by_shape['cases'].sum(), len(report.cases))
        self.assertTrue(set(report.cases['shape']) <= {shape.value for shape in datasets.MaskShape})

    def test_triangle_gap(self):
        frame = pd.DataFrame({
            'method': ['network'] * 4 + ['linear-fixed'] * 2,
            'shape': ['triangle', 'circle', 'square', 'half-plane', 'circle', 'square'],
            'f1': [0.5, 0.9, 0.7, 0.1, 0.6, 0.6],
        })
        gaps = evaluation.shape_generalization_gaps(frame)
        self.assertEqual(list(gaps), ['network_triangle_gap'])
        self.assertAlmostEqual(gaps['network_triangle_gap'], 0.3)

    def test_without_donor_shift(self):
        make = datasets.make_splice_benchmark
        with mock.patch.object(datasets, 'make_splice_benchmark', side_effect=make) as cases:
            report = evaluation.bench_splice(_models(self._cfg), _corpus(), self._cfg, self._out, n_cases=2,
                                             donor_shift_range=(0., 0.))
        self.assertEqual(cases.call_args[1]['donor_shift_range'], (0., 0.))
        self.assertEqual(len(report.cases), 2 * 2 * 3)

    def test_calibrate_fixed_alpha(self):
        alpha, score = evaluation.calibrate_fixed_alpha(_models(self._cfg), _corpus(), self._cfg, n_cases=3)
        self.assertIn(alpha, list(detection.ALPHA_GRID))
        self.assertGreaterEqual(score, 0.)
        self.assertLessEqual(score, 1.)


class BenchNoiseTest(unittest.TestCase):

    def test_levels_and_methods(self):
        cfg = _tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            report = evaluation.bench_noise(_models(cfg), _corpus(), cfg, tmp, sigmas=(0., 0.05), gammas=(1.25,),
                                            n_cases=2)
            self.assertTrue((pathlib.Path(tmp) / 'noise_f1.png').exists())
        self.assertEqual(len(report.cases), 3 * 2 * 2)
        self.assertCountEqual(set(report.cases['method']), ['linear-fixed', 'network'])
        self.assertCountEqual(set(report.cases['distortion']), ['noise', 'tone'])
        self.assertIn('network_drop_at_0.05', report.checks)
        self.assertIn('linear-fixed_drop_at_0.05', report.checks)


class BenchClassifyTest(unittest.TestCase):

    def setUp(self):
        self._cfg = _tiny_config()
        self._tmp = tempfile.TemporaryDirectory()
        self._out = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_outputs(self):
        report = evaluation.bench_classify(_models(self._cfg), _corpus(), self._cfg, self._out)
        self.assertEqual(list(report.cases.columns), ['image', 'encoded', 'probability', 'predicted', 'correct'])
        self.assertEqual(list(report.cases['encoded']), [True, False, True, False])
        self.assertEqual(list(report.summary['cases']), [2, 2])
        self.assertCountEqual(report.checks, ['accuracy', 'balanced_accuracy', 'encoded_detection_rate',
                                              'plain_rejection_rate'])
        for name in ('classify_cases.csv', 'classify_summary.csv', 'classify_checks.csv'):
            self.assertTrue((self._out / name).exists(), name)

    def test_checks_against_fixed_probabilities(self):
        probabilities = np.array([0.9, 0.1, 0.2, 0.3], dtype=np.float32)
        with mock.patch.object(detection, 'classifier_probabilities', return_value=probabilities):
            report = evaluation.bench_classify(_models(self._cfg), _corpus(), self._cfg, self._out)
        self.assertAlmostEqual(report.checks['accuracy'], 0.75)
        self.assertAlmostEqual(report.checks['encoded_detection_rate'], 0.5)
        self.assertAlmostEqual(report.checks['plain_rejection_rate'], 1.)
        self.assertAlmostEqual(report.checks['balanced_accuracy'], 0.75)

    def test_needs_two_images(self):
        with self.assertRaises(evaluation.ContractError):
            evaluation.bench_classify(_models(self._cfg), _corpus(1), self._cfg, self._out)

    def test_missing_classifier(self):
        with self.assertRaises(evaluation.ContractError):
            evaluation.bench_classify(_models(self._cfg, ('encoder', 'decoder')), _corpus(), self._cfg, self._out)


class StatsResidualTest(unittest.TestCase):

    def test_rows_and_plots(self):
        cfg = _tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            report = evaluation.stats_residual(_models(cfg, ('encoder',)), _corpus(3), cfg, tmp, plot_limit=1)
            plots = sorted(path.name for path in (pathlib.Path(tmp) / 'plots').iterdir())
        self.assertEqual(plots, ['image_0_histogram.png', 'image_0_plane.png'])
        self.assertEqual(list(report.cases['image']), ['image_0.png', 'image_1.png', 'image_2.png'])
        self.assertIn('residual_top2', set(report.summary['statistic']))
        self.assertGreaterEqual(report.checks['residual_plane_wins'], 0.)
        self.assertLessEqual(report.checks['residual_plane_wins'], 1.)


if __name__ == '__main__':
    unittest.main()
