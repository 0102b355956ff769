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

from typing import Tuple
import unittest

import mock
import numpy as np

import config
import detection
import geometry
import networks

_R = 16


def _tiny_config(**overrides) -> config.TrainConfig:
    values = dict(height=16, width=16, receptive_field=4, batch_size=2, s_min=0.5,
                  encoder_levels=1, encoder_channels=4, decoder_channels=4, critic_channels=4,
                  splice_levels=2, splice_channels=4, splice_steps=2, classifier_steps=200,
                  classifier_learning_rate=1e-2)
    values.update(overrides)
    return config.TrainConfig(**values)


def _disk(size: int = 128, radius: float = 25.) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    return ((xs - size / 2) ** 2 + (ys - size / 2) ** 2 <= radius ** 2).astype(np.uint8)


def _spliced_field(offset: float = 100.) -> Tuple[np.ndarray, np.ndarray]:
    """Ideal 128 x 128 field whose central disk reports positions shifted by offset pixels."""
    gt = _disk()
    field = geometry.ideal_field((0., 0.), 1., (128 - _R + 1, 128 - _R + 1), _R)
    inside = gt[_R // 2:_R // 2 + field.shape[0], _R // 2:_R // 2 + field.shape[1]].astype(bool)
    field[inside, 0] += offset
    return field, gt


class F1ScoreTest(unittest.TestCase):

    def test_perfect(self):
        self.assertEqual(detection.f1_score(_disk(), _disk()), 1.)

    def test_both_empty(self):
        self.assertEqual(detection.f1_score(np.zeros((4, 4)), np.zeros((4, 4))), 1.)

    def test_one_empty(self):
        self.assertEqual(detection.f1_score(np.zeros((4, 4)), np.ones((4, 4))), 0.)
        self.assertEqual(detection.f1_score(np.ones((4, 4)), np.zeros((4, 4))), 0.)

    def test_partial(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [1, 0]])
        self.assertAlmostEqual(detection.f1_score(pred, gt), 0.5)

    def test_shape_mismatch(self):
        with self.assertRaises(detection.ContractError):
            detection.f1_score(np.zeros((4, 4)), np.zeros((4, 5)))


class LinearMaskTest(unittest.TestCase):

    def test_pad_to_image(self):
        self.assertEqual(detection.pad_to_image(np.zeros((113, 113)), 16).shape, (128, 128))
        padded = detection.pad_to_image(np.arange(4.).reshape(2, 2), 4)
        self.assertEqual(padded.shape, (5, 5))
        np.testing.assert_array_equal(padded[0], [0., 0., 0., 1., 1.])

    def test_disk_detected(self):
        field, gt = _spliced_field()
        result = detection.splice_mask_from_field(field, _R, 50., gt)
        self.assertEqual(result.mask.shape, (128, 128))
        self.assertEqual(result.method, detection.SpliceMethod.LINEAR_FIXED)
        self.assertGreater(result.f1, 0.9)

    def test_clean_field_has_no_splice(self):
        field = geometry.ideal_field((3., 4.), 1., (113, 113), _R)
        result = detection.splice_mask_from_field(field, _R, 1.)
        self.assertFalse(result.mask.any())
        self.assertIsNone(result.f1)

    def test_degenerate_field_is_untrusted(self):
        result = detection.splice_mask_from_field(np.zeros((113, 113, 2)), _R, 12.)
        self.assertTrue(result.mask.all())
        self.assertTrue(result.estimate.degenerate)

    def test_non_positive_alpha(self):
        with self.assertRaises(detection.ContractError):
            detection.splice_mask_from_field(np.zeros((113, 113, 2)), _R, 0.)

    def test_oracle_dominates_fixed(self):
        field, gt = _spliced_field(offset=30.)
        for alpha in (2., 12., 90.):
            fixed = detection.splice_mask_from_field(field, _R, alpha, gt)
            oracle = detection.oracle_mask_from_field(field, _R, gt, sorted(set(detection.ALPHA_GRID) | {alpha}))
            self.assertGreaterEqual(oracle.f1, fixed.f1)
            self.assertEqual(oracle.method, detection.SpliceMethod.LINEAR_ORACLE)

    def test_oracle_needs_gt(self):
        with self.assertRaises(detection.ContractError):
            detection.oracle_mask_from_field(np.zeros((113, 113, 2)), _R, None)

    def test_calibrate_alpha(self):
        field, gt = _spliced_field()
        alpha, score = detection.calibrate_alpha([field, field], [gt, gt], _R, grid=(500., 50., 1.))
        self.assertEqual(alpha, 50.)
        self.assertGreater(score, 0.9)

    def test_calibrate_alpha_empty(self):
        with self.assertRaises(detection.ContractError):
            detection.calibrate_alpha([], [], _R)


class SpliceDetectorTest(unittest.TestCase):

    def setUp(self):
        self._decoder = networks.PositionDecoder(_R, 128, 128, channels=4)
        self._field, self._gt = _spliced_field()

    def test_fixed_strategy(self):
        detector = detection.SpliceDetector(detection.FixedThresholdStrategy(self._decoder, 50.))
        with mock.patch.object(networks, 'decode_positions', return_value=self._field):
            result = detector.detect(np.zeros((128, 128, 3)), self._gt)
        self.assertGreater(result.f1, 0.9)

    def test_strategy_setter(self):
        detector = detection.SpliceDetector()
        with self.assertRaises(detection.ContractError):
            detector.detect(np.zeros((128, 128, 3)))
        strategy = detection.OracleThresholdStrategy(self._decoder, fixed_alpha=12.)
        detector.strategy = strategy
        self.assertIs(detector.strategy, strategy)

    def test_oracle_strategy_needs_gt(self):
        with self.assertRaises(detection.ContractError):
            detection.splice_mask_linear(np.zeros((128, 128, 3)), self._decoder, 'oracle')

    def test_linear_rejects_small_image(self):
        with self.assertRaises(detection.ContractError):
            detection.splice_mask_linear(np.zeros((8, 8, 3)), self._decoder, 12.)

    def test_network_binarizes(self):
        soft = np.full((128, 128), 0.2, dtype=np.float32)
        soft[self._gt.astype(bool)] = 0.7
        splice_net = networks.SpliceNet((128, 128), levels=2, base_channels=4)
        with mock.patch.object(networks, 'splice_mask_net', return_value=soft):
            result = detection.splice_mask_network(np.zeros((128, 128, 3)), splice_net, self._gt)
        np.testing.assert_array_equal(result.mask, self._gt)
        self.assertEqual(result.f1, 1.)
        self.assertEqual(result.method, detection.SpliceMethod.NETWORK)

    def test_network_rejects_other_sizes(self):
        splice_net = networks.SpliceNet((32, 32), levels=2, base_channels=4)
        with self.assertRaises(detection.ContractError):
            detection.splice_mask_network(np.zeros((48, 48, 3)), splice_net)

    def test_evaluate_rows(self):
        detector = detection.SpliceDetector(detection.FixedThresholdStrategy(self._decoder, 50.))
        with mock.patch.object(networks, 'decode_positions', return_value=self._field):
            frame = detector.evaluate([np.zeros((128, 128, 3))] * 2, [self._gt] * 2, ['a.png', 'b.png'])
        self.assertEqual(list(frame.columns), list(detection.RESULT_COLUMNS))
        self.assertEqual(list(frame['image']), ['a.png', 'b.png'])
        self.assertTrue((frame['method'] == 'linear-fixed').all())
        self.assertTrue((frame['alpha'] == 50.).all())


class CropDetectionTest(unittest.TestCase):

    def setUp(self):
        self._decoder = networks.PositionDecoder(_R, 128, 128, channels=4)

    def test_recovers_offset_and_scale(self):
        field = geometry.ideal_field((20., 30.), 0.5, (49, 49), _R)
        with mock.patch.object(networks, 'decode_positions', return_value=field):
            estimate = detection.detect_crop(np.zeros((64, 64, 3)), self._decoder)
        self.assertAlmostEqual(estimate.mu_x, 20., places=6)
        self.assertAlmostEqual(estimate.mu_y, 30., places=6)
        self.assertAlmostEqual(estimate.s, 0.5, places=6)

    def test_too_small(self):
        with self.assertRaises(detection.ContractError):
            detection.detect_crop(np.zeros((16, 40, 3)), self._decoder)


class ClassifierTest(unittest.TestCase):

    def test_untrained_is_undecided(self):
        classifier = networks.StegaposClassifier((13, 13), 16)
        verdict = detection.classify_stegapos(np.zeros((13, 13, 2)), classifier)
        self.assertAlmostEqual(verdict.probability, 0.5)
        self.assertFalse(verdict.is_encoded)

    def test_wrong_field_shape(self):
        classifier = networks.StegaposClassifier((13, 13), 16)
        with self.assertRaises(detection.ContractError):
            detection.classify_stegapos(np.zeros((12, 13, 2)), classifier)

    def test_verdict_range(self):
        with self.assertRaises(detection.ContractError):
            detection.StegaposVerdict(1.5)

    def test_probabilities_per_field(self):
        classifier = networks.StegaposClassifier((13, 13), 16)
        probabilities = detection.classifier_probabilities(np.zeros((3, 13, 13, 2)), classifier)
        self.assertEqual(probabilities.shape, (3,))
        np.testing.assert_allclose(probabilities, 0.5, atol=1e-6)

    def test_balanced_accuracy(self):
        labels = np.array([1., 1., 1., 0.])
        self.assertAlmostEqual(detection.balanced_accuracy([True, True, True, True], labels), 0.5)
        self.assertAlmostEqual(detection.balanced_accuracy([True, False, True, False], labels), (2 / 3 + 1) / 2)
        self.assertAlmostEqual(detection.balanced_accuracy([True, True, True, False], labels), 1.)

    def test_balanced_accuracy_needs_both_classes(self):
        with self.assertRaises(detection.ContractError):
            detection.balanced_accuracy([True, False], [1., 1.])

    def test_learns_separable_fields(self):
        cfg = _tiny_config()
        ramp = geometry.ideal_field((0., 0.), 1., cfg.field_shape, cfg.receptive_field).astype(np.float32)
        flat = np.zeros_like(ramp)
        fields = np.stack([ramp, flat, ramp, flat])
        labels = np.array([1., 0., 1., 0.], dtype=np.float32)
        models = networks.build_models(cfg.code_spec, cfg.receptive_field, cfg.arch, ('encoder', 'decoder'))
        with mock.patch.object(detection, 'labelled_fields', return_value=(fields, labels)):
            classifier = detection.train_classifier(models['encoder'], models['decoder'], np.zeros((4, 16, 16, 3)),
                                                    cfg)
        self.assertEqual(detection.classifier_accuracy(fields, labels, classifier), 1.)
        self.assertTrue(detection.classify_stegapos(ramp, classifier).is_encoded)
        self.assertFalse(detection.classify_stegapos(flat, classifier).is_encoded)

    def test_labelled_fields_balanced(self):
        cfg = _tiny_config()
        models = networks.build_models(cfg.code_spec, cfg.receptive_field, cfg.arch, ('encoder', 'decoder'))
        images = np.random.default_rng(0).uniform(size=(5, 16, 16, 3)).astype(np.float32)
        fields, labels = detection.labelled_fields(models['encoder'], models['decoder'], images, cfg.code_spec)
        self.assertEqual(fields.shape, (5, 13, 13, 2))
        np.testing.assert_array_equal(labels, [1., 0., 1., 0., 1.])

    def test_needs_two_images(self):
        cfg = _tiny_config()
        with self.assertRaises(detection.ContractError):
            detection.train_classifier(None, None, np.zeros((1, 16, 16, 3)), cfg)


class TrainSpliceNetTest(unittest.TestCase):

    def test_trains_canonical_model(self):
        cfg = _tiny_config()
        encoder = networks.build_model('encoder', cfg.code_spec, cfg.receptive_field, cfg.arch)
        images = np.random.default_rng(1).uniform(size=(4, 16, 16, 3)).astype(np.float32)
        model = detection.train_splice_net(encoder, images, cfg)
        self.assertEqual(model.size, (16, 16))
        self.assertFalse(model.training)
        mask = networks.splice_mask_net(images[0], model)
        self.assertEqual(mask.shape, (16, 16))

    def test_needs_two_images(self):
        with self.assertRaises(detection.ContractError):
            detection.train_splice_net(None, np.zeros((1, 16, 16, 3)), _tiny_config())


if __name__ == '__main__':
    unittest.main()
