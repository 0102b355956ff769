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

import unittest

import mock
import numpy as np
import torch
from torch import nn

import networks
import poscodes


def _randomize(model: nn.Module, scale: float = 0.5, seed: int = 0) -> nn.Module:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(scale * torch.randn(param.shape, generator=generator))
    return model


class ReceptiveFieldTest(unittest.TestCase):

    def test_canonical_decoder(self):
        decoder = networks.PositionDecoder(16)
        self.assertEqual(networks.receptive_field(decoder.features), 16)
        self.assertEqual(decoder.receptive_field, 16)

    def test_full_scale_decoder(self):
        self.assertEqual(networks.PositionDecoder(50, 400, 400, channels=4).receptive_field, 50)

    def test_strided_stack(self):
        layers = [nn.Conv2d(1, 1, 3, stride=1), nn.Conv2d(1, 1, 2, stride=2), nn.Conv2d(1, 1, 3)]
        self.assertEqual(networks.receptive_field(layers), 1 + 2 + 1 + 2 * 2)

    def test_odd_receptive_field(self):
        with self.assertRaises(networks.ShapeError):
            networks.PositionDecoder(15)


class EncodeTest(unittest.TestCase):

    def setUp(self):
        self._spec = poscodes.CodeSpec(width=32, height=32)
        self._codes = poscodes.make_code_field(self._spec)
        self._image = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)

    def test_untrained_encoder_is_identity(self):
        encoder = networks.ResidualEncoder(8, levels=2, base_channels=4)
        stego, residual = networks.encode(self._image, self._codes, encoder)
        np.testing.assert_array_equal(residual, 0.)
        np.testing.assert_array_equal(stego, self._image)

    def test_residual_clamped(self):
        encoder = networks.ResidualEncoder(8, levels=2, base_channels=4)
        with mock.patch.object(encoder, 'forward', return_value=torch.full((1, 3, 32, 32), 0.5)):
            stego, residual = networks.encode(self._image, self._codes, encoder)
        np.testing.assert_allclose(residual, 0.2)
        np.testing.assert_allclose(stego, np.clip(self._image + 0.2, 0, 1), atol=1e-6)

    def test_bounds_with_random_weights(self):
        for seed in range(3):
            encoder = _randomize(networks.ResidualEncoder(8, levels=2, base_channels=4), seed=seed)
            stego, residual = networks.encode(self._image, self._codes, encoder)
            self.assertLessEqual(np.abs(residual).max(), 0.2 + 1e-7)
            self.assertGreaterEqual(stego.min(), 0.)
            self.assertLessEqual(stego.max(), 1.)

    def test_size_mismatch(self):
        encoder = networks.ResidualEncoder(8, levels=2, base_channels=4)
        with self.assertRaises(networks.ShapeError):
            networks.encode(self._image[:16], self._codes, encoder)

    def test_depth_mismatch(self):
        encoder = networks.ResidualEncoder(4, levels=2, base_channels=4)
        with self.assertRaises(networks.ShapeError):
            networks.encode(self._image, self._codes, encoder)

    def test_deterministic(self):
        encoder = _randomize(networks.ResidualEncoder(8, levels=2, base_channels=4))
        first, _ = networks.encode(self._image, self._codes, encoder)
        second, _ = networks.encode(self._image, self._codes, encoder)
        np.testing.assert_array_equal(first, second)

    def test_straight_through_gradient(self):
        x = torch.tensor([-1., 0.1, 3.], requires_grad=True)
        networks.straight_through_clamp(x, -0.2, 0.2).sum().backward()
        np.testing.assert_array_equal(x.grad.numpy(), [1., 1., 1.])


class DecodePositionsTest(unittest.TestCase):

    def setUp(self):
        self._decoder = networks.PositionDecoder(16, 128, 128, channels=8)

    def test_output_shape(self):
        field = networks.decode_positions(np.zeros((128, 128, 3)), self._decoder)
        self.assertEqual(field.shape, (113, 113, 2))

    def test_shape_law_random_sizes(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            rows, cols = rng.integers(16, 60, size=2)
            field = networks.decode_positions(np.zeros((rows, cols, 3)), self._decoder)
            self.assertEqual(field.shape, (rows - 15, cols - 15, 2))

    def test_bounded_output(self):
        decoder = _randomize(networks.PositionDecoder(16, 128, 128, channels=8), scale=3.)
        field = networks.decode_positions(np.random.default_rng(0).uniform(size=(40, 40, 3)), decoder)
        self.assertGreaterEqual(field.min(), 8 - 12.8)
        self.assertLessEqual(field.max(), 128 - 8 + 12.8)

    def test_too_small(self):
        with self.assertRaises(networks.ShapeError):
            networks.decode_positions(np.zeros((15, 40, 3)), self._decoder)

    def test_batch_matches_single(self):
        decoder = _randomize(networks.PositionDecoder(16, 128, 128, channels=8), scale=0.3)
        images = np.random.default_rng(2).uniform(size=(3, 20, 24, 3)).astype(np.float32)
        fields = networks.decode_batch(images, decoder, batch_size=2)
        self.assertEqual(fields.shape, (3, 5, 9, 2))
        np.testing.assert_allclose(fields[2], networks.decode_positions(images[2], decoder), atol=1e-5)


class EncodeBatchTest(unittest.TestCase):

    def test_matches_single(self):
        spec = poscodes.CodeSpec(width=32, height=32)
        codes = poscodes.make_code_field(spec)
        encoder = _randomize(networks.ResidualEncoder(8, levels=2, base_channels=4), scale=0.2)
        images = np.random.default_rng(3).uniform(size=(3, 32, 32, 3)).astype(np.float32)
        stego = networks.encode_batch(images, codes, encoder, batch_size=2)
        self.assertEqual(stego.shape, images.shape)
        np.testing.assert_allclose(stego[1], networks.encode(images[1], codes, encoder)[0], atol=1e-5)

    def test_size_mismatch(self):
        codes = poscodes.make_code_field(poscodes.CodeSpec(width=32, height=32))
        with self.assertRaises(networks.ShapeError):
            networks.encode_batch(np.zeros((2, 16, 16, 3)), codes, networks.ResidualEncoder(8, 2, 4))


class CriticTest(unittest.TestCase):

    def test_untrained_critic(self):
        self.assertAlmostEqual(networks.criticize(np.zeros((32, 32, 3)), networks.PatchCritic(4)), 0.5)

    def test_probability_range(self):
        critic = _randomize(networks.PatchCritic(4))
        probability = networks.criticize(np.ones((32, 32, 3)), critic)
        self.assertGreater(probability, 0.)
        self.assertLess(probability, 1.)

    def test_rejects_grayscale(self):
        critic = networks.PatchCritic(4)
        with self.assertRaises(networks.ShapeError):
            networks.criticize(np.zeros((32, 32)), critic)
        with self.assertRaises(networks.ShapeError):
            networks.criticize(np.zeros((32, 32, 4)), critic)


class SpliceNetTest(unittest.TestCase):

    def test_mask_range(self):
        model = _randomize(networks.SpliceNet((32, 32), levels=2, base_channels=4))
        mask = networks.splice_mask_net(np.random.default_rng(0).uniform(size=(32, 32, 3)), model)
        self.assertEqual(mask.shape, (32, 32))
        self.assertGreaterEqual(mask.min(), 0.)
        self.assertLessEqual(mask.max(), 1.)

    def test_non_canonical_size(self):
        model = networks.SpliceNet((32, 32), levels=2, base_channels=4)
        with self.assertRaises(networks.ShapeError):
            networks.splice_mask_net(np.zeros((48, 48, 3)), model)


class BuildModelTest(unittest.TestCase):

    def test_build_all(self):
        spec = poscodes.CodeSpec(width=32, height=32)
        arch = networks.ArchConfig(encoder_levels=2, encoder_channels=4, decoder_channels=4,
                                   critic_channels=4, splice_levels=2, splice_channels=4)
        models = networks.build_models(spec, 8, arch)
        self.assertCountEqual(models.keys(), networks.MODEL_NAMES)
        self.assertEqual(models['decoder'].receptive_field, 8)
        self.assertEqual(models['classifier'].field_shape, (25, 25))
        self.assertEqual(models['splice_net'].size, (32, 32))

    def test_unknown(self):
        with self.assertRaises(ValueError):
            networks.build_model('generator', poscodes.CodeSpec(), 16)


if __name__ == '__main__':
    unittest.main()
