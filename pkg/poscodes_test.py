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
from scipy.spatial import distance

import poscodes


class CodeSpecTest(unittest.TestCase):

    def test_frequencies(self):
        spec = poscodes.CodeSpec(depth=8, omega_base=1e-4)
        np.testing.assert_allclose(spec.frequencies, [1e-2, 1e-4])

    def test_depth_not_multiple_of_four(self):
        with self.assertRaises(poscodes.SpecError):
            poscodes.CodeSpec(depth=6)

    def test_omega_out_of_range(self):
        with self.assertRaises(poscodes.SpecError):
            poscodes.CodeSpec(omega_base=1.5)
        with self.assertRaises(poscodes.SpecError):
            poscodes.CodeSpec(omega_base=0.)

    def test_empty_size(self):
        with self.assertRaises(poscodes.SpecError):
            poscodes.CodeSpec(width=0)


class MakeCodeFieldTest(unittest.TestCase):

    def setUp(self):
        self._spec = poscodes.CodeSpec(depth=8, omega_base=1e-4, width=32, height=24)
        self._field = poscodes.make_code_field(self._spec)

    def test_shape(self):
        self.assertEqual(self._field.shape, (24, 32, 8))

    def test_origin(self):
        np.testing.assert_array_equal(self._field.values[0, 0], [1, 0, 1, 0, 1, 0, 1, 0])

    def test_scalar_value(self):
        codes = self._field.values[0, 3]
        self.assertAlmostEqual(codes[0], 0.99955, places=5)
        self.assertAlmostEqual(codes[1], 0.03000, places=5)

    def test_column_is_x(self):
        np.testing.assert_allclose(self._field.values[5, 7], poscodes.code_at(7, 5, self._spec))

    def test_range(self):
        self.assertLessEqual(np.abs(self._field.values).max(), 1.)

    def test_shifted_field(self):
        shifted = poscodes.make_code_field(self._spec, shift=(4, 2))
        np.testing.assert_allclose(shifted.values[0, 0], self._field.values[2, 4])
        self.assertEqual(shifted.shift, (4., 2.))

    def test_distinct_codes(self):
        grid = self._field.values[::3, ::3].reshape(-1, 8)
        self.assertGreater(distance.pdist(grid).min(), 0.)

    def test_period(self):
        spec = poscodes.CodeSpec(depth=8, omega_base=0.25, width=32, height=24)
        self.assertAlmostEqual(spec.period, 8 * np.pi)
        np.testing.assert_allclose(poscodes.code_at(spec.period, 0, spec)[4:6], poscodes.code_at(0, 0, spec)[4:6],
                                   atol=1e-9)

    def test_warns_when_codes_repeat(self):
        with mock.patch.object(poscodes.logging, 'warning') as warning:
            poscodes.make_code_field(self._spec)
            warning.assert_not_called()
            poscodes.make_code_field(poscodes.CodeSpec(depth=8, omega_base=0.25, width=32, height=24))
            warning.assert_called_once()


class ShiftCodeTest(unittest.TestCase):

    def setUp(self):
        self._spec = poscodes.CodeSpec()

    def test_identity(self):
        codes = poscodes.code_at(11, 17, self._spec)
        np.testing.assert_allclose(poscodes.shift_code(codes, 0, 0, self._spec), codes, atol=1e-12)

    def test_matches_direct_evaluation(self):
        codes = poscodes.code_at(3, 0, self._spec)
        expected = poscodes.code_at(8, 0, self._spec)
        np.testing.assert_allclose(poscodes.shift_code(codes, 5, 0, self._spec), expected, atol=1e-9)

    def test_random_triples(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 400, size=(1000, 2))
        delta = rng.uniform(-200, 200, size=(1000, 2))
        codes = poscodes.code_at(xy[:, 0], xy[:, 1], self._spec)
        for i in range(1000):
            shifted = poscodes.shift_code(codes[i], delta[i, 0], delta[i, 1], self._spec)
            expected = poscodes.code_at(xy[i, 0] + delta[i, 0], xy[i, 1] + delta[i, 1], self._spec)
            np.testing.assert_allclose(shifted, expected, atol=1e-9)

    def test_inverse(self):
        codes = poscodes.code_at(40, 90, self._spec)
        there = poscodes.shift_code(codes, 13.5, -7, self._spec)
        np.testing.assert_allclose(poscodes.shift_code(there, -13.5, 7, self._spec), codes, atol=1e-12)

    def test_whole_field(self):
        spec = poscodes.CodeSpec(width=16, height=16)
        field = poscodes.make_code_field(spec)
        moved = poscodes.shift_code(field.values, 3, 2, spec)
        np.testing.assert_allclose(moved, poscodes.make_code_field(spec, shift=(3, 2)).values, atol=1e-9)

    def test_wrong_depth(self):
        with self.assertRaises(poscodes.SpecError):
            poscodes.shift_code(np.zeros(4), 1, 1, self._spec)


if __name__ == '__main__':
    unittest.main()
