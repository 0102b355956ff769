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

"""Training and evaluation configuration.

Config files are flat UTF-8 text, one `key = value` per line, `#` starts a comment.
Every key must name a TrainConfig field.
"""
import dataclasses
import pathlib
from typing import Any, Dict, Iterable, Optional, Text, Union

from absl import logging

import networks
import poscodes

_TRUE = ('true', 'yes', '1', 'on')
_FALSE = ('false', 'no', '0', 'off')


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    # Optimisation
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    # Geometry of the canonical frame and codes
    height: int = 128
    width: int = 128
    receptive_field: int = 16
    code_depth: int = 8
    omega_base: float = 1e-4
    # Two-phase schedule
    s_min: float = 0.25
    phase1_steps: int = 4000
    phase1_rmse: float = 4.0
    max_steps: int = 8000
    schedule: Text = '0:0,0,0,0; 1000:0.01,0.02,0.02,0.0005; 6000:0.02,0.05,0.05,0.001'
    critic_every: int = 1
    crop_augmentation: bool = False
    crop_min_fraction: float = 0.5
    validate_every: int = 250
    checkpoint_every: int = 1000
    validation_size: int = 64
    corpus_size: int = 2000
    num_workers: int = 0
    single_threaded: bool = True
    # Downstream detectors
    fixed_alpha: float = 12.0
    classifier_steps: int = 500
    classifier_learning_rate: float = 1e-3
    splice_steps: int = 2000
    splice_learning_rate: float = 1e-3
    mask_area_min: float = 0.1
    mask_area_max: float = 0.5
    # Architecture
    encoder_levels: int = 3
    encoder_channels: int = 32
    decoder_channels: int = 64
    critic_channels: int = 32
    splice_levels: int = 3
    splice_channels: int = 32

    def __post_init__(self):
        if not 0 < self.s_min <= 1:
            raise ConfigError(f's_min must lie in (0, 1], got {self.s_min}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be at least 1, got {self.batch_size}')
        if min(self.learning_rate, self.splice_learning_rate, self.classifier_learning_rate) <= 0:
            raise ConfigError('Learning rates must be positive')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f'Adam moment coefficients must lie in [0, 1), got ({self.beta1}, {self.beta2})')
        if self.receptive_field < 4 or self.receptive_field % 2:
            raise ConfigError(f'receptive_field must be even and at least 4, got {self.receptive_field}')
        if int(self.s_min * min(self.height, self.width)) < self.receptive_field:
            raise ConfigError(f'Images decimated by s_min={self.s_min} are smaller than the receptive field')
        if not 0 < self.mask_area_min <= self.mask_area_max < 1:
            raise ConfigError('Mask area range must satisfy 0 < min <= max < 1')
        if not 0 < self.crop_min_fraction <= 1:
            raise ConfigError(f'crop_min_fraction must lie in (0, 1], got {self.crop_min_fraction}')
        if self.fixed_alpha <= 0:
            raise ConfigError(f'fixed_alpha must be positive, got {self.fixed_alpha}')
        try:
            self.code_spec
        except poscodes.SpecError as e:
            raise ConfigError(str(e)) from e

    @property
    def code_spec(self) -> poscodes.CodeSpec:
        return poscodes.CodeSpec(self.code_depth, self.omega_base, self.width, self.height)

    @property
    def arch(self) -> networks.ArchConfig:
        return networks.ArchConfig(self.encoder_levels, self.encoder_channels, self.decoder_channels,
                                   self.critic_channels, self.splice_levels, self.splice_channels)

    @property
    def field_shape(self):
        return self.height - self.receptive_field + 1, self.width - self.receptive_field + 1


_FIELDS = {field.name: field for field in dataclasses.fields(TrainConfig)}

PRESETS: Dict[str, Dict[str, Any]] = {
    'desk': {},
    'full': dict(learning_rate=1e-7, s_min=0.2, height=400, width=400, receptive_field=50),
}


def _convert(key: str, text: str) -> Any:
    kind = _FIELDS[key].type
    text = text.strip()
    try:
        if kind in (bool, 'bool'):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind in (int, 'int'):
            return int(text)
        if kind in (float, 'float'):
            return float(text)
    except ValueError as e:
        raise ConfigError(f'Bad value for {key}: {text!r}') from e
    return text


def parse(lines: Iterable[Text], source: Text = '<config>') -> Dict[str, Any]:
    """Parses `key = value` lines into typed values."""
    values = {}
    for number, line in enumerate(lines, 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{number}: expected key = value, got {line!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in _FIELDS:
            raise ConfigError(f'{source}:{number}: unknown key {key!r}')
        values[key] = _convert(key, value)
    return values


def preset(name: Text) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f'Unknown preset {name!r}; choose from {sorted(PRESETS)}')
    return TrainConfig(**PRESETS[name])


def load_config(path: Optional[Union[Text, pathlib.Path]] = None, overrides: Iterable[Text] = (),
                base: Text = 'desk') -> TrainConfig:
    """
    Builds a TrainConfig from a preset, an optional config file and `key=value` overrides, in that order.

    :param path: config file, or None for the preset alone
    :param overrides: strings such as 'batch_size=4'
    :param base: preset the file and overrides are applied on top of
    :return: validated TrainConfig
    """
    if base not in PRESETS:
        raise ConfigError(f'Unknown preset {base!r}')
    values = dict(PRESETS[base])
    if path:
        logging.info('Reading config %s', path)
        with open(path, mode='r', encoding='utf8') as config_file:
            values.update(parse(config_file, str(path)))
    values.update(parse(overrides, '--set'))
    for key, value in sorted(values.items()):
        logging.debug('config %s = %s', key, value)
    return TrainConfig(**values)


def to_text(cfg: TrainConfig) -> Text:
    """Serializes a config in the file format read by load_config."""
    lines = []
    for key in _FIELDS:
        value = getattr(cfg, key)
        lines.append(f'{key} = {str(value).lower() if isinstance(value, bool) else value}')
    return '\n'.join(lines) + '\n'
