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

"""Checkpoint archives.

A checkpoint is an uncompressed zip archive holding
  manifest.txt            UTF-8 `key = value` lines
  <model>/<param>.npy     little-endian float32 arrays with explicit shapes
Entries carry a fixed timestamp so identical content gives identical bytes.
"""
import dataclasses
import io
import os
import pathlib
import tempfile
import zipfile
from typing import Dict, Mapping, Optional, Text, Tuple, Union

from absl import logging
import numpy as np
import torch
from torch import nn

import networks
import poscodes

FORMAT_VERSION = 1
MANIFEST_ENTRY = 'manifest.txt'
_TIMESTAMP = (1980, 1, 1, 0, 0, 0)

PathLike = Union[Text, pathlib.Path]


class LoadError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Manifest:
    height: int = 128
    width: int = 128
    receptive_field: int = 16
    code_depth: int = 8
    omega_base: float = 1e-4
    coordinate_origin: int = poscodes.COORDINATE_ORIGIN
    encoder_levels: int = 3
    encoder_channels: int = 32
    decoder_channels: int = 64
    critic_channels: int = 32
    splice_levels: int = 3
    splice_channels: int = 32
    step: int = 0
    seed: int = 0
    corpus_size: int = 2000
    validation_size: int = 64
    fixed_alpha: float = 12.0
    models: Text = ''
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_config(cls, cfg, step: int = 0) -> 'Manifest':
        """Captures what is needed to rebuild every model from a TrainConfig."""
        return cls(cfg.height, cfg.width, cfg.receptive_field, cfg.code_depth, cfg.omega_base,
                   poscodes.COORDINATE_ORIGIN, cfg.encoder_levels, cfg.encoder_channels,
                   cfg.decoder_channels, cfg.critic_channels, cfg.splice_levels, cfg.splice_channels,
                   step, cfg.seed, cfg.corpus_size, cfg.validation_size, cfg.fixed_alpha)

    @property
    def code_spec(self) -> poscodes.CodeSpec:
        return poscodes.CodeSpec(self.code_depth, self.omega_base, self.width, self.height)

    @property
    def arch(self) -> networks.ArchConfig:
        return networks.ArchConfig(self.encoder_levels, self.encoder_channels, self.decoder_channels,
                                   self.critic_channels, self.splice_levels, self.splice_channels)

    @property
    def model_names(self) -> Tuple[str, ...]:
        return tuple(name for name in self.models.split(',') if name)

    def to_text(self) -> Text:
        return ''.join(f'{field.name} = {getattr(self, field.name)}\n' for field in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: Text) -> 'Manifest':
        raw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition('=')
            raw[key.strip()] = value.strip()
        version = int(raw.get('format_version', -1))
        if version != FORMAT_VERSION:
            raise LoadError(f'{MANIFEST_ENTRY}: unsupported format_version {version}, expected {FORMAT_VERSION}')
        values = {}
        for field in dataclasses.fields(cls):
            if field.name not in raw:
                raise LoadError(f'{MANIFEST_ENTRY}: missing key {field.name}')
            text_value = raw.pop(field.name)
            values[field.name] = text_value if field.type in (str, 'Text') else field.type(text_value)
        if raw:
            raise LoadError(f'{MANIFEST_ENTRY}: unknown keys {sorted(raw)}')
        return cls(**values)


def _entry(name: Text) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _array_bytes(tensor: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4')
    np.lib.format.write_array(buffer, array, allow_pickle=False)
    return buffer.getvalue()


def save_checkpoint(models: Mapping[str, nn.Module], manifest: Manifest, path: PathLike) -> pathlib.Path:
    """
    Writes models and manifest to one archive, atomically.

    :param models: subset of networks.MODEL_NAMES to store
    :param manifest: shapes and provenance; its `models` field is filled in here
    :param path: destination, replaced only once the new archive is complete
    :return: the destination path
    """
    path = pathlib.Path(path)
    unknown = set(models) - set(networks.MODEL_NAMES)
    if unknown:
        raise ValueError(f'Cannot store unknown models {sorted(unknown)}')
    names = [name for name in networks.MODEL_NAMES if name in models]
    manifest = dataclasses.replace(manifest, models=','.join(names))
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.')
    try:
        with os.fdopen(handle, 'wb') as temp_file, zipfile.ZipFile(temp_file, 'w') as archive:
            archive.writestr(_entry(MANIFEST_ENTRY), manifest.to_text().encode('utf8'))
            for name in names:
                for key, tensor in models[name].state_dict().items():
                    archive.writestr(_entry(f'{name}/{key}.npy'), _array_bytes(tensor))
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise
    logging.info('Saved checkpoint %s (step %d, models %s)', path, manifest.step, manifest.models)
    return path


def _open(path: PathLike) -> zipfile.ZipFile:
    try:
        return zipfile.ZipFile(path, 'r')
    except (OSError, zipfile.BadZipFile) as e:
        raise LoadError(f'{path}: not a readable checkpoint: {e}') from e


def _read_manifest(archive: zipfile.ZipFile) -> Manifest:
    try:
        text = archive.read(MANIFEST_ENTRY).decode('utf8')
    except KeyError as e:
        raise LoadError(f'missing entry {MANIFEST_ENTRY}') from e
    except (zipfile.BadZipFile, UnicodeDecodeError) as e:
        raise LoadError(f'corrupted entry {MANIFEST_ENTRY}: {e}') from e
    try:
        return Manifest.from_text(text)
    except ValueError as e:
        if isinstance(e, LoadError):
            raise
        raise LoadError(f'{MANIFEST_ENTRY}: {e}') from e


def read_manifest(path: PathLike) -> Manifest:
    """Reads only the manifest; no parameter blobs are touched."""
    with _open(path) as archive:
        return _read_manifest(archive)


def _read_array(archive: zipfile.ZipFile, entry: Text) -> np.ndarray:
    try:
        data = archive.read(entry)
    except KeyError as e:
        raise LoadError(f'missing entry {entry}') from e
    except zipfile.BadZipFile as e:
        raise LoadError(f'corrupted entry {entry}: {e}') from e
    try:
        array = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    except ValueError as e:
        raise LoadError(f'corrupted entry {entry}: {e}') from e
    if array.dtype != np.dtype('<f4'):
        raise LoadError(f'entry {entry} has dtype {array.dtype}, expected little-endian float32')
    return array


def load_checkpoint(path: PathLike,
                    names: Optional[Tuple[str, ...]] = None) -> Tuple[Dict[str, nn.Module], Manifest]:
    """
    Rebuilds models from an archive.

    :param names: models to load; defaults to every model in the archive
    :return: (models, manifest)
    """
    with _open(path) as archive:
        manifest = _read_manifest(archive)
        wanted = manifest.model_names if names is None else names
        models = {}
        for name in wanted:
            if name not in manifest.model_names:
                raise LoadError(f'{path}: checkpoint has no {name} (has {manifest.models or "nothing"})')
            model = networks.build_model(name, manifest.code_spec, manifest.receptive_field, manifest.arch)
            state = {}
            for key, expected in model.state_dict().items():
                entry = f'{name}/{key}.npy'
                array = _read_array(archive, entry)
                if array.shape != tuple(expected.shape):
                    raise LoadError(f'entry {entry} has shape {array.shape}, expected {tuple(expected.shape)}')
                state[key] = torch.from_numpy(array.copy())
            model.load_state_dict(state)
            model.eval()
            models[name] = model
    logging.info('Loaded %s from %s (step %d)', ','.join(models), path, manifest.step)
    return models, manifest
