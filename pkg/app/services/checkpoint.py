"""Checkpoint file: JSON manifest followed by raw little-endian float32 arrays.

Layout::

    b'DARTCKPT' | uint32 LE manifest length | manifest JSON (utf-8) | array bytes

Parameter entries in the manifest carry name, shape, byte offset into the
array section and flags; arrays are stored in manifest order.
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from app.errors import ArtifactMismatchError
from app.services.toy_mlm import MlmConfig, ToyMlmModel, Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b'DARTCKPT'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<8sI')


def build_manifest(model, prompt_spec=None, metadata=None):
    """Describe the model's parameters, config and vocabulary."""
    entries = []
    offset = 0
    for name, param in model.registry:
        nbytes = int(param.size) * 4
        entries.append({
            'name': name,
            'shape': list(param.shape),
            'offset': offset,
            'nbytes': nbytes,
            'decay_exempt': bool(param.decay_exempt),
        })
        offset += nbytes
    return {
        'format_version': FORMAT_VERSION,
        'config': model.config.to_dict(),
        'vocabulary': model.vocab.to_dict(),
        'parameters': entries,
        'prompt_spec': prompt_spec.to_dict() if prompt_spec is not None else None,
        'metadata': metadata or {},
    }


def save_checkpoint(model, path, prompt_spec=None, metadata=None):
    """
    Write `model` (and optionally the PromptSpec it was tuned with) to `path`.

    Args:
        model (ToyMlmModel): Model to save
        path (str | Path): Output file
        prompt_spec (PromptSpec): Optional prompt layout stored in the manifest
        metadata (dict): Free-form JSON metadata

    Returns:
        Path: Written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(model, prompt_spec, metadata)
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(_HEADER.pack(MAGIC, len(manifest_bytes)))
        handle.write(manifest_bytes)
        for _, param in model.registry:
            handle.write(np.ascontiguousarray(param.data, dtype='<f4').tobytes())
    logger.debug("saved checkpoint %s (%d parameters)", path, len(manifest['parameters']))
    return path


def read_manifest(path):
    """Read only the manifest of a checkpoint."""
    manifest, _ = _read(path)
    return manifest


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArtifactMismatchError(f"{path}: file too short to be a checkpoint")
    magic, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArtifactMismatchError(f"{path}: not a checkpoint file")
    start = _HEADER.size
    try:
        manifest = json.loads(raw[start:start + manifest_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactMismatchError(f"{path}: unreadable manifest ({e})") from e
    if manifest.get('format_version') != FORMAT_VERSION:
        raise ArtifactMismatchError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    return manifest, raw[start + manifest_len:]


def load_checkpoint(path):
    """
    Load a checkpoint, validating every array against the manifest.

    Returns:
        tuple: (ToyMlmModel, manifest dict)
    """
    manifest, payload = _read(path)
    vocab = Vocabulary.from_dict(manifest['vocabulary'])
    config = MlmConfig(**manifest['config'])
    model = ToyMlmModel(config, vocab)

    expected = sum(entry['nbytes'] for entry in manifest['parameters'])
    if len(payload) != expected:
        raise ArtifactMismatchError(f"{path}: payload holds {len(payload)} bytes, manifest expects {expected}")

    state = {}
    for entry in manifest['parameters']:
        shape = tuple(entry['shape'])
        if entry['nbytes'] != int(np.prod(shape, dtype=np.int64)) * 4:
            raise ArtifactMismatchError(f"{path}: size of {entry['name']} disagrees with its shape {shape}")
        chunk = payload[entry['offset']:entry['offset'] + entry['nbytes']]
        values = np.frombuffer(chunk, dtype='<f4').reshape(shape)
        if entry['name'] not in model.registry:
            model.registry.register(entry['name'], values, decay_exempt=entry.get('decay_exempt', False))
        elif model.registry[entry['name']].shape != shape:
            raise ArtifactMismatchError(
                f"{path}: {entry['name']} has shape {shape}, model expects {model.registry[entry['name']].shape}"
            )
        state[entry['name']] = values
    missing = set(model.registry.names()) - set(state)
    if missing:
        raise ArtifactMismatchError(f"{path}: missing parameters {sorted(missing)}")
    model.registry.load_state_dict(state)
    return model, manifest
