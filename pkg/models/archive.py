"""
Knowledge-base archive: a single-file container for every layer's memory, masks, task
vectors and biases plus the task registry and partial report.

    offset 0   magic b"CMCKB\\x00\\x00\\x00"
    offset 8   version  uint16 LE
    offset 10  reserved uint16 = 0
    offset 12  payload length uint64 LE
    offset 20  SHA-256 of the payload (32 bytes)
    offset 52  payload: uint32 LE metadata length | metadata JSON | blob section

Tensors are little-endian IEEE-754; masks are packed 1 bit per entry (little bit order).
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from models.continual_memory import ContinualMemory, TaskMask, TaskVector
from models.network import RestorationNet
from utils.exceptions import ArchiveError, ArchiveVersionError, ChecksumError, GeometryMismatchError
from utils.logging import log_exception

MAGIC = b"CMCKB\x00\x00\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct('<8sHHQ32s')
METADATA_LENGTH = struct.Struct('<I')

logger = logging.getLogger('cmc_restore.archive')


@dataclass
class LayerState:
    name: str
    geometry: Tuple[int, int, int]
    dtype: str
    weights: np.ndarray
    frozen_through: int
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    fractions: Dict[int, float] = field(default_factory=dict)
    vectors: Dict[int, np.ndarray] = field(default_factory=dict)
    biases: Dict[int, np.ndarray] = field(default_factory=dict)
    knowledge_sharing: Dict[int, bool] = field(default_factory=dict)


@dataclass
class KnowledgeBaseArchive:
    """
    Attributes:
        version: Format version the file was written with
        layers: Per-layer state in network order
        registry: Task registry (id, name, fraction, knowledge_sharing, degradation)
        report_state: Partial report of the run that wrote the archive
        config_hash: SHA-256 of the resolved configuration
        seed: Global seed of that run
    """
    version: int
    layers: List[LayerState]
    registry: List[Dict[str, Any]] = field(default_factory=list)
    report_state: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ''
    seed: int = 0

    @property
    def frozen_through(self) -> int:
        return self.layers[0].frozen_through if self.layers else 0


class _BlobWriter:
    def __init__(self) -> None:
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, array: np.ndarray) -> Dict[str, Any]:
        little = array.astype(array.dtype.newbyteorder('<'), copy=False)
        data = np.ascontiguousarray(little).tobytes()
        entry = {'offset': self.offset, 'length': len(data), 'shape': list(array.shape), 'dtype': little.dtype.str}
        self.chunks.append(data)
        self.offset += len(data)
        return entry

    def add_mask(self, bits: np.ndarray) -> Dict[str, Any]:
        packed = np.packbits(bits.ravel(), bitorder='little')
        entry = self.add(packed)
        entry['shape'] = list(bits.shape)
        entry['packed'] = True
        return entry


def _read_blob(blobs: bytes, entry: Dict[str, Any]) -> np.ndarray:
    start, length = entry['offset'], entry['length']
    if start + length > len(blobs):
        raise ChecksumError(f"blob at offset {start} runs past the end of the archive")
    raw = np.frombuffer(blobs[start:start + length], dtype=np.dtype(entry['dtype']))
    shape = tuple(entry['shape'])
    if entry.get('packed'):
        count = int(np.prod(shape))
        return np.unpackbits(raw, count=count, bitorder='little').astype(bool).reshape(shape)
    return raw.reshape(shape).astype(raw.dtype.newbyteorder('='))


def _layer_metadata(layer, writer: _BlobWriter) -> Dict[str, Any]:
    memory = layer.memory
    tasks = []
    for task_id in memory.task_ids():
        tasks.append({
            'task_id': task_id,
            'fraction': memory.masks[task_id].fraction,
            'knowledge_sharing': layer.knowledge_sharing[task_id],
            'mask': writer.add_mask(memory.masks[task_id].bits),
            'vector': writer.add(layer.task_vectors[task_id].values),
            'bias': writer.add(layer.biases[task_id]),
        })
    return {
        'name': layer.name,
        'geometry': list(layer.geometry),
        'dtype': layer.dtype.name,
        't': memory.t,
        'frozen_through': memory.frozen_through,
        'weights': writer.add(memory.weights),
        'tasks': tasks,
    }


def encode_archive(net: RestorationNet, registry: Optional[List[Dict[str, Any]]] = None,
                   report_state: Optional[Dict[str, Any]] = None, config_hash: str = '', seed: int = 0) -> bytes:
    writer = _BlobWriter()
    metadata = {
        'format_version': FORMAT_VERSION,
        'config_hash': config_hash,
        'seed': seed,
        'registry': registry or [],
        'report': report_state or {},
        'layers': [_layer_metadata(layer, writer) for layer in net.layers],
    }
    meta_bytes = json.dumps(metadata, sort_keys=True).encode('utf-8')
    payload = METADATA_LENGTH.pack(len(meta_bytes)) + meta_bytes + b''.join(writer.chunks)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(payload), hashlib.sha256(payload).digest())
    return header + payload


@contextmanager
def _atomic_write(path: str):
    """Write to a temp file in the target directory, fsync, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', suffix='.cmc', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def save_archive(net: RestorationNet, path: str, registry: Optional[List[Dict[str, Any]]] = None,
                 report_state: Optional[Dict[str, Any]] = None, config_hash: str = '', seed: int = 0) -> str:
    """
    Atomically write the network's knowledge base to path.

    Raises:
        ArchiveError: If the file cannot be written
    """
    data = encode_archive(net, registry, report_state, config_hash, seed)
    try:
        with _atomic_write(path) as handle:
            handle.write(data)
    except OSError as e:
        log_exception(e, {'path': path})
        raise ArchiveError(f"failed to write archive {path}: {e}")
    logger.info(f"archive written to {path} ({len(data)} bytes, frozen through task {net.frozen_through})")
    return path


def decode_archive(data: bytes) -> KnowledgeBaseArchive:
    if len(data) < HEADER.size:
        raise ChecksumError(f"archive truncated: {len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, _, length, digest = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError("not a knowledge-base archive (bad magic)")
    if version > FORMAT_VERSION:
        raise ArchiveVersionError(f"archive format version {version} is newer than supported version {FORMAT_VERSION}")
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise ChecksumError(f"archive payload is {len(payload)} bytes, header says {length}")
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("archive digest mismatch")

    (meta_length,) = METADATA_LENGTH.unpack_from(payload)
    meta_end = METADATA_LENGTH.size + meta_length
    try:
        metadata = json.loads(payload[METADATA_LENGTH.size:meta_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ChecksumError(f"archive metadata is unreadable: {e}")
    blobs = payload[meta_end:]

    layers = []
    for entry in metadata['layers']:
        state = LayerState(
            name=entry['name'],
            geometry=tuple(entry['geometry']),
            dtype=entry['dtype'],
            weights=_read_blob(blobs, entry['weights']),
            frozen_through=entry['frozen_through'],
        )
        for task in entry['tasks']:
            task_id = task['task_id']
            state.masks[task_id] = _read_blob(blobs, task['mask'])
            state.fractions[task_id] = task['fraction']
            state.vectors[task_id] = _read_blob(blobs, task['vector'])
            state.biases[task_id] = _read_blob(blobs, task['bias'])
            state.knowledge_sharing[task_id] = task['knowledge_sharing']
        layers.append(state)

    return KnowledgeBaseArchive(
        version=version,
        layers=layers,
        registry=metadata.get('registry', []),
        report_state=metadata.get('report', {}),
        config_hash=metadata.get('config_hash', ''),
        seed=metadata.get('seed', 0),
    )


def load_archive(path: str) -> KnowledgeBaseArchive:
    """
    Read and verify an archive. Nothing is returned unless the whole file checks out.

    Raises:
        ChecksumError: Truncated or corrupted file
        ArchiveVersionError: Written by a newer format version
        ArchiveError: Unreadable file or bad magic
    """
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as e:
        log_exception(e, {'path': path})
        raise ArchiveError(f"failed to read archive {path}: {e}")
    archive = decode_archive(data)
    logger.info(f"archive {path} loaded: {len(archive.layers)} layers, frozen through task {archive.frozen_through}")
    return archive


def restore_network(net: RestorationNet, archive: KnowledgeBaseArchive, discard_unfrozen: bool = False) -> None:
    """
    Replace the network's knowledge base with the archived one.

    Args:
        net: Network built from the matching configuration
        archive: Loaded archive
        discard_unfrozen: Drop a task that was allocated but never frozen

    Raises:
        GeometryMismatchError: Layer names, geometry or precision differ
    """
    archived = [(layer.name, tuple(layer.geometry), layer.dtype) for layer in archive.layers]
    current = [(layer.name, tuple(layer.geometry), layer.dtype.name) for layer in net.layers]
    if archived != current:
        raise GeometryMismatchError(f"archive layers {archived} do not match network layers {current}")

    for layer, state in zip(net.layers, archive.layers):
        memory = ContinualMemory(state.weights.shape[0], state.weights.shape[1], layer.dtype, layer.name)
        memory.weights = state.weights.astype(layer.dtype, copy=True)
        for task_id in sorted(state.masks):
            memory.masks[task_id] = TaskMask(task_id, state.masks[task_id], state.fractions[task_id])
        memory.frozen_through = state.frozen_through

        layer.memory = memory
        layer.task_vectors = {}
        layer.biases = {}
        layer.knowledge_sharing = dict(state.knowledge_sharing)
        for task_id in sorted(state.vectors):
            vector = TaskVector(task_id, state.vectors[task_id])
            bias = np.array(state.biases[task_id], dtype=layer.dtype)
            if task_id <= state.frozen_through:
                vector.freeze()
                bias.flags.writeable = False
            layer.task_vectors[task_id] = vector
            layer.biases[task_id] = bias
        layer.cached_old_kernel = None
        layer.grads = {}
        layer._cache = None

    if discard_unfrozen:
        net.discard_active_task()
    elif net.active_task_id is not None:
        for layer in net.layers:
            if layer.knowledge_sharing[net.active_task_id]:
                layer.cached_old_kernel = layer.old_kernel(net.active_task_id).reshape(-1)
    logger.info(f"network restored through task {archive.frozen_through}")
