"""
Dataset IO Module

Generates alignment datasets and stores them in a versioned little-endian binary
container with a JSON sidecar.

Layout of ``<name>.bin``::

    header   magic "GALN" | u16 version | 32-byte sha256 config digest | u32 sample count
    records  u32 payload length | payload (one AlignmentSample)

Point clouds are stored as <f4 coordinates and normals with <i4 correspondence
ids. Poses are stored as 12 <f8 values so that loaded transforms are bitwise
identical to the generated ones. ``<name>.json`` holds the config, the sample seeds
and a per-pair manifest used for evaluation exclusions.
"""

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import DatasetFormatError, DatasetTruncatedError, DatasetVersionError, DigestMismatchError
from .se3 import RigidTransform
from .shapes import AlignedPair, AlignmentSample, PointCloud, SampleSpec, ShapeConfig, build_sample

logger = logging.getLogger(__name__)

MAGIC = b"GALN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH32sI")
_LENGTH = struct.Struct("<I")
_SAMPLE = struct.Struct("<qiii")
_PAIR = struct.Struct("<iiqqidi")
_CLOUD = struct.Struct("<iB")
_POSE_BYTES = 12 * 8

PathLike = Union[str, Path]


@dataclass(eq=False)
class Dataset:
    """A list of alignment samples together with the config and seeds that produced them."""
    config: ShapeConfig
    seeds: List[int]
    samples: List[AlignmentSample] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def config_to_dict(config: Any) -> Dict[str, Any]:
    """JSON-ready rendering of a config dataclass (tuples become lists)."""
    return json.loads(json.dumps(asdict(config)))


def config_digest(config: Any) -> str:
    """sha256 of the canonical JSON rendering of a config dataclass."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_from_dict(cls, data: Dict[str, Any]):
    """Rebuild a config dataclass from :func:`config_to_dict` output, ignoring unknown keys."""
    known = {f.name for f in fields(cls)}
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in known}
    return cls(**values)


def sample_seeds(seed: int, count: int) -> List[int]:
    """Derive ``count`` independent sample seeds from one run seed."""
    state = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [int(s) for s in state]


def _build(args) -> AlignmentSample:
    config, seed, spec = args
    return build_sample(config, seed, spec)


def generate_dataset(
    config: ShapeConfig,
    seed: int,
    count: Optional[int] = None,
    jobs: int = 1,
    spec: Optional[SampleSpec] = None,
    seeds: Optional[Sequence[int]] = None,
) -> Dataset:
    """Generate a dataset; samples are independent so ``jobs > 1`` uses a process pool.

    The result does not depend on ``jobs``: each sample is a pure function of its seed.
    """
    if seeds is None:
        seeds = sample_seeds(seed, config.n_samples if count is None else count)
    seeds = [int(s) for s in seeds]
    work = [(config, s, spec) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(_build, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        samples = []
        for i, item in enumerate(work):
            samples.append(_build(item))
            if (i + 1) % 100 == 0:
                logger.info("generated %d/%d samples", i + 1, len(work))
    logger.info("generated %d samples (%d pairs each)", len(samples), config.n_pairs)
    return Dataset(config=config, seeds=seeds, samples=samples)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _pose_bytes(t: RigidTransform) -> bytes:
    return t.to_vector12().astype("<f8").tobytes()


def _cloud_bytes(cloud: PointCloud) -> bytes:
    n = len(cloud)
    ids = cloud.ids if cloud.ids is not None else np.arange(n)
    has_normals = cloud.normals is not None
    parts = [
        _CLOUD.pack(n, int(has_normals)),
        np.ascontiguousarray(cloud.points, dtype="<f4").tobytes(),
        np.ascontiguousarray(ids, dtype="<i4").tobytes(),
    ]
    if has_normals:
        parts.append(np.ascontiguousarray(cloud.normals, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_sample(sample: AlignmentSample) -> bytes:
    parts = [_SAMPLE.pack(sample.sample_seed, sample.part_anchor_id, len(sample.pairs), len(sample.modes))]
    anchors = sample.mode_anchors or [(sample.part_anchor_id, -1)] * len(sample.modes)
    parts.append(np.asarray(anchors, dtype="<i4").reshape(-1, 2).tobytes())
    parts.extend(_pose_bytes(m) for m in sample.modes)
    for pair in sample.pairs:
        parts.append(_PAIR.pack(
            pair.category_a, pair.category_b, pair.instance_seed_a, pair.instance_seed_b,
            pair.mode_index, pair.magnitude, len(pair.alt_relatives),
        ))
        parts.extend(_pose_bytes(t) for t in (pair.pose_a, pair.pose_b, pair.gt_relative))
        parts.extend(_pose_bytes(t) for t in pair.alt_relatives)
        parts.append(_cloud_bytes(pair.cloud_a))
        parts.append(_cloud_bytes(pair.cloud_b))
    return b"".join(parts)


class _Reader:
    """Cursor over one record payload; running past the end means truncation."""

    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise DatasetTruncatedError(f"record ends after {len(self.buffer)} bytes, needed {end}")
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))

    def array(self, dtype: str, count: int, shape) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).reshape(shape).astype(dtype[1:])

    def pose(self) -> RigidTransform:
        return RigidTransform.from_vector12(np.frombuffer(self.take(_POSE_BYTES), dtype="<f8"))

    def cloud(self) -> PointCloud:
        n, has_normals = self.unpack(_CLOUD)
        points = self.array("<f4", 3 * n, (n, 3))
        ids = self.array("<i4", n, (n,))
        normals = self.array("<f4", 3 * n, (n, 3)) if has_normals else None
        return PointCloud(points, ids, normals)


def decode_sample(payload: bytes) -> AlignmentSample:
    reader = _Reader(payload)
    sample_seed, anchor, n_pairs, n_modes = reader.unpack(_SAMPLE)
    anchors = [tuple(int(v) for v in row) for row in reader.array("<i4", 2 * n_modes, (n_modes, 2))]
    modes = [reader.pose() for _ in range(n_modes)]
    pairs = []
    for _ in range(n_pairs):
        cat_a, cat_b, seed_a, seed_b, mode_index, magnitude, n_alt = reader.unpack(_PAIR)
        pose_a, pose_b, gt = reader.pose(), reader.pose(), reader.pose()
        alts = [reader.pose() for _ in range(n_alt)]
        cloud_a = reader.cloud()
        cloud_b = reader.cloud()
        pairs.append(AlignedPair(
            cloud_a=cloud_a, cloud_b=cloud_b, pose_a=pose_a, pose_b=pose_b, gt_relative=gt,
            category_a=cat_a, category_b=cat_b, instance_seed_a=seed_a, instance_seed_b=seed_b,
            mode_index=mode_index, magnitude=magnitude, alt_relatives=alts,
        ))
    if reader.offset != len(payload):
        raise DatasetFormatError(f"record has {len(payload) - reader.offset} trailing bytes")
    return AlignmentSample(pairs=pairs, part_anchor_id=anchor, modes=modes,
                           sample_seed=sample_seed, mode_anchors=anchors)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def manifest_entries(dataset: Dataset) -> List[Dict[str, Any]]:
    entries = []
    for sample in dataset.samples:
        entries.append({
            "sample_seed": sample.sample_seed,
            "part_anchor_id": sample.part_anchor_id,
            "n_modes": len(sample.modes),
            "pairs": [
                {
                    "category_a": p.category_a,
                    "category_b": p.category_b,
                    "instance_seed_a": p.instance_seed_a,
                    "instance_seed_b": p.instance_seed_b,
                    "mode_index": p.mode_index,
                    "magnitude": p.magnitude,
                }
                for p in sample.pairs
            ],
        })
    return entries


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Write the binary container and its JSON sidecar.

    Args:
        dataset: Dataset to persist.
        path: Target ``.bin`` path; the sidecar is written next to it.

    Returns:
        The path of the binary file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = dataset.digest
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(MAGIC, FORMAT_VERSION, bytes.fromhex(digest), len(dataset.samples)))
        for sample in dataset.samples:
            payload = encode_sample(sample)
            handle.write(_LENGTH.pack(len(payload)))
            handle.write(payload)

    sidecar = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(dataset.config),
        "config_digest": digest,
        "seeds": list(dataset.seeds),
        "manifest": manifest_entries(dataset),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info("wrote %d samples to %s", len(dataset.samples), path)
    return path


def load_manifest(path: PathLike) -> Dict[str, Any]:
    """Read only the JSON sidecar of a dataset (config, seeds, manifest)."""
    side = sidecar_path(path)
    if not side.exists():
        raise DatasetFormatError(f"missing dataset sidecar {side}")
    return json.loads(side.read_text(encoding="utf-8"))


def load_dataset(path: PathLike) -> Dataset:
    """Load a dataset written by :func:`save_dataset`.

    The whole file is decoded before anything is returned, so a damaged file never
    yields a partial dataset.

    Raises:
        DatasetVersionError: Bad magic or unsupported version.
        DatasetTruncatedError: The file ends before all announced records.
        DigestMismatchError: Header and sidecar disagree on the config digest.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetVersionError(f"{path}: file too short for a dataset header")
    magic, version, digest, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetVersionError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")

    offset = _HEADER.size
    samples = []
    for index in range(count):
        if offset + _LENGTH.size > len(data):
            raise DatasetTruncatedError(f"{path}: truncated before record {index} of {count}")
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        if offset + length > len(data):
            raise DatasetTruncatedError(f"{path}: record {index} truncated")
        samples.append(decode_sample(data[offset:offset + length]))
        offset += length
    if offset != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - offset} trailing bytes after {count} records")

    side = load_manifest(path)
    if side.get("config_digest") != digest.hex():
        raise DigestMismatchError(f"{path}: header digest does not match sidecar config")
    config = config_from_dict(ShapeConfig, side["config"])
    if config_digest(config) != digest.hex():
        raise DigestMismatchError(f"{path}: sidecar config does not reproduce the header digest")
    return Dataset(config=config, seeds=[int(s) for s in side["seeds"]], samples=samples, version=version)
