"""Motor babbling, preprocessing and the ``SMBI`` dataset file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .scene import SceneConfig, render_scene

MAGIC = b"SMBI"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, n, H, W, N_m


class DatasetFormatError(ValueError):
    """A dataset file could not be decoded."""


class MalformedHeaderError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class TrailingDataError(DatasetFormatError):
    pass


# ---------------------------------------------------------------------------
# Motor states
# ---------------------------------------------------------------------------


def sample_motor_babble(count: int, ranges, seed) -> np.ndarray:
    """``(count, N_m)`` joint vectors, each angle uniform in its range."""
    ranges = np.asarray(ranges, dtype=np.float64)
    if count < 0:
        raise ValueError("count must be nonnegative")
    if ranges.ndim != 2 or ranges.shape[1] != 2:
        raise ValueError(f"ranges must be (N_m, 2), got {ranges.shape}")
    if np.any(ranges[:, 0] > ranges[:, 1]):
        raise ValueError("every range needs lo <= hi")
    rng = np.random.default_rng(seed)
    return rng.uniform(ranges[:, 0], ranges[:, 1], size=(count, len(ranges)))


def _checked_ranges(ranges) -> tuple[np.ndarray, np.ndarray]:
    ranges = np.asarray(ranges, dtype=np.float64)
    lo, hi = ranges[:, 0], ranges[:, 1]
    if np.any(hi <= lo):
        raise ValueError("normalisation needs every range to have positive width")
    return lo, hi


def normalize_motor(joints, ranges) -> np.ndarray:
    """Affine map of each joint range onto [-1, 1]."""
    lo, hi = _checked_ranges(ranges)
    return 2.0 * (np.asarray(joints, dtype=np.float64) - lo) / (hi - lo) - 1.0


def denormalize_motor(motor, ranges) -> np.ndarray:
    lo, hi = _checked_ranges(ranges)
    return lo + (np.asarray(motor, dtype=np.float64) + 1.0) * (hi - lo) / 2.0


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _blocks(image: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image dims {(h, w)}")
    return image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:])


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box filter: each output component is the mean of its ``factor x factor`` block."""
    image = np.asarray(image)
    if factor == 1:
        _blocks(image, 1)
        return image.copy()
    out = _blocks(image, factor).mean(axis=(1, 3), dtype=np.float64)
    return out.astype(image.dtype) if np.issubdtype(image.dtype, np.floating) else out


def downsample_mask(mask: np.ndarray, factor: int, mode: str = "all") -> np.ndarray:
    """Reduce a boolean mask by blocks; ``"all"`` keeps only fully covered blocks."""
    blocks = _blocks(np.asarray(mask, dtype=bool), factor)
    if mode == "all":
        return blocks.all(axis=(1, 3))
    if mode == "any":
        return blocks.any(axis=(1, 3))
    raise ValueError(f"unknown mask reduction {mode!r}")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    motor: np.ndarray    # (N_m,) in [-1, 1]
    sensory: np.ndarray  # (H, W, 3) in [0, 1]
    gt_mask: np.ndarray  # (H, W, 3) bool, evaluation only


@dataclass
class Dataset:
    """Column-oriented store of records; indexing yields :class:`DatasetRecord`."""

    motors: np.ndarray
    images: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.motors = np.asarray(self.motors, dtype=np.float32)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=bool)
        n = len(self.motors)
        if self.motors.ndim != 2:
            raise ValueError(f"motors must be (n, N_m), got {self.motors.shape}")
        if self.images.ndim != 4 or self.images.shape[0] != n or self.images.shape[3] != 3:
            raise ValueError(f"images must be (n, H, W, 3), got {self.images.shape}")
        if self.masks.shape != self.images.shape:
            raise ValueError(f"masks {self.masks.shape} do not match images {self.images.shape}")

    @classmethod
    def empty(cls, image_dims: tuple[int, int], motor_dim: int) -> "Dataset":
        h, w = image_dims
        return cls(np.zeros((0, motor_dim)), np.zeros((0, h, w, 3)), np.zeros((0, h, w, 3), dtype=bool))

    @classmethod
    def from_records(cls, records: Sequence[DatasetRecord]) -> "Dataset":
        return cls(np.stack([r.motor for r in records]), np.stack([r.sensory for r in records]),
                   np.stack([r.gt_mask for r in records]))

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def motor_dim(self) -> int:
        return self.motors.shape[1]

    def __len__(self) -> int:
        return len(self.motors)

    def __getitem__(self, i: int) -> DatasetRecord:
        return DatasetRecord(self.motors[i], self.images[i], self.masks[i])

    def __iter__(self) -> Iterator[DatasetRecord]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.motors.shape == other.motors.shape and self.images.shape == other.images.shape
                and np.array_equal(self.motors, other.motors) and np.array_equal(self.images, other.images)
                and np.array_equal(self.masks, other.masks))

    def subset(self, indices) -> "Dataset":
        return Dataset(self.motors[indices], self.images[indices], self.masks[indices])


def make_record(joints, config: SceneConfig, background_seed) -> DatasetRecord:
    """Render, downsample and normalise one pose over one background."""
    scene = render_scene(joints, config, background_seed)
    image = downsample(scene.image, config.downsample)
    mask = downsample_mask(scene.body_mask, config.downsample, config.mask_reduce)
    return DatasetRecord(normalize_motor(joints, config.ranges).astype(np.float32), image.astype(np.float32), mask)


def generate_dataset(n: int, config: SceneConfig, seed) -> Dataset:
    """Babble ``n`` poses and composite each over a fresh background.

    Poses and backgrounds come from independent child streams of ``seed``,
    one background stream per record.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return Dataset.empty(config.image_dims, config.geometry.n_joints)
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    pose_seq, background_seq = seed.spawn(2)
    poses = sample_motor_babble(n, config.ranges, pose_seq)
    records = [make_record(pose, config, bg) for pose, bg in zip(poses, background_seq.spawn(n))]
    return Dataset.from_records(records)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _record_size(h: int, w: int, n_m: int) -> int:
    return 4 * n_m + 4 * h * w * 3 + (h * w * 3 + 7) // 8


def dumps(dataset: Dataset) -> bytes:
    """Little-endian ``SMBI`` encoding.

    Header: magic, version, n, H, W, N_m (u32 each).  Each record: motor as
    f32, image as f32 (row-major HWC), mask as bits packed LSB-first.
    """
    n = len(dataset)
    h, w = dataset.image_dims
    n_m = dataset.motor_dim
    chunks = [_HEADER.pack(MAGIC, VERSION, n, h, w, n_m)]
    for i in range(n):
        chunks.append(dataset.motors[i].astype("<f4").tobytes())
        chunks.append(dataset.images[i].astype("<f4").tobytes())
        chunks.append(np.packbits(dataset.masks[i].ravel(), bitorder="little").tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the SMBI header")
    magic, version, n, h, w, n_m = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    if h == 0 or w == 0 or n_m == 0:
        raise MalformedHeaderError(f"degenerate dims H={h} W={w} N_m={n_m}")
    size = _record_size(h, w, n_m)
    expected = _HEADER.size + n * size
    if len(buf) < expected:
        raise TruncatedPayloadError(f"header declares {n} records ({expected} bytes), file has {len(buf)}")
    if len(buf) > expected:
        raise TrailingDataError(f"{len(buf) - expected} bytes beyond the {n} declared records")
    n_comp = h * w * 3
    motors = np.empty((n, n_m), dtype=np.float32)
    images = np.empty((n, h, w, 3), dtype=np.float32)
    masks = np.empty((n, h, w, 3), dtype=bool)
    pos = _HEADER.size
    for i in range(n):
        motors[i] = np.frombuffer(buf, "<f4", n_m, pos)
        pos += 4 * n_m
        images[i] = np.frombuffer(buf, "<f4", n_comp, pos).reshape(h, w, 3)
        pos += 4 * n_comp
        n_bytes = (n_comp + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, n_bytes, pos), count=n_comp, bitorder="little")
        masks[i] = bits.reshape(h, w, 3).astype(bool)
        pos += n_bytes
    return Dataset(motors, images, masks)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps(dataset))


def load_dataset(path: str | Path) -> Dataset:
    return loads(Path(path).read_bytes())
