"""Loading-optimized checkpoint format.

A checkpoint is one manifest file ``<model_id>.sllm`` plus one or more
partition files ``<model_id>.part<k>``. Tensors are packed back to back into
partitions (a tensor never spans two partitions) so partitions can be read
as large sequential chunks instead of one small read per tensor. Every
tensor's destination offset in the flat model buffer is precomputed at
manifest build time.

Manifest layout (all integers little-endian):

    magic "SLLMCKPT" (8 bytes)
    u32 version (= 1)
    u32 chunk_size
    u32 alignment
    u32 partition_count
    u64 total_bytes
    per partition: u16 name_len, name, u64 size, u32 crc32
    u32 tensor_count
    per tensor: u16 name_len, name, u8 dtype_code, u8 rank,
                rank x u64 dims, u32 partition_id, u64 partition_offset,
                u64 buffer_offset

Partition files hold the raw payload, zero-padded to a multiple of
``alignment`` so aligned full-chunk reads (direct I/O) never run past EOF.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

MAGIC = b"SLLMCKPT"
FORMAT_VERSION = 1

DEFAULT_CHUNK_SIZE = 16 * 1024 * 1024
DEFAULT_ALIGNMENT = 4096
DEFAULT_MAX_PARTITION_BYTES = 1024 * 1024 * 1024

# dtype_code -> (name, itemsize)
DTYPES: dict[int, tuple[str, int]] = {
    1: ("f16", 2),
    2: ("bf16", 2),
    3: ("f32", 4),
    4: ("f64", 8),
    5: ("i8", 1),
    6: ("i16", 2),
    7: ("i32", 4),
    8: ("i64", 8),
    9: ("u8", 1),
    10: ("bool", 1),
}
DTYPE_CODES: dict[str, int] = {name: code for code, (name, _) in DTYPES.items()}

_CRC_BLOCK = 4 * 1024 * 1024


class CheckpointError(Exception):
    """Base error for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """Manifest bytes do not parse (bad magic, unsupported version)."""


class CheckpointIntegrityError(CheckpointError):
    """Partition files disagree with the manifest (size, checksum, missing)."""


def dtype_itemsize(dtype_code: int) -> int:
    try:
        return DTYPES[dtype_code][1]
    except KeyError:
        raise ValueError(f"unknown dtype code {dtype_code}") from None


def dtype_name(dtype_code: int) -> str:
    try:
        return DTYPES[dtype_code][0]
    except KeyError:
        raise ValueError(f"unknown dtype code {dtype_code}") from None


def padded_size(size: int, alignment: int) -> int:
    """Partition file size on disk: payload zero-padded up to alignment."""
    if size % alignment == 0:
        return size
    return (size // alignment + 1) * alignment


@dataclass(frozen=True)
class TensorSpec:
    """Shape and type of one tensor; byte_length is derived, never stored loosely."""

    name: str
    dtype_code: int
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("tensor name must be non-empty")
        if len(self.name.encode("utf-8")) > 0xFFFF:
            raise ValueError(f"tensor name too long: {self.name!r}")
        dtype_itemsize(self.dtype_code)
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def byte_length(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n * dtype_itemsize(self.dtype_code)

    @classmethod
    def of(cls, name: str, dtype: str, shape: Iterable[int]) -> "TensorSpec":
        if dtype not in DTYPE_CODES:
            raise ValueError(f"unknown dtype {dtype!r}")
        return cls(name=name, dtype_code=DTYPE_CODES[dtype], shape=tuple(shape))


@dataclass(frozen=True)
class TensorIndexEntry:
    spec: TensorSpec
    partition_id: int
    partition_offset: int
    buffer_offset: int


@dataclass(frozen=True)
class PartitionInfo:
    file_name: str
    size: int  # payload bytes, before padding
    checksum: int  # crc32 of the payload


@dataclass(frozen=True)
class CheckpointManifest:
    model_id: str
    format_version: int
    chunk_size: int
    alignment: int
    partitions: tuple[PartitionInfo, ...]
    index: tuple[TensorIndexEntry, ...]
    total_bytes: int

    def manifest_file_name(self) -> str:
        return f"{self.model_id}.sllm"

    def tensor(self, name: str) -> TensorIndexEntry:
        for entry in self.index:
            if entry.spec.name == name:
                return entry
        raise KeyError(name)


def build_manifest(
    model_id: str,
    tensors: Iterable[TensorSpec],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    alignment: int = DEFAULT_ALIGNMENT,
    max_partition_bytes: int = DEFAULT_MAX_PARTITION_BYTES,
) -> CheckpointManifest:
    """Pack tensors into partitions, greedily, in input order.

    A new partition starts whenever the next tensor would push the current
    one past max_partition_bytes. Buffer offsets are assigned contiguously in
    input order, so the flat model buffer is simply the tensors concatenated.
    """
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    if alignment <= 0 or alignment & (alignment - 1):
        raise ValueError("alignment must be a power of two")
    if chunk_size % alignment:
        raise ValueError("chunk_size must be a multiple of alignment")
    if chunk_size > 0xFFFFFFFF or alignment > 0xFFFFFFFF:
        raise ValueError("chunk_size and alignment must fit in u32")
    if max_partition_bytes <= 0:
        raise ValueError("max_partition_bytes must be positive")

    seen: set[str] = set()
    index: list[TensorIndexEntry] = []
    partition_sizes: list[int] = []
    buffer_offset = 0
    for spec in tensors:
        if spec.name in seen:
            raise ValueError(f"duplicate tensor name {spec.name!r}")
        seen.add(spec.name)
        size = spec.byte_length
        if size > max_partition_bytes:
            raise ValueError(
                f"tensor {spec.name!r} ({size} B) exceeds max_partition_bytes "
                f"({max_partition_bytes} B)"
            )
        if not partition_sizes or partition_sizes[-1] + size > max_partition_bytes:
            partition_sizes.append(0)
        pid = len(partition_sizes) - 1
        index.append(
            TensorIndexEntry(
                spec=spec,
                partition_id=pid,
                partition_offset=partition_sizes[pid],
                buffer_offset=buffer_offset,
            )
        )
        partition_sizes[pid] += size
        buffer_offset += size

    partitions = tuple(
        PartitionInfo(file_name=f"{model_id}.part{k}", size=size, checksum=0)
        for k, size in enumerate(partition_sizes)
    )
    return CheckpointManifest(
        model_id=model_id,
        format_version=FORMAT_VERSION,
        chunk_size=chunk_size,
        alignment=alignment,
        partitions=partitions,
        index=tuple(index),
        total_bytes=buffer_offset,
    )


PayloadSource = Callable[[TensorSpec], bytes] | Mapping[str, bytes]


def _payload_fetch(source: PayloadSource, spec: TensorSpec) -> bytes:
    data = source[spec.name] if isinstance(source, Mapping) else source(spec)
    data = bytes(data)
    if len(data) != spec.byte_length:
        raise CheckpointError(
            f"payload for tensor {spec.name!r} is {len(data)} B, "
            f"expected {spec.byte_length} B"
        )
    return data


def write_checkpoint(
    manifest: CheckpointManifest,
    payload_source: PayloadSource,
    directory: str | os.PathLike,
    overwrite: bool = False,
) -> list[Path]:
    """Write partition files and the manifest; returns the written paths.

    Partition checksums are computed while streaming, so the manifest on disk
    always carries real checksums regardless of what `manifest` held.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / manifest.manifest_file_name()
    if manifest_path.exists() and not overwrite:
        raise CheckpointError(f"checkpoint already exists: {manifest_path}")

    by_partition: dict[int, list[TensorIndexEntry]] = {}
    for entry in manifest.index:
        by_partition.setdefault(entry.partition_id, []).append(entry)

    written: list[Path] = []
    checksums: list[int] = []
    for pid, part in enumerate(manifest.partitions):
        path = directory / part.file_name
        crc = 0
        written_bytes = 0
        with open(path, "wb") as fh:
            for entry in sorted(by_partition.get(pid, []), key=lambda e: e.partition_offset):
                data = _payload_fetch(payload_source, entry.spec)
                crc = zlib.crc32(data, crc)
                fh.write(data)
                written_bytes += len(data)
            if written_bytes != part.size:
                raise CheckpointError(
                    f"partition {pid} wrote {written_bytes} B, expected {part.size} B"
                )
            fh.write(b"\0" * (padded_size(part.size, manifest.alignment) - part.size))
        checksums.append(crc)
        written.append(path)

    stamped = CheckpointManifest(
        model_id=manifest.model_id,
        format_version=manifest.format_version,
        chunk_size=manifest.chunk_size,
        alignment=manifest.alignment,
        partitions=tuple(
            PartitionInfo(p.file_name, p.size, crc)
            for p, crc in zip(manifest.partitions, checksums)
        ),
        index=manifest.index,
        total_bytes=manifest.total_bytes,
    )
    manifest_path.write_bytes(encode_manifest(stamped))
    written.append(manifest_path)
    return written


def encode_manifest(manifest: CheckpointManifest) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack(
        "<IIIIQ",
        manifest.format_version,
        manifest.chunk_size,
        manifest.alignment,
        len(manifest.partitions),
        manifest.total_bytes,
    )
    for part in manifest.partitions:
        name = part.file_name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<QI", part.size, part.checksum)
    out += struct.pack("<I", len(manifest.index))
    for entry in manifest.index:
        name = entry.spec.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", entry.spec.dtype_code, len(entry.spec.shape))
        for dim in entry.spec.shape:
            out += struct.pack("<Q", dim)
        out += struct.pack(
            "<IQQ", entry.partition_id, entry.partition_offset, entry.buffer_offset
        )
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointFormatError("manifest truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take_name(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("manifest truncated")
        name = self.data[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return name


def decode_manifest(data: bytes, model_id: str) -> CheckpointManifest:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint manifest")
    cur = _Cursor(data)
    cur.pos = len(MAGIC)
    version, chunk_size, alignment, partition_count, total_bytes = cur.take("<IIIIQ")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported manifest version {version} (expected {FORMAT_VERSION})"
        )
    partitions = []
    for _ in range(partition_count):
        name = cur.take_name()
        size, checksum = cur.take("<QI")
        partitions.append(PartitionInfo(name, size, checksum))
    (tensor_count,) = cur.take("<I")
    index = []
    for _ in range(tensor_count):
        name = cur.take_name()
        dtype_code, rank = cur.take("<BB")
        dims = tuple(cur.take("<Q")[0] for _ in range(rank))
        partition_id, partition_offset, buffer_offset = cur.take("<IQQ")
        index.append(
            TensorIndexEntry(
                spec=TensorSpec(name=name, dtype_code=dtype_code, shape=dims),
                partition_id=partition_id,
                partition_offset=partition_offset,
                buffer_offset=buffer_offset,
            )
        )
    return CheckpointManifest(
        model_id=model_id,
        format_version=version,
        chunk_size=chunk_size,
        alignment=alignment,
        partitions=tuple(partitions),
        index=tuple(index),
        total_bytes=total_bytes,
    )


def _file_crc32(path: Path, payload_size: int) -> int:
    crc = 0
    remaining = payload_size
    with open(path, "rb") as fh:
        while remaining > 0:
            block = fh.read(min(_CRC_BLOCK, remaining))
            if not block:
                break
            crc = zlib.crc32(block, crc)
            remaining -= len(block)
    if remaining:
        raise CheckpointIntegrityError(f"partition {path.name} shorter than manifest size")
    return crc


def read_manifest(directory: str | os.PathLike, verify: bool = True) -> CheckpointManifest:
    """Parse the manifest in `directory`, verifying partition sizes and checksums."""
    directory = Path(directory)
    candidates = sorted(directory.glob("*.sllm"))
    if not candidates:
        raise CheckpointError(f"no manifest file (*.sllm) in {directory}")
    if len(candidates) > 1:
        raise CheckpointError(f"multiple manifest files in {directory}: {candidates}")
    manifest_path = candidates[0]
    manifest = decode_manifest(manifest_path.read_bytes(), model_id=manifest_path.stem)

    for part in manifest.partitions:
        path = directory / part.file_name
        if not path.exists():
            raise CheckpointIntegrityError(f"missing partition file {part.file_name}")
        expected = padded_size(part.size, manifest.alignment)
        actual = path.stat().st_size
        if actual != expected:
            raise CheckpointIntegrityError(
                f"partition {part.file_name} is {actual} B on disk, expected {expected} B"
            )
        if verify and _file_crc32(path, part.size) != part.checksum:
            raise CheckpointIntegrityError(
                f"checksum mismatch in partition {part.file_name} (corrupt checkpoint)"
            )
    return manifest


# --- Naive one-file-per-tensor layout -------------------------------------
#
# listing.txt: one "<name> <dtype> <dims...>" line per tensor; each tensor's
# raw bytes live in a file named after the tensor. This is the layout the
# chunked loader is benchmarked against.

LISTING_FILE = "listing.txt"


class NaiveLayoutError(CheckpointError):
    """listing.txt disagrees with the tensor files next to it."""


def _check_tensor_file_name(name: str) -> None:
    if name in (".", "..") or "/" in name or "\\" in name or name == LISTING_FILE:
        raise NaiveLayoutError(f"tensor name {name!r} is not usable as a file name")


def write_naive(
    directory: str | os.PathLike,
    tensors: Iterable[TensorSpec],
    payload_source: PayloadSource,
) -> list[Path]:
    """Write the one-file-per-tensor layout with its listing file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    written = []
    for spec in tensors:
        _check_tensor_file_name(spec.name)
        data = _payload_fetch(payload_source, spec)
        path = directory / spec.name
        path.write_bytes(data)
        written.append(path)
        dims = " ".join(str(d) for d in spec.shape)
        lines.append(f"{spec.name} {dtype_name(spec.dtype_code)} {dims}".rstrip())
    listing = directory / LISTING_FILE
    listing.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    written.append(listing)
    return written


def read_naive_listing(directory: str | os.PathLike) -> list[TensorSpec]:
    """Parse listing.txt and check each tensor file exists with the right size."""
    directory = Path(directory)
    listing = directory / LISTING_FILE
    if not listing.exists():
        raise NaiveLayoutError(f"no {LISTING_FILE} in {directory}")
    specs: list[TensorSpec] = []
    for lineno, raw in enumerate(listing.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise NaiveLayoutError(f"{LISTING_FILE}:{lineno}: expected '<name> <dtype> <dims...>'")
        name, dtype, *dims = parts
        _check_tensor_file_name(name)
        try:
            spec = TensorSpec.of(name, dtype, [int(d) for d in dims])
        except ValueError as exc:
            raise NaiveLayoutError(f"{LISTING_FILE}:{lineno}: {exc}") from exc
        path = directory / name
        if not path.exists():
            raise NaiveLayoutError(f"listing names {name!r} but the file is missing")
        actual = path.stat().st_size
        if actual != spec.byte_length:
            raise NaiveLayoutError(
                f"tensor file {name!r} is {actual} B, listing implies {spec.byte_length} B"
            )
        specs.append(spec)
    return specs


def convert_from_naive(
    naive_directory: str | os.PathLike,
    out_directory: str | os.PathLike,
    model_id: str | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    alignment: int = DEFAULT_ALIGNMENT,
    max_partition_bytes: int = DEFAULT_MAX_PARTITION_BYTES,
    overwrite: bool = False,
) -> CheckpointManifest:
    """Convert a one-file-per-tensor directory into a chunked checkpoint."""
    naive_directory = Path(naive_directory)
    specs = read_naive_listing(naive_directory)
    if model_id is None:
        model_id = naive_directory.name or "model"
    manifest = build_manifest(
        model_id, specs, chunk_size=chunk_size, alignment=alignment,
        max_partition_bytes=max_partition_bytes,
    )
    write_checkpoint(
        manifest,
        lambda spec: (naive_directory / spec.name).read_bytes(),
        out_directory,
        overwrite=overwrite,
    )
    return read_manifest(out_directory)
