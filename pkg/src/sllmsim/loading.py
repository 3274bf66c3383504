"""Pipelined chunk loader for checkpoints, plus the naive loader it races.

The plan turns each partition into a run of fixed-size chunks read in
ascending file order. Workers pull chunks off a shared cursor, so reads
within a partition are always issued sequentially while several reads are
in flight at once. With ``bypass_os_cache`` the reads go through direct I/O
into page-aligned staging buffers (the stand-in for pinned memory) and are
copied once into the flat model buffer; otherwise they land in the buffer
directly.
"""

from __future__ import annotations

import logging
import mmap
import os
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointManifest,
    TensorSpec,
    build_manifest,
    padded_size,
    read_manifest,
    read_naive_listing,
    write_checkpoint,
    write_naive,
)

log = logging.getLogger("sllmsim.loading")

DEFAULT_WORKERS = 4
DEFAULT_STAGING_BUFFERS = 4


@dataclass(frozen=True)
class ChunkRead:
    """One sequential read: partition file range -> flat buffer range."""

    partition_id: int
    file_offset: int
    length: int
    buffer_offset: int


@dataclass(frozen=True)
class LoadPlan:
    model_id: str
    chunk_size: int
    alignment: int
    partition_files: tuple[str, ...]
    partition_sizes: tuple[int, ...]
    chunks: tuple[ChunkRead, ...]
    total_bytes: int
    worker_count: int = DEFAULT_WORKERS
    staging_buffer_count: int = DEFAULT_STAGING_BUFFERS


def plan_load(manifest: CheckpointManifest) -> LoadPlan:
    """Chunk every partition payload, ascending offsets, mapped to the buffer.

    Tensors are packed in input order both in partitions and in the flat
    buffer, so each partition maps to one contiguous buffer range; a chunk's
    destination is simply partition_base + file_offset.
    """
    partition_base: dict[int, int] = {}
    for entry in manifest.index:
        base = entry.buffer_offset - entry.partition_offset
        prev = partition_base.setdefault(entry.partition_id, base)
        if prev != base:
            raise CheckpointError(
                f"partition {entry.partition_id} does not map to a contiguous buffer range"
            )

    chunks: list[ChunkRead] = []
    for pid, part in enumerate(manifest.partitions):
        base = partition_base.get(pid, 0)
        offset = 0
        while offset < part.size:
            length = min(manifest.chunk_size, part.size - offset)
            chunks.append(
                ChunkRead(
                    partition_id=pid,
                    file_offset=offset,
                    length=length,
                    buffer_offset=base + offset,
                )
            )
            offset += length
    return LoadPlan(
        model_id=manifest.model_id,
        chunk_size=manifest.chunk_size,
        alignment=manifest.alignment,
        partition_files=tuple(p.file_name for p in manifest.partitions),
        partition_sizes=tuple(p.size for p in manifest.partitions),
        chunks=tuple(chunks),
        total_bytes=manifest.total_bytes,
    )


@dataclass
class LoadOptions:
    bypass_os_cache: bool = False
    worker_count: int | None = None
    staging_buffer_count: int | None = None


@dataclass
class LoadReport:
    bytes: int
    wall_time: float
    throughput: float
    worker_count: int
    staging_buffer_count: int
    bypass_os_cache_requested: bool = False
    bypass_os_cache_effective: bool = False
    fallback_reason: str | None = None


def _pread_full(fd: int, view: memoryview, offset: int) -> None:
    """Read exactly len(view) bytes at offset, looping over partial reads."""
    filled = 0
    while filled < len(view):
        n = os.preadv(fd, [view[filled:]], offset + filled)
        if n <= 0:
            raise CheckpointIntegrityError(
                f"short read at offset {offset + filled} (file truncated?)"
            )
        filled += n


def _probe_direct_io(path: Path, alignment: int) -> tuple[bool, str | None]:
    """Direct I/O is best effort: probe one aligned read and report failures."""
    if not hasattr(os, "O_DIRECT"):
        return False, "O_DIRECT not available on this platform"
    if alignment % 512:
        return False, f"alignment {alignment} too small for direct I/O"
    try:
        fd = os.open(path, os.O_RDONLY | os.O_DIRECT)
    except OSError as exc:
        return False, f"direct open failed: {exc.strerror}"
    try:
        probe = min(alignment, padded_size(os.fstat(fd).st_size, alignment))
        if probe:
            buf = mmap.mmap(-1, probe)
            try:
                os.preadv(fd, [memoryview(buf)], 0)
            finally:
                buf.close()
    except OSError as exc:
        return False, f"direct read failed: {exc.strerror}"
    finally:
        os.close(fd)
    return True, None


class _ChunkCursor:
    """Hands out chunk indices in plan order (ascending offsets per partition)."""

    def __init__(self, count: int):
        self._next = 0
        self._count = count
        self._lock = threading.Lock()

    def take(self) -> int | None:
        with self._lock:
            if self._next >= self._count:
                return None
            idx = self._next
            self._next += 1
            return idx


def execute_load(
    plan: LoadPlan,
    directory: str | os.PathLike,
    options: LoadOptions | None = None,
) -> tuple[bytearray, LoadReport]:
    """Run the plan against the files in `directory` into a fresh flat buffer.

    The returned buffer is bit-identical to the tensors concatenated at their
    buffer offsets. Raises (never returns a partial buffer) if any read fails.
    """
    options = options or LoadOptions()
    directory = Path(directory)
    workers = plan.worker_count if options.worker_count is None else options.worker_count
    staging_count = (
        plan.staging_buffer_count
        if options.staging_buffer_count is None
        else options.staging_buffer_count
    )
    if workers < 1:
        raise ValueError("worker_count must be >= 1")
    if staging_count < 2:
        raise ValueError("staging_buffer_count must be >= 2")

    for name in plan.partition_files:
        if not (directory / name).exists():
            raise CheckpointIntegrityError(f"missing partition file {name}")

    direct = False
    fallback_reason = None
    if options.bypass_os_cache:
        if plan.partition_files:
            direct, fallback_reason = _probe_direct_io(
                directory / plan.partition_files[0], plan.alignment
            )
        else:
            direct = True
        if not direct and fallback_reason:
            log.info("direct I/O unavailable, using buffered reads: %s", fallback_reason)

    buffer = bytearray(plan.total_bytes)
    start = time.perf_counter()

    if plan.chunks:
        view = memoryview(buffer)
        open_flags = os.O_RDONLY | (os.O_DIRECT if direct else 0)
        fds = [os.open(directory / name, open_flags) for name in plan.partition_files]
        padded_sizes = [
            padded_size(size, plan.alignment) for size in plan.partition_sizes
        ]
        cursor = _ChunkCursor(len(plan.chunks))
        staging: queue.Queue[mmap.mmap] | None = None
        if direct:
            staging_size = padded_size(plan.chunk_size, plan.alignment)
            staging = queue.Queue()
            for _ in range(staging_count):
                staging.put(mmap.mmap(-1, staging_size))
        errors: list[BaseException] = []
        error_lock = threading.Lock()

        def run_worker() -> None:
            try:
                while True:
                    with error_lock:
                        if errors:
                            return
                    idx = cursor.take()
                    if idx is None:
                        return
                    chunk = plan.chunks[idx]
                    fd = fds[chunk.partition_id]
                    dest = view[chunk.buffer_offset : chunk.buffer_offset + chunk.length]
                    if direct:
                        assert staging is not None
                        read_len = min(
                            padded_size(chunk.length, plan.alignment),
                            padded_sizes[chunk.partition_id] - chunk.file_offset,
                        )
                        buf = staging.get()
                        try:
                            mv = memoryview(buf)[:read_len]
                            _pread_full(fd, mv, chunk.file_offset)
                            dest[:] = mv[: chunk.length]
                        finally:
                            staging.put(buf)
                    else:
                        _pread_full(fd, dest, chunk.file_offset)
            except BaseException as exc:  # noqa: BLE001 - reported to the caller
                with error_lock:
                    errors.append(exc)

        threads = [
            threading.Thread(target=run_worker, name=f"sllm-load-{i}", daemon=True)
            for i in range(min(workers, len(plan.chunks)))
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        view.release()
        for fd in fds:
            os.close(fd)
        if staging is not None:
            while not staging.empty():
                staging.get_nowait().close()
        if errors:
            raise errors[0]

    wall = time.perf_counter() - start
    report = LoadReport(
        bytes=plan.total_bytes,
        wall_time=wall,
        throughput=plan.total_bytes / wall if plan.total_bytes and wall > 0 else 0.0,
        worker_count=workers,
        staging_buffer_count=staging_count,
        bypass_os_cache_requested=options.bypass_os_cache,
        bypass_os_cache_effective=direct,
        fallback_reason=fallback_reason,
    )
    return buffer, report


def naive_load(directory: str | os.PathLike) -> tuple[bytearray, LoadReport]:
    """One open+read per tensor file, copied into place (the baseline loader)."""
    directory = Path(directory)
    specs = read_naive_listing(directory)
    total = sum(s.byte_length for s in specs)
    buffer = bytearray(total)
    start = time.perf_counter()
    offset = 0
    for spec in specs:
        with open(directory / spec.name, "rb") as fh:
            data = fh.read()
        if len(data) != spec.byte_length:
            raise CheckpointIntegrityError(
                f"tensor file {spec.name!r} is {len(data)} B, expected {spec.byte_length} B"
            )
        buffer[offset : offset + len(data)] = data
        offset += len(data)
    wall = time.perf_counter() - start
    return buffer, LoadReport(
        bytes=total,
        wall_time=wall,
        throughput=total / wall if total and wall > 0 else 0.0,
        worker_count=1,
        staging_buffer_count=0,
    )


# --- Benchmark fixtures and the naive-vs-pipelined race --------------------


def generate_naive_dir(
    directory: str | os.PathLike,
    total_bytes: int,
    tensor_count: int,
    seed: int = 0,
) -> list[TensorSpec]:
    """Write a deterministic naive layout of u8 tensors summing to total_bytes."""
    if tensor_count < 1:
        raise ValueError("tensor_count must be >= 1")
    if total_bytes < tensor_count:
        raise ValueError("need at least one byte per tensor")
    rng = np.random.default_rng(seed)
    base = total_bytes // tensor_count
    sizes = [base] * tensor_count
    sizes[-1] += total_bytes - base * tensor_count
    specs = [
        TensorSpec.of(f"tensor_{i:05d}", "u8", (size,))
        for i, size in enumerate(sizes)
    ]
    payloads = {s.name: rng.bytes(s.byte_length) for s in specs}
    write_naive(directory, specs, payloads)
    return specs


@dataclass
class BenchResult:
    checkpoint_bytes: int
    reps: int
    pipelined: list[LoadReport] = field(default_factory=list)
    naive: list[LoadReport] = field(default_factory=list)

    @property
    def pipelined_median_throughput(self) -> float:
        return statistics.median(r.throughput for r in self.pipelined)

    @property
    def naive_median_throughput(self) -> float:
        return statistics.median(r.throughput for r in self.naive)

    @property
    def speedup(self) -> float:
        naive = self.naive_median_throughput
        return self.pipelined_median_throughput / naive if naive else float("inf")


def run_load_bench(
    checkpoint_dir: str | os.PathLike,
    naive_dir: str | os.PathLike,
    reps: int = 5,
    worker_count: int = DEFAULT_WORKERS,
    staging_buffer_count: int = DEFAULT_STAGING_BUFFERS,
    bypass_os_cache: bool = False,
) -> BenchResult:
    """Alternate pipelined and naive loads, verifying both produce equal bytes."""
    manifest = read_manifest(checkpoint_dir)
    plan = plan_load(manifest)
    options = LoadOptions(
        bypass_os_cache=bypass_os_cache,
        worker_count=worker_count,
        staging_buffer_count=staging_buffer_count,
    )
    result = BenchResult(checkpoint_bytes=manifest.total_bytes, reps=reps)
    for rep in range(reps):
        pipelined_buf, pipelined_report = execute_load(plan, checkpoint_dir, options)
        naive_buf, naive_report = naive_load(naive_dir)
        if rep == 0 and bytes(pipelined_buf) != bytes(naive_buf):
            raise CheckpointIntegrityError(
                "pipelined and naive loaders disagree on buffer contents"
            )
        result.pipelined.append(pipelined_report)
        result.naive.append(naive_report)
        del pipelined_buf, naive_buf
    return result
