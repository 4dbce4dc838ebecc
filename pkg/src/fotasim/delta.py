"""Block-granular firmware deltas: build, serialize, apply, and flash.

A package describes how a new image differs from an old one at two levels:
which fixed-size blocks changed (detected by per-block CRC), and inside
each changed block, which byte runs to rewrite.  Applying a package stages
the full new image in RAM and verifies every patched block CRC plus the
whole-image CRC before anything touches flash; flashing then erases only
the sectors that contain changed blocks and reprograms them in full, which
reconciles the 1 KiB diff granularity with the much coarser erase
granularity of the device.

Wire format, all little-endian:

    header:  "FDP1" | version u8 | block_size u32 | new_image_length u32
             | new_image_crc u32 | entry_count u16            (19 bytes)
    entry:   block_index u16 | tuple_count u16 | new_block_crc u32
    tuple:   offset u16 | length u16 | data

Entries are sorted by block index, tuples by offset; neither overlaps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .flashmodel import FlashDevice, Region
from .integrity import DEFAULT_BLOCK_SIZE, EmptyImage, block_count, crc32
from .nvstore import METADATA_SIZE, AppMetadata

MAGIC = b"FDP1"
VERSION = 1

# Diff runs separated by fewer than this many equal bytes are merged; the
# per-tuple framing overhead is not worth chasing shorter gaps.
DEFAULT_GAP_MERGE = 8

_HEADER = struct.Struct("<4sBIIIH")
_ENTRY = struct.Struct("<HHI")
_TUPLE = struct.Struct("<HH")

HEADER_SIZE = _HEADER.size


class DeltaError(Exception):
    pass


class BadMagic(DeltaError):
    pass


class UnsupportedVersion(DeltaError):
    pass


class Truncated(DeltaError):
    pass


class MalformedPackage(DeltaError):
    pass


class BlockCrcMismatch(DeltaError):
    def __init__(self, block_index: int):
        super().__init__(f"patched block {block_index} fails its CRC")
        self.block_index = block_index


class ImageCrcMismatch(DeltaError):
    pass


@dataclass(frozen=True)
class DeltaTuple:
    """One byte run to rewrite inside a block."""

    offset: int
    length: int
    data: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.offset <= 0xFFFF:
            raise MalformedPackage("tuple offset exceeds 16 bits")
        if not 1 <= self.length <= 0xFFFF:
            raise MalformedPackage("tuple length must be 1..65535")
        if len(self.data) != self.length:
            raise MalformedPackage("tuple data does not match its length field")


@dataclass(frozen=True)
class DeltaEntry:
    block_index: int
    new_block_crc: int
    tuples: tuple[DeltaTuple, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.block_index <= 0xFFFF:
            raise MalformedPackage("block index exceeds 16 bits")
        if not 0 <= self.new_block_crc <= 0xFFFFFFFF:
            raise MalformedPackage("block CRC exceeds 32 bits")
        cursor = -1
        for t in self.tuples:
            if t.offset <= cursor:
                raise MalformedPackage("tuples must be sorted and non-overlapping")
            cursor = t.offset + t.length - 1


@dataclass(frozen=True)
class DeltaPackage:
    block_size: int
    new_image_length: int
    new_image_crc: int
    entries: tuple[DeltaEntry, ...]

    def __post_init__(self) -> None:
        if self.block_size < 1 or self.new_image_length < 1:
            raise MalformedPackage("block size and image length must be positive")
        blocks = block_count(self.new_image_length, self.block_size)
        previous = -1
        for entry in self.entries:
            if entry.block_index <= previous:
                raise MalformedPackage("entries must be sorted by block index")
            previous = entry.block_index
            if entry.block_index >= blocks:
                raise MalformedPackage("entry lies beyond the new image")
            limit = min(self.block_size,
                        self.new_image_length - entry.block_index * self.block_size)
            for t in entry.tuples:
                if t.offset + t.length > limit:
                    raise MalformedPackage("tuple overruns its block")

    def changed_blocks(self) -> list[int]:
        return [e.block_index for e in self.entries]

    def payload_bytes(self) -> int:
        return sum(t.length for e in self.entries for t in e.tuples)


def _diff_runs(old_block: bytes, new_block: bytes, gap_merge: int) -> list[tuple[int, int]]:
    """Half-open [start, end) runs where the blocks differ, merging runs
    separated by fewer than ``gap_merge`` equal bytes."""
    runs: list[list[int]] = []
    i = 0
    n = len(new_block)
    while i < n:
        if old_block[i] == new_block[i]:
            i += 1
            continue
        start = i
        while i < n and old_block[i] != new_block[i]:
            i += 1
        if runs and start - runs[-1][1] < gap_merge:
            runs[-1][1] = i
        else:
            runs.append([start, i])
    return [(s, e) for s, e in runs]


def build_delta(old: bytes, new: bytes, block_size: int = DEFAULT_BLOCK_SIZE,
                gap_merge: int = DEFAULT_GAP_MERGE) -> DeltaPackage:
    """Diff two images into a package that rewrites ``old`` into ``new``.

    The comparison runs over the new image's extent; where the old image is
    shorter it is treated as erased flash (0xFF).  Blocks whose CRCs match
    produce no entry, so a CRC collision between genuinely different blocks
    would go unpatched; with 32-bit CRCs that risk is accepted.
    """
    if len(old) == 0 or len(new) == 0:
        raise EmptyImage("delta inputs must be non-empty")
    if block_size < 1:
        raise ValueError("block_size must be positive")
    if gap_merge < 0:
        raise ValueError("gap_merge cannot be negative")
    entries = []
    for index in range(block_count(len(new), block_size)):
        lo = index * block_size
        hi = min(lo + block_size, len(new))
        new_block = new[lo:hi]
        old_block = old[lo:hi]
        if len(old_block) < len(new_block):
            old_block += b"\xff" * (len(new_block) - len(old_block))
        if old_block == new_block:
            continue
        new_crc = crc32(new_block)
        if crc32(old_block) == new_crc:
            continue
        tuples = tuple(
            DeltaTuple(s, e - s, new_block[s:e])
            for s, e in _diff_runs(old_block, new_block, gap_merge)
        )
        entries.append(DeltaEntry(index, new_crc, tuples))
    return DeltaPackage(block_size, len(new), crc32(new), tuple(entries))


def encode_package(pkg: DeltaPackage) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, VERSION, pkg.block_size, pkg.new_image_length,
                                 pkg.new_image_crc, len(pkg.entries)))
    for entry in pkg.entries:
        out += _ENTRY.pack(entry.block_index, len(entry.tuples), entry.new_block_crc)
        for t in entry.tuples:
            out += _TUPLE.pack(t.offset, t.length)
            out += t.data
    return bytes(out)


def decode_package(blob: bytes) -> DeltaPackage:
    if len(blob) < HEADER_SIZE:
        raise Truncated("blob shorter than the package header")
    magic, version, block_size, new_length, new_crc, entry_count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    pos = HEADER_SIZE
    entries = []
    for _ in range(entry_count):
        if pos + _ENTRY.size > len(blob):
            raise Truncated("blob ends inside an entry header")
        block_index, tuple_count, block_crc = _ENTRY.unpack_from(blob, pos)
        pos += _ENTRY.size
        tuples = []
        for _ in range(tuple_count):
            if pos + _TUPLE.size > len(blob):
                raise Truncated("blob ends inside a tuple header")
            offset, length = _TUPLE.unpack_from(blob, pos)
            pos += _TUPLE.size
            if pos + length > len(blob):
                raise Truncated("blob ends inside tuple data")
            tuples.append(DeltaTuple(offset, length, blob[pos : pos + length]))
            pos += length
        entries.append(DeltaEntry(block_index, block_crc, tuple(tuples)))
    if pos != len(blob):
        raise MalformedPackage(f"{len(blob) - pos} trailing bytes after the last entry")
    return DeltaPackage(block_size, new_length, new_crc, tuple(entries))


def apply_delta(base: bytes, pkg: DeltaPackage) -> bytes:
    """Stage the new image in RAM: pad or truncate ``base`` to the new
    length, apply every tuple, then verify block CRCs and the image CRC."""
    n = pkg.new_image_length
    stage = bytearray(base[:n])
    if len(stage) < n:
        stage += b"\xff" * (n - len(stage))
    for entry in pkg.entries:
        lo = entry.block_index * pkg.block_size
        for t in entry.tuples:
            stage[lo + t.offset : lo + t.offset + t.length] = t.data
        if crc32(bytes(stage[lo : min(lo + pkg.block_size, n)])) != entry.new_block_crc:
            raise BlockCrcMismatch(entry.block_index)
    staged = bytes(stage)
    if crc32(staged) != pkg.new_image_crc:
        raise ImageCrcMismatch("staged image fails the whole-image CRC")
    return staged


@dataclass(frozen=True)
class FlashStats:
    """Accounting from :func:`program_delta`.

    ``sectors_erased`` counts sectors erased because they held changed
    blocks; the metadata sector's refresh is part of every programming pass
    and is charged to duration and bytes, not to this count.
    """

    sectors_erased: int
    bytes_programmed: int
    duration_us: int


def program_delta(device: FlashDevice, region: Region, staged: bytes,
                  pkg: DeltaPackage, now_us: int = 0) -> FlashStats:
    """Write a staged (already verified) image into ``region``.

    Erases the metadata sector first, so an interruption can never leave a
    stale metadata record pointing at a half-written image, then erases each
    sector containing a changed block and reprograms those sectors from the
    staged image.  The refreshed metadata record is programmed last: it is
    the commit point.
    """
    if len(staged) != pkg.new_image_length:
        raise ValueError("staged image does not match the package length")
    if len(staged) > region.size - METADATA_SIZE:
        raise ValueError("image does not fit the region alongside its metadata")
    layout = device.layout
    meta_off = region.end - METADATA_SIZE

    changed = {}
    for index in pkg.changed_blocks():
        lo = region.start + index * pkg.block_size
        hi = region.start + min((index + 1) * pkg.block_size, len(staged))
        for sector in layout.sectors_overlapping(lo, hi):
            changed[sector.index] = sector
    meta_sector = layout.sector_at(meta_off)

    erase_order = [meta_sector] + [s for _, s in sorted(changed.items()) if s.index != meta_sector.index]
    duration = 0
    for sector in erase_order:
        duration += device.erase_sectors(sector.index, 1, now_us)

    bytes_programmed = 0
    image_end = region.start + len(staged)
    for sector in sorted(erase_order, key=lambda s: s.index):
        lo = max(sector.start, region.start)
        hi = min(sector.end, image_end)
        if lo >= hi:
            continue
        chunk = staged[lo - region.start : hi - region.start]
        duration += device.program(lo, chunk, now_us)
        bytes_programmed += len(chunk)

    blob = AppMetadata.for_image(staged, pkg.block_size).encode()
    duration += device.program(meta_off, blob, now_us)
    bytes_programmed += len(blob)
    return FlashStats(len(changed), bytes_programmed, duration)
