"""Delta packages: diffing, wire format, staged apply, flash programming."""

from random import Random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fotasim.delta import (
    HEADER_SIZE,
    MAGIC,
    BadMagic,
    BlockCrcMismatch,
    DeltaEntry,
    DeltaPackage,
    DeltaTuple,
    ImageCrcMismatch,
    MalformedPackage,
    Truncated,
    UnsupportedVersion,
    apply_delta,
    build_delta,
    decode_package,
    encode_package,
    program_delta,
)
from fotasim.flashmodel import (
    DEFAULT_UNLOCK_KEYS,
    KIB,
    REGION_APPLICATION,
    new_device,
)
from fotasim.integrity import EmptyImage, crc32
from fotasim.nvstore import read_app_metadata


def make_pair(size=8 * KIB, seed=1):
    old = Random(seed).randbytes(size)
    return old, bytearray(old)


# -- diffing --------------------------------------------------------------------


def test_ten_changed_bytes_in_block_two():
    old, new = make_pair()
    for i in range(2048, 2058):
        new[i] ^= 0xFF
    pkg = build_delta(old, bytes(new))
    assert pkg.changed_blocks() == [2]
    (entry,) = pkg.entries
    assert len(entry.tuples) == 1
    (t,) = entry.tuples
    assert (t.offset, t.length) == (0, 10)
    assert t.data == bytes(new[2048:2058])
    assert entry.new_block_crc == crc32(bytes(new[2048:3072]))


def test_identical_images_empty_package():
    old, new = make_pair()
    pkg = build_delta(old, bytes(new))
    assert pkg.entries == ()
    assert encode_package(pkg) == encode_package(pkg)
    assert len(encode_package(pkg)) == HEADER_SIZE  # 19 bytes, header only


def test_growth_pads_old_with_erased_bytes():
    old = Random(5).randbytes(1024)
    new = old + Random(6).randbytes(1024)
    pkg = build_delta(old, new)
    assert pkg.changed_blocks() == [1]
    (entry,) = pkg.entries
    # The old side of block 1 is all-0xFF padding, so any new byte that is
    # not 0xFF differs; with random data that is one merged run.
    assert apply_delta(old, pkg) == new


def test_shrink_uses_new_extent():
    old = Random(7).randbytes(4096)
    new = old[:1536]
    pkg = build_delta(old, new)
    # Block 0 identical, block 1 is a shorter slice of the same bytes: its
    # CRC differs (different length), so it appears.
    assert pkg.new_image_length == 1536
    assert apply_delta(old, pkg) == new


def test_gap_merge_boundary():
    old, new = make_pair()
    base = 100
    new[base] ^= 1
    new[base + 8] ^= 1   # gap of 7 equal bytes < gap_merge=8: merged
    pkg = build_delta(old, bytes(new))
    (entry,) = pkg.entries
    assert len(entry.tuples) == 1
    assert (entry.tuples[0].offset, entry.tuples[0].length) == (base, 9)

    old2, new2 = make_pair()
    new2[base] ^= 1
    new2[base + 9] ^= 1  # gap of 8 equal bytes: kept separate
    pkg2 = build_delta(old2, bytes(new2))
    (entry2,) = pkg2.entries
    assert [(t.offset, t.length) for t in entry2.tuples] == [(base, 1), (base + 9, 1)]


def test_changes_in_several_blocks():
    old, new = make_pair(size=10 * KIB)
    for block in (0, 3, 9):
        new[block * KIB] ^= 0x55
    pkg = build_delta(old, bytes(new))
    assert pkg.changed_blocks() == [0, 3, 9]


def test_empty_inputs_rejected():
    with pytest.raises(EmptyImage):
        build_delta(b"", b"x")
    with pytest.raises(EmptyImage):
        build_delta(b"x", b"")


# -- wire format ------------------------------------------------------------------


def test_package_roundtrip():
    old, new = make_pair(size=16 * KIB, seed=3)
    for i in (0, 5000, 6000, 16 * KIB - 1):
        new[i] ^= 0xA5
    pkg = build_delta(old, bytes(new))
    assert decode_package(encode_package(pkg)) == pkg


def test_header_fields():
    old, new = make_pair()
    new[0] ^= 1
    blob = encode_package(build_delta(old, bytes(new)))
    assert blob[:4] == MAGIC
    assert blob[4] == 1  # version
    assert int.from_bytes(blob[5:9], "little") == 1024
    assert int.from_bytes(blob[9:13], "little") == len(new)
    assert int.from_bytes(blob[13:17], "little") == crc32(bytes(new))
    assert int.from_bytes(blob[17:19], "little") == 1


def test_decode_rejects_bad_magic_and_version():
    old, new = make_pair()
    new[0] ^= 1
    blob = bytearray(encode_package(build_delta(old, bytes(new))))
    wrong_magic = bytes(b"XXXX") + bytes(blob[4:])
    with pytest.raises(BadMagic):
        decode_package(wrong_magic)
    blob[4] = 9
    with pytest.raises(UnsupportedVersion):
        decode_package(bytes(blob))


def test_decode_rejects_truncation_everywhere():
    old, new = make_pair()
    for i in (0, 2048, 2600):
        new[i] ^= 1
    blob = encode_package(build_delta(old, bytes(new)))
    for cut in range(len(blob)):
        with pytest.raises((Truncated, MalformedPackage)):
            decode_package(blob[:cut])


def test_decode_rejects_trailing_bytes():
    old, new = make_pair()
    new[0] ^= 1
    blob = encode_package(build_delta(old, bytes(new)))
    with pytest.raises(MalformedPackage):
        decode_package(blob + b"\x00")


def test_tuple_validation():
    with pytest.raises(MalformedPackage):
        DeltaTuple(0, 0, b"")                       # zero length
    with pytest.raises(MalformedPackage):
        DeltaTuple(0, 2, b"x")                      # length/data mismatch
    with pytest.raises(MalformedPackage):
        DeltaTuple(0x10000, 1, b"x")                # offset too wide


def test_entry_rejects_overlapping_tuples():
    with pytest.raises(MalformedPackage):
        DeltaEntry(0, 0, (DeltaTuple(0, 4, b"aaaa"), DeltaTuple(3, 2, b"bb")))
    with pytest.raises(MalformedPackage):
        DeltaEntry(0, 0, (DeltaTuple(5, 1, b"a"), DeltaTuple(0, 1, b"b")))  # unsorted


def test_package_rejects_out_of_image_entries():
    with pytest.raises(MalformedPackage):
        DeltaPackage(1024, 1024, 0, (DeltaEntry(1, 0, ()),))  # only block 0 exists
    with pytest.raises(MalformedPackage):
        # Tuple runs past the 500-byte final block.
        DeltaPackage(1024, 500, 0,
                     (DeltaEntry(0, 0, (DeltaTuple(490, 20, bytes(20)),)),))


@given(st.integers(0, 2**32 - 1), st.binary(min_size=1, max_size=64))
@settings(max_examples=60, deadline=None)
def test_handcrafted_package_roundtrip(crc, data):
    pkg = DeltaPackage(
        block_size=256,
        new_image_length=1000,
        new_image_crc=crc,
        entries=(DeltaEntry(1, crc ^ 0xFFFFFFFF, (DeltaTuple(10, len(data), data),)),),
    )
    assert decode_package(encode_package(pkg)) == pkg


# -- staged apply ------------------------------------------------------------------


def test_apply_reproduces_new_image():
    old, new = make_pair(size=20 * KIB, seed=9)
    rng = Random(10)
    for _ in range(200):
        new[rng.randrange(len(new))] ^= rng.randrange(1, 256)
    pkg = build_delta(old, bytes(new))
    assert apply_delta(old, pkg) == bytes(new)


def test_apply_detects_block_corruption():
    old, new = make_pair()
    new[2048] ^= 1
    pkg = build_delta(old, bytes(new))
    # Tamper with the tuple data after building.
    bad = DeltaPackage(
        pkg.block_size, pkg.new_image_length, pkg.new_image_crc,
        (DeltaEntry(2, pkg.entries[0].new_block_crc,
                    (DeltaTuple(0, 1, b"\x00"),)),),
    )
    with pytest.raises(BlockCrcMismatch) as exc:
        apply_delta(old, bad)
    assert exc.value.block_index == 2


def test_apply_detects_wrong_base():
    old, new = make_pair(seed=21)
    new[2048] ^= 1
    pkg = build_delta(old, bytes(new))
    stranger = Random(99).randbytes(len(old))
    # Patching the wrong base leaves untouched parts of block 2 wrong.
    with pytest.raises((BlockCrcMismatch, ImageCrcMismatch)):
        apply_delta(stranger, pkg)


@given(st.integers(1, 2**32 - 1), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_build_apply_inverse_property(seed, extra_kib):
    rng = Random(seed)
    old = rng.randbytes(rng.randint(1, 4 * KIB))
    new = bytearray(rng.randbytes(rng.randint(1, 4 * KIB) + extra_kib * KIB))
    pkg = build_delta(old, bytes(new))
    assert apply_delta(old, pkg) == bytes(new)


# -- flash programming ---------------------------------------------------------------


def provisioned_device(image, block_size=KIB):
    from fotasim.scenario import provision_application

    device = new_device()
    provision_application(device, image, block_size)
    return device


def test_program_delta_touches_only_changed_sectors():
    # A 300 KiB image spans sectors 5-7; at that size the 1 KiB metadata
    # slot needs 2 KiB blocks to fit the CRC table.
    app_size = 300 * KIB
    old = Random(31).randbytes(app_size)
    new = bytearray(old)
    new[0] ^= 1  # one byte in sector 5
    pkg = build_delta(old, bytes(new), block_size=2 * KIB)
    staged = apply_delta(old, pkg)

    device = provisioned_device(old, block_size=2 * KIB)
    device.unlock(*DEFAULT_UNLOCK_KEYS)
    app = device.layout.region(REGION_APPLICATION)
    before_s6 = device.read(app.start + 128 * KIB, KIB)[0]

    stats = program_delta(device, app, staged, pkg)
    assert stats.sectors_erased == 1          # metadata refresh not counted
    # Sector 6 bytes were never rewritten.
    assert device.read(app.start + 128 * KIB, KIB)[0] == before_s6
    # Whole image readback matches.
    assert device.read(app.start, len(new))[0] == bytes(new)
    # Metadata was refreshed to describe the new image.
    device.reset()
    meta, _ = read_app_metadata(device)
    assert meta.byte_count == len(new)
    assert meta.image_crc == crc32(bytes(new))


def test_program_delta_counts_every_changed_sector():
    app_size = 300 * KIB
    old = Random(33).randbytes(app_size)
    new = bytearray(old)
    new[0] ^= 1                 # sector 5
    new[130 * KIB] ^= 1         # sector 6
    new[260 * KIB] ^= 1         # sector 7 (also holds metadata)
    pkg = build_delta(old, bytes(new), block_size=2 * KIB)
    staged = apply_delta(old, pkg)
    device = provisioned_device(old, block_size=2 * KIB)
    device.unlock(*DEFAULT_UNLOCK_KEYS)
    stats = program_delta(device, device.layout.region(REGION_APPLICATION), staged, pkg)
    assert stats.sectors_erased == 3
    assert device.read(device.layout.region(REGION_APPLICATION).start, len(new))[0] == bytes(new)


def test_program_delta_duration_accounts_erase_and_program():
    old = Random(35).randbytes(10 * KIB)
    new = bytearray(old)
    new[0] ^= 1
    pkg = build_delta(old, bytes(new))
    staged = apply_delta(old, pkg)
    device = provisioned_device(old)
    device.unlock(*DEFAULT_UNLOCK_KEYS)
    stats = program_delta(device, device.layout.region(REGION_APPLICATION), staged, pkg)
    # Two 128 KiB erases (data sector 5 + metadata sector 7), 10 KiB image
    # reprogram, and one metadata record.
    meta_len = len(read_app_metadata(device)[0].encode())
    expected = 2 * 1_000_000 + (10 * KIB // 4) * 16 + -(-meta_len // 4) * 16
    assert stats.duration_us == expected
    assert stats.bytes_programmed == 10 * KIB + meta_len


def test_program_delta_rejects_mismatched_stage():
    old, new = make_pair()
    new[0] ^= 1
    pkg = build_delta(old, bytes(new))
    device = provisioned_device(old)
    device.unlock(*DEFAULT_UNLOCK_KEYS)
    with pytest.raises(ValueError):
        program_delta(device, device.layout.region(REGION_APPLICATION), b"short", pkg)
