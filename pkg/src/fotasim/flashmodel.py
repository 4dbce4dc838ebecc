"""Emulated on-chip flash: sectored geometry, lock keys, erase/program costs.

The device is a byte array with NOR-flash semantics: erase sets whole
sectors to 0xFF, programming may only clear bits (enforced strictly here as
"target bytes must read 0xFF"), and every mutation is gated behind a
two-key unlock.  Erase and program report simulated durations; the device
also tracks a busy horizon so reads issued while an operation is in flight
can account for the stall.

Nothing here touches real hardware.  Durations are bookkeeping, not sleeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

KIB = 1024

# Default geometry: eight sectors totalling 512 KiB.
DEFAULT_SECTOR_SIZES = (
    16 * KIB, 16 * KIB, 16 * KIB, 16 * KIB,
    64 * KIB,
    128 * KIB, 128 * KIB, 128 * KIB,
)

REGION_BOOT_MANAGER = "boot_manager"
REGION_BOOTLOADER = "bootloader"
REGION_APPLICATION = "application"

# unlock() wants exactly this key pair, in this order.
DEFAULT_UNLOCK_KEYS = (0x45670123, 0xCDEF89AB)

# erase_sectors() sentinel: mass-erase of the application region.
MASS_ERASE_APPLICATION = 0xFF

ERASED_BYTE = 0xFF


class FlashError(Exception):
    pass


class InvalidLayout(FlashError):
    pass


class BadKeySequence(FlashError):
    """Wrong unlock keys.  The device latches locked until reset."""


class AlreadyUnlocked(FlashError):
    pass


class LockedDevice(FlashError):
    pass


class SectorOutOfRange(FlashError):
    pass


class AddressOutOfRange(FlashError):
    pass


class ProgramOnNonErased(FlashError):
    """Attempted to program a byte that does not currently read 0xFF."""

    def __init__(self, offset: int):
        super().__init__(f"byte at offset 0x{offset:06X} is not erased")
        self.offset = offset


@dataclass(frozen=True)
class Sector:
    index: int
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class Region:
    name: str
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, address: int, length: int = 1) -> bool:
        return self.start <= address and address + length <= self.end


@dataclass(frozen=True)
class FlashTiming:
    """Simulated operation costs in microseconds.

    ``erase_us`` maps sector size to erase duration; ``program_word_us`` is
    charged per 32-bit word, so programming ``n`` bytes costs
    ceil(n / 4) * program_word_us.
    """

    erase_us: dict[int, int] = field(
        default_factory=lambda: {16 * KIB: 250_000, 64 * KIB: 700_000, 128 * KIB: 1_000_000}
    )
    program_word_us: int = 16

    def erase_cost(self, sector_size: int) -> int:
        try:
            return self.erase_us[sector_size]
        except KeyError:
            raise InvalidLayout(f"no erase cost configured for {sector_size}-byte sectors") from None

    def program_cost(self, length: int) -> int:
        return -(-length // 4) * self.program_word_us


class FlashLayout:
    """Sector table plus named regions, all validated on construction."""

    def __init__(self, sector_sizes: tuple[int, ...], regions: dict[str, tuple[int, int]]):
        if not sector_sizes:
            raise InvalidLayout("layout needs at least one sector")
        sectors = []
        offset = 0
        for index, size in enumerate(sector_sizes):
            if size <= 0:
                raise InvalidLayout(f"sector {index} has non-positive size")
            sectors.append(Sector(index, offset, size))
            offset += size
        self.sectors: tuple[Sector, ...] = tuple(sectors)
        self.size = offset

        boundaries = {s.start for s in sectors} | {self.size}
        named = {}
        claimed = [False] * len(sectors)
        for name, (start, size) in regions.items():
            end = start + size
            if start not in boundaries or end not in boundaries or size <= 0:
                raise InvalidLayout(f"region {name!r} is not sector-aligned")
            for s in sectors:
                if s.start >= start and s.end <= end:
                    if claimed[s.index]:
                        raise InvalidLayout(f"region {name!r} overlaps another region")
                    claimed[s.index] = True
            named[name] = Region(name, start, size)
        self.regions: dict[str, Region] = named

    def region(self, name: str) -> Region:
        return self.regions[name]

    def sector_at(self, address: int) -> Sector:
        if not 0 <= address < self.size:
            raise AddressOutOfRange(f"address 0x{address:06X} outside device")
        for s in self.sectors:
            if s.start <= address < s.end:
                return s
        raise AddressOutOfRange(f"address 0x{address:06X} outside device")  # unreachable

    def sectors_overlapping(self, start: int, end: int) -> list[Sector]:
        """Sectors intersecting the half-open byte range [start, end)."""
        return [s for s in self.sectors if s.start < end and s.end > start]

    def sectors_within(self, region: Region) -> list[Sector]:
        return [s for s in self.sectors if s.start >= region.start and s.end <= region.end]


def default_layout() -> FlashLayout:
    return FlashLayout(
        DEFAULT_SECTOR_SIZES,
        {
            REGION_BOOT_MANAGER: (0, 64 * KIB),
            REGION_BOOTLOADER: (64 * KIB, 64 * KIB),
            REGION_APPLICATION: (128 * KIB, 384 * KIB),
        },
    )


class FlashDevice:
    """One flash bank.  Fresh devices are fully erased and locked.

    A failed unlock latches the lock until :meth:`reset`; this mirrors
    controllers that refuse further key writes after a bad sequence.
    ``busy_until_us`` is the simulated-time instant at which the last
    erase/program completes; reads report the remaining stall.
    """

    def __init__(self, layout: FlashLayout | None = None,
                 timing: FlashTiming | None = None,
                 unlock_keys: tuple[int, int] = DEFAULT_UNLOCK_KEYS):
        self.layout = layout or default_layout()
        self.timing = timing or FlashTiming()
        self.unlock_keys = unlock_keys
        self.cells = bytearray([ERASED_BYTE]) * self.layout.size
        self.locked = True
        self.latched = False
        self.busy_until_us = 0

    # -- lock handling -----------------------------------------------------

    def unlock(self, key1: int, key2: int) -> None:
        if not self.locked:
            raise AlreadyUnlocked("unlock issued while already unlocked")
        if self.latched or (key1, key2) != self.unlock_keys:
            self.latched = True
            raise BadKeySequence("wrong key sequence; device latched until reset")
        self.locked = False

    def reset(self) -> None:
        """Controller reset: relocks and clears the bad-key latch.  Cell
        contents and the busy horizon are untouched."""
        self.locked = True
        self.latched = False

    def _require_unlocked(self) -> None:
        if self.locked:
            raise LockedDevice("mutation attempted while locked")

    # -- mutation ----------------------------------------------------------

    def erase_sectors(self, start_sector: int, count: int = 1, now_us: int = 0) -> int:
        """Erase ``count`` sectors from ``start_sector``; returns duration in µs.

        ``start_sector == MASS_ERASE_APPLICATION`` erases every sector of the
        application region and ignores ``count``.
        """
        self._require_unlocked()
        if start_sector == MASS_ERASE_APPLICATION:
            sectors = self.layout.sectors_within(self.layout.region(REGION_APPLICATION))
        else:
            if count < 1 or start_sector < 0 or start_sector + count > len(self.layout.sectors):
                raise SectorOutOfRange(
                    f"sectors [{start_sector}, {start_sector + count}) outside device"
                )
            sectors = list(self.layout.sectors[start_sector : start_sector + count])
        duration = 0
        for s in sectors:
            self.cells[s.start : s.end] = bytes([ERASED_BYTE]) * s.size
            duration += self.timing.erase_cost(s.size)
        self._occupy(now_us, duration)
        return duration

    def program(self, address: int, data: bytes, now_us: int = 0) -> int:
        """Program ``data`` at ``address``; returns duration in µs.

        Every target byte must currently read 0xFF, else
        :class:`ProgramOnNonErased` is raised with the first offending offset
        and nothing is written.
        """
        self._require_unlocked()
        n = len(data)
        if n == 0:
            return 0
        if address < 0 or address + n > self.layout.size:
            raise AddressOutOfRange(
                f"program of {n} bytes at 0x{address:06X} leaves the device"
            )
        window = self.cells[address : address + n]
        if window.count(ERASED_BYTE) != n:
            for i, b in enumerate(window):
                if b != ERASED_BYTE:
                    raise ProgramOnNonErased(address + i)
        self.cells[address : address + n] = data
        duration = self.timing.program_cost(n)
        self._occupy(now_us, duration)
        return duration

    # -- access ------------------------------------------------------------

    def read(self, address: int, length: int, now_us: int = 0) -> tuple[bytes, int]:
        """Read ``length`` bytes; returns ``(data, stall_us)``.

        ``stall_us`` is how long the caller waits for the device to leave its
        busy window, zero when idle.  Reads are never gated by the lock.
        """
        if length < 0 or address < 0 or address + length > self.layout.size:
            raise AddressOutOfRange(
                f"read of {length} bytes at 0x{address:06X} leaves the device"
            )
        stall = max(0, self.busy_until_us - now_us)
        return bytes(self.cells[address : address + length]), stall

    def _occupy(self, now_us: int, duration: int) -> None:
        self.busy_until_us = max(self.busy_until_us, now_us) + duration


def new_device(layout: FlashLayout | None = None,
               timing: FlashTiming | None = None,
               unlock_keys: tuple[int, int] = DEFAULT_UNLOCK_KEYS) -> FlashDevice:
    """Fresh, fully erased, locked device with the default 512 KiB layout."""
    return FlashDevice(layout, timing, unlock_keys)
