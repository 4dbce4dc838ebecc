"""The three boot-chain programs: boot manager, bootloader, updater.

Everything here is written against :class:`EcuContext`, a thin bundle of
one ECU's devices and runtime callbacks, so the state machines run the
same way under the deterministic world scheduler and under plain unit
tests.

Command protocol (first payload byte selects the handler):

    0x27        security access, forwarded to the UDS session
    0x14..0x17  bootloader commands (flow control, erase, write, delta)
    0x20..0x23  updater commands (version, bootloader write/erase, leave)
    0x31        application command: drop to the bootloader

Replies are ``[0x79, code, ...]`` for ACK and ``[0x1F, code, reason]`` for
NACK.  The updater answers no security service and silently ignores
unknown commands; both facts are modelled weaknesses of the chain being
reproduced, not oversights.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable

from .delta import DeltaError, apply_delta, decode_package, program_delta
from .flashmodel import (
    DEFAULT_UNLOCK_KEYS,
    REGION_APPLICATION,
    REGION_BOOTLOADER,
    FlashDevice,
    FlashError,
    MASS_ERASE_APPLICATION,
    Region,
)
from .integrity import CompareResult, crc32, crc_compare
from .nvstore import (
    APP_ENTER_REG,
    UPDATER_ENTER_REG,
    BackupRegisters,
    BootFlag,
    MalformedMetadata,
    read_app_metadata,
)
from .uds import SECURITY_SID, SecuritySession, server_handle

ACK = 0x79
NACK = 0x1F

NACK_REGION = 0x01
NACK_SECURITY = 0x02
NACK_FLASH = 0x03
NACK_DELTA = 0x04
NACK_MALFORMED = 0x05


class BootloaderCommand(IntEnum):
    GO_TO_ADDR = 0x14
    FLASH_ERASE = 0x15
    MEM_WRITE = 0x16
    DELTA_APPLY = 0x17


class UpdaterCommand(IntEnum):
    GET_VERSION = 0x20
    MEM_WRITE_BOOTLOADER = 0x21
    MEM_ERASE_BOOTLOADER = 0x22
    LEAVE_TO_BOOT_MANAGER = 0x23


APP_ENTER_BOOTLOADER = 0x31


class BootDecision(Enum):
    JUMP_APPLICATION = "jump_application"
    JUMP_BOOTLOADER = "jump_bootloader"
    JUMP_UPDATER = "jump_updater"


class InjectedFault(RuntimeError):
    """Raised by a fault hook to interrupt the updater at a step boundary."""


class _VerifyFailed(Exception):
    pass


def _noop(*args, **kwargs):
    return None


@dataclass
class EcuContext:
    """One ECU's hardware plus the callbacks the state machines need.

    ``now`` reads the simulated clock; ``request_reset`` asks the runtime
    for a software reset after the current step; ``spend_flash`` charges a
    flash-operation duration to the node; ``fault_hook`` (tests only) gets
    each updater step name and may raise :class:`InjectedFault`.
    """

    device: FlashDevice
    regs: BackupRegisters
    session: SecuritySession
    version: tuple[int, int, int] = (1, 0, 0)
    flash_keys: tuple[int, int] = DEFAULT_UNLOCK_KEYS
    updater_image: bytes | None = None
    now: Callable[[], int] = lambda: 0
    log: Callable = _noop
    request_reset: Callable[[], None] = _noop
    spend_flash: Callable[[int], None] = _noop
    fault_hook: Callable[[str], None] | None = None
    sectors_erased: int = 0

    def app_region(self) -> Region:
        return self.device.layout.region(REGION_APPLICATION)

    def bootloader_region(self) -> Region:
        return self.device.layout.region(REGION_BOOTLOADER)

    def ensure_flash_unlocked(self) -> None:
        if self.device.locked:
            self.device.unlock(*self.flash_keys)

    def _hook(self, step: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(step)


# -- boot manager ------------------------------------------------------------


def app_integrity(device: FlashDevice, now_us: int = 0) -> CompareResult:
    """CRC the stored application against its metadata record."""
    try:
        meta, _ = read_app_metadata(device, now_us)
    except MalformedMetadata:
        return CompareResult.FAILED
    start = device.layout.region(REGION_APPLICATION).start
    data, _ = device.read(start, meta.byte_count, now_us)
    return crc_compare(crc32(data), meta.image_crc)


def boot_decide(device: FlashDevice, regs: BackupRegisters, now_us: int = 0) -> BootDecision:
    """Pick the next stage.

    A verified application with its enter flag armed wins; otherwise an
    armed updater flag wins; otherwise both flags are cleared and the
    bootloader takes over, so a stale flag can never loop the chain.
    """
    intact = app_integrity(device, now_us) is CompareResult.SUCCEEDED
    if intact and regs.read_flag(APP_ENTER_REG) is BootFlag.ENTER:
        return BootDecision.JUMP_APPLICATION
    if regs.read_flag(UPDATER_ENTER_REG) is BootFlag.ENTER:
        return BootDecision.JUMP_UPDATER
    regs.write_flag(APP_ENTER_REG, BootFlag.NOT_ENTER)
    regs.write_flag(UPDATER_ENTER_REG, BootFlag.NOT_ENTER)
    return BootDecision.JUMP_BOOTLOADER


# -- bootloader command server ------------------------------------------------


def _ack(code: int) -> bytes:
    return bytes([ACK, code])


def _nack(code: int, reason: int) -> bytes:
    return bytes([NACK, code, reason])


def _sectors_in_region(ctx: EcuContext, region: Region, start: int, count: int) -> bool:
    sectors = ctx.device.layout.sectors
    if count < 1 or start < 0 or start + count > len(sectors):
        return False
    return all(
        s.start >= region.start and s.end <= region.end
        for s in sectors[start : start + count]
    )


def bootloader_serve(ctx: EcuContext, payload: bytes) -> bytes | None:
    """Dispatch one host command; returns the reply payload (None to stay
    silent).  Erase, write and delta application all require an unlocked
    security session and are confined to the application region."""
    if not payload:
        return None
    code = payload[0]

    if code == SECURITY_SID:
        return server_handle(ctx.session, payload, ctx.now())

    if code == BootloaderCommand.GO_TO_ADDR:
        if len(payload) != 3:
            return _nack(code, NACK_MALFORMED)
        ctx.regs.write(APP_ENTER_REG, payload[1])
        ctx.regs.write(UPDATER_ENTER_REG, payload[2])
        ctx.log("CommandServed", command="go_to_addr")
        ctx.request_reset()
        return _ack(code)

    if code == BootloaderCommand.FLASH_ERASE:
        if len(payload) != 3:
            return _nack(code, NACK_MALFORMED)
        if not ctx.session.unlocked:
            return _nack(code, NACK_SECURITY)
        start, count = payload[1], payload[2]
        app = ctx.app_region()
        if start != MASS_ERASE_APPLICATION and not _sectors_in_region(ctx, app, start, count):
            return _nack(code, NACK_REGION)
        try:
            ctx.ensure_flash_unlocked()
            duration = ctx.device.erase_sectors(start, count, ctx.now())
        except FlashError:
            return _nack(code, NACK_FLASH)
        erased = len(ctx.device.layout.sectors_within(app)) if start == MASS_ERASE_APPLICATION else count
        ctx.sectors_erased += erased
        ctx.spend_flash(duration)
        ctx.log("CommandServed", command="flash_erase", sectors=erased)
        return _ack(code)

    if code == BootloaderCommand.MEM_WRITE:
        if len(payload) < 7:
            return _nack(code, NACK_MALFORMED)
        if not ctx.session.unlocked:
            return _nack(code, NACK_SECURITY)
        address = int.from_bytes(payload[1:5], "little")
        length = int.from_bytes(payload[5:7], "little")
        data = payload[7:]
        if len(data) != length:
            return _nack(code, NACK_MALFORMED)
        if not ctx.app_region().contains(address, length):
            return _nack(code, NACK_REGION)
        try:
            ctx.ensure_flash_unlocked()
            duration = ctx.device.program(address, data, ctx.now())
        except FlashError:
            return _nack(code, NACK_FLASH)
        ctx.spend_flash(duration)
        return _ack(code)

    if code == BootloaderCommand.DELTA_APPLY:
        if not ctx.session.unlocked:
            return _nack(code, NACK_SECURITY)
        app = ctx.app_region()
        try:
            pkg = decode_package(payload[1:])
            base = b""
            try:
                meta, _ = read_app_metadata(ctx.device, ctx.now())
                base, _ = ctx.device.read(app.start, meta.byte_count, ctx.now())
            except MalformedMetadata:
                pass  # no valid base; verification decides
            staged = apply_delta(base, pkg)
        except DeltaError:
            return _nack(code, NACK_DELTA)
        try:
            ctx.ensure_flash_unlocked()
            stats = program_delta(ctx.device, app, staged, pkg, ctx.now())
        except (FlashError, ValueError):
            return _nack(code, NACK_FLASH)
        ctx.sectors_erased += stats.sectors_erased
        ctx.spend_flash(stats.duration_us)
        ctx.log("CommandServed", command="delta_apply",
                blocks=len(pkg.entries), sectors=stats.sectors_erased)
        return _ack(code)

    ctx.log("CommandServed", command="unknown", code=code)
    return None


# -- application-side command handling ----------------------------------------


def app_serve(ctx: EcuContext, payload: bytes) -> bytes | None:
    """The running application honours security access and the one command
    that drops it back to the bootloader; everything else is ignored."""
    if not payload:
        return None
    if payload[0] == SECURITY_SID:
        return server_handle(ctx.session, payload, ctx.now())
    if payload[0] == APP_ENTER_BOOTLOADER:
        ctx.regs.write_flag(APP_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.regs.write_flag(UPDATER_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.log("CommandServed", command="enter_bootloader")
        ctx.request_reset()
        return _ack(APP_ENTER_BOOTLOADER)
    return None


# -- bootloader updater --------------------------------------------------------


class UpdaterStatus(Enum):
    UPDATED = "updated"
    ROLLED_BACK = "rolled_back"
    REJECTED = "rejected"


@dataclass(frozen=True)
class UpdaterResult:
    status: UpdaterStatus
    cause: str | None = None


def updater_serve(ctx: EcuContext, payload: bytes) -> bytes | None:
    """Host-driven bootloader maintenance.  Note the asymmetry with
    :func:`bootloader_serve`: there is no security gate here."""
    if not payload:
        return None
    code = payload[0]
    region = ctx.bootloader_region()

    if code == UpdaterCommand.GET_VERSION:
        major, minor, patch = ctx.version
        return bytes([ACK, major, minor, patch])

    if code == UpdaterCommand.MEM_ERASE_BOOTLOADER:
        if len(payload) != 3:
            return None
        if not _sectors_in_region(ctx, region, payload[1], payload[2]):
            return _nack(code, NACK_REGION)
        try:
            ctx.ensure_flash_unlocked()
            duration = ctx.device.erase_sectors(payload[1], payload[2], ctx.now())
        except FlashError:
            return _nack(code, NACK_FLASH)
        ctx.sectors_erased += payload[2]
        ctx.spend_flash(duration)
        return _ack(code)

    if code == UpdaterCommand.MEM_WRITE_BOOTLOADER:
        if len(payload) < 7:
            return None
        address = int.from_bytes(payload[1:5], "little")
        length = int.from_bytes(payload[5:7], "little")
        data = payload[7:]
        if len(data) != length:
            return None
        if not region.contains(address, length):
            return _nack(code, NACK_REGION)
        try:
            ctx.ensure_flash_unlocked()
            duration = ctx.device.program(address, data, ctx.now())
        except FlashError:
            return _nack(code, NACK_FLASH)
        ctx.spend_flash(duration)
        return _ack(code)

    if code == UpdaterCommand.LEAVE_TO_BOOT_MANAGER:
        ctx.regs.write_flag(APP_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.regs.write_flag(UPDATER_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.request_reset()
        return _ack(code)

    # Unsupported commands draw no reply at all.
    return None


def _restore_backup(ctx: EcuContext, region: Region, backup: bytes) -> None:
    sectors = ctx.device.layout.sectors_within(region)
    ctx.ensure_flash_unlocked()
    duration = ctx.device.erase_sectors(sectors[0].index, len(sectors), ctx.now())
    payload = backup.rstrip(b"\xff")  # trailing erased bytes need no programming
    if payload:
        duration += ctx.device.program(region.start, payload, ctx.now())
    ctx.spend_flash(duration)


def updater_silent(ctx: EcuContext) -> UpdaterResult:
    """Replace the bootloader with the image embedded in the updater.

    The whole old bootloader is copied to RAM first; any failure after the
    erase restores it in full, so the region is never left part old, part
    new.  Success and rollback both clear the stage flags and software-reset.
    """
    region = ctx.bootloader_region()
    image = ctx.updater_image

    def leave(result: UpdaterResult) -> UpdaterResult:
        ctx.regs.write_flag(APP_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.regs.write_flag(UPDATER_ENTER_REG, BootFlag.NOT_ENTER)
        ctx.log("CommandServed", command="updater_silent", status=result.status.value,
                cause=result.cause)
        ctx.request_reset()
        return result

    if not image:
        return leave(UpdaterResult(UpdaterStatus.REJECTED, "no embedded image"))
    if len(image) > region.size:
        # Rejected before anything is touched; the old bootloader survives.
        return leave(UpdaterResult(UpdaterStatus.REJECTED, "image exceeds region"))

    backup, _ = ctx.device.read(region.start, region.size, ctx.now())
    erased = False
    try:
        ctx._hook("backup")
        ctx._hook("erase")
        sectors = ctx.device.layout.sectors_within(region)
        ctx.ensure_flash_unlocked()
        ctx.spend_flash(ctx.device.erase_sectors(sectors[0].index, len(sectors), ctx.now()))
        ctx.sectors_erased += len(sectors)
        erased = True
        ctx._hook("program")
        ctx.spend_flash(ctx.device.program(region.start, image, ctx.now()))
        ctx._hook("verify")
        readback, _ = ctx.device.read(region.start, len(image), ctx.now())
        if crc_compare(crc32(readback), crc32(image)) is not CompareResult.SUCCEEDED:
            raise _VerifyFailed("read-back CRC mismatch")
    except (FlashError, InjectedFault, _VerifyFailed) as exc:
        if erased:
            _restore_backup(ctx, region, backup)
        ctx.log("Rollback", cause=str(exc))
        return leave(UpdaterResult(UpdaterStatus.ROLLED_BACK, str(exc)))

    try:
        ctx._hook("finalize")
    except InjectedFault:
        pass  # image already verified; the commit stands
    return leave(UpdaterResult(UpdaterStatus.UPDATED))
