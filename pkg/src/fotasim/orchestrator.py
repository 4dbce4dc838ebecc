"""Update campaigns: drive one target from old image to new over the bus.

A campaign authenticates against whatever is running, drops the target
into its bootloader, authenticates again (access does not survive the
reset), moves the image across in full or as a delta package, and finally
commands the jump back into the application.  The full path erases the
whole application region and streams every block; the delta path ships one
package and lets the target reconcile sectors itself.  The metadata record
is always the last thing written, so a campaign killed anywhere in the
middle leaves a target that falls back to its bootloader instead of
booting a torn image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .bootflow import (
    ACK,
    APP_ENTER_BOOTLOADER,
    NACK,
    NACK_DELTA,
    BootloaderCommand,
)
from .canbus import MAX_SEGMENTED_PAYLOAD, CanError, recv_segmented, send_segmented
from .delta import build_delta, encode_package
from .integrity import DEFAULT_BLOCK_SIZE, block_count, crc32
from .nvstore import AppMetadata, BootFlag, app_capacity, max_table_blocks, metadata_offset
from .simruntime import Node, Task, TaskPriority, World
from .uds import client_unlock

DEFAULT_REQUEST_ID = 0x101
DEFAULT_RESPONSE_ID = 0x201

DEFAULT_COMMAND_DEADLINE_US = 5_000_000
DEFAULT_BOOT_DEADLINE_US = 10_000_000


class IncomparableReports(ValueError):
    pass


class CampaignMode(Enum):
    FULL = "full"
    DELTA = "delta"


@dataclass(frozen=True)
class CampaignPlan:
    mode: CampaignMode
    old_image: bytes
    new_image: bytes
    shared_secret: int
    target: str = "target"
    request_id: int = DEFAULT_REQUEST_ID
    retry_budget: int = 3
    block_size: int = DEFAULT_BLOCK_SIZE
    gap_merge: int = 8
    command_deadline_us: int = DEFAULT_COMMAND_DEADLINE_US
    boot_deadline_us: int = DEFAULT_BOOT_DEADLINE_US


@dataclass
class CampaignReport:
    mode: str
    outcome: str = "failed"
    reason: str | None = None
    frames_sent: int = 0
    bytes_on_bus: int = 0
    retransmissions: int = 0
    blocks_transferred: int = 0
    blocks_skipped: int = 0
    sectors_erased: int = 0
    transfer_duration_us: int = 0
    flash_duration_us: int = 0
    total_duration_us: int = 0
    handshake_duration_us: int = 0
    old_image_crc: int = 0
    new_image_crc: int = 0
    old_image_length: int = 0
    new_image_length: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class CampaignHandle:
    def __init__(self, task: Task, report: CampaignReport):
        self.task = task
        self.report = report

    @property
    def done(self) -> bool:
        return self.task.state.value == "done"

    def cancel(self) -> None:
        """Abandon the campaign mid-flight (the target is not told)."""
        self.task.cancel()


def _is_ack(reply: bytes | None, code: int) -> bool:
    return reply is not None and len(reply) >= 2 and reply[0] == ACK and reply[1] == code


def _nack_reason(reply: bytes | None) -> int | None:
    if reply is not None and len(reply) >= 3 and reply[0] == NACK:
        return reply[2]
    return None


class _Campaign:
    """Generator-backed master-side state machine."""

    def __init__(self, world: World, master: Node, plan: CampaignPlan):
        self.world = world
        self.master = master
        self.plan = plan
        self.target = world.node(plan.target)
        self.report = CampaignReport(
            mode=plan.mode.value,
            old_image_crc=crc32(plan.old_image),
            new_image_crc=crc32(plan.new_image),
            old_image_length=len(plan.old_image),
            new_image_length=len(plan.new_image),
        )
        self.command_retries = 0

    # -- low-level helpers, all generators advanced once per tick ------------

    def _now(self) -> int:
        return self.world.clock_us

    def _await_reply(self, deadline_us: int):
        """Wait for the next ACK/NACK payload on the master endpoint."""
        while self._now() < deadline_us:
            try:
                msg = recv_segmented(self.master.endpoint)
            except CanError:
                msg = None
            if msg is not None:
                if msg.payload and msg.payload[0] in (ACK, NACK):
                    return msg.payload
                continue  # stray traffic (e.g. late security reply)
            yield
        return None

    def _command(self, payload: bytes):
        send_segmented(self.world.bus, self.master.endpoint, self.plan.request_id, payload)
        reply = yield from self._await_reply(self._now() + self.plan.command_deadline_us)
        return reply

    def _command_retry(self, payload: bytes):
        """Retry on silence only; a NACK is an answer, not a loss."""
        reply = yield from self._command(payload)
        for _ in range(self.plan.retry_budget):
            if reply is not None:
                return reply
            self.command_retries += 1
            reply = yield from self._command(payload)
        return reply

    def _wait_decision(self, decision: str, from_index: int, deadline_us: int):
        index = from_index
        while self._now() < deadline_us:
            events = self.world.events
            while index < len(events):
                e = events[index]
                index += 1
                if (e["node"] == self.plan.target and e["event"] == "Decision"
                        and e.get("decision") == decision):
                    return True
            yield
        return False

    def _unlock(self):
        result = yield from client_unlock(
            self.world.bus, self.master.endpoint, self.plan.request_id,
            self.plan.shared_secret, self._now, self.plan.command_deadline_us,
        )
        return result

    # -- the campaign itself --------------------------------------------------

    def run(self):
        plan = self.plan
        report = self.report
        bus = self.world.bus

        start_clock = self._now()
        stats0 = (bus.stats.frames_sent, bus.stats.payload_bytes,
                  bus.stats.retransmissions, bus.stats.busy_time_us)
        flash0 = self.target.flash_time_us
        erased0 = self.target.ctx.sectors_erased
        event_mark = len(self.world.events)

        def finish(outcome: str, reason: str | None = None) -> CampaignReport:
            report.outcome = outcome
            report.reason = reason
            report.frames_sent = bus.stats.frames_sent - stats0[0]
            report.bytes_on_bus = bus.stats.payload_bytes - stats0[1]
            report.retransmissions = (bus.stats.retransmissions - stats0[2]) + self.command_retries
            report.transfer_duration_us = bus.stats.busy_time_us - stats0[3]
            report.flash_duration_us = self.target.flash_time_us - flash0
            report.total_duration_us = self._now() - start_clock
            report.sectors_erased = self.target.ctx.sectors_erased - erased0
            self.world.log(self.master.name, "CampaignDone",
                           outcome=outcome, reason=reason, mode=plan.mode.value)
            return report

        total_blocks = block_count(len(plan.new_image), plan.block_size)
        if (len(plan.new_image) > app_capacity(self.target.device.layout)
                or total_blocks > max_table_blocks()):
            return finish("failed", "image_too_large")

        # 1. Authenticate against the running application.
        unlock = yield from self._unlock()
        report.handshake_duration_us = unlock.duration_us
        if not unlock.granted:
            return finish("failed", f"security_{unlock.outcome.value}")

        # 2. Ask the application to drop to the bootloader.
        reply = yield from self._command_retry(bytes([APP_ENTER_BOOTLOADER]))
        if not _is_ack(reply, APP_ENTER_BOOTLOADER):
            return finish("failed", "enter_bootloader_refused")
        ok = yield from self._wait_decision(
            "jump_bootloader", event_mark, self._now() + plan.boot_deadline_us)
        if not ok:
            return finish("failed", "bootloader_not_reached")

        # 3. The reset dropped security access; authenticate again.
        unlock = yield from self._unlock()
        if not unlock.granted:
            return finish("failed", f"security_{unlock.outcome.value}")

        app = self.target.device.layout.region("application")

        # 4. Move the image.
        if plan.mode is CampaignMode.FULL:
            reply = yield from self._command_retry(
                bytes([BootloaderCommand.FLASH_ERASE, 0xFF, 0]))
            if not _is_ack(reply, BootloaderCommand.FLASH_ERASE):
                return finish("failed", "erase_refused")
            for index in range(total_blocks):
                lo = index * plan.block_size
                chunk = plan.new_image[lo : lo + plan.block_size]
                address = app.start + lo
                payload = (bytes([BootloaderCommand.MEM_WRITE])
                           + address.to_bytes(4, "little")
                           + len(chunk).to_bytes(2, "little") + chunk)
                reply = yield from self._command_retry(payload)
                if not _is_ack(reply, BootloaderCommand.MEM_WRITE):
                    return finish("failed", "block_write_refused")
                report.blocks_transferred += 1
            # Metadata last: this write is the commit point.
            meta = AppMetadata.for_image(plan.new_image, plan.block_size)
            blob = meta.encode()
            payload = (bytes([BootloaderCommand.MEM_WRITE])
                       + metadata_offset(self.target.device.layout).to_bytes(4, "little")
                       + len(blob).to_bytes(2, "little") + blob)
            reply = yield from self._command_retry(payload)
            if not _is_ack(reply, BootloaderCommand.MEM_WRITE):
                return finish("failed", "metadata_write_refused")
        else:
            pkg = build_delta(plan.old_image, plan.new_image,
                              plan.block_size, plan.gap_merge)
            report.blocks_transferred = len(pkg.entries)
            report.blocks_skipped = total_blocks - len(pkg.entries)
            blob = bytes([BootloaderCommand.DELTA_APPLY]) + encode_package(pkg)
            if len(blob) > MAX_SEGMENTED_PAYLOAD:
                return finish("failed", "package_too_large")
            reply = yield from self._command_retry(blob)
            if not _is_ack(reply, BootloaderCommand.DELTA_APPLY):
                if _nack_reason(reply) == NACK_DELTA:
                    return finish("failed", "block_crc_mismatch")
                return finish("failed", "delta_refused")

        # 5. Arm the application flag and reset.
        event_mark = len(self.world.events)
        reply = yield from self._command_retry(
            bytes([BootloaderCommand.GO_TO_ADDR, BootFlag.ENTER, BootFlag.NOT_ENTER]))
        if not _is_ack(reply, BootloaderCommand.GO_TO_ADDR):
            return finish("failed", "go_to_addr_refused")

        # 6. The target must decide for the application on its own.
        ok = yield from self._wait_decision(
            "jump_application", event_mark, self._now() + plan.boot_deadline_us)
        if not ok:
            return finish("failed", "application_not_reached")
        return finish("success")


def start_campaign(world: World, plan: CampaignPlan, master: str = "master") -> CampaignHandle:
    node = world.node(master)
    campaign = _Campaign(world, node, plan)

    def gen():
        result = yield from campaign.run()
        return result

    task = Task.from_generator("campaign", TaskPriority.COMM, gen())
    node.add_task(task)
    return CampaignHandle(task, campaign.report)


def run_campaign(world: World, plan: CampaignPlan, master: str = "master",
                 max_ticks: int | None = None) -> CampaignReport:
    """Run a campaign to completion; returns its report."""
    handle = start_campaign(world, plan, master)
    if max_ticks is None:
        # Worst case: every payload byte twice (retries), plus flash stalls.
        max_ticks = 120_000 + 4 * (len(plan.new_image) // 7 + 1)
    result = world.run_until(lambda w: handle.done, max_ticks)
    if not result.met:
        handle.cancel()
        handle.report.outcome = "failed"
        handle.report.reason = "campaign_stalled"
    if handle.task.result is not None:
        return handle.task.result
    return handle.report


def reduction_ratio(delta_report: CampaignReport, full_report: CampaignReport) -> float:
    """1 - delta_total / full_total, defined only for two successful
    campaigns over the same image pair."""
    if not (delta_report.success and full_report.success):
        raise IncomparableReports("both campaigns must have succeeded")
    same = (delta_report.old_image_crc == full_report.old_image_crc
            and delta_report.new_image_crc == full_report.new_image_crc
            and delta_report.old_image_length == full_report.old_image_length
            and delta_report.new_image_length == full_report.new_image_length)
    if not same:
        raise IncomparableReports("reports describe different image pairs")
    if full_report.total_duration_us <= 0:
        raise IncomparableReports("full campaign reports no duration")
    return 1.0 - delta_report.total_duration_us / full_report.total_duration_us
