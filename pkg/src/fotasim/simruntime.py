"""Deterministic discrete-time world: one CAN bus plus any number of nodes.

A tick is: one bus step, then every node runs its ready tasks in priority
order (communication before storage before application), run to
completion.  The clock then advances by the larger of the bus frame time
and the 1 ms base tick.  All randomness flows from seeds held in the bus
and the security sessions, so a (seed, scenario) pair replays to an
identical event log, byte for byte.

ECU nodes own a flash device, backup registers and a security session and
live the boot-chain life: reset, decide, then serve as application,
bootloader or updater until the next reset.  Host nodes are plain task
carriers (the update master is one).  A software reset preserves backup
registers; a power cycle clears them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable

from .bootflow import (
    BootDecision,
    EcuContext,
    app_serve,
    boot_decide,
    bootloader_serve,
    updater_serve,
    updater_silent,
)
from .canbus import ACCEPT_ALL, Bus, BusConfig, CanError, recv_segmented, send_segmented
from .flashmodel import DEFAULT_UNLOCK_KEYS, FlashDevice, new_device
from .lka import (
    PidGains,
    SteeringState,
    deviation_to_target,
    motor_order,
    parse_deviation_line,
    pid_step,
    read_gains,
)
from .nvstore import BackupRegisters
from .uds import SecuritySession

DEFAULT_TICK_US = 1000


class TaskPriority(IntEnum):
    COMM = 0
    NVM = 1
    APP = 2


class TaskState(Enum):
    READY = "ready"
    DONE = "done"


class Task:
    """One schedulable unit.  ``step`` runs to completion each tick; a
    generator-backed task is advanced once per tick instead and is done
    when the generator returns (its return value lands in ``result``)."""

    def __init__(self, name: str, priority: TaskPriority, step: Callable[[], None]):
        self.name = name
        self.priority = priority
        self.step = step
        self.state = TaskState.READY
        self.result = None

    @classmethod
    def from_generator(cls, name: str, priority: TaskPriority, gen) -> "Task":
        task = cls(name, priority, lambda: None)

        def advance() -> None:
            try:
                next(gen)
            except StopIteration as stop:
                task.result = stop.value
                task.state = TaskState.DONE

        task.step = advance
        return task

    def cancel(self) -> None:
        self.state = TaskState.DONE


class NodeMode(Enum):
    HOST = "host"
    BOOT = "boot"
    APPLICATION = "application"
    BOOTLOADER = "bootloader"
    UPDATER = "updater"


class Node:
    """One bus participant.  ``role == "ecu"`` gives it flash, registers, a
    security session and the boot-chain behaviour; ``role == "host"`` gives
    it only an endpoint and whatever tasks get installed."""

    def __init__(self, world: "World", name: str, node_id: int, *,
                 role: str = "ecu",
                 filters=ACCEPT_ALL,
                 reply_id: int | None = None,
                 device: FlashDevice | None = None,
                 shared_secret: int = 0,
                 session_seed: int = 1,
                 version: tuple[int, int, int] = (1, 0, 0),
                 flash_keys: tuple[int, int] = DEFAULT_UNLOCK_KEYS,
                 updater_image: bytes | None = None,
                 updater_style: str = "serve",
                 deviation_feed=None,
                 fault_hook=None):
        self.world = world
        self.name = name
        self.node_id = node_id
        self.role = role
        self.endpoint = world.bus.attach(node_id, filters)
        self.reply_id = reply_id
        self.device = device or new_device()
        self.regs = BackupRegisters()
        self.session = SecuritySession(shared_secret, session_seed)
        self.updater_style = updater_style
        self.deviation_feed = iter(deviation_feed) if deviation_feed is not None else None

        self.mode = NodeMode.HOST if role == "host" else NodeMode.BOOT
        self.pending_reset = False
        self.busy_until_us = 0
        self.flash_time_us = 0
        self.boot_count = 0
        self.tasks: list[Task] = []

        self.ctx = EcuContext(
            device=self.device,
            regs=self.regs,
            session=self.session,
            version=version,
            flash_keys=flash_keys,
            updater_image=updater_image,
            now=lambda: self.world.clock_us,
            log=lambda event, **detail: self.world.log(self.name, event, **detail),
            request_reset=self._request_reset,
            spend_flash=self._spend_flash,
            fault_hook=fault_hook,
        )

        # Steering loop state, live while the node runs as an application.
        self.gains = PidGains()
        self.steering = SteeringState()
        self.steering_target = 0.0
        self.motor = 0

        if role == "ecu":
            self.add_task(Task("serve", TaskPriority.COMM, self._serve_step))
            self.add_task(Task("steer", TaskPriority.APP, self._app_step))

    # -- plumbing ----------------------------------------------------------

    def add_task(self, task: Task) -> None:
        self.tasks.append(task)
        self.tasks.sort(key=lambda t: t.priority)

    def _request_reset(self) -> None:
        self.pending_reset = True

    def _spend_flash(self, duration_us: int) -> None:
        self.flash_time_us += duration_us
        self.busy_until_us = max(self.busy_until_us, self.world.clock_us) + duration_us

    def _reset(self, kind: str) -> None:
        # Backup registers survive on purpose; everything volatile goes.
        self.session.reset()
        self.device.reset()
        self.endpoint.clear()
        self.pending_reset = False
        if self.role == "ecu":
            self.mode = NodeMode.BOOT
        self.world.log(self.name, "Reset", kind=kind)

    # -- per-tick behaviour --------------------------------------------------

    def run_tick(self) -> None:
        if self.pending_reset:
            if self.endpoint.tx:
                return  # flush queued replies, then go down
            self._reset("software")
            return
        if self.world.clock_us < self.busy_until_us:
            return  # stalled on a flash operation
        if self.mode is NodeMode.BOOT:
            self._boot()
            return
        for task in self.tasks:
            if task.state is TaskState.READY:
                task.step()
        self.tasks = [t for t in self.tasks if t.state is not TaskState.DONE]

    def _boot(self) -> None:
        self.world.log(self.name, "Boot")
        decision = boot_decide(self.device, self.regs, self.world.clock_us)
        self.boot_count += 1
        self.world.log(self.name, "Decision", decision=decision.value)
        if decision is BootDecision.JUMP_APPLICATION:
            self.mode = NodeMode.APPLICATION
            self._enter_application()
        elif decision is BootDecision.JUMP_UPDATER:
            self.mode = NodeMode.UPDATER
            if self.updater_style == "silent":
                updater_silent(self.ctx)
        else:
            self.mode = NodeMode.BOOTLOADER

    def _enter_application(self) -> None:
        app = self.device.layout.region("application")
        try:
            image, _ = self.device.read(app.start, app.size, self.world.clock_us)
            gains = read_gains(image)
        except ValueError:
            gains = PidGains()
        # NaN-laden parameter blocks fall back to the builtin tuning.
        if not all(g == g for g in (gains.kp, gains.ki, gains.kd)):
            gains = PidGains()
        self.gains = gains
        self.steering = SteeringState()
        self.steering_target = 0.0
        self.motor = 0

    def _serve_step(self) -> None:
        if self.mode in (NodeMode.BOOT, NodeMode.HOST):
            return
        while not self.pending_reset:
            try:
                msg = recv_segmented(self.endpoint)
            except CanError as exc:
                self.world.log(self.name, "TransportError", error=type(exc).__name__)
                continue
            if msg is None:
                return
            if self.mode is NodeMode.APPLICATION:
                reply = app_serve(self.ctx, msg.payload)
            elif self.mode is NodeMode.BOOTLOADER:
                reply = bootloader_serve(self.ctx, msg.payload)
            else:
                reply = updater_serve(self.ctx, msg.payload)
            if reply is not None and self.reply_id is not None:
                send_segmented(self.world.bus, self.endpoint, self.reply_id, reply)

    def _app_step(self) -> None:
        if self.mode is not NodeMode.APPLICATION:
            return
        if self.deviation_feed is not None:
            line = next(self.deviation_feed, None)
            if line is not None:
                try:
                    deviation = parse_deviation_line(line)
                except ValueError:
                    self.world.log(self.name, "BadDeviation", line=repr(line))
                else:
                    self.steering_target = deviation_to_target(deviation)
                    self.motor = motor_order(deviation)
        dt = self.world.tick_us / 1_000_000
        error = self.steering_target - self.steering.position
        command, state = pid_step(self.steering, self.gains, error, dt)
        position = state.position + dt * command
        self.steering = SteeringState(position, state.integral, state.previous_error)


@dataclass(frozen=True)
class RunResult:
    met: bool
    at_time_us: int
    ticks: int


class World:
    def __init__(self, bus_config: BusConfig | None = None, tick_us: int = DEFAULT_TICK_US):
        self.bus = Bus(bus_config)
        self.clock_us = 0
        self.tick_us = tick_us
        self.nodes: dict[str, Node] = {}
        self.events: list[dict] = []
        self.last_tick_time = 0

    # -- construction --------------------------------------------------------

    def add_node(self, name: str, node_id: int, **kwargs) -> Node:
        if name in self.nodes:
            raise ValueError(f"node name {name!r} already used")
        node = Node(self, name, node_id, **kwargs)
        self.nodes[name] = node
        return node

    def node(self, name: str) -> Node:
        return self.nodes[name]

    # -- time ----------------------------------------------------------------

    def log(self, node: str, event: str, **detail) -> None:
        entry = {"time_us": self.clock_us, "node": node, "event": event}
        entry.update(detail)
        self.events.append(entry)

    def tick(self) -> None:
        self.last_tick_time = self.clock_us
        _, elapsed = self.bus.step(self.clock_us)
        for node in list(self.nodes.values()):
            node.run_tick()
        self.clock_us += max(elapsed, self.tick_us)

    def run_ticks(self, count: int) -> None:
        for _ in range(count):
            self.tick()

    def run_until(self, predicate: Callable[["World"], bool], max_ticks: int) -> RunResult:
        """Tick until ``predicate(world)`` holds; the reported time is the
        timestamp the triggering tick's events carry."""
        if predicate(self):
            return RunResult(True, self.clock_us, 0)
        for i in range(1, max_ticks + 1):
            self.tick()
            if predicate(self):
                return RunResult(True, self.last_tick_time, i)
        return RunResult(False, self.clock_us, max_ticks)

    # -- resets ----------------------------------------------------------------

    def software_reset(self, name: str) -> None:
        """Out-of-band reset: volatile state goes, backup registers stay."""
        self.nodes[name]._reset("software")

    def power_cycle(self, name: str) -> None:
        node = self.nodes[name]
        node.regs.clear()
        node.busy_until_us = 0
        node.device.busy_until_us = 0
        node._reset("power")

    # -- export ----------------------------------------------------------------

    def events_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events) + "\n"

    def frames_csv(self) -> str:
        lines = ["time_us,id_hex,dlc,data_hex,kind"]
        for row in self.bus.trace:
            lines.append(
                f"{row['time_us']},{row['id']:03x},{row['dlc']},{row['data']},{row['kind']}"
            )
        return "\n".join(lines) + "\n"
