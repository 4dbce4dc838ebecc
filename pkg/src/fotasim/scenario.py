"""Scenario assembly: canned two-node worlds for tests, demos and the CLI.

A scenario file is JSON with four optional sections::

    {
      "seed": 7,
      "bus": {"frame_time_us": 500, "corruption_probability": 0.01,
              "drop_probability": 0.0, "max_auto_retransmit": 3},
      "images": {
        "old": {"size": 131072, "seed": 11, "gains": [2.0, 0.1, 0.5]},
        "new": {"base": "old", "change_blocks": 24, "seed": 12,
                "block_range": [0, 128]}
      },
      "campaign": {"mode": "delta", "secret": "0x5EC10ACE",
                   "retry_budget": 3, "block_size": 1024, "gap_merge": 8},
      "lka": {"deviations": ["0.10\\n", "-0.02\\n"]}
    }

Images come either from disk (``{"path": "old.bin"}``, relative to the
scenario file) or from a seeded generator, so a scenario can be entirely
self-contained.  ``new`` may derive from ``old`` by rewriting a given
number of blocks with seeded random bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from random import Random

from .canbus import BusConfig
from .flashmodel import MASS_ERASE_APPLICATION, REGION_APPLICATION, FlashDevice
from .integrity import DEFAULT_BLOCK_SIZE, block_count
from .lka import PidGains, pack_image
from .nvstore import (
    APP_ENTER_REG,
    METADATA_SIZE,
    AppMetadata,
    BootFlag,
    max_table_blocks,
    write_app_metadata,
)
from .orchestrator import DEFAULT_REQUEST_ID, DEFAULT_RESPONSE_ID, CampaignMode, CampaignPlan
from .simruntime import Node, World

DEFAULT_SECRET = 0x5EC10ACE


class ScenarioError(ValueError):
    pass


def generate_image(size: int, seed: int, gains: PidGains | None = None,
                   block_size: int = DEFAULT_BLOCK_SIZE) -> bytes:
    """Seeded pseudo-random firmware payload with an optional gains block."""
    if size < 1:
        raise ScenarioError("image size must be positive")
    raw = Random(seed).randbytes(size)
    if gains is None:
        return raw
    return pack_image(raw, gains, block_size)


def mutate_blocks(image: bytes, count: int, seed: int,
                  block_size: int = DEFAULT_BLOCK_SIZE,
                  block_range: tuple[int, int] | None = None) -> bytes:
    """Rewrite ``count`` distinct blocks with seeded random bytes, optionally
    confined to ``block_range`` (half-open, in block indices)."""
    total = block_count(len(image), block_size)
    lo, hi = block_range if block_range else (0, total)
    if not (0 <= lo < hi <= total):
        raise ScenarioError(f"block range [{lo}, {hi}) invalid for {total} blocks")
    if count > hi - lo:
        raise ScenarioError("more blocks requested than the range holds")
    rng = Random(seed)
    out = bytearray(image)
    for index in rng.sample(range(lo, hi), count):
        start = index * block_size
        end = min(start + block_size, len(image))
        out[start:end] = rng.randbytes(end - start)
    return bytes(out)


def provision_application(device: FlashDevice, image: bytes,
                          block_size: int = DEFAULT_BLOCK_SIZE) -> None:
    """Factory-flash an application plus matching metadata, then relock.

    Setup helper: erases the application region first and clears the busy
    horizon afterwards, so provisioning never bleeds into simulated time.
    """
    app = device.layout.region(REGION_APPLICATION)
    if len(image) > app.size - METADATA_SIZE:
        raise ScenarioError("image does not fit the application region")
    if block_count(len(image), block_size) > max_table_blocks():
        raise ScenarioError("image needs more block CRCs than the metadata slot holds")
    was_locked = device.locked
    if was_locked:
        device.unlock(*device.unlock_keys)
    device.erase_sectors(MASS_ERASE_APPLICATION)
    device.program(app.start, image)
    write_app_metadata(device, AppMetadata.for_image(image, block_size))
    if was_locked:
        device.reset()
    device.busy_until_us = 0


def build_world(*, old_image: bytes, seed: int = 0,
                bus: BusConfig | None = None,
                secret: int = DEFAULT_SECRET,
                request_id: int = DEFAULT_REQUEST_ID,
                response_id: int = DEFAULT_RESPONSE_ID,
                updater_image: bytes | None = None,
                updater_style: str = "serve",
                deviation_lines=None,
                fault_hook=None,
                block_size: int = DEFAULT_BLOCK_SIZE) -> tuple[World, Node, Node]:
    """Standard two-node world: one host master, one provisioned target that
    boots straight into its application."""
    config = bus or BusConfig(rng_seed=seed)
    world = World(config)
    master = world.add_node("master", 1, role="host",
                            filters=((0x7FF, response_id),))
    session_seed = (seed * 2654435761 + 0x9E3779B9) & 0xFFFFFFFF
    target = world.add_node("target", 2, role="ecu",
                            filters=((0x7FF, request_id),),
                            reply_id=response_id,
                            shared_secret=secret,
                            session_seed=session_seed,
                            updater_image=updater_image,
                            updater_style=updater_style,
                            deviation_feed=deviation_lines,
                            fault_hook=fault_hook)
    provision_application(target.device, old_image, block_size)
    target.regs.write_flag(APP_ENTER_REG, BootFlag.ENTER)
    return world, master, target


# -- JSON scenarios -----------------------------------------------------------


def parse_secret(raw) -> int:
    if isinstance(raw, int):
        return raw
    if isinstance(raw, str):
        try:
            return int(raw, 0)
        except ValueError:
            raise ScenarioError(f"secret {raw!r} is not a number") from None
    raise ScenarioError("secret must be an integer or a numeric string")


def load_scenario(path: str | Path) -> dict:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise ScenarioError("scenario root must be an object")
    if "images" not in spec:
        raise ScenarioError("scenario is missing its images section")
    spec["_dir"] = str(path.parent)
    return spec


def _resolve_image(spec: dict, name: str, base_dir: Path,
                   resolved: dict[str, bytes], block_size: int) -> bytes:
    if name in resolved:
        return resolved[name]
    entry = spec["images"].get(name)
    if not isinstance(entry, dict):
        raise ScenarioError(f"images.{name} missing or not an object")
    if "path" in entry:
        try:
            data = (base_dir / entry["path"]).read_bytes()
        except OSError as exc:
            raise ScenarioError(f"cannot read images.{name}: {exc}") from exc
    elif "base" in entry:
        base = _resolve_image(spec, entry["base"], base_dir, resolved, block_size)
        rng_seed = int(entry.get("seed", 0))
        count = int(entry.get("change_blocks", 1))
        block_range = entry.get("block_range")
        if block_range is not None:
            block_range = (int(block_range[0]), int(block_range[1]))
        data = mutate_blocks(base, count, rng_seed, block_size, block_range)
    elif "size" in entry:
        gains = entry.get("gains")
        data = generate_image(int(entry["size"]), int(entry.get("seed", 0)),
                              PidGains(*gains) if gains else None, block_size)
    else:
        raise ScenarioError(f"images.{name} needs a path, a size or a base")
    resolved[name] = data
    return data


def world_from_scenario(spec: dict, seed_override: int | None = None
                        ) -> tuple[World, CampaignPlan]:
    """Build a runnable world plus its campaign plan from a scenario dict."""
    seed = int(spec.get("seed", 0)) if seed_override is None else seed_override
    bus_spec = spec.get("bus", {})
    try:
        config = BusConfig(
            frame_time_us=int(bus_spec.get("frame_time_us", 500)),
            corruption_probability=float(bus_spec.get("corruption_probability", 0.0)),
            drop_probability=float(bus_spec.get("drop_probability", 0.0)),
            rng_seed=seed,
            max_auto_retransmit=bus_spec.get("max_auto_retransmit", 3),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"bad bus section: {exc}") from exc

    campaign = spec.get("campaign", {})
    mode_raw = campaign.get("mode", "delta")
    try:
        mode = CampaignMode(mode_raw)
    except ValueError:
        raise ScenarioError(f"campaign.mode {mode_raw!r} unknown") from None
    secret = parse_secret(campaign.get("secret", DEFAULT_SECRET))
    block_size = int(campaign.get("block_size", DEFAULT_BLOCK_SIZE))

    base_dir = Path(spec.get("_dir", "."))
    resolved: dict[str, bytes] = {}
    old_image = _resolve_image(spec, "old", base_dir, resolved, block_size)
    new_image = _resolve_image(spec, "new", base_dir, resolved, block_size)

    lka_spec = spec.get("lka", {})
    deviations = lka_spec.get("deviations")

    world, _, _ = build_world(
        old_image=old_image, seed=seed, bus=config, secret=secret,
        deviation_lines=deviations, block_size=block_size,
    )
    plan = CampaignPlan(
        mode=mode,
        old_image=old_image,
        new_image=new_image,
        shared_secret=secret,
        retry_budget=int(campaign.get("retry_budget", 3)),
        block_size=block_size,
        gap_merge=int(campaign.get("gap_merge", 8)),
    )
    return world, plan
