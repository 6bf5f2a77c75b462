"""Middlebox behaviors used by scenarios.

A behavior sees the plaintext of the segments its middlebox can decrypt and
returns replacement plaintext for segments it writes, or None to drop the
record. Each behavior keeps an ``events`` list the run report picks up.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping

from ..access import SegmentationInfo
from ..bits import Bits


class BehaviorBase:
    def __init__(self, **args: Any):
        self.args = args
        self.events: list[str] = []
        # filled in by the simulator from the middlebox's rights
        self.writable_contexts: set[int] = set()

    def __call__(self, plain: dict[int, Bits], layout: SegmentationInfo) -> Mapping[int, Bits] | None:
        raise NotImplementedError


class Passthrough(BehaviorBase):
    def __call__(self, plain, layout):
        return {}


class CoordinateTranslate(BehaviorBase):
    """Shift each 16-bit coordinate of one segment by a fixed offset (mod 2^16)."""

    def __call__(self, plain, layout):
        index = int(self.args.get("segment", 0))
        if index not in plain:
            return {}
        seg = plain[index]
        offsets = [int(o) for o in self.args.get("offsets", [100, -50, 0])]
        width = 16
        count = seg.nbits // width
        coords = [seg.slice(k * width, width).to_int() for k in range(count)]
        moved = [(c + offsets[k % len(offsets)]) % (1 << width) for k, c in enumerate(coords)]
        self.events.append(f"translated {coords} -> {moved}")
        rest = seg.slice(count * width, seg.nbits - count * width)
        return {index: Bits.concat([*(Bits.from_int(c, width) for c in moved), rest])}


class Increment(BehaviorBase):
    """Add one (mod 2^len) to every segment the middlebox may write."""

    def __call__(self, plain, layout):
        return {i: Bits.from_int((seg.to_int() + 1) % (1 << seg.nbits), seg.nbits)
                for i, seg in plain.items() if layout.segments[i].context in self.writable_contexts}


# Function codes flagged regardless of arguments.
DIAGNOSTICS = 0x08
REPORT_SERVER_ID = 0x11
DEVICE_IDENTIFICATION = 0x2B
WRITE_CODES = (0x05, 0x06, 0x0F, 0x10)


def modbus_alerts(prefix: bytes, protected_from: int = 0x1000) -> list[str]:
    """Quickdraw-style checks over the visible prefix of a Modbus PDU."""
    if not prefix:
        return []
    fc = prefix[0]
    alerts = []
    if fc == DIAGNOSTICS and len(prefix) >= 3:
        sub = int.from_bytes(prefix[1:3], "big")
        if sub == 0x0004:
            alerts.append("force listen only mode")
        elif sub == 0x000A:
            alerts.append("clear counters and diagnostic register")
        elif sub == 0x0001:
            alerts.append("restart communications option")
    elif fc == REPORT_SERVER_ID:
        alerts.append("report server information")
    elif fc == DEVICE_IDENTIFICATION:
        alerts.append("read device identification")
    elif fc in WRITE_CODES and len(prefix) >= 3:
        addr = int.from_bytes(prefix[1:3], "big")
        if addr >= protected_from:
            alerts.append(f"write to protected address 0x{addr:04x}")
    if fc & 0x80:
        alerts.append(f"exception response 0x{fc:02x}")
    return alerts


class ModbusIds(BehaviorBase):
    """Read-only IDS inspecting the leading segment of each Modbus message."""

    def __call__(self, plain, layout):
        index = int(self.args.get("segment", 0))
        if index in plain:
            seg = plain[index]
            prefix = seg.data[: seg.nbits // 8]
            for alert in modbus_alerts(prefix, int(self.args.get("protected_from", 0x1000))):
                self.events.append(alert)
        return {}


class FlagSuspicious(BehaviorBase):
    """Set a one-bit flag segment when a visible message looks suspicious."""

    def __call__(self, plain, layout):
        flag = int(self.args.get("flag_segment", len(layout) - 1))
        data = [plain[i] for i in sorted(plain) if i != flag]
        prefix = data[0].data[: data[0].nbits // 8] if data else b""
        suspicious = bool(modbus_alerts(prefix))
        if suspicious:
            self.events.append("flagged")
        return {flag: Bits.from_int(int(suspicious), layout.segments[flag].bit_length)}


class Firewall(BehaviorBase):
    """Drop records whose first visible byte is a blocked function code."""

    def __call__(self, plain, layout):
        blocked = {int(c) for c in self.args.get("blocked", [DIAGNOSTICS])}
        for i in sorted(plain):
            seg = plain[i]
            if seg.nbits >= 8 and seg.data[0] in blocked:
                self.events.append(f"dropped function code 0x{seg.data[0]:02x}")
                return None
            break
        return {}


BEHAVIORS: dict[str, Callable[..., BehaviorBase]] = {
    "passthrough": Passthrough,
    "coordinate_translate": CoordinateTranslate,
    "modbus_ids": ModbusIds,
    "flag_suspicious": FlagSuspicious,
    "firewall": Firewall,
    "increment": Increment,
}


def make_behavior(name: str | None, args: Mapping[str, Any] | None = None) -> BehaviorBase:
    return BEHAVIORS[name or "passthrough"](**dict(args or {}))
