"""Tag-engine micro-benchmark over context count and context size.

Each message consists of ``c`` segments of ``s`` bytes, one per context,
passing a single middlebox that holds either read or write access to all of
them. Call counts are exact and platform independent; wall times are only
reported.
"""

from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass

from . import crypto
from .access import Access, AccessRights, SegmentationInfo, SessionConfig, TemplateTable, derive_key_matrix
from .bits import Bits
from .record import encode_record
from .session import Middlebox, Receiver, Sender

DEFAULT_CONTEXTS = (1, 2, 3, 4, 5)
DEFAULT_SIZES = (1, 4, 8, 12, 16, 20)


@dataclass
class BenchRow:
    contexts: int
    size: int
    access: str
    hop_macs: int
    endpoint_macs: int
    hop_us: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _session(contexts: int, size: int, access: Access, seed: int):
    rng = random.Random(seed)
    rights = AccessRights(3, contexts, {(c, 1): access for c in range(contexts)})
    layout = SegmentationInfo.of(*[(size * 8, c) for c in range(contexts)])
    config = SessionConfig(rights, TemplateTable({0: layout}))
    matrix = derive_key_matrix(rng.randbytes(32), {1: rng.randbytes(32)}, rng.randbytes(64), rights)
    plaintext = Bits.from_bytes(rng.randbytes(size * contexts))
    if access is Access.WRITE:
        def behave(plain, lay):
            return {i: seg.flip(0) for i, seg in plain.items()}
    else:
        behave = None
    return (Sender(config, matrix), Middlebox(1, config, matrix.column(1, rights), behave),
            Receiver(config, matrix), plaintext)


def measure(contexts: int, size: int, access: Access, reps: int = 20, seed: int = 0) -> BenchRow:
    sender, middlebox, receiver, plaintext = _session(contexts, size, access, seed)
    hop_times = []
    hop_macs = endpoint_macs = None
    for _ in range(max(1, reps)):
        with crypto.count_primitives() as ends:
            wire = encode_record(sender.protect(plaintext, template_id=0))
        with crypto.count_primitives() as hop:
            start = time.perf_counter()
            out = middlebox.process(wire).wire_out
            hop_times.append(time.perf_counter() - start)
        with crypto.count_primitives() as recv:
            if not receiver.accept(out).accepted:
                raise RuntimeError("benchmark record rejected")
        hop_macs = hop.mac
        endpoint_macs = ends.mac + recv.mac
    return BenchRow(contexts, size, access.name.lower(), hop_macs, endpoint_macs,
                    statistics.mean(hop_times) * 1e6)


def run_bench(contexts=DEFAULT_CONTEXTS, sizes=DEFAULT_SIZES, reps: int = 20, seed: int = 0) -> list[BenchRow]:
    return [measure(c, s, a, reps, seed) for c in contexts for s in sizes for a in (Access.READ, Access.WRITE)]


def check_rows(rows: list[BenchRow]) -> list[str]:
    """Closed-form checks: 2 MACs per read context, 4 per write context, sizes irrelevant."""
    problems = []
    for r in rows:
        per = 2 if r.access == "read" else 4
        if r.hop_macs != per * r.contexts:
            problems.append(f"{r.access} hop with {r.contexts} contexts used {r.hop_macs} MACs, expected {per * r.contexts}")
        if r.endpoint_macs != 4 * r.contexts:
            problems.append(f"sender+receiver with {r.contexts} contexts used {r.endpoint_macs} MACs, "
                            f"expected {4 * r.contexts}")
    by_key = {(r.contexts, r.size, r.access): r for r in rows}
    for (c, s, a), r in by_key.items():
        if a == "write" and (c, s, "read") in by_key and r.hop_macs != 2 * by_key[(c, s, "read")].hop_macs:
            problems.append(f"write/read MAC ratio at {c} contexts is not 2")
    for c in {r.contexts for r in rows}:
        for a in ("read", "write"):
            counts = {r.hop_macs for r in rows if r.contexts == c and r.access == a}
            if len(counts) > 1:
                problems.append(f"{a} MAC count at {c} contexts depends on context size: {sorted(counts)}")
    return problems


def format_rows(rows: list[BenchRow]) -> str:
    lines = [f"{'contexts':>8} {'size':>5} {'access':>6} {'hop MACs':>9} {'s+r MACs':>9} {'hop us':>9}"]
    for r in rows:
        lines.append(f"{r.contexts:>8} {r.size:>5} {r.access:>6} {r.hop_macs:>9} {r.endpoint_macs:>9} {r.hop_us:>9.1f}")
    return "\n".join(lines)
