"""Run scenarios end to end: handshake, traffic, attacks, verdicts."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol

from .. import crypto
from ..access import Access, EntityKeys, SegmentationInfo
from ..bits import Bits
from ..errors import ConfigurationError, ProtocolError, ReplayError, ScenarioError
from ..handshake import HandshakeResult, run_handshake
from ..injection import Injector, TemplateIssuer
from ..record import dtls12_record_size, encode_record
from ..session import HopResult, Middlebox, Receiver, Sender, Verdict
from .attacks import (ColluderModify, ColluderRevert, CollusionState, InsiderWriter, flip_wire_bits, forge_record,
                      resolve_flip)
from .behaviors import BehaviorBase, make_behavior
from .scenario import AttackDirective, Scenario, TrafficItem
from .transport import InMemoryTransport, make_transport

ACCEPT = "accept"
REJECT_AT_RECEIVER = "reject-at-receiver"
DROPPED = "dropped"
LOST = "lost"


def reject_at(entity: int) -> str:
    return f"reject-at-middlebox {entity}"


class HopHandler(Protocol):
    entity: int

    def process(self, wire: bytes) -> HopResult: ...


@dataclass
class HopTrace:
    entity: int
    name: str
    wire_in: str
    wire_out: str | None
    view: dict[int, str]
    tag: str | None
    verdict: str
    self_verified: bool | None
    counts: dict[str, int]
    cumulative: dict[str, int]
    note: str = ""


@dataclass
class MessageResult:
    index: int
    kind: str
    expected: str
    actual: str
    reason: str = ""
    traces: list[HopTrace] = field(default_factory=list)
    wire_bytes: int | None = None
    overhead_vs_dtls12: int | None = None
    attacks: list[str] = field(default_factory=list)
    view_problems: list[str] = field(default_factory=list)

    @property
    def matched(self) -> bool:
        # a datagram lost in transit carries no verdict
        return (self.actual == self.expected or self.actual == LOST) and not self.view_problems


@dataclass
class RunReport:
    scenario: str
    transport: str
    seed: int
    messages: list[MessageResult]
    handshake_flights: list[tuple[str, ...]]
    round_trips_added: int
    events: dict[str, list[str]]
    blinded_fraction: float | None = None
    blinded_bytes: int | None = None
    total_bytes: int | None = None

    @property
    def ok(self) -> bool:
        return all(m.matched for m in self.messages)

    @property
    def mismatches(self) -> list[MessageResult]:
        return [m for m in self.messages if not m.matched]

    def summary(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "transport": self.transport,
            "seed": self.seed,
            "ok": self.ok,
            "messages": len(self.messages),
            "mismatches": [m.index for m in self.mismatches],
            "lost": sum(m.actual == LOST for m in self.messages),
            "verdicts": [{"index": m.index, "expected": m.expected, "actual": m.actual} for m in self.messages],
            "round_trips_added": self.round_trips_added,
            "blinded_fraction": self.blinded_fraction,
        }

    def to_dict(self) -> dict[str, Any]:
        out = self.summary()
        out["handshake_flights"] = [list(f) for f in self.handshake_flights]
        out["events"] = self.events
        out["details"] = [asdict(m) for m in self.messages]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario} (transport={self.transport}, seed={self.seed})",
                 f"  handshake: {len(self.handshake_flights)} flights, {self.round_trips_added} extra round trips"]
        for m in self.messages:
            status = "ok" if m.matched else "MISMATCH"
            extra = f" [{m.reason}]" if m.reason else ""
            size = f" {m.wire_bytes}B (+{m.overhead_vs_dtls12} vs DTLS 1.2)" if m.wire_bytes is not None else ""
            lines.append(f"  #{m.index} {m.kind}: expected {m.expected}, got {m.actual}{extra}{size} {status}")
            for problem in m.view_problems:
                lines.append(f"     view: {problem}")
        if self.blinded_fraction is not None:
            lines.append(f"  blinded bytes: {self.blinded_bytes}/{self.total_bytes} = {self.blinded_fraction:.3f}")
        for name, events in self.events.items():
            if events:
                lines.append(f"  events at {name}: {len(events)} ({', '.join(sorted(set(events))[:4])})")
        lines.append(f"  result: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def _seed_bytes(seed: int) -> bytes:
    return seed.to_bytes(8, "big", signed=True)


def session_secrets(seed: int, middleboxes: range) -> tuple[bytes, dict[int, bytes]]:
    """Deterministic pre-shared keys for a simulated session."""
    base = _seed_bytes(seed)
    psk_sr = crypto.sha256(b"psk sender-receiver" + base)
    psks = {m: crypto.sha256(b"psk sender-middlebox" + bytes([m]) + base) for m in middleboxes}
    return psk_sr, psks


class SimSession:
    """All entities of one established session plus the links between them."""

    def __init__(self, scenario: Scenario, seed: int | None = None, transport: str | None = None,
                 drop_rate: float | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.config = scenario.config()
        rights = self.config.rights
        psk_sr, psks = session_secrets(self.seed, rights.middleboxes)
        self.handshake: HandshakeResult = run_handshake(self.config, psk_sr, psks, seed=_seed_bytes(self.seed))
        client_matrix = self.handshake.client.matrix
        self.sender = Sender(self.config, client_matrix)
        self.behaviors: dict[int, BehaviorBase] = {}
        self.middleboxes: dict[int, Middlebox] = {}
        for i in rights.middleboxes:
            spec = scenario.entities[i]
            keys = self.handshake.middlebox_keys.get(i) or EntityKeys(i, {}, {}, {}, {}, {})
            self.behaviors[i] = make_behavior(spec.behavior, spec.behavior_args)
            self.behaviors[i].writable_contexts = {c for c, a in spec.rights.items() if a is Access.WRITE}
            self.middleboxes[i] = Middlebox(i, self.config, keys, self.behaviors[i], spec.policy)
        self.receiver = Receiver(self.config, self.handshake.server.matrix)
        self.transport: InMemoryTransport = make_transport(
            transport or scenario.transport, len(scenario.entities),
            scenario.drop_rate if drop_rate is None else drop_rate, self.seed)
        self.rng = random.Random(self.seed)
        self.captured: list[dict[int, bytes]] = []
        self.injectors: dict[int, Injector] = {}
        self.injection_ids: dict[str, tuple[int, int]] = {}
        self._issue_templates(client_matrix)

    def close(self) -> None:
        self.transport.close()

    def __enter__(self) -> SimSession:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _issue_templates(self, matrix) -> None:
        if not self.scenario.injection_templates:
            return
        issuer = TemplateIssuer(self.config, matrix)
        for name, spec in self.scenario.injection_templates.items():
            template = issuer.issue_template(spec.template_id, spec.layout, spec.placeholders, spec.injector,
                                             spec.sequences, spec.fixed)
            injector = self.injectors.get(spec.injector)
            if injector is None:
                injector = Injector(self.middleboxes[spec.injector], matrix.kd_keys[spec.injector])
                self.injectors[spec.injector] = injector
            wire = issuer.stream_record(template)
            delivered = None
            while delivered is None:
                delivered = self.transport.deliver(0, spec.injector, wire)
            injector.receive_stream(delivered)
            self.receiver.register_injection_epoch(template.epoch)
            self.injection_ids[name] = (spec.injector, spec.template_id)
        self.issuer = issuer

    # -- per message -------------------------------------------------------

    def _handlers(self, directives: list[AttackDirective]) -> dict[int, HopHandler]:
        handlers: dict[int, HopHandler] = dict(self.middleboxes)
        for d in directives:
            if d.action == "insider-write":
                handlers[d.params["hop"]] = InsiderWriter(self.middleboxes[d.params["hop"]], d.params)
            elif d.action == "collude":
                state = CollusionState(d.params["context"], d.params)
                handlers[d.params["a"]] = ColluderModify(self.middleboxes[d.params["a"]], state)
                handlers[d.params["b"]] = ColluderRevert(self.middleboxes[d.params["b"]], state)
        return handlers

    def _path(self, directives: list[AttackDirective], start: int = 1) -> list[int]:
        path = [m for m in self.config.rights.middleboxes if m >= start]
        for d in directives:
            if d.action == "skip-hop" and d.params["hop"] in path:
                path.remove(d.params["hop"])
            elif d.action == "reorder-hops":
                a, b = d.params["hops"]
                if a in path and b in path:
                    ia, ib = path.index(a), path.index(b)
                    path[ia], path[ib] = b, a
        return path

    def _apply_link_attacks(self, wire: bytes, position: int, directives: list[AttackDirective],
                            flips: list[list[int]], notes: list[str]) -> bytes | None:
        templates = self.config.templates
        for d in directives:
            if d.position != position:
                continue
            if d.action == "flip-bits":
                bits = resolve_flip(wire, templates, d.params)
                flips.append(bits)
                wire = flip_wire_bits(wire, bits)
            elif d.action == "revert":
                if not flips:
                    raise ScenarioError([f"revert at {position} has no earlier flip"])
                wire = flip_wire_bits(wire, flips.pop())
            elif d.action == "replay":
                source = self.captured[d.params["message"]].get(position)
                if source is None:
                    raise ScenarioError([f"message {d.params['message']} never reached position {position}"])
                wire = source
            elif d.action == "inject-forged":
                wire = forge_record(wire, templates, self.rng, d.params)
            elif d.action == "drop":
                notes.append(f"dropped by adversary before entity {position}")
                return None
            notes.append(f"{d.action} before entity {position}")
        return wire

    def _trace(self, entity: int, wire_in: bytes, result: HopResult | None, counts: dict[str, int],
               cumulative: dict[str, int], verdict: str, view: dict[int, Bits] | None = None,
               tag: bytes | None = None, note: str = "", wire_out: bytes | None = None) -> HopTrace:
        for k, v in counts.items():
            cumulative[k] = cumulative.get(k, 0) + v
        if result is not None:
            view, tag, wire_out, note = result.view, result.main_tag, result.wire_out, result.reason
        return HopTrace(entity, self.scenario.entity_name(entity), wire_in.hex(),
                        wire_out.hex() if wire_out is not None else None,
                        {i: str(b) for i, b in (view or {}).items()}, tag.hex() if tag else None, verdict,
                        result.self_verified if result is not None else None, dict(counts), dict(cumulative), note)

    def run_item(self, index: int, item: TrafficItem) -> MessageResult:
        if item.is_injection:
            return self._run_injection(index, item)
        directives = item.attacks
        result = MessageResult(index, "record", item.expect, "",
                               attacks=[f"{d.action}@{d.position}" if d.position else d.action for d in directives])
        cumulative: dict[str, int] = {}
        with crypto.count_primitives() as c:
            record = self.sender.protect(item.payload, template_id=item.template, layout=item.layout,
                                         self_verify=item.self_verify)
            wire = encode_record(record)
        result.wire_bytes = len(wire)
        result.overhead_vs_dtls12 = len(wire) - dtls12_record_size(len(record.ciphertext.data))
        result.traces.append(self._trace(0, b"", None, c.snapshot(), cumulative, "sent", tag=record.main_tag,
                                         wire_out=wire))
        self._deliver(result, wire, 0, self._path(directives), self._handlers(directives), directives, cumulative)
        self._check_views(result, item)
        return result

    def _deliver(self, result: MessageResult, wire: bytes, origin: int, path: list[int],
                 handlers: dict[int, HopHandler], directives: list[AttackDirective],
                 cumulative: dict[str, int]) -> None:
        captured: dict[int, bytes] = {}
        self.captured.append(captured)
        flips: list[list[int]] = []
        notes: list[str] = []
        prev = origin
        receiver = self.config.rights.receiver
        for dst in [*path, receiver]:
            wire = self.transport.deliver(prev, dst, wire)
            if wire is None:
                result.actual, result.reason = LOST, f"lost on link {prev}->{dst}"
                return
            try:
                wire = self._apply_link_attacks(wire, dst, directives, flips, notes)
            except ProtocolError as exc:
                raise ScenarioError([f"attack before entity {dst} needs a well-formed record: {exc}"]) from None
            if wire is None:
                result.actual, result.reason = DROPPED, "; ".join(notes)
                return
            captured[dst] = wire
            if dst == receiver:
                with crypto.count_primitives() as c:
                    rr = self.receiver.accept(wire)
                result.traces.append(self._trace(dst, wire, None, c.snapshot(), cumulative, rr.verdict.value,
                                                 view=rr.segments, note=rr.reason))
                result.actual = ACCEPT if rr.accepted else REJECT_AT_RECEIVER
                result.reason = "; ".join(filter(None, [*notes, rr.reason]))
                return
            with crypto.count_primitives() as c:
                hop = handlers[dst].process(wire)
            result.traces.append(self._trace(dst, wire, hop, c.snapshot(), cumulative, hop.verdict.value))
            if hop.verdict is Verdict.REJECT:
                result.actual, result.reason = reject_at(dst), hop.reason
                return
            if hop.verdict is Verdict.DROP:
                result.actual, result.reason = DROPPED, hop.reason
                return
            wire = hop.wire_out
            prev = dst

    def _run_injection(self, index: int, item: TrafficItem) -> MessageResult:
        injector_id, tid = self.injection_ids[item.inject]
        injector = self.injectors[injector_id]
        result = MessageResult(index, "inject", item.expect, "",
                               attacks=[f"{d.action}@{d.position}" if d.position else d.action for d in item.attacks])
        cumulative: dict[str, int] = {}
        try:
            with crypto.count_primitives() as c:
                wire = injector.inject(tid, item.sequence, item.values)
        except (ReplayError, ConfigurationError) as exc:
            self.captured.append({})
            result.actual, result.reason = reject_at(injector_id), str(exc)
            return result
        result.wire_bytes = len(wire)
        layout = injector.templates[tid].layout
        result.overhead_vs_dtls12 = len(wire) - dtls12_record_size((layout.total_bits + 7) // 8)
        result.traces.append(self._trace(injector_id, b"", None, c.snapshot(), cumulative, "injected",
                                         wire_out=wire))
        path = self._path(item.attacks, start=injector_id + 1)
        self._deliver(result, wire, injector_id, path, self._handlers(item.attacks), item.attacks, cumulative)
        self._check_views(result, item)
        return result

    def _check_views(self, result: MessageResult, item: TrafficItem) -> None:
        for entity, expected in item.expect_views.items():
            trace = next((t for t in result.traces if t.entity == entity), None)
            seen = sorted(trace.view) if trace is not None else None
            if seen != sorted(expected):
                result.view_problems.append(
                    f"{self.scenario.entity_name(entity)} saw segments {seen}, expected {sorted(expected)}")


def blinded_stats(scenario: Scenario, entity: int) -> tuple[int, int]:
    """(bytes the entity cannot read, total plaintext bytes) over the scenario's records."""
    rights = scenario.rights()
    hidden = total = 0
    for item in scenario.traffic:
        if item.is_injection:
            continue
        layout: SegmentationInfo = item.layout if item.layout is not None else scenario.templates[item.template]
        for seg in layout:
            total += seg.bit_length
            if rights.get(seg.context, entity) is Access.NONE:
                hidden += seg.bit_length
    return hidden // 8, total // 8


def run_scenario(scenario: Scenario, seed: int | None = None, transport: str | None = None,
                 drop_rate: float | None = None) -> RunReport:
    with SimSession(scenario, seed, transport, drop_rate) as session:
        messages = [session.run_item(i, item) for i, item in enumerate(scenario.traffic)]
        hs = session.handshake
        report = RunReport(scenario.name, transport or scenario.transport, session.seed, messages, hs.flights,
                           hs.round_trips_added,
                           {scenario.entity_name(i): b.events for i, b in session.behaviors.items()})
    if scenario.blinded_for is not None:
        hidden, total = blinded_stats(scenario, scenario.blinded_for)
        report.blinded_bytes, report.total_bytes = hidden, total
        report.blinded_fraction = hidden / total if total else 0.0
    return report


def collude(session: SimSession, a: int, b: int, context: int, bits: list[int] | None = None,
            payload: Bits | None = None, template: int | None = None,
            layout: SegmentationInfo | None = None) -> str:
    """Send one record past colluding middleboxes ``a`` < ``b`` on ``context``; returns the verdict."""
    if not a < b:
        raise ConfigurationError("colluder a must precede b")
    if template is None and layout is None:
        template = min(session.config.templates.templates)
    resolved = layout if layout is not None else session.config.templates[template]
    payload = payload if payload is not None else Bits.zeros(resolved.total_bits)
    directive = AttackDirective("collude", None, {"a": a, "b": b, "context": context, "bits": bits or [0]})
    item = TrafficItem(ACCEPT, payload, template, layout, attacks=[directive])
    return session.run_item(len(session.captured), item).actual

