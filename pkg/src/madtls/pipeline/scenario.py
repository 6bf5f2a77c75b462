"""Declarative scenario files.

A scenario is YAML with entities (sender first, receiver last), named
contexts, templates, a traffic schedule and optional attack directives.
A file holds either one scenario mapping or a pack ``{name, scenarios: [...]}``.
Parsing collects every problem it finds and raises ``ScenarioError`` once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..access import (Access, AccessRights, MAX_CONTEXTS, MAX_TEMPLATES, SegmentationInfo, SessionConfig,
                      TemplateTable)
from ..bits import Bits
from ..errors import ScenarioError
from ..session import SelfVerifyPolicy

ACTIONS = ("flip-bits", "revert", "reorder-hops", "skip-hop", "replay", "inject-forged", "drop", "insider-write",
           "collude")
PATH_ACTIONS = ("reorder-hops", "skip-hop", "insider-write", "collude")
TRANSPORTS = ("memory", "datagram")
OUTCOME_RE = re.compile(r"^(accept|reject-at-receiver|dropped|reject-at-middlebox (\S+))$")


@dataclass
class EntitySpec:
    name: str
    role: str
    rights: dict[int, Access] = field(default_factory=dict)
    behavior: str | None = None
    behavior_args: dict[str, Any] = field(default_factory=dict)
    self_verify: bool = False
    policy: SelfVerifyPolicy = SelfVerifyPolicy.DROP_AND_REPORT


@dataclass
class AttackDirective:
    action: str
    position: int | None = None
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class InjectionTemplateSpec:
    name: str
    template_id: int
    injector: int
    layout: SegmentationInfo
    placeholders: frozenset[int]
    fixed: Bits
    sequences: list[int]


@dataclass
class TrafficItem:
    expect: str
    payload: Bits | None = None
    template: int | None = None
    layout: SegmentationInfo | None = None
    self_verify: bool = True
    inject: str | None = None
    sequence: int | None = None
    values: dict[int, Bits] = field(default_factory=dict)
    attacks: list[AttackDirective] = field(default_factory=list)
    expect_views: dict[int, list[int]] = field(default_factory=dict)

    @property
    def is_injection(self) -> bool:
        return self.inject is not None


@dataclass
class Scenario:
    name: str
    entities: list[EntitySpec]
    contexts: list[str]
    templates: dict[int, SegmentationInfo]
    traffic: list[TrafficItem]
    injection_templates: dict[str, InjectionTemplateSpec] = field(default_factory=dict)
    transport: str = "memory"
    drop_rate: float = 0.0
    seed: int = 0
    description: str = ""
    blinded_for: int | None = None

    @property
    def receiver(self) -> int:
        return len(self.entities) - 1

    @property
    def middleboxes(self) -> range:
        return range(1, self.receiver)

    def entity_name(self, index: int) -> str:
        return self.entities[index].name

    def rights(self) -> AccessRights:
        table = {(ctx, i): a for i, e in enumerate(self.entities) if e.role == "middlebox" for ctx, a in e.rights.items()}
        return AccessRights(len(self.entities), len(self.contexts), table)

    def config(self) -> SessionConfig:
        return SessionConfig(
            self.rights(), TemplateTable(dict(self.templates)),
            frozenset(i for i, e in enumerate(self.entities) if e.self_verify),
            [("127.0.0.1", 4433 + i) for i in self.middleboxes],
        )


class _Collector:
    def __init__(self) -> None:
        self.violations: list[str] = []

    def add(self, where: str, problem: str) -> None:
        self.violations.append(f"{where}: {problem}")


def _as_list(value: Any) -> list:
    if value is None:
        return []
    return value if isinstance(value, list) else [value]


def _parse_hex(text: Any) -> bytes:
    if isinstance(text, int):
        text = f"{text:x}"
    cleaned = re.sub(r"[\s:_]", "", str(text))
    return bytes.fromhex(cleaned)


def _bits_for(text: Any, nbits: int) -> Bits:
    data = _parse_hex(text)
    if len(data) != (nbits + 7) // 8:
        raise ValueError(f"expected {(nbits + 7) // 8} bytes for {nbits} bits, got {len(data)}")
    return Bits.from_bytes(data, nbits)


class _Parser:
    def __init__(self, raw: dict, errors: _Collector):
        self.raw = raw
        self.err = errors
        self.name = str(raw.get("name", "<unnamed>"))
        self.contexts = [str(c) for c in _as_list(raw.get("contexts"))]
        self.entity_names = [str(e.get("name", f"entity{i}")) if isinstance(e, dict) else str(e)
                             for i, e in enumerate(_as_list(raw.get("entities")))]

    def where(self, detail: str) -> str:
        return f"{self.name}: {detail}"

    def context(self, ref: Any, where: str) -> int | None:
        if isinstance(ref, int) and not isinstance(ref, bool) and 0 <= ref < len(self.contexts):
            return ref
        if str(ref) in self.contexts:
            return self.contexts.index(str(ref))
        self.err.add(self.where(where), f"unknown context {ref!r}")
        return None

    def entity(self, ref: Any, where: str, middlebox: bool = False) -> int | None:
        n = len(self.entity_names)
        index = None
        if isinstance(ref, int) and not isinstance(ref, bool) and 0 <= ref < n:
            index = ref
        elif str(ref) in self.entity_names:
            index = self.entity_names.index(str(ref))
        if index is None:
            self.err.add(self.where(where), f"unknown entity {ref!r}")
            return None
        if middlebox and not 0 < index < n - 1:
            self.err.add(self.where(where), f"{ref!r} is not a middlebox")
            return None
        return index

    def layout(self, raw: Any, where: str) -> SegmentationInfo | None:
        pairs = []
        for j, seg in enumerate(_as_list(raw)):
            if not (isinstance(seg, (list, tuple)) and len(seg) == 2):
                self.err.add(self.where(where), f"segment {j} must be [bits, context]")
                return None
            nbits, ctx = seg
            if not isinstance(nbits, int) or nbits <= 0:
                self.err.add(self.where(where), f"segment {j} needs a positive bit length")
                return None
            c = self.context(ctx, f"{where} segment {j}")
            if c is None:
                return None
            pairs.append((nbits, c))
        if not pairs:
            self.err.add(self.where(where), "layout has no segments")
            return None
        return SegmentationInfo.of(*pairs)

    def outcome(self, raw: Any, where: str) -> str:
        text = str(raw if raw is not None else "accept").strip()
        m = OUTCOME_RE.match(text)
        if not m:
            self.err.add(self.where(where), f"bad expected outcome {text!r}")
            return text
        if m.group(2) is not None:
            ref = m.group(2)
            idx = self.entity(int(ref) if ref.isdigit() else ref, where, middlebox=True)
            return f"reject-at-middlebox {idx}"
        return text

    def entities(self) -> list[EntitySpec]:
        raw = _as_list(self.raw.get("entities"))
        out = []
        if len(raw) < 2:
            self.err.add(self.where("entities"), "need at least a sender and a receiver")
        for i, e in enumerate(raw):
            if not isinstance(e, dict):
                self.err.add(self.where(f"entity {i}"), "must be a mapping")
                continue
            role = str(e.get("role", "middlebox"))
            expected = "sender" if i == 0 else "receiver" if i == len(raw) - 1 else "middlebox"
            if role != expected:
                self.err.add(self.where(f"entity {i}"), f"role {role!r} at position {i}; expected {expected}")
            rights = {}
            for ctx_ref, access in (e.get("rights") or {}).items():
                ctx = self.context(ctx_ref, f"entity {self.entity_names[i]} rights")
                try:
                    right = Access.parse(access)
                except (KeyError, ValueError):
                    self.err.add(self.where(f"entity {self.entity_names[i]}"), f"bad access {access!r}")
                    continue
                if ctx is not None and right is not Access.NONE:
                    rights[ctx] = right
            if rights and role != "middlebox":
                self.err.add(self.where(f"entity {self.entity_names[i]}"), "only middleboxes carry rights")
            try:
                policy = SelfVerifyPolicy(e.get("policy", SelfVerifyPolicy.DROP_AND_REPORT.value))
            except ValueError:
                self.err.add(self.where(f"entity {self.entity_names[i]}"), f"bad policy {e.get('policy')!r}")
                policy = SelfVerifyPolicy.DROP_AND_REPORT
            behavior = e.get("behavior")
            if behavior is not None:
                from .behaviors import BEHAVIORS
                if behavior not in BEHAVIORS:
                    self.err.add(self.where(f"entity {self.entity_names[i]}"), f"unknown behavior {behavior!r}")
            sv = bool(e.get("self_verify", False))
            if sv and role != "middlebox":
                self.err.add(self.where(f"entity {self.entity_names[i]}"), "only middleboxes self-verify")
            out.append(EntitySpec(self.entity_names[i], role, rights, behavior, dict(e.get("behavior_args") or {}),
                                  sv, policy))
        if len(self.entity_names) != len(set(self.entity_names)):
            self.err.add(self.where("entities"), "entity names must be unique")
        return out

    def templates(self) -> dict[int, SegmentationInfo]:
        out = {}
        for j, t in enumerate(_as_list(self.raw.get("templates"))):
            tid = t.get("id", j) if isinstance(t, dict) else None
            if not isinstance(tid, int) or not 0 <= tid < MAX_TEMPLATES:
                self.err.add(self.where(f"template {j}"), "id must be in 0..63")
                continue
            if tid in out:
                self.err.add(self.where(f"template {tid}"), "duplicate id")
                continue
            layout = self.layout(t.get("segments"), f"template {tid}")
            if layout is not None:
                out[tid] = layout
        return out

    def injection_templates(self, entities: list[EntitySpec]) -> dict[str, InjectionTemplateSpec]:
        out = {}
        for j, t in enumerate(_as_list(self.raw.get("injection_templates"))):
            name = str(t.get("name", f"injection{j}"))
            where = f"injection template {name}"
            injector = self.entity(t.get("injector"), where, middlebox=True)
            layout = self.layout(t.get("segments"), where)
            tid = t.get("id", j)
            if not isinstance(tid, int) or not 0 <= tid < MAX_TEMPLATES:
                self.err.add(self.where(where), "id must be in 0..63")
                continue
            if layout is None or injector is None:
                continue
            placeholders = frozenset(int(p) for p in _as_list(t.get("placeholders")))
            bad = [p for p in placeholders if not 0 <= p < len(layout)]
            if bad:
                self.err.add(self.where(where), f"placeholder index {bad} out of range")
                continue
            fixed_raw = t.get("fixed")
            try:
                fixed = _bits_for(fixed_raw, layout.total_bits) if fixed_raw is not None else Bits.zeros(layout.total_bits)
            except ValueError as exc:
                self.err.add(self.where(where), f"fixed plaintext: {exc}")
                continue
            seqs = t.get("sequences", 1)
            sequences = list(range(seqs)) if isinstance(seqs, int) else [int(s) for s in seqs]
            out[name] = InjectionTemplateSpec(name, tid, injector, layout, placeholders, fixed, sequences)
        return out

    def attack(self, raw: Any, where: str, flips_so_far: list[int]) -> AttackDirective | None:
        if not isinstance(raw, dict) or "action" not in raw:
            self.err.add(self.where(where), "attack needs an action")
            return None
        action = str(raw["action"])
        if action not in ACTIONS:
            self.err.add(self.where(where), f"unknown action {action!r}")
            return None
        params = {k: v for k, v in raw.items() if k not in ("action", "position")}
        position = raw.get("position")
        receiver = len(self.entity_names) - 1
        if action not in PATH_ACTIONS:
            if position is None:
                self.err.add(self.where(where), f"{action} needs a position in 1..{receiver}")
                return None
            position = self.entity(position, f"{where} position")
            if position is None:
                return None
            if position == 0:
                self.err.add(self.where(where), f"{action} needs a position in 1..{receiver}")
                return None
        for key in ("hop", "a", "b"):
            if key in params:
                params[key] = self.entity(params[key], f"{where} {key}", middlebox=True)
        if "hops" in params:
            params["hops"] = [self.entity(h, f"{where} hops", middlebox=True) for h in _as_list(params["hops"])]
            if len(params["hops"]) != 2:
                self.err.add(self.where(where), "reorder-hops swaps exactly two hops")
        if "context" in params:
            params["context"] = self.context(params["context"], f"{where} context")
        if action in ("skip-hop", "insider-write") and params.get("hop") is None:
            self.err.add(self.where(where), f"{action} needs a hop")
        if action == "collude" and (params.get("a") is None or params.get("b") is None or "context" not in params):
            self.err.add(self.where(where), "collude needs a, b and context")
        elif action == "collude" and params["a"] >= params["b"]:
            self.err.add(self.where(where), "colluder a must precede b")
        if action == "flip-bits":
            flips_so_far.append(position)
        if action == "revert":
            earlier = [p for p in flips_so_far if p < position]
            if not earlier:
                self.err.add(self.where(where), "revert without an earlier flip-bits")
            else:
                flips_so_far.remove(earlier[-1])
        return AttackDirective(action, position, params)

    def traffic(self, templates: dict[int, SegmentationInfo],
                inj: dict[str, InjectionTemplateSpec]) -> list[TrafficItem]:
        out = []
        for j, raw in enumerate(_as_list(self.raw.get("traffic"))):
            where = f"traffic[{j}]"
            if not isinstance(raw, dict):
                self.err.add(self.where(where), "must be a mapping")
                continue
            repeat = int(raw.get("repeat", 1))
            expect = self.outcome(raw.get("expect"), where)
            flips: list[int] = []
            attacks = [a for a in (self.attack(r, f"{where} attack {k}", flips)
                                   for k, r in enumerate(_as_list(raw.get("attacks")))) if a is not None]
            for a in attacks:
                if a.action == "replay":
                    ref = a.params.get("message")
                    if not isinstance(ref, int) or not 0 <= ref < len(out):
                        self.err.add(self.where(where), "replay needs an earlier message index")
            views = {}
            for ent, segs in (raw.get("expect_views") or {}).items():
                idx = self.entity(ent, f"{where} expect_views")
                if idx is not None:
                    views[idx] = [int(s) for s in _as_list(segs)]
            if "inject" in raw:
                spec = raw["inject"] or {}
                name = str(spec.get("template"))
                if name not in inj:
                    self.err.add(self.where(where), f"unknown injection template {name!r}")
                    continue
                t = inj[name]
                values = {}
                for k, v in (spec.get("values") or {}).items():
                    k = int(k)
                    if k not in t.placeholders:
                        self.err.add(self.where(where), f"segment {k} is not a placeholder")
                        continue
                    try:
                        values[k] = _bits_for(v, t.layout.segments[k].bit_length)
                    except ValueError as exc:
                        self.err.add(self.where(where), f"placeholder {k}: {exc}")
                item = TrafficItem(expect, inject=name, sequence=int(spec.get("sequence", 0)), values=values,
                                   attacks=attacks, expect_views=views)
                out += [item] * repeat
                continue
            tid = raw.get("template")
            layout = None
            if tid is not None:
                if tid not in templates:
                    self.err.add(self.where(where), f"unknown template {tid!r}")
                    continue
                layout = templates[tid]
                explicit = None
            else:
                explicit = layout = self.layout(raw.get("segments"), where)
                if layout is None:
                    continue
            try:
                payload = _bits_for(raw.get("payload", ""), layout.total_bits)
            except ValueError as exc:
                self.err.add(self.where(where), f"payload: {exc}")
                continue
            out += [TrafficItem(expect, payload, tid, explicit, bool(raw.get("self_verify", True)),
                                attacks=attacks, expect_views=views)] * repeat
        if not out:
            self.err.add(self.where("traffic"), "no messages")
        return out

    def parse(self) -> Scenario:
        if len(self.contexts) > MAX_CONTEXTS:
            self.err.add(self.where("contexts"), f"at most {MAX_CONTEXTS} contexts")
        if len(self.contexts) != len(set(self.contexts)):
            self.err.add(self.where("contexts"), "context names must be unique")
        entities = self.entities()
        templates = self.templates()
        inj = self.injection_templates(entities)
        traffic = self.traffic(templates, inj)
        transport = str(self.raw.get("transport", "memory"))
        if transport not in TRANSPORTS:
            self.err.add(self.where("transport"), f"must be one of {TRANSPORTS}")
        drop_rate = float(self.raw.get("drop_rate", 0.0))
        if not 0.0 <= drop_rate < 1.0:
            self.err.add(self.where("drop_rate"), "must be in [0, 1)")
        report = self.raw.get("report") or {}
        blinded = self.entity(report["blinded_for"], "report", middlebox=True) if "blinded_for" in report else None
        return Scenario(self.name, entities, self.contexts, templates, traffic, inj, transport, drop_rate,
                        int(self.raw.get("seed", 0)), str(self.raw.get("description", "")), blinded)


def parse_scenario(raw: Any) -> Scenario:
    errors = _Collector()
    if not isinstance(raw, dict):
        raise ScenarioError(["scenario must be a mapping"])
    try:
        scenario = _Parser(raw, errors).parse()
    except (TypeError, ValueError, AttributeError) as exc:
        errors.add(str(raw.get("name", "<unnamed>")), f"malformed: {exc}")
        scenario = None
    if not errors.violations:
        try:
            scenario.config()
        except ValueError as exc:
            errors.add(scenario.name, str(exc))
    if errors.violations:
        raise ScenarioError(errors.violations)
    return scenario


def load_scenarios(path: str | Path) -> list[Scenario]:
    """Parse a scenario file or pack; raises ``ScenarioError`` on any problem."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ScenarioError([f"{path}: {exc.strerror or exc}"]) from None
    except yaml.YAMLError as exc:
        raise ScenarioError([f"{path}: not valid YAML: {exc}"]) from None
    if isinstance(raw, dict) and "scenarios" in raw:
        items = _as_list(raw["scenarios"])
        out, violations = [], []
        for item in items:
            try:
                out.append(parse_scenario(item))
            except ScenarioError as exc:
                violations += exc.violations
        if violations:
            raise ScenarioError(violations)
        if not out:
            raise ScenarioError([f"{path}: pack has no scenarios"])
        return out
    return [parse_scenario(raw)]


def bundled_path(name: str) -> Path:
    """Location of a scenario shipped with the package."""
    here = Path(__file__).resolve().parent.parent / "scenarios"
    return here / (name if name.endswith(".yaml") else f"{name}.yaml")
