"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""

import json
import random
import time

import pytest

from madtls import crypto
from madtls.access import Access, AccessRights, SegmentationInfo
from madtls.bench import check_rows, run_bench
from madtls.bits import Bits
from madtls.cli import main as cli_main
from madtls.errors import ConfigurationError, HandshakeFailure, ReplayError
from madtls.handshake import BASELINE_DTLS12_PSK_FLIGHTS, Phase, run_handshake
from madtls.injection import EpochAllocator, Injector, TemplateIssuer
from madtls.pipeline import ACCEPT, SimSession, bundled_path, collude, load_scenarios, run_scenario
from madtls.pipeline.attacks import InsiderWriter, ciphertext_offset, flip_wire_bits
from madtls.pipeline.corpus import random_session, run_honest
from madtls.record import CT_INJECTED, CT_RECORD, decode_record, dtls12_record_size, encode_record
from madtls.session import Middlebox

from .conftest import ACCEPTANCE, build_session

CORPUS_SIZE = 10_000
CORPUS_SEED = 20240601


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def corpus(count: int, seed: int = CORPUS_SEED, **kwargs):
    rng = random.Random(seed)
    for _ in range(count):
        yield random_session(rng, **kwargs)


def deliver(session, wire: bytes, path) -> bool:
    """Push ``wire`` through ``path`` and return whether a fresh receiver accepts it."""
    for mb in path:
        wire = mb.process(wire).wire_out
        if wire is None:
            return False
    return session.receiver().accept(wire).accepted


def sent(session, self_verify: bool = True) -> bytes:
    return encode_record(session.sender().protect(session.plaintext, template_id=0, self_verify=self_verify))


def readable(session, entity: int) -> list[int]:
    rights = session.rights
    return [i for i, s in enumerate(session.layout) if rights.get(s.context, entity) is not Access.NONE]


# sweep sessions: 4-byte payload, 2 contexts, sender + one middlebox + receiver
SWEEP_LAYOUT = SegmentationInfo.of((16, 0), (16, 1))
SWEEP_RIGHTS = [
    {(0, 1): Access.READ},
    {(0, 1): Access.WRITE, (1, 1): Access.READ},
    {(0, 1): Access.WRITE, (1, 1): Access.WRITE},
    {(0, 1): Access.READ, (1, 1): Access.READ},
    {},
]


def sweep_sessions():
    for i, table in enumerate(SWEEP_RIGHTS):
        rights = AccessRights(3, 2, table)
        yield build_session(rights, SWEEP_LAYOUT, seed=100 + i)
        if table:
            yield build_session(rights, SWEEP_LAYOUT, self_verifying={1}, seed=200 + i)


def test_criterion_01_soundness():
    start = time.perf_counter()
    accepted = sum(run_honest(s).accepted for s in corpus(CORPUS_SIZE))
    elapsed = time.perf_counter() - start
    verdict(1, accepted == CORPUS_SIZE and elapsed < 60,
            f"honest sessions accepted {accepted}/{CORPUS_SIZE} in {elapsed:.1f}s (limit 60s)")


def test_criterion_02_oracle_equivalence():
    mismatches = checks = individual_failures = 0
    for s in corpus(CORPUS_SIZE):
        run = run_honest(s, with_oracle=True)
        mismatches += run.oracle_mismatches
        checks += run.oracle_checks
        individual_failures += run.oracle_individual is False
    verdict(2, mismatches == 0 and individual_failures == 0 and checks > CORPUS_SIZE,
            f"{mismatches} streaming/oracle mismatches over {checks} checkpoints, "
            f"{individual_failures} per-term verification failures")


def test_criterion_03_outsider_forgery():
    single = single_rejected = 0
    for s in sweep_sessions():
        mbs = s.middleboxes()
        wire = sent(s)
        assert deliver(s, wire, mbs)
        links = [wire, mbs[0].process(wire).wire_out]
        for link, at in enumerate(links):
            for bit in range(len(at) * 8):
                single += 1
                single_rejected += not deliver(s, flip_wire_bits(at, [bit]), mbs[link:])
    rng = random.Random(3)
    sessions = list(sweep_sessions())
    multi_rejected = 0
    for _ in range(1000):
        s = rng.choice(sessions)
        mbs = s.middleboxes()
        wire = sent(s)
        link = rng.randrange(2)
        at = wire if link == 0 else mbs[0].process(wire).wire_out
        bits = rng.sample(range(len(at) * 8), rng.randint(2, 24))
        multi_rejected += not deliver(s, flip_wire_bits(at, bits), mbs[link:])
    verdict(3, single_rejected == single and multi_rejected == 1000,
            f"single-bit flips rejected {single_rejected}/{single}, multi-bit flips rejected {multi_rejected}/1000")


def test_criterion_04_ephemeral_change():
    sessions = list(sweep_sessions())
    rights5 = AccessRights(5, 2, {(0, 1): Access.READ, (1, 1): Access.WRITE, (0, 2): Access.WRITE,
                                  (0, 3): Access.READ, (1, 3): Access.READ})
    layout5 = SegmentationInfo.of((8, 0), (12, 1), (12, 0))
    sessions += [build_session(rights5, layout5, seed=7), build_session(rights5, layout5, self_verifying={3}, seed=8)]
    trials = rejected = 0
    for s in sessions:
        mbs = s.middleboxes()
        for h, mb in enumerate(mbs):
            segs = readable(s, mb.entity)
            if not segs:
                continue
            wire = sent(s)
            for prior in mbs[:h]:
                wire = prior.process(wire).wire_out
            record, layout = decode_record(wire, s.config.templates)
            base = ciphertext_offset(record) * 8
            for i in segs:
                start = base + sum(layout.lengths[:i])
                for b in range(layout.lengths[i]):
                    trials += 1
                    out = mb.process(flip_wire_bits(wire, [start + b])).wire_out
                    if out is None:
                        rejected += 1
                        continue
                    rejected += not deliver(s, flip_wire_bits(out, [start + b]), mbs[h + 1:])
    verdict(4, trials > 0 and rejected == trials,
            f"flip-then-revert around entitled hops rejected {rejected}/{trials}")


def _shared_contexts(s, a: int, b: int) -> set[int]:
    rights = s.rights
    return {c for c in s.layout.contexts
            if rights.get(c, a) is not Access.NONE and rights.get(c, b) is not Access.NONE}


def test_criterion_05_path_integrity():
    skip = skip_rejected = 0
    reorder = {"writer": [0, 0], "reader-only": [0, 0]}
    disjoint = disjoint_accepted = 0
    for s in corpus(3000, seed=CORPUS_SEED + 5, self_verify_rate=0.0):
        mbs = s.middleboxes()
        if not mbs:
            continue
        wire = sent(s)
        for k, mb in enumerate(mbs):
            if readable(s, mb.entity):
                skip += 1
                skip_rejected += not deliver(s, wire, mbs[:k] + mbs[k + 1:])
        for k in range(len(mbs) - 1):
            a, b = mbs[k], mbs[k + 1]
            swapped = mbs[:k] + [b, a] + mbs[k + 2:]
            shared = _shared_contexts(s, a.entity, b.entity)
            if shared:
                kind = "writer" if any(Access.WRITE in (s.rights.get(c, a.entity), s.rights.get(c, b.entity))
                                       for c in shared) else "reader-only"
                reorder[kind][0] += 1
                reorder[kind][1] += not deliver(s, wire, swapped)
            elif readable(s, a.entity) and readable(s, b.entity):
                disjoint += 1
                disjoint_accepted += deliver(s, wire, swapped)
    (w_total, w_rej), (r_total, r_rej) = reorder["writer"], reorder["reader-only"]
    ok = skip_rejected == skip and w_rej == w_total and r_rej == r_total and disjoint_accepted == disjoint
    verdict(5, ok,
            f"skip rejected {skip_rejected}/{skip}; shared-context reorder rejected {w_rej}/{w_total} with a writer, "
            f"{r_rej}/{r_total} reader-only; disjoint reorder accepted {disjoint_accepted}/{disjoint} (property)")


def test_criterion_06_insider_confinement():
    trials = rejected = 0
    for s in corpus(2000, seed=CORPUS_SEED + 6):
        mbs = s.middleboxes()
        for k, mb in enumerate(mbs):
            rights = s.rights
            outside = [i for i, seg in enumerate(s.layout) if rights.get(seg.context, mb.entity) is not Access.WRITE]
            for target in outside[:2]:
                trials += 1
                path = mbs[:k] + [InsiderWriter(mb, {"segment": target, "bits": [0]})] + mbs[k + 1:]
                rejected += not deliver(s, sent(s), path)
    (scenario,) = [sc for sc in load_scenarios(bundled_path("attack_suite")) if sc.name == "insiders"]
    with SimSession(scenario) as session:
        colluders = collude(session, 1, 3, 0, bits=[4])
    verdict(6, trials > 0 and rejected == trials and colluders == ACCEPT,
            f"out-of-write-set insider writes rejected {rejected}/{trials}; "
            f"two readers colluding around a victim: {colluders} (boundary)")


def test_criterion_07_bandwidth():
    records = exact = 0
    for s in corpus(3000, seed=CORPUS_SEED + 7, self_verify_rate=0.5):
        payload = (s.layout.total_bits + 7) // 8
        mbs = s.middleboxes()
        for self_verify in (False, True):
            wire = sent(s, self_verify)
            for mb in [None, *mbs]:
                if mb is not None:
                    wire = mb.process(wire).wire_out
                record, _ = decode_record(wire, s.config.templates)
                tags = len(record.self_verify_tags)
                records += 1
                exact += (record.m_flag == bool(tags)
                          and len(wire) - dtls12_record_size(payload) == 1 + 17 * tags)
    verdict(7, exact == records, f"records with overhead exactly 1 + 17 per self-verify tag: {exact}/{records}")


def test_criterion_08_cost_model():
    hops = matched = 0
    for s in corpus(2000, seed=CORPUS_SEED + 8):
        wire = sent(s)
        for mb in s.middleboxes():
            rights = s.rights
            reads = writes = 0
            for seg in s.layout:
                right = rights.get(seg.context, mb.entity)
                reads += right is Access.READ
                writes += right is Access.WRITE
            with crypto.count_primitives() as count:
                wire = mb.process(wire).wire_out
            hops += 1
            matched += count.mac == 2 * reads + 4 * writes
    problems = check_rows(run_bench(contexts=[1, 2, 3, 4, 5], sizes=[1, 8, 20], reps=1))
    verdict(8, matched == hops and not problems,
            f"hop MAC counts match 2/read + 4/write segment on {matched}/{hops} hops; "
            f"bench linearity and 2x ratio problems: {len(problems)}")


COMMAND, VALUE = 0, 1
ESTOP_RIGHTS = AccessRights(4, 2, {(VALUE, 1): Access.WRITE, (COMMAND, 2): Access.READ, (VALUE, 2): Access.READ})
ESTOP = SegmentationInfo.of((24, COMMAND), (16, VALUE))
ESTOP_FIXED = Bits.from_bytes(bytes.fromhex("0500000000"))


def estop(seed: int, sequences=range(64), allocator: EpochAllocator | None = None):
    s = build_session(ESTOP_RIGHTS, ESTOP, seed=seed)
    issuer = TemplateIssuer(s.config, s.matrix, allocator)
    template = issuer.issue_template(1, ESTOP, [1], 1, sequences, ESTOP_FIXED)
    injector = Injector(Middlebox(1, s.config, s.matrix.column(1, ESTOP_RIGHTS)), s.matrix.kd_keys[1])
    injector.receive_stream(issuer.stream_record(template))
    receiver = s.receiver()
    receiver.register_injection_epoch(template.epoch)
    return s, template, injector, s.middleboxes()[1], receiver


def test_criterion_09_injection():
    problems = []
    s, template, injector, monitor, receiver = estop(1)
    wire = injector.inject(1, 0, {1: Bits.from_bytes(b"\xff\x00")})
    if not receiver.accept(monitor.process(wire).wire_out).accepted:
        problems.append("entitled placeholder write rejected")
    record, _ = decode_record(wire, s.config.templates)
    base = ciphertext_offset(record) * 8
    flips = flip_rejected = 0
    for seq, bit in enumerate(range(ESTOP.segments[0].bit_length), start=1):
        wire = injector.inject(1, seq, {1: Bits.from_bytes(b"\x00\x01")})
        fresh = s.receiver()
        fresh.register_injection_epoch(template.epoch)
        if not fresh.accept(monitor.process(wire).wire_out).accepted:
            problems.append(f"unmodified injected record {seq} rejected")
        fresh = s.receiver()
        fresh.register_injection_epoch(template.epoch)
        out = monitor.process(flip_wire_bits(wire, [base + bit])).wire_out
        flips += 1
        flip_rejected += out is None or not fresh.accept(out).accepted
    try:
        injector.inject(1, 0, {1: Bits.from_bytes(b"\xff\x00")})
        problems.append("sequence reuse accepted by the injector")
    except ReplayError:
        pass
    if receiver.accept(monitor.process(wire).wire_out).accepted and \
            receiver.accept(monitor.process(wire).wire_out).accepted:
        problems.append("replayed injected record accepted twice")

    rng = random.Random(9)
    trial_failures = 0
    for trial in range(1000):
        allocator = EpochAllocator(regular_epoch=1 + rng.randrange(8))
        s, template, injector, monitor, receiver = estop(1000 + trial, range(16), allocator)
        sender = s.sender()
        sender.epoch = allocator.regular_epoch
        plan = ["r"] * rng.randint(1, 8) + ["i"] * rng.randint(1, 8)
        rng.shuffle(plan)
        inject_seqs = iter(rng.sample(range(16), plan.count("i")))
        ok = template.epoch > allocator.regular_epoch and template.epoch != sender.epoch
        for kind in plan:
            if kind == "r":
                wire = sender.send(s.plaintext, template_id=0)
                path = s.middleboxes()
            else:
                wire = injector.inject(1, next(inject_seqs), {1: Bits.from_bytes(rng.randbytes(2))})
                path = [monitor]
            for mb in path:
                wire = mb.process(wire).wire_out
            result = receiver.accept(wire)
            expected = (CT_RECORD, sender.epoch) if kind == "r" else (CT_INJECTED, template.epoch)
            ok &= result.accepted and (result.content_type, result.nonce.epoch) == expected
        windows = {key for key in receiver.windows}
        ok &= not any(ct == CT_RECORD and epoch == template.epoch for ct, epoch in windows)
        try:
            allocator.advance_regular(template.epoch)
            ok = False
        except ConfigurationError:
            pass
        trial_failures += not ok
    ok = not problems and flip_rejected == flips and trial_failures == 0
    verdict(9, ok, f"fixed-segment flips rejected {flip_rejected}/{flips}; mixed-traffic epoch trials failed "
                   f"{trial_failures}/1000; other problems: {problems or 'none'}")


def test_criterion_10_case_studies(tmp_path):
    results = {}
    for name in ("coordinate_translation", "modbus_ids"):
        out = tmp_path / f"{name}.json"
        code = cli_main(["run", "--scenario", name, "--out", str(out)])
        results[name] = (code, json.loads(out.read_text()))
    (modbus,) = load_scenarios(bundled_path("modbus_ids"))
    fraction = run_scenario(modbus).blinded_fraction
    ok = all(code == 0 and data["ok"] for code, data in results.values()) and fraction >= 0.60
    verdict(10, ok, f"coordinate_translation ok={results['coordinate_translation'][1]['ok']}, "
                    f"modbus_ids ok={results['modbus_ids'][1]['ok']}, blinded fraction {fraction:.3f} (>= 0.60)")


HS_RIGHTS = AccessRights(5, 3, {(0, 1): Access.WRITE, (0, 2): Access.READ, (1, 3): Access.READ,
                                (2, 2): Access.WRITE, (1, 1): Access.READ})
HS_PSKS = {m: bytes([m]) * 32 for m in HS_RIGHTS.middleboxes}


def _hs_config():
    from madtls.access import SessionConfig, TemplateTable
    return SessionConfig(HS_RIGHTS, TemplateTable({0: SegmentationInfo.of((8, 0), (8, 1), (8, 2))}),
                         frozenset({2}))


def test_criterion_11_handshake():
    config = _hs_config()
    hs = run_handshake(config, b"p" * 32, HS_PSKS, seed=b"acceptance")
    honest = (hs.client.matrix == hs.server.matrix
              and hs.client.phase is hs.server.phase is Phase.ESTABLISHED
              and all(hs.middlebox_keys[m] == hs.client.matrix.column(m, HS_RIGHTS) for m in HS_RIGHTS.middleboxes)
              and all(hs.middlebox_phases[m] is Phase.ESTABLISHED for m in HS_RIGHTS.middleboxes))
    round_trips = hs.round_trips_added
    same_flights = hs.flights == list(BASELINE_DTLS12_PSK_FLIGHTS)

    sizes: dict[tuple[int, int], list[int]] = {}

    def spy(flight, link, messages):
        sizes[(flight, link)] = [len(m) for m in messages]
        return messages
    run_handshake(config, b"p" * 32, HS_PSKS, seed=b"acceptance", tamper=spy)

    tampers = aborted = 0
    for (flight, link), lengths in sorted(sizes.items()):
        for message, length in enumerate(lengths):
            for byte in range(length):
                bit = (byte + link + flight) % 8

                def tamper(i, l, messages, target=(flight, link, message, byte, bit)):
                    if (i, l) == target[:2]:
                        w = bytearray(messages[target[2]])
                        w[target[3]] ^= 1 << target[4]
                        messages[target[2]] = bytes(w)
                    return messages
                tampers += 1
                try:
                    run_handshake(config, b"p" * 32, HS_PSKS, seed=b"acceptance", tamper=tamper)
                except HandshakeFailure:
                    aborted += 1
    ok = honest and round_trips == 0 and same_flights and aborted == tampers
    verdict(11, ok, f"honest 3-middlebox handshake agrees={honest}, added round trips {round_trips}; "
                    f"tampered flights aborted {aborted}/{tampers}")


@pytest.fixture(scope="module", autouse=True)
def _report_lines():
    yield
    for n in range(1, 12):
        ACCEPTANCE.setdefault(n, f"criterion {n:2d} FAIL  did not complete")
