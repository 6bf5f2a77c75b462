"""Golden test vectors: a deterministic hex dump of primitives and one session.

The file format is one ``label = hex`` pair per line; ``#`` starts a comment.
Everything is derived from the seed, so checking a file means regenerating
it and additionally decoding and verifying the recorded wire bytes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from . import crypto
from .access import (Access, AccessRights, KeyKind, KeyMatrix, SegmentationInfo, SessionConfig, TemplateTable,
                     derive_key_matrix)
from .bits import Bits
from .crypto import Nonce
from .errors import ProtocolError
from .record import encode_record
from .session import Middlebox, Receiver, Sender

VECTOR_LAYOUT = SegmentationInfo.of((12, 0), (20, 1), (8, 0))
VECTOR_RIGHTS = AccessRights(4, 2, {(0, 1): Access.WRITE, (1, 1): Access.READ, (0, 2): Access.READ})


@dataclass(frozen=True)
class _Inputs:
    """Every random value a vector file depends on, drawn in one fixed order."""

    kdf_secret: bytes
    kdf_labels: tuple[bytes, ...]
    mac_key: bytes
    mac_domain: bytes
    mac_data: Bits
    enc_key: bytes
    nonce: Nonce
    stream_plain: Bits
    psk_sr: bytes
    psks: dict
    hs_nonce: bytes
    record_plain: Bits
    rewrites: tuple[Bits, Bits]


def _inputs(seed: int) -> _Inputs:
    rng = random.Random(f"madtls-vectors-{seed}")
    return _Inputs(
        kdf_secret=rng.randbytes(32),
        kdf_labels=(rng.randbytes(8), b"\x00\x01", b"read"),
        mac_key=rng.randbytes(32),
        mac_domain=rng.randbytes(11),
        mac_data=Bits.from_int(rng.getrandbits(13), 13),
        enc_key=rng.randbytes(32),
        nonce=Nonce(rng.randrange(1, 1 << 16), rng.randrange(1 << 48)),
        stream_plain=Bits.from_bytes(rng.randbytes(24)),
        psk_sr=rng.randbytes(32),
        psks={1: rng.randbytes(32), 2: rng.randbytes(32)},
        hs_nonce=rng.randbytes(64),
        record_plain=Bits.from_int(rng.getrandbits(VECTOR_LAYOUT.total_bits), VECTOR_LAYOUT.total_bits),
        rewrites=(Bits.from_int(rng.getrandbits(12), 12), Bits.from_int(rng.getrandbits(8), 8)),
    )


def _vector_config() -> SessionConfig:
    return SessionConfig(VECTOR_RIGHTS, TemplateTable({0: VECTOR_LAYOUT}), frozenset({2}))


def _vector_matrix(inp: _Inputs) -> KeyMatrix:
    return derive_key_matrix(inp.psk_sr, inp.psks, inp.hs_nonce, VECTOR_RIGHTS)


def generate_vectors(seed: int) -> list[tuple[str, str]]:
    inp = _inputs(seed)
    out: list[tuple[str, str]] = [("seed", seed.to_bytes(8, "big", signed=True).hex())]
    out += [("kdf.secret", inp.kdf_secret.hex()), ("kdf.info", crypto.encode_labels(inp.kdf_labels).hex()),
            ("kdf.output", crypto.kdf(inp.kdf_secret, inp.kdf_labels).hex())]
    out += [("mac.key", inp.mac_key.hex()), ("mac.domain", inp.mac_domain.hex()),
            ("mac.data13", inp.mac_data.data.hex()),
            ("mac.input", crypto.mac_input(inp.mac_domain, inp.mac_data).hex()),
            ("mac.output", crypto.mac(inp.mac_key, inp.mac_domain, inp.mac_data).hex())]
    cipher = crypto.keystream_xor(inp.enc_key, inp.nonce, 3, 5, inp.stream_plain)
    out += [("stream.key", inp.enc_key.hex()), ("stream.nonce", inp.nonce.to_bytes().hex()),
            ("stream.iv.ctx3", crypto.ctr_iv(inp.nonce, 3).hex()), ("stream.plain", inp.stream_plain.data.hex()),
            ("stream.cipher.ctx3.offset5", cipher.data.hex())]

    matrix = _vector_matrix(inp)
    out += [("session.psk_sr", inp.psk_sr.hex()), ("session.nonce", inp.hs_nonce.hex())]
    for ctx in VECTOR_RIGHTS.contexts:
        out.append((f"key.enc.ctx{ctx}", matrix.enc_keys[ctx].hex()))
        for ent in range(VECTOR_RIGHTS.entity_count - 1):
            for kind in KeyKind:
                if matrix.has(kind, ctx, ent):
                    out.append((f"key.{kind.value}.ctx{ctx}.ent{ent}", matrix.key(kind, ctx, ent).hex()))
    for ent, kd in sorted(matrix.kd_keys.items()):
        out.append((f"key.kd.ent{ent}", kd.hex()))
    out += [(name, wire.hex()) for name, wire in session_records(inp, matrix)]
    return out


def session_records(inp: _Inputs, matrix: KeyMatrix) -> list[tuple[str, bytes]]:
    """Wire bytes of one record leaving the sender and each middlebox."""
    config = _vector_config()
    wire = encode_record(Sender(config, matrix).protect(inp.record_plain, template_id=0))
    out = [("record.plain", inp.record_plain.data), ("record.hop0", wire)]
    behaviors = {1: lambda plain, layout: {0: inp.rewrites[0], 2: inp.rewrites[1]}, 2: None}
    for ent in VECTOR_RIGHTS.middleboxes:
        wire = Middlebox(ent, config, matrix.column(ent, VECTOR_RIGHTS), behaviors[ent]).process(wire).wire_out
        out.append((f"record.hop{ent}", wire))
    return out


def format_vectors(pairs: list[tuple[str, str]]) -> str:
    return "# madtls golden vectors\n" + "".join(f"{label} = {value}\n" for label, value in pairs)


def write_vectors(seed: int, path: str | Path) -> None:
    Path(path).write_text(format_vectors(generate_vectors(seed)))


def parse_vectors(text: str) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label, sep, value = line.partition("=")
        if not sep:
            raise ProtocolError(f"line {n}: expected 'label = hex'")
        out.append((label.strip(), value.strip()))
    return out


def check_vectors(text: str) -> list[str]:
    """Problems found in a vector file; empty means it verifies."""
    try:
        pairs = parse_vectors(text)
    except ProtocolError as exc:
        return [str(exc)]
    found = dict(pairs)
    if "seed" not in found:
        return ["missing seed"]
    try:
        seed = int.from_bytes(bytes.fromhex(found["seed"]), "big", signed=True)
    except ValueError:
        return ["seed is not hex"]
    expected = dict(generate_vectors(seed))
    problems = [f"{label}: differs from regenerated value" for label, value in found.items()
                if label in expected and expected[label] != value]
    problems += [f"{label}: missing" for label in expected if label not in found]
    problems += [f"{label}: unexpected label" for label in found if label not in expected]
    # verify the recorded final record independently of the regenerated one
    final = f"record.hop{VECTOR_RIGHTS.receiver - 1}"
    try:
        wire = bytes.fromhex(found.get(final, ""))
    except ValueError:
        return problems + [f"{final}: not hex"]
    result = Receiver(_vector_config(), _vector_matrix(_inputs(seed))).accept(wire)
    if not result.accepted:
        problems.append(f"{final}: receiver rejects ({result.reason})")
    return problems
