import hashlib
import hmac

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from hypothesis import given, settings, strategies as st

from madtls import crypto
from madtls.bits import Bits
from madtls.crypto import Nonce


def hkdf_reference(ikm: bytes, info: bytes, length: int, salt: bytes = b"") -> bytes:
    """Extract-then-expand written out from the HMAC definition."""
    prk = hmac.new(salt or bytes(32), ikm, hashlib.sha256).digest()
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def keystream_reference(key: bytes, nonce: Nonce, ctx: int, start_bit: int, nbits: int) -> int:
    """Keystream bits via AES-ECB on explicit counter blocks."""
    first, last = start_bit // 128, (start_bit + nbits - 1) // 128
    ecb = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    stream = b"".join(ecb.update(crypto.ctr_iv(nonce, ctx, blk)) for blk in range(first, last + 1))
    total = len(stream) * 8
    skip = start_bit - first * 128
    return (int.from_bytes(stream, "big") >> (total - skip - nbits)) & ((1 << nbits) - 1)


def test_kdf_matches_published_hkdf_vector():
    # RFC 5869 test case 3 (no salt, empty info), first 32 bytes of OKM
    okm = bytes.fromhex("8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d"
                        "9d201395faa4b61a96c8")
    assert crypto.kdf(b"\x0b" * 22, []) == okm[:32]


@given(st.binary(min_size=1, max_size=64), st.lists(st.binary(max_size=20), max_size=4))
def test_kdf_matches_reference(secret, labels):
    info = b"".join(len(l).to_bytes(2, "big") + l for l in labels)
    assert crypto.kdf(secret, labels) == hkdf_reference(secret, info, 32)


def test_label_encoding_is_injective():
    assert crypto.encode_labels([b"ab", b"c"]) != crypto.encode_labels([b"a", b"bc"])
    assert crypto.kdf(b"s", [b"ab", b"c"]) != crypto.kdf(b"s", [b"a", b"bc"])


@given(st.binary(min_size=32, max_size=32), st.binary(max_size=12), st.integers(0, 300), st.data())
def test_mac_matches_reference(key, domain, nbits, data):
    value = data.draw(st.integers(0, (1 << nbits) - 1)) if nbits else 0
    bits = Bits.from_int(value, nbits)
    # LEB128 of the bit length, written out by hand for the sizes drawn here
    length = bytes([nbits]) if nbits < 128 else bytes([(nbits & 0x7F) | 0x80, nbits >> 7])
    expected = hmac.new(key, domain + length + bits.data, hashlib.sha256).digest()[:16]
    assert crypto.mac(key, domain, bits) == expected


def test_mac_distinguishes_bit_length():
    key = bytes(32)
    assert crypto.mac(key, b"d", Bits.from_str("1")) != crypto.mac(key, b"d", Bits.from_str("10"))


@given(st.integers(0, 2 ** 40))
def test_varint_round_trip(value):
    enc = crypto.encode_varint(value)
    assert crypto.decode_varint(enc) == (value, len(enc))


@settings(max_examples=60)
@given(st.binary(min_size=32, max_size=32), st.integers(0, 3), st.integers(0, 600), st.integers(1, 400),
       st.data())
def test_keystream_matches_reference(key, ctx, offset, nbits, data):
    nonce = Nonce(data.draw(st.integers(0, 0xFFFF)), data.draw(st.integers(0, 2 ** 48 - 1)))
    plain = Bits.from_int(data.draw(st.integers(0, (1 << nbits) - 1)), nbits)
    out = crypto.keystream_xor(key, nonce, ctx, offset, plain)
    assert out.to_int() == plain.to_int() ^ keystream_reference(key, nonce, ctx, offset, nbits)
    assert crypto.keystream_xor(key, nonce, ctx, offset, out) == plain


@given(st.integers(1, 100), st.integers(1, 100), st.integers(0, 300))
def test_keystream_is_offset_consistent(a, b, start):
    key, nonce = bytes(range(32)), Nonce(1, 7)
    whole = crypto.keystream_xor(key, nonce, 0, start, Bits.zeros(a + b))
    left = crypto.keystream_xor(key, nonce, 0, start, Bits.zeros(a))
    right = crypto.keystream_xor(key, nonce, 0, start + a, Bits.zeros(b))
    assert Bits.concat([left, right]) == whole


def test_keystream_separates_contexts_and_nonces():
    key, zero = bytes(32), Bits.zeros(128)
    base = crypto.keystream_xor(key, Nonce(1, 1), 0, 0, zero)
    assert crypto.keystream_xor(key, Nonce(1, 1), 1, 0, zero) != base
    assert crypto.keystream_xor(key, Nonce(1, 2), 0, 0, zero) != base
    assert crypto.keystream_xor(key, Nonce(2, 1), 0, 0, zero) != base


def test_keystream_span_limit():
    with pytest.raises(ValueError):
        crypto.keystream_xor(bytes(32), Nonce(1, 0), 0, crypto.KEYSTREAM_SPAN_BITS - 4, Bits.zeros(8))


def test_nonce_bounds():
    with pytest.raises(ValueError):
        Nonce(1 << 16, 0)
    with pytest.raises(ValueError):
        Nonce(0, 1 << 48)
    assert Nonce(0x0102, 3).to_bytes() == bytes.fromhex("0102000000000003")


def test_aead_round_trip_and_tamper():
    from cryptography.exceptions import InvalidTag
    key, nonce = bytes(32), bytes(12)
    sealed = crypto.aead_seal(key, nonce, b"keys", b"aad")
    assert crypto.aead_open(key, nonce, sealed, b"aad") == b"keys"
    with pytest.raises(InvalidTag):
        crypto.aead_open(key, nonce, sealed, b"other")


def test_counter_counts_only_inside_block():
    with crypto.count_primitives() as c:
        crypto.mac(bytes(32), b"", Bits.zeros(1))
        crypto.kdf(b"x", [])
    crypto.mac(bytes(32), b"", Bits.zeros(1))
    assert c.snapshot() == {"mac": 1, "cipher": 0, "kdf": 1, "aead": 0}
