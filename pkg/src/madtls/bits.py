"""Immutable bit-strings.

Segments may end anywhere inside a byte, so payloads are carried as
``Bits``: MSB-first bytes plus an explicit bit length. Bits past the end
are always zero, which keeps equality and hashing well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class Bits:
    data: bytes
    nbits: int

    def __post_init__(self) -> None:
        if self.nbits < 0:
            raise ValueError("negative bit length")
        if len(self.data) != (self.nbits + 7) // 8:
            raise ValueError(f"{len(self.data)} bytes cannot hold exactly {self.nbits} bits")
        spare = -self.nbits % 8
        if spare and self.data[-1] & ((1 << spare) - 1):
            raise ValueError("padding bits must be zero")

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int | None = None) -> Bits:
        """Take the first ``nbits`` bits of ``data`` (all of it by default)."""
        if nbits is None:
            return cls(bytes(data), len(data) * 8)
        if nbits > len(data) * 8:
            raise ValueError("not enough data")
        return cls(_mask(bytes(data[: (nbits + 7) // 8]), nbits), nbits)

    @classmethod
    def from_int(cls, value: int, nbits: int) -> Bits:
        if value < 0 or value >> nbits:
            raise ValueError(f"{value} does not fit in {nbits} bits")
        nbytes = (nbits + 7) // 8
        return cls((value << (-nbits % 8)).to_bytes(nbytes, "big"), nbits)

    @classmethod
    def from_str(cls, text: str) -> Bits:
        """Parse a string of '0'/'1' characters."""
        if not text:
            return cls(b"", 0)
        return cls.from_int(int(text, 2), len(text))

    @classmethod
    def zeros(cls, nbits: int) -> Bits:
        return cls(bytes((nbits + 7) // 8), nbits)

    @classmethod
    def concat(cls, parts: Iterable[Bits]) -> Bits:
        value, total = 0, 0
        for part in parts:
            value = (value << part.nbits) | part.to_int()
            total += part.nbits
        return cls.from_int(value, total)

    def to_int(self) -> int:
        if not self.nbits:
            return 0
        return int.from_bytes(self.data, "big") >> (-self.nbits % 8)

    def __len__(self) -> int:
        return self.nbits

    def __str__(self) -> str:
        return format(self.to_int(), f"0{self.nbits}b") if self.nbits else ""

    def slice(self, start: int, length: int) -> Bits:
        if start < 0 or length < 0 or start + length > self.nbits:
            raise ValueError("slice out of range")
        return Bits.from_int((self.to_int() >> (self.nbits - start - length)) & ((1 << length) - 1), length)

    def split(self, lengths: Iterable[int]) -> list[Bits]:
        out, pos = [], 0
        for n in lengths:
            out.append(self.slice(pos, n))
            pos += n
        if pos != self.nbits:
            raise ValueError(f"lengths cover {pos} of {self.nbits} bits")
        return out

    def xor(self, other: Bits) -> Bits:
        if other.nbits != self.nbits:
            raise ValueError("length mismatch")
        return Bits(bytes(a ^ b for a, b in zip(self.data, other.data)), self.nbits)

    def flip(self, *positions: int) -> Bits:
        """Invert the bits at the given MSB-first positions."""
        buf = bytearray(self.data)
        for pos in positions:
            if not 0 <= pos < self.nbits:
                raise ValueError(f"bit {pos} out of range")
            buf[pos // 8] ^= 0x80 >> (pos % 8)
        return Bits(bytes(buf), self.nbits)

    def bit(self, pos: int) -> int:
        return (self.data[pos // 8] >> (7 - pos % 8)) & 1


def _mask(data: bytes, nbits: int) -> bytes:
    spare = -nbits % 8
    if not spare or not data:
        return data
    return data[:-1] + bytes([data[-1] & (0xFF << spare) & 0xFF])
