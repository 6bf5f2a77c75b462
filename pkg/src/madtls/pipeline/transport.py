"""Datagram transports between pipeline entities.

Both transports lose datagrams with the same seeded probability, so the
in-memory and UDP variants make identical delivery decisions for a seed.
"""

from __future__ import annotations

import random
import socket
from collections import deque
from typing import Protocol

MAX_DATAGRAM = 65535


class Transport(Protocol):
    def deliver(self, src: int, dst: int, wire: bytes) -> bytes | None: ...

    def close(self) -> None: ...


class InMemoryTransport:
    """One FIFO queue per destination; a seeded RNG decides losses."""

    def __init__(self, entities: int, drop_rate: float = 0.0, seed: int = 0):
        self.queues = [deque() for _ in range(entities)]
        self.drop_rate = drop_rate
        self.rng = random.Random(seed)
        self.sent = 0
        self.lost = 0

    def _lose(self) -> bool:
        self.sent += 1
        if self.drop_rate and self.rng.random() < self.drop_rate:
            self.lost += 1
            return True
        return False

    def deliver(self, src: int, dst: int, wire: bytes) -> bytes | None:
        if self._lose():
            return None
        self.queues[dst].append((src, wire))
        _, out = self.queues[dst].popleft()
        return out

    def close(self) -> None:
        for q in self.queues:
            q.clear()


class UdpLoopbackTransport(InMemoryTransport):
    """One UDP socket per entity on 127.0.0.1; datagrams really cross the loopback."""

    def __init__(self, entities: int, drop_rate: float = 0.0, seed: int = 0, timeout: float = 2.0):
        super().__init__(entities, drop_rate, seed)
        self.sockets = []
        for _ in range(entities):
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind(("127.0.0.1", 0))
            sock.settimeout(timeout)
            self.sockets.append(sock)
        self.addresses = [s.getsockname() for s in self.sockets]

    def deliver(self, src: int, dst: int, wire: bytes) -> bytes | None:
        if self._lose():
            return None
        self.sockets[src].sendto(wire, self.addresses[dst])
        while True:
            data, peer = self.sockets[dst].recvfrom(MAX_DATAGRAM)
            if peer == self.addresses[src]:
                return data

    def close(self) -> None:
        for sock in self.sockets:
            sock.close()
        self.sockets = []


def make_transport(kind: str, entities: int, drop_rate: float = 0.0, seed: int = 0) -> InMemoryTransport:
    if kind == "datagram":
        return UdpLoopbackTransport(entities, drop_rate, seed)
    if kind == "memory":
        return InMemoryTransport(entities, drop_rate, seed)
    raise ValueError(f"unknown transport {kind!r}")
