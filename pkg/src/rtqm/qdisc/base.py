"""Scheduler interface shared by every queueing discipline."""
from __future__ import annotations

from collections import deque
from typing import Optional

from ..engine import Packet


class Scheduler:
    """Base class for packet schedulers.

    ``enqueue`` returns the list of packets dropped as a consequence of the
    admission (possibly the arriving packet itself); an empty list means the
    packet was accepted with no loss.  ``dequeue`` returns the next packet to
    serialize or ``None`` when nothing is queued.
    """

    name = "base"
    uses_labels = False
    drop_hook = None

    def __init__(self, buffer_limit: Optional[int] = None):
        self.buffer_limit = buffer_limit
        self.backlog_bytes = 0
        self.backlog_packets = 0

    def enqueue(self, pkt: Packet, now: int) -> list:
        raise NotImplementedError

    def dequeue(self, now: int) -> Optional[Packet]:
        raise NotImplementedError

    def __len__(self) -> int:
        return self.backlog_packets

    def _dequeue_drop(self, pkt: Packet, now: int) -> None:
        if self.drop_hook is not None:
            self.drop_hook(pkt, now)

    def advance(self, now: int) -> None:
        pass

    def over_limit(self) -> bool:
        return self.buffer_limit is not None and self.backlog_bytes > self.buffer_limit

    def diagnostics(self) -> dict:
        return {}


class PacketFifo:
    """Byte-counted FIFO of packets."""

    __slots__ = ("packets", "bytes")

    def __init__(self):
        self.packets: deque = deque()
        self.bytes = 0

    def push(self, pkt: Packet) -> None:
        self.packets.append(pkt)
        self.bytes += pkt.size

    def pop(self) -> Packet:
        pkt = self.packets.popleft()
        self.bytes -= pkt.size
        return pkt

    def pop_tail(self) -> Packet:
        pkt = self.packets.pop()
        self.bytes -= pkt.size
        return pkt

    def head(self) -> Packet:
        return self.packets[0]

    def __len__(self) -> int:
        return len(self.packets)

    def __bool__(self) -> bool:
        return bool(self.packets)


class DrrRing:
    """Deficit round robin over a set of keyed FIFOs.

    Each key holds a :class:`PacketFifo`.  A key is replenished by its quantum
    when the pointer first reaches it in a round; it keeps sending while its
    deficit covers the head packet.
    """

    def __init__(self, quantum: int = 1500):
        self.quantum = quantum
        self.queues: dict = {}
        self.deficit: dict = {}
        self.active: deque = deque()
        self._fresh: set = set()

    def push(self, key, pkt: Packet) -> None:
        q = self.queues.get(key)
        if q is None:
            q = self.queues[key] = PacketFifo()
        if not q:
            self.active.append(key)
            self.deficit[key] = 0
            self._fresh.discard(key)
        q.push(pkt)

    def quantum_for(self, key) -> float:
        return self.quantum

    def pop(self) -> Optional[Packet]:
        active = self.active
        while active:
            key = active[0]
            q = self.queues[key]
            if key not in self._fresh:
                self.deficit[key] += self.quantum_for(key)
                self._fresh.add(key)
            size = q.head().size
            if size <= self.deficit[key]:
                pkt = q.pop()
                self.deficit[key] -= size
                if not q:
                    active.popleft()
                    self.deficit[key] = 0
                    self._fresh.discard(key)
                return pkt
            self._fresh.discard(key)
            active.rotate(-1)
        return None

    def drop_tail(self, key) -> Optional[Packet]:
        q = self.queues.get(key)
        if not q:
            return None
        pkt = q.pop_tail()
        if not q:
            self.active.remove(key)
            self.deficit[key] = 0
            self._fresh.discard(key)
        return pkt

    def longest(self):
        best, best_bytes = None, -1
        for key in self.active:
            b = self.queues[key].bytes
            if b > best_bytes:
                best, best_bytes = key, b
        return best

    def bytes_of(self, key) -> int:
        q = self.queues.get(key)
        return q.bytes if q is not None else 0
