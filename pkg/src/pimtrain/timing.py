"""Tile-level timing of one step over vault channels, the shared bus and the PE datapaths.

Every PE works through its tiles in order. A tile fills an input-buffer
half (local vault reads plus broadcast chunks from the common vault),
computes, then drains its output-buffer half (local writes and/or merges
over the bus). Halves alternate, so

* fill j waits for compute j-2 (the half it overwrites is consumed),
* compute j waits for fill j, compute j-1 and the drain of tile j-2.

Each vault channel moves ``bytes_per_cycle`` per cycle with a fixed access
latency. The bus and the common vault form one resource of the same
bandwidth: a broadcast chunk goes out once, when every PE that needs it
has a free half, and always before pending merges; merges are served in
ascending PE order and each pays the REQ-ACK-SEND handshake plus the bus
pipeline depth.

The engine advances from event to event instead of cycle by cycle. Nothing
changes state between events, so the result is the same as a cycle loop.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .config import MachineConfig

STALL_CAUSES = ("buffer_empty", "bus_contention", "writeback", "idle")


class DeadlockError(RuntimeError):
    pass


@dataclass
class Tile:
    compute: int  # PE busy cycles
    fill: int = 0  # bytes read from the PE's own vault
    chunks: tuple = ()  # broadcast chunk ids this tile receives
    wb: int = 0  # bytes written to the PE's own vault
    merge: int = 0  # bytes sent over the bus to the common vault
    macs: int = 0


@dataclass
class Schedule:
    tiles: list  # per PE: list of Tile
    chunks: dict = field(default_factory=dict)  # chunk id -> bytes
    tail_bus: int = 0  # common-vault bytes moved after all tiles (read-modify-write passes)
    bits: int = 32
    merge_to_common: bool = True


@dataclass
class StepTiming:
    cycles: int
    busy: int
    stalls: dict
    reads: list  # per vault
    writes: list
    bcast: int
    merged: int
    macs: int
    lane_cycles: int


class _Sim:
    def __init__(self, sched: Schedule, cfg: MachineConfig):
        self.s, self.cfg = sched, cfg
        self.P = len(sched.tiles)
        self.bpc = cfg.bytes_per_cycle
        n = [len(t) for t in sched.tiles]
        self.n = n
        mk = lambda: [[None] * k for k in n]
        self.local_done, self.comp_start, self.comp_done = mk(), mk(), mk()
        self.wb_done, self.merge_done = mk(), mk()
        self.nf = [0] * self.P  # next local fill
        self.nc = [0] * self.P
        self.nw = [0] * self.P  # next local writeback
        self.nm = [0] * self.P  # next merge
        self.chan_free = [0] * self.P
        self.bus_free = 0
        self.chunk_done: dict = {}
        self.chunk_users: dict = {}
        for p, ts in enumerate(sched.tiles):
            for j, t in enumerate(ts):
                for c in t.chunks:
                    self.chunk_users.setdefault(c, []).append((p, j))
        self.pending_chunks = [c for c in sched.chunks if c in self.chunk_users]
        self.events: list = []
        self.t = 0
        self.fill_start = mk()
        self.bus_log: list = []  # (start, end, "bcast" | "merge", chunk id or PE)

    def _cyc(self, b: int) -> int:
        return -(-b // self.bpc)

    def _at(self, when: int) -> int:
        heapq.heappush(self.events, when)
        return when

    def _done(self, v, t: int) -> bool:
        return v is not None and v <= t

    def _half_free(self, p: int, j: int, t: int) -> bool:
        return j < 2 or self._done(self.comp_done[p][j - 2], t)

    def _fill_done(self, p: int, j: int):
        ld = self.local_done[p][j]
        if ld is None:
            return None
        out = ld
        for c in self.s.tiles[p][j].chunks:
            cd = self.chunk_done.get(c)
            if cd is None:
                return None
            out = max(out, cd)
        return out

    def _drained(self, p: int, j: int):
        a, b = self.wb_done[p][j], self.merge_done[p][j]
        if a is None or b is None:
            return None
        return max(a, b)

    def step(self, t: int) -> bool:
        """Start everything that can start at time t; True if anything did."""
        lat = self.cfg.vault_latency
        moved = False
        tiles = self.s.tiles
        for p in range(self.P):
            # local vault channel: drain before fill
            while True:
                j = self.nw[p]
                if j < self.n[p] and self._done(self.comp_done[p][j], t) and self.chan_free[p] <= t:
                    b = tiles[p][j].wb
                    if b:
                        self.chan_free[p] = t + self._cyc(b)
                        self.wb_done[p][j] = self._at(t + self._cyc(b))
                    else:
                        self.wb_done[p][j] = t
                    self.nw[p] += 1
                    moved = True
                    continue
                j = self.nf[p]
                if j < self.n[p] and self._half_free(p, j, t) and (self.chan_free[p] <= t or not tiles[p][j].fill):
                    b = tiles[p][j].fill
                    self.fill_start[p][j] = t
                    if b:
                        self.chan_free[p] = t + self._cyc(b)
                        self.local_done[p][j] = self._at(t + lat + self._cyc(b))
                    else:
                        self.local_done[p][j] = t
                    self.nf[p] += 1
                    moved = True
                    continue
                break
        # bus: a broadcast pre-empts merges
        while self.bus_free <= t:
            started = False
            for c in self.pending_chunks:
                if all(self._half_free(p, j, t) for p, j in self.chunk_users[c]):
                    b = self.s.chunks[c]
                    self.bus_free = t + self._cyc(b)
                    self.chunk_done[c] = self._at(t + lat + self.cfg.bus_stages + self._cyc(b))
                    self.bus_log.append((t, self.bus_free, "bcast", c))
                    self.pending_chunks.remove(c)
                    started = True
                    break
            if not started:
                for p in range(self.P):
                    j = self.nm[p]
                    if j < self.n[p] and self._done(self.comp_done[p][j], t):
                        b = tiles[p][j].merge
                        if b:
                            occ = self.cfg.handshake + self._cyc(b)
                            self.bus_free = t + occ
                            self.merge_done[p][j] = self._at(t + occ + self.cfg.bus_stages)
                            self.bus_log.append((t, self.bus_free, "merge", p))
                        else:
                            self.merge_done[p][j] = t
                        self.nm[p] += 1
                        started = True
                        if b:
                            break
            if not started:
                break
            moved = True
            self._at(self.bus_free)
        for p in range(self.P):
            j = self.nc[p]
            if j >= self.n[p]:
                continue
            fd = self._fill_done(p, j)
            if fd is None or fd > t:
                continue
            if j > 0 and not self._done(self.comp_done[p][j - 1], t):
                continue
            if j >= 2 and not self._done(self._drained(p, j - 2), t):
                continue
            self.comp_start[p][j] = t
            self.comp_done[p][j] = self._at(t + tiles[p][j].compute)
            self.nc[p] += 1
            moved = True
        return moved

    def finished(self) -> bool:
        return all(self.nw[p] == self.n[p] and self.nm[p] == self.n[p] for p in range(self.P)) and \
            all(self._drained(p, j) is not None for p in range(self.P) for j in range(self.n[p]))

    def waiting(self) -> str:
        out = []
        for p in range(self.P):
            j = self.nc[p]
            if j < self.n[p]:
                miss = [c for c in self.s.tiles[p][j].chunks if c not in self.chunk_done]
                what = f"broadcast chunks {miss}" if miss else "its input or output buffer half"
                out.append(f"PE {p} tile {j} waits for {what}")
        for c in self.pending_chunks:
            blk = [f"PE {p} tile {j}" for p, j in self.chunk_users[c] if not self._half_free(p, j, self.t)]
            if blk:
                out.append(f"chunk {c} waits for a free half on {', '.join(blk)}")
        return "; ".join(out) or "bus and channels idle"

    def run(self) -> int:
        budget = self.cfg.deadlock_budget
        last = 0
        while True:
            while self.step(self.t):
                last = self.t
            if self.finished():
                break
            nxt = None
            while self.events:
                e = heapq.heappop(self.events)
                if e > self.t:
                    nxt = e
                    break
            if nxt is None:
                raise DeadlockError(f"deadlock at cycle {self.t}: {self.waiting()}")
            if nxt - last > budget:
                raise DeadlockError(f"no progress for {nxt - last} cycles at cycle {self.t}: {self.waiting()}")
            self.t = nxt
        end = 0
        for p in range(self.P):
            for j in range(self.n[p]):
                end = max(end, self.comp_done[p][j], self._drained(p, j))
        return end


def simulate(sched: Schedule, cfg: MachineConfig, probe: list | None = None) -> StepTiming:
    """Time one step. ``probe``, if given, receives the internal event record for inspection."""
    sim = _Sim(sched, cfg)
    if probe is not None:
        probe.append(sim)
    end = sim.run() if any(sched.tiles) else 0
    tail = -(-sched.tail_bus // cfg.bytes_per_cycle) if sched.tail_bus else 0
    cycles = end + tail
    stalls = dict.fromkeys(STALL_CAUSES, 0)
    busy = 0
    for p, ts in enumerate(sched.tiles):
        prev = 0
        for j, t in enumerate(ts):
            s = sim.comp_start[p][j]
            busy += t.compute
            if s > prev:
                fill = sim._fill_done(p, j)
                drain = sim._drained(p, j - 2) if j >= 2 else 0
                if drain >= fill:
                    stalls["writeback"] += s - prev
                elif t.chunks and max(sim.chunk_done[c] for c in t.chunks) >= sim.local_done[p][j]:
                    stalls["bus_contention"] += s - prev
                else:
                    stalls["buffer_empty"] += s - prev
            prev = sim.comp_done[p][j]
        last = max([prev] + [sim._drained(p, j) for j in range(len(ts))])
        stalls["writeback"] += last - prev
        stalls["idle"] += cycles - last
    # stalls of PEs missing from the schedule count as idle
    stalls["idle"] += (cfg.pes - len(sched.tiles)) * cycles
    cv = cfg.common_vault
    reads, writes = [0] * cfg.vaults, [0] * cfg.vaults
    bcast = sum(sched.chunks.values())
    merged = 0
    for p, ts in enumerate(sched.tiles):
        for t in ts:
            reads[p] += t.fill
            writes[p] += t.wb
            merged += t.merge
            if sched.merge_to_common:
                writes[cv] += t.merge
            else:
                writes[p] += t.merge
    reads[cv] += bcast + sched.tail_bus // 2
    writes[cv] += sched.tail_bus - sched.tail_bus // 2
    macs = sum(t.macs for ts in sched.tiles for t in ts)
    return StepTiming(cycles, busy, stalls, reads, writes, bcast, merged, macs, busy)
