"""Execution of address-generator programs: streams, comparators, LUTs, data preparation."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .compiler import PMAGProgram
from .fxnum import Lut, Q16_16, FixedFormat, lut_eval

END_MARK = {16: 0xFFFF, 32: 0xFFFFFFFF}
PREP_KINDS = ("Merge", "Partition", "AddPad", "RemovePad")


class PMAGRangeError(RuntimeError):
    pass


class PrepError(RuntimeError):
    pass


@dataclass(frozen=True)
class AddressEvent:
    cycle: int  # counter step that produced the event
    vault: int
    addr: int
    direction: str  # read | write
    lane: int  # linear counter index, used to pair source and destination points
    end: bool = False
    data: bool = True  # False: a zero-mode comparator rejected the point and the constant 0 is written


def _signal(prog: PMAGProgram, name: str, rs: tuple, seq: int) -> int:
    if name[0] == "r" and len(name) == 2:
        return rs[int(name[1]) - 1]
    if name == "0":
        return 0
    if name == "1":
        return seq
    if name == "r":
        return prog.const_r
    if name == "p":
        return _signal(prog, prog.mux[0], rs, seq) + _signal(prog, prog.mux[1], rs, seq)
    if name == "q":
        return _signal(prog, prog.mux[2], rs, seq) + _signal(prog, prog.mux[3], rs, seq)
    raise PMAGRangeError(f"undefined signal {name}")


def _passes(prog: PMAGProgram, rs: tuple) -> bool:
    return all(c.lo <= rs[int(c.src[1]) - 1] < c.hi for c in prog.cmp)


def addr_stream(prog: PMAGProgram):
    """Lazily walk r1 (outermost) .. r7 (innermost) and yield AddressEvents, then one end-mark."""
    seq = 0
    for lane, rs in enumerate(itertools.product(*(range(r) for r in prog.R))):
        ok = _passes(prog, rs)
        if not ok and prog.cmp_mode == "gate":
            continue
        if prog.sequential:
            addr = prog.base + seq
        else:
            addr = prog.base + sum(s * _signal(prog, m, rs, seq) for s, m in zip(prog.strides, prog.mux[4:]))
        if addr < 0 or (prog.extent is not None and addr >= prog.extent):
            raise PMAGRangeError(f"{prog.tag}: address {addr} outside [0, {prog.extent}) at counters {rs}")
        seq += 1
        yield AddressEvent(lane, prog.vault, addr, prog.direction, lane, data=ok)
    yield AddressEvent(prog.points, prog.vault, END_MARK[16 if prog.bits == 16 else 32], prog.direction, -1, end=True)


def stream_arrays(prog: PMAGProgram) -> tuple:
    """Vectorised form of addr_stream without the end-mark: (lanes, addresses, data mask)."""
    grids = np.indices(prog.R).reshape(7, -1)
    ok = np.ones(grids.shape[1], dtype=bool)
    for c in prog.cmp:
        v = grids[int(c.src[1]) - 1]
        ok &= (v >= c.lo) & (v < c.hi)
    keep = ok if prog.cmp_mode == "gate" else np.ones_like(ok)
    lanes = np.flatnonzero(keep)
    if prog.sequential:
        addr = prog.base + np.arange(len(lanes), dtype=np.int64)
    else:
        sig = {f"r{j + 1}": grids[j] for j in range(7)}
        sig.update({"0": 0, "r": prog.const_r})
        sig["p"] = sig.get(prog.mux[0], 0) + sig.get(prog.mux[1], 0)
        sig["q"] = sig.get(prog.mux[2], 0) + sig.get(prog.mux[3], 0)
        full = prog.base + sum(s * np.asarray(sig[m], dtype=np.int64) for s, m in zip(prog.strides, prog.mux[4:]))
        addr = np.broadcast_to(full, keep.shape)[lanes].astype(np.int64)
    if len(addr) and (addr.min() < 0 or (prog.extent is not None and addr.max() >= prog.extent)):
        raise PMAGRangeError(f"{prog.tag}: address range [{addr.min()}, {addr.max()}] outside [0, {prog.extent})")
    return lanes, addr, ok[lanes]


def accepted_points(prog: PMAGProgram) -> tuple:
    """(events, data events) of a program, counted without walking it."""
    data = 1
    for j, r in enumerate(prog.R):
        span = r
        for c in prog.cmp:
            if int(c.src[1]) - 1 == j:
                span = min(span, c.hi) - max(0, c.lo)
        data *= max(span, 0)
    return (prog.points if prog.cmp_mode == "zero" else data), data


def prep_exec(kind: str, pairs: list, memory: dict, dst_memory: dict | None = None) -> dict:
    """Run data-preparation moves on a vault memory model (vault -> 1-D array of elements).

    Sources read ``memory``; destinations write a copy of ``dst_memory``
    (default ``memory``), which is returned. Addresses are tensor-relative,
    so distinct source and destination tensors use distinct memories.
    Destination data points take source values by counter index when source
    and destination share a counter shape, otherwise in stream order.
    Zero-mode rejected points write 0.
    """
    if kind not in PREP_KINDS:
        raise PrepError(f"unknown preparation kind {kind}")
    mem = {v: np.array(a, copy=True) for v, a in (memory if dst_memory is None else dst_memory).items()}
    written: dict = {}
    for srcs, dst in pairs:
        vals, lanes_all = [], []
        for s in srcs:
            lanes, addr, _ = stream_arrays(s)
            vals.append(memory[s.vault][addr])
            lanes_all.append(lanes)
        v = np.concatenate(vals) if vals else np.zeros(0)
        dl, da, dmask = stream_arrays(dst)
        out = np.zeros(len(da), dtype=mem[dst.vault].dtype)
        if len(srcs) == 1 and srcs[0].R == dst.R:
            lut = dict(zip(lanes_all[0].tolist(), range(len(v))))
            try:
                idx = [lut[x] for x in dl[dmask].tolist()]
            except KeyError as e:
                raise PrepError(f"{dst.tag}: destination point {e} has no source") from None
            out[dmask] = v[idx]
        else:
            if int(dmask.sum()) != len(v):
                raise PrepError(f"{dst.tag}: {int(dmask.sum())} data points but {len(v)} source values")
            out[dmask] = v
        for a, x in zip(da.tolist(), out.tolist()):
            key = (dst.vault, a)
            if key in written and written[key] != x:
                raise PrepError(f"{kind}: vault {dst.vault} address {a} written with {written[key]} and {x}")
            written[key] = x
        mem[dst.vault][da] = out
    return mem


def apply_lut(stream, lut: Lut, xfmt: FixedFormat = Q16_16):
    """Pass streamed data through a LUT; addresses (if given as (event, value) pairs) are untouched."""
    if isinstance(stream, np.ndarray) or (stream and not isinstance(stream[0], tuple)):
        return lut_eval(lut, np.asarray(stream), xfmt)
    events = [e for e, _ in stream]
    vals = lut_eval(lut, np.array([x for _, x in stream], dtype=np.int64), xfmt)
    return list(zip(events, vals.tolist()))


def write_trace(events, f) -> None:
    """One event per line: ``cycle vault dir addr`` (addresses in hex, end-marks included)."""
    for e in events:
        f.write(f"{e.cycle} {e.vault} {'R' if e.direction == 'read' else 'W'} {e.addr:#x}\n")
