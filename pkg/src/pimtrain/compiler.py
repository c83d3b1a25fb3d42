"""Mapping of a phase plan onto vaults, address generators and PEs.

Partitioned volume tensors are split over the flattened (sample, row) axis
with a ceil-sized chunk per PE (the last partition may be short). A PE's
share of one sample is a *piece*; in the vault the pieces of a tensor are
stored back to back, each in (depth, row, column) order. Padded conv inputs
are stored the same way with the kernel halo rows included in each piece.

Counter bounds and mux selects of the table-driven op classes follow the
programming tables literally. Strides and bases realise the local layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .config import MachineConfig
from .netspec import NetworkSpec, PhasePlan, StepSpec, derive_phases


class CompileError(ValueError):
    pass


class CapacityError(CompileError):
    pass


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def split_ranges(n: int, parts: int) -> list:
    """Contiguous ceil-sized chunks; trailing partitions may be short or empty."""
    chunk = ceil_div(n, parts)
    return [(min(n, p * chunk), min(n, (p + 1) * chunk)) for p in range(parts)]


def largest_divisor(n: int, cap: int) -> int:
    for d in range(min(n, max(cap, 1)), 0, -1):
        if n % d == 0:
            return d
    return 1


def elem_bytes(mode) -> int:
    return 2 if getattr(mode, "value", mode) == "fixed16" else 4


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class Piece:
    n: int
    h0: int  # first output row of this sample owned by the PE
    h1: int  # one past the last


@dataclass(frozen=True)
class RowPartition:
    """Output rows (sample-major) split over PEs, with the matching input strips."""
    samples: int
    rows: int  # output rows per sample
    pes: int

    @property
    def ranges(self) -> list:
        return split_ranges(self.samples * self.rows, self.pes)

    def pieces(self, pe: int) -> list:
        g0, g1 = self.ranges[pe]
        out = []
        g = g0
        while g < g1:
            n, h = divmod(g, self.rows)
            h1 = min(self.rows, h + (g1 - g))
            out.append(Piece(n, h, h1))
            g += h1 - h
        return out

    def owner(self, n: int, h: int) -> int:
        g = n * self.rows + h
        chunk = ceil_div(self.samples * self.rows, self.pes)
        return g // chunk


@dataclass(frozen=True)
class StripLayout:
    """Local storage of a partitioned volume: pieces back to back, (depth, row, col) each.

    ``halo`` extra rows are stored per piece (kernel height - 1 for conv
    inputs) and ``wpad`` zero columns on each side.
    """
    part: RowPartition
    depth: int
    width: int
    halo: int = 0
    wpad: int = 0
    row_scale: int = 1  # input rows per output row (pool windows)

    @property
    def wp(self) -> int:
        return self.width + 2 * self.wpad

    def piece_rows(self, pc: Piece) -> int:
        return (pc.h1 - pc.h0) * self.row_scale + self.halo

    def piece_size(self, pc: Piece) -> int:
        return self.depth * self.piece_rows(pc) * self.wp

    def bases(self, pe: int) -> list:
        out, off = [], 0
        for pc in self.part.pieces(pe):
            out.append(off)
            off += self.piece_size(pc)
        return out

    def footprint(self, pe: int) -> int:
        return sum(self.piece_size(pc) for pc in self.part.pieces(pe))

    def address(self, pe: int, pc_index: int, c: int, row: int, col: int) -> int:
        """Local address of (depth c, piece-local row, stored column)."""
        pc = self.part.pieces(pe)[pc_index]
        return self.bases(pe)[pc_index] + (c * self.piece_rows(pc) + row) * self.wp + col

    def boxes(self, pe: int) -> list:
        """Group consecutive pieces of identical shape: (first piece index, count)."""
        pcs = self.part.pieces(pe)
        out = []
        for i, pc in enumerate(pcs):
            if out and i == out[-1][0] + out[-1][1]:
                first = pcs[out[-1][0]]
                if (first.h0, first.h1) == (pc.h0, pc.h1):
                    out[-1] = (out[-1][0], out[-1][1] + 1)
                    continue
            out.append((i, 1))
        return out


# ---------------------------------------------------------------- layout

@dataclass
class Placement:
    name: str
    kind: str  # replicated | partitioned | common
    shape: tuple
    elem: int
    footprint: dict  # vault -> bytes
    overlap: int = 0
    lowered: bool = False
    rows: object = None  # RowPartition, or a list of (lo, hi) row ranges per PE
    strip: object = None

    def base(self, vault: int, layout: "LayoutPlan") -> int:
        return layout.bases[(self.name, vault)]


@dataclass
class LayoutPlan:
    net: NetworkSpec
    cfg: MachineConfig
    placements: dict = field(default_factory=dict)
    conv: dict = field(default_factory=dict)  # layer (or "input") -> strips and partitions
    fc: dict = field(default_factory=dict)  # layer -> matrix -> blocking info
    bases: dict = field(default_factory=dict)  # (tensor, vault) -> byte offset

    def vault_usage(self) -> dict:
        use: dict = {}
        for pl in self.placements.values():
            for v, b in pl.footprint.items():
                use[v] = use.get(v, 0) + b
        return use

    def source_of(self, name: str, index) -> list:
        """Locations holding one element: ``["buffers"]`` or a list of vaults."""
        pl = self.placements[name]
        if pl.kind == "replicated":
            return ["buffers"]
        if pl.kind == "common":
            return [self.cfg.common_vault]
        if isinstance(pl.rows, RowPartition):
            n, h = index
            return [pl.rows.owner(n, h)]
        return [p for p, (a, b) in enumerate(pl.rows) if a <= index < b]

    def input_strip(self, i: int) -> "StripLayout":
        """Partitioned layout holding the (unpadded) input volume of layer ``i``."""
        j = i - 1
        while j >= 0 and self.net.layers[j].kind == "act":
            j -= 1
        return self.conv[j]["y"] if j >= 0 else self.conv["input"]["y"]


def fc_blocks(cfg: MachineConfig, rows: int, cols: int, e: int, k: int) -> tuple:
    """Block sizes (P, L): P x K outputs fill half the output buffer, a P x L block half an input buffer."""
    half_in, half_out = cfg.in_buf // 2, cfg.out_buf // 2
    p = max(1, min(rows, half_out // (k * e)))
    lmax = max(1, min(half_in // (p * e), half_in // (k * e)))
    return p, largest_divisor(cols, lmax)


def _size(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def plan_layout(net: NetworkSpec, cfg: MachineConfig) -> LayoutPlan:
    lay = LayoutPlan(net, cfg)
    k = net.batch
    cv = cfg.common_vault
    e_ff, e_bp, e_up = (elem_bytes(net.mode(p)) for p in ("ff", "bp", "up"))
    pes = range(cfg.pes)

    def add(pl: Placement):
        lay.placements[pl.name] = pl

    first = net.layers[0] if net.layers else None
    if first is not None and len(first.in_shape) == 3 and first.kind in ("conv", "maxpool"):
        d, h, w = first.in_shape
        part = RowPartition(k, h, cfg.pes)
        lay.conv["input"] = {"part": part, "y": StripLayout(part, d, w)}

    for i, l in enumerate(net.layers):
        if l.kind == "conv":
            d, h, w = l.in_shape
            no, ho, wo = l.out_shape
            for what, need in (("FF", d * l.kh * l.kw * e_ff), ("BP", no * l.kh * l.kw * e_bp)):
                if need > cfg.in_buf:
                    raise CapacityError(f"layer {i}: one {what} kernel needs {need} B but a PE input buffer holds "
                                        f"{cfg.in_buf} B")
            part = RowPartition(k, ho, cfg.pes)
            xs = StripLayout(part, d, w, halo=l.kh - 1, wpad=l.pad)
            ys = StripLayout(part, no, wo)
            bpart = RowPartition(k, h, cfg.pes)
            pb = l.kh - 1 - l.pad
            dys = StripLayout(bpart, no, wo, halo=l.kh - 1, wpad=pb)
            lay.conv[i] = {"part": part, "x": xs, "y": ys, "bpart": bpart, "dy": dys}
            add(Placement(f"w{i}", "replicated", l.weight_shape, 4, {cv: _size(l.weight_shape) * 4}))
            add(Placement(f"x{i}", "partitioned", (k, d, h, w), e_ff,
                          {p: xs.footprint(p) * e_ff for p in pes}, overlap=l.pad, rows=part, strip=xs))
            c = d * l.kh * l.kw
            add(Placement(f"xm{i}", "partitioned", (k * ho * wo, c), e_up,
                          {p: (g1 - g0) * wo * c * e_up for p, (g0, g1) in enumerate(part.ranges)},
                          lowered=True, rows=part))
            add(Placement(f"dy{i}", "partitioned", (k, no, ho, wo), e_bp,
                          {p: dys.footprint(p) * e_bp for p in pes}, overlap=pb, rows=bpart, strip=dys))
        elif l.kind == "maxpool":
            d, h, w = l.in_shape
            _, ho, wo = l.out_shape
            part = RowPartition(k, ho, cfg.pes)
            xs = StripLayout(part, d, w, row_scale=l.r)
            ys = StripLayout(part, d, wo)
            lay.conv[i] = {"part": part, "x": xs, "y": ys}
            add(Placement(f"x{i}", "partitioned", (k, d, h, w), e_ff,
                          {p: xs.footprint(p) * e_ff for p in pes}, rows=part, strip=xs))
            add(Placement(f"ids{i}", "partitioned", (k, d, ho, wo), 1, {p: ys.footprint(p) for p in pes},
                          rows=part, strip=ys))
        elif l.kind in ("fc", "rnn"):
            mats = {"w": l.weight_shape} if l.kind == "fc" else {m: l.matrix_shape(m) for m in l.matrices}
            info = {}
            for m, (hh, ww) in mats.items():
                name = f"w{i}" if l.kind == "fc" else f"w{i}.{m}"
                rows = split_ranges(hh, cfg.pes)
                cols = split_ranges(ww, cfg.pes)
                rp = max(b - a for a, b in rows)
                cp = max(b - a for a, b in cols)
                p_ff, l_ff = fc_blocks(cfg, rp, ww, e_ff, k)
                p_bp, l_bp = fc_blocks(cfg, cp, hh, e_bp, k)
                info[m] = {"name": name, "shape": (hh, ww), "rows": rows, "cols": cols,
                           "P": p_ff, "L": l_ff, "Pb": p_bp, "Lb": l_bp, "h": rp, "hT": cp}
                add(Placement(name, "partitioned", (hh, ww), e_up,
                              {p: (b - a) * ww * e_up for p, (a, b) in enumerate(rows)}, rows=rows))
                add(Placement(name + ".T", "partitioned", (ww, hh), e_up,
                              {p: (b - a) * hh * e_up for p, (a, b) in enumerate(cols)}, rows=cols))
            lay.fc[i] = info
            add(Placement(f"x{i}", "common", (k, _size(l.in_shape)), e_ff, {cv: k * _size(l.in_shape) * e_ff}))
            if l.kind == "rnn":
                add(Placement(f"h{i}", "common", (l.steps + 1, k, l.hidden), 4,
                              {cv: (l.steps + 1) * k * l.hidden * 4}))
        else:
            if len(l.in_shape) == 3 and i > 0:
                st = lay.input_strip(i)
                add(Placement(f"x{i}", "partitioned", (k,) + tuple(l.in_shape), e_ff,
                              {p: st.footprint(p) * e_ff for p in pes}, rows=st.part, strip=st))
            else:
                add(Placement(f"x{i}", "common", (k, _size(l.in_shape)), e_ff, {cv: k * _size(l.in_shape) * e_ff}))

    off: dict = {}
    for name, pl in lay.placements.items():
        for v, b in pl.footprint.items():
            lay.bases[(name, v)] = off.get(v, 0)
            off[v] = off.get(v, 0) + b
    for v, used in sorted(off.items()):
        if used > cfg.vault_capacity:
            big = max((pl for pl in lay.placements.values() if v in pl.footprint), key=lambda pl: pl.footprint[v])
            raise CapacityError(f"vault {v} needs {used} B (largest tensor {big.name}: {big.footprint[v]} B) "
                                f"but holds {cfg.vault_capacity} B")
    return lay


# ---------------------------------------------------------------- PMAG programs

SOURCES = ("-", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "p", "q", "0", "1", "r")
MUX_NAMES = ("s", "t", "u", "v", "a", "b", "c", "d")


@dataclass(frozen=True)
class Comparator:
    src: str
    lo: int
    hi: int


@dataclass(frozen=True)
class PMAGProgram:
    R: tuple
    mux: tuple  # s, t, u, v, a, b, c, d
    strides: tuple = (0, 0, 0, 0)
    base: int = 0
    cmp: tuple = ()
    cmp_mode: str = "gate"  # gate: failing points are skipped; zero: they write the zero constant
    const_r: int = 0
    lut: str | None = None
    direction: str = "read"
    bus_role: str = "local"  # local | broadcast-source | merge-sink
    vault: int = 0
    extent: int | None = None  # valid addresses are [0, extent)
    bits: int = 32
    tag: str = ""

    def __post_init__(self):
        if len(self.R) != 7 or any(int(r) < 1 for r in self.R):
            raise CompileError(f"{self.tag}: counter bounds must be 7 values >= 1, got {self.R}")
        if len(self.mux) != 8 or any(m not in SOURCES for m in self.mux):
            raise CompileError(f"{self.tag}: bad mux selects {self.mux}")
        s, t, u, v = self.mux[:4]
        for m in self.mux[4:]:
            if (m == "p" and "-" in (s, t)) or (m == "q" and "-" in (u, v)) or m == "-":
                raise CompileError(f"{self.tag}: address input {m} is undefined")
        if len(self.cmp) > 2:
            raise CompileError(f"{self.tag}: at most two comparators")
        for c in self.cmp:
            if c.src not in SOURCES[1:8]:
                raise CompileError(f"{self.tag}: comparator must watch a counter, got {c.src}")
            bound = self.R[int(c.src[1]) - 1]
            if not 0 <= c.lo <= c.hi <= bound:
                raise CompileError(f"{self.tag}: comparator [{c.lo},{c.hi}) outside counter range {bound}")
        if self.cmp_mode not in ("gate", "zero"):
            raise CompileError("cmp_mode must be gate or zero")
        if self.direction not in ("read", "write"):
            raise CompileError("direction must be read or write")
        if self.bus_role not in ("local", "broadcast-source", "merge-sink"):
            raise CompileError(f"unknown bus role {self.bus_role}")

    @property
    def sequential(self) -> bool:
        """a = b = c = 0, d = 1: the address advances by one per accepted point."""
        return self.mux[4:] == ("0", "0", "0", "1")

    @property
    def points(self) -> int:
        n = 1
        for r in self.R:
            n *= r
        return n


def make_program(R, mux, **kw) -> PMAGProgram:
    R = tuple(int(x) for x in R) + (1,) * (7 - len(R))
    return PMAGProgram(R, tuple(mux), **kw)


CONV_FF_MUX = ("r2", "r6", "r3", "r7", "r4", "q", "p", "r5")
CONV_UP_MUX = ("r3", "r6", "r4", "r7", "q", "p", "r5", "r2")
FC_C_MUX = ("-", "-", "-", "-", "r4", "r2", "r5", "0")
FC_I_MUX = ("-", "-", "-", "-", "r4", "r3", "r2", "r1")
FCUP_MUX = FC_I_MUX
MERGE_MUX = ("-", "-", "-", "-", "r3", "r2", "r1", "0")
PARTITION_MUX = ("-", "-", "-", "-", "0", "0", "0", "1")
ADDPAD_MUX = ("r3", "r", "r2", "r", "p", "q", "r1", "0")
REMOVEPAD_MUX = MERGE_MUX
STREAM_MUX = ("-", "-", "-", "-", "r1", "r2", "0", "0")


def stream_program(rows: int, cols: int, vault: int, tag: str) -> PMAGProgram:
    """Contiguous rows x cols walk; nesting keeps each counter within 16 bits."""
    return make_program((rows, cols), STREAM_MUX, strides=(cols, 1, 0, 0), vault=vault, extent=rows * cols, tag=tag)


@dataclass
class StepPMAG:
    """Table-literal program of a step plus the per-vault programs it expands to.

    ``streams`` maps an operand role to its read programs. ``pairs`` lists
    data moves as (source programs, destination program); the sources'
    accepted points feed the destination's data points in order.
    """
    table: PMAGProgram
    streams: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)

    @property
    def programs(self) -> list:
        out = [p for ps in self.streams.values() for p in ps]
        for srcs, dst in self.pairs:
            out += list(srcs) + [dst]
        return out


# conv and FC operand streams

def conv_programs(strip: StripLayout, pe: int, outer: int, out_w: int, kdepth: int, kh: int, kw: int,
                  bits: int = 32, up: bool = False, tag: str = "conv") -> list:
    """Read programs of a PE's padded strip, one per run of equally shaped pieces."""
    progs = []
    pcs = strip.part.pieces(pe)
    bases = strip.bases(pe)
    for first, cnt in strip.boxes(pe):
        pc = pcs[first]
        rows = pc.h1 - pc.h0
        pr = strip.piece_rows(pc)
        size = strip.piece_size(pc)
        if up:
            R, mux = (1, cnt, rows, out_w, kdepth, kh, kw), CONV_UP_MUX
            strides = (1, strip.wp, pr * strip.wp, size)  # a col, b row, c depth, d sample
        else:
            R, mux = (outer, rows, out_w, cnt, kdepth, kh, kw), CONV_FF_MUX
            strides = (size, 1, strip.wp, pr * strip.wp)  # a sample, b col, c row, d depth
        progs.append(make_program(R, mux, strides=strides, base=bases[first], vault=pe,
                                  extent=strip.footprint(pe), bits=bits, tag=tag))
    return progs


def fc_stream_programs(rows: list, cols: int, P: int, L: int, k: int, cv: int, bits: int = 32,
                       tag: str = "fc") -> tuple:
    """Common-vault broadcast of X (k x cols) and per-PE reads of row blocks of a (rows x cols) matrix."""
    hp = max(b - a for a, b in rows)
    c = make_program((ceil_div(hp, P), cols // L, P, L, k), FC_C_MUX, strides=(1, L, cols, 0), vault=cv,
                     bus_role="broadcast-source", extent=k * cols, bits=bits, tag=tag + ".c")
    iprogs = []
    for pe, (a, b) in enumerate(rows):
        n = b - a
        full, rem = divmod(n, P)
        for blocks, p, base in ((full, P, 0), (1 if rem else 0, rem, full * P * cols)):
            if blocks:
                iprogs.append(make_program((blocks, cols // L, p, L, k), FC_I_MUX, strides=(1, cols, L, p * cols),
                                           base=base, vault=pe, extent=n * cols, bits=bits, tag=tag + ".i"))
    return c, iprogs


def fcup_programs(rows: list, cols: int, k: int, lanes: int, cv: int, bits: int = 32, tag: str = "fc_up") -> tuple:
    """Broadcast of X column groups and per-PE reads of the local dY slice (k x h, row-major)."""
    cw = largest_divisor(cols, lanes)
    c = make_program((1, cols // cw, k, cw), FCUP_MUX, strides=(1, cols, cw, 0), vault=cv,
                     bus_role="broadcast-source", extent=k * cols, bits=bits, tag=tag + ".c")
    iprogs = [make_program((1, cols // cw, k, b - a), FCUP_MUX, strides=(1, b - a, 0, 0), vault=pe,
                           extent=k * (b - a), bits=bits, tag=tag + ".i")
              for pe, (a, b) in enumerate(rows) if b > a]
    return c, iprogs


# data preparation moves

def _piece_read(strip: StripLayout, pe: int, j: int, h0: int, h1: int, tag: str) -> PMAGProgram:
    """Read rows [h0, h1) (sample-local) of piece j of an unpadded strip, in (depth, row, col) order."""
    pc = strip.part.pieces(pe)[j]
    pr = strip.piece_rows(pc)
    base = strip.bases(pe)[j] + (h0 - pc.h0) * strip.wp
    return make_program((strip.depth, h1 - h0, strip.width), MERGE_MUX, strides=(1, strip.wp, pr * strip.wp, 0),
                        base=base, vault=pe, extent=strip.footprint(pe), tag=tag)


def merge_pairs(strip: StripLayout, cv: int) -> list:
    """Each PE piece goes to the common vault in per-sample (depth, row, col) order, PEs ascending."""
    d, w, hfull = strip.depth, strip.width, strip.part.rows
    vol = d * hfull * w
    pairs = []
    for pe in range(strip.part.pes):
        for j, pc in enumerate(strip.part.pieces(pe)):
            src = _piece_read(strip, pe, j, pc.h0, pc.h1, "merge.src")
            dst = make_program((d, pc.h1 - pc.h0, w), MERGE_MUX, strides=(1, w, hfull * w, 0),
                               base=pc.n * vol + pc.h0 * w, vault=cv, direction="write", bus_role="merge-sink",
                               extent=strip.part.samples * vol, tag="merge.dst")
            pairs.append(([src], dst))
    return pairs


def overlap_windows(part: RowPartition, pe: int, overlap: int) -> list:
    """(n, lo, hi, base) windows of a PE: its rows widened by ``overlap`` on each side, stored back to back."""
    out, off = [], 0
    for pc in part.pieces(pe):
        lo, hi = max(0, pc.h0 - overlap), min(part.rows, pc.h1 + overlap)
        out.append((pc.n, lo, hi, off))
        off += hi - lo
    return out


def partition_pairs(part: RowPartition, depth: int, width: int, cv: int, overlap: int = 0) -> list:
    """Common-vault volume broadcast per sample; each PE keeps its rows (plus overlap) sequentially."""
    hfull = part.rows
    vol = depth * hfull * width
    srcs = [make_program((depth, hfull, width), MERGE_MUX, strides=(1, width, vol // depth, 0), base=n * vol,
                         vault=cv, bus_role="broadcast-source", extent=part.samples * vol, tag="partition.src")
            for n in range(part.samples)]
    pairs = []
    for pe in range(part.pes):
        wins = overlap_windows(part, pe, overlap)
        ext = sum(hi - lo for _, lo, hi, _ in wins) * depth * width
        for n, lo, hi, off in wins:
            dst = make_program((depth, hfull, width), PARTITION_MUX, strides=(0, 0, 0, 1), base=off * depth * width,
                               cmp=(Comparator("r2", lo, hi), Comparator("r3", 0, width)), vault=pe,
                               direction="write", extent=ext, tag="partition.dst")
            pairs.append(([srcs[n]], dst))
    return pairs


def addpad_pairs(xs: StripLayout, src: StripLayout, r: int) -> list:
    """Fill every padded piece of ``xs`` from the unpadded strip ``src``; border points write zero.

    A piece is split into bands of rows fed by one source piece; pad rows join
    the neighbouring band so a single-source piece is one program.
    """
    wp, w, d = xs.wp, xs.width, xs.depth
    hin = src.part.rows
    pairs = []
    for pe in range(xs.part.pes):
        for j, pc in enumerate(xs.part.pieces(pe)):
            pr = xs.piece_rows(pc)
            owners = []
            for t in range(pr):
                h = pc.h0 + t - r
                if 0 <= h < hin:
                    o = src.part.owner(pc.n, h)
                    oj = next(q for q, opc in enumerate(src.part.pieces(o)) if opc.n == pc.n and opc.h0 <= h < opc.h1)
                    owners.append((o, oj))
                else:
                    owners.append(None)
            bands = []  # [owner, first t, last t + 1, first data t, last data t + 1]
            for t, ow in enumerate(owners):
                if ow is None:
                    continue
                if bands and bands[-1][0] == ow and bands[-1][4] == t:
                    bands[-1][4] = t + 1
                else:
                    bands.append([ow, t, t + 1, t, t + 1])
            for q, b in enumerate(bands):
                b[1] = 0 if q == 0 else b[3]
                b[2] = pr if q == len(bands) - 1 else bands[q + 1][3]
            for (o, oj), t0, t1, lo, hi in bands:
                base = xs.bases(pe)[j] + t0 * wp - r - r * wp
                dst = make_program((d, t1 - t0, wp), ADDPAD_MUX, strides=(1, wp, pr * wp, 0), base=base,
                                   cmp=(Comparator("r3", r, r + w), Comparator("r2", lo - t0, hi - t0)),
                                   cmp_mode="zero", const_r=r, vault=pe, direction="write",
                                   extent=xs.footprint(pe), tag="add_pad.dst")
                h0 = pc.h0 + lo - r
                pairs.append(([_piece_read(src, o, oj, h0, h0 + hi - lo, "add_pad.src")], dst))
    return pairs


def removepad_pairs(xs: StripLayout, r: int) -> list:
    """Strip the zero border of every padded piece; interior points are written sequentially per PE."""
    wp, w, d = xs.wp, xs.width, xs.depth
    hin = xs.part.rows + xs.halo - 2 * r
    pairs = []
    for pe in range(xs.part.pes):
        pcs = xs.part.pieces(pe)
        spans = []
        for pc in pcs:
            pr = xs.piece_rows(pc)
            spans.append((max(0, r - pc.h0), min(pr, hin + r - pc.h0)))
        ext = sum(hi - lo for lo, hi in spans) * d * w
        off = 0
        for j, pc in enumerate(pcs):
            pr = xs.piece_rows(pc)
            lo, hi = spans[j]
            cmps = (Comparator("r3", r, r + w), Comparator("r2", lo, hi))
            src = make_program((d, pr, wp), REMOVEPAD_MUX, strides=(1, wp, pr * wp, 0), base=xs.bases(pe)[j],
                               cmp=cmps, const_r=r, vault=pe, extent=xs.footprint(pe), tag="remove_pad.src")
            dst = make_program((d, pr, wp), PARTITION_MUX, strides=(0, 0, 0, 1), base=off, cmp=cmps, vault=pe,
                               direction="write", extent=ext, tag="remove_pad.dst")
            off += (hi - lo) * d * w
            pairs.append(([src], dst))
    return pairs


def strip_stream(strip: StripLayout, pe: int, bits: int = 32, tag: str = "stream") -> list:
    """Sequential read of every piece of a strip (pooling windows are formed by the PE counters)."""
    pcs = strip.part.pieces(pe)
    return [make_program((strip.depth, strip.piece_rows(pc), strip.wp), MERGE_MUX,
                         strides=(1, strip.wp, strip.piece_rows(pc) * strip.wp, 0), base=b, vault=pe,
                         extent=strip.footprint(pe), bits=bits, tag=tag)
            for pc, b in zip(pcs, strip.bases(pe))]


def _bits_of(mode) -> int:
    return 16 if mode.value == "fixed16" else 32


def emit_pmag(step: StepSpec, layout: LayoutPlan) -> StepPMAG:
    """Programs for one step: the table-literal program and its per-vault expansion."""
    net, cfg = layout.net, layout.cfg
    i, op = step.layer, step.op
    l = net.layers[i]
    k = net.batch
    cv = cfg.common_vault
    b_ff, b_bp, b_up = (_bits_of(net.mode(p)) for p in ("ff", "bp", "up"))
    pes = range(cfg.pes)

    if op in ("ConvFF", "ConvBP", "ConvUP"):
        g = layout.conv[i]
        d, h, w = l.in_shape
        no, ho, wo = l.out_shape
        if op == "ConvFF":
            table = make_program((no, ho, wo, k, d, l.kh, l.kw), CONV_FF_MUX, bits=b_ff, tag="conv_ff")
            progs = [p for pe in pes for p in conv_programs(g["x"], pe, no, wo, d, l.kh, l.kw, b_ff, tag="conv_ff")]
            return StepPMAG(table, {"x": progs})
        if op == "ConvBP":
            table = make_program((d, h, w, k, no, l.kh, l.kw), CONV_FF_MUX, bits=b_bp, tag="conv_bp")
            progs = [p for pe in pes for p in conv_programs(g["dy"], pe, d, w, no, l.kh, l.kw, b_bp, tag="conv_bp")]
            return StepPMAG(table, {"dy": progs})
        table = make_program((1, k, ho, wo, d, l.kh, l.kw), CONV_UP_MUX, bits=b_up, tag="conv_up")
        progs = [p for pe in pes for p in conv_programs(g["x"], pe, 1, wo, d, l.kh, l.kw, b_up, up=True,
                                                        tag="conv_up")]
        return StepPMAG(table, {"x": progs})

    if op in ("FCFF", "FCBP", "FCUP"):
        info = layout.fc[i]
        if step.sub == "gate":
            table = stream_program(k, l.hidden, cv, "gate")
            return StepPMAG(table, {"c": [table]})
        mats = [step.sub] if step.sub else list(info)
        inf = info[mats[0]]
        hh, ww = inf["shape"]
        if op in ("FCFF", "FCBP"):
            ff = op == "FCFF"
            P, L = (inf["P"], inf["L"]) if ff else (inf["Pb"], inf["Lb"])
            H, W = (hh, ww) if ff else (ww, hh)
            bits = b_ff if ff else b_bp
            table = make_program((ceil_div(H, P), ceil_div(W, L), P, L, k), FC_I_MUX, bits=bits, tag=op.lower())
            cs, iprogs = [], []
            for m in mats:
                c, ip = fc_stream_programs(info[m]["rows" if ff else "cols"], W, P, L, k, cv, bits, op.lower())
                cs.append(c)
                iprogs += ip
            return StepPMAG(table, {"c": cs, "i": iprogs})
        h = inf["h"]
        table = make_program((ceil_div(hh, h), ceil_div(ww, cfg.lanes), k, h), FCUP_MUX, bits=b_up, tag="fc_up")
        cs, iprogs = [], []
        for m in mats:
            mi = info[m]
            mh, mw = mi["shape"]
            for rows, cols in ((mi["rows"], mw), (mi["cols"], mh)):
                c, ip = fcup_programs(rows, cols, k, cfg.lanes, cv, b_up)
                cs.append(c)
                iprogs += ip
        return StepPMAG(table, {"c": cs, "i": iprogs})

    if op == "Merge":
        strip = layout.input_strip(i)
        d, w, hfull = strip.depth, strip.width, strip.part.rows
        table = make_program((d, hfull, w), MERGE_MUX, tag="merge")
        return StepPMAG(table, pairs=merge_pairs(strip, cv))

    if op == "Partition":
        strip = layout.input_strip(i)
        d, w, hfull = strip.depth, strip.width, strip.part.rows
        ph = ceil_div(k * hfull, cfg.pes) if k * hfull >= cfg.pes else 1
        table = make_program((d, hfull, w), PARTITION_MUX,
                             cmp=(Comparator("r2", 0, min(ph, hfull)), Comparator("r3", 0, w)), tag="partition")
        return StepPMAG(table, pairs=partition_pairs(strip.part, d, w, cv))

    if op == "AddPad":
        d, h, w = l.in_shape
        r = l.pad
        table = make_program((d, h + 2 * r, w + 2 * r), ADDPAD_MUX, const_r=r, cmp_mode="zero", tag="add_pad",
                             cmp=(Comparator("r3", r, r + w), Comparator("r2", r, r + h)))
        return StepPMAG(table, pairs=addpad_pairs(layout.conv[i]["x"], layout.input_strip(i), r))

    if op == "RemovePad":
        d, h, w = l.in_shape
        r = l.pad
        table = make_program((d, h + 2 * r, w + 2 * r), REMOVEPAD_MUX, const_r=r, tag="remove_pad",
                             cmp=(Comparator("r3", r, r + w), Comparator("r2", r, r + h)))
        return StepPMAG(table, pairs=removepad_pairs(layout.conv[i]["x"], r))

    if op in ("Pool", "PoolBP"):
        d, h, w = l.in_shape
        bits = 16 if op == "Pool" else b_bp
        table = make_program((d, h, w), MERGE_MUX, strides=(1, w, h * w, 0), bits=bits, tag=op.lower())
        g = layout.conv[i]
        return StepPMAG(table, {"x": [p for pe in pes for p in strip_stream(g["x"], pe, bits, op.lower())]})

    if op == "LossEval":
        c = _size(l.in_shape)
        table = stream_program(k, c, cv, "loss")
        return StepPMAG(table, {"c": [table]})
    raise CompileError(f"no program mapping for op class {op}")


# ---------------------------------------------------------------- PE programs

@dataclass(frozen=True)
class PEProgram:
    op: str  # MAC | MAX | NOP (data preparation steps)
    bits: str  # 16 | 32 | 32sr | float
    cnt2: tuple
    cnt1: int

    def __post_init__(self):
        if self.op not in _OPS:
            raise CompileError(f"unknown PE op {self.op}")
        if self.bits not in _BITS:
            raise CompileError(f"unknown bit mode {self.bits}")
        if any(not 0 <= c < 1 << 16 for c in tuple(self.cnt2) + (self.cnt1,)):
            raise CompileError("PE counters are 16-bit")


_OPS = ("MAC", "MAX", "NOP")
_BITS = ("16", "32", "32sr", "float")


def _bits_name(mode) -> str:
    return {"fixed16": "16", "fixed32": "32", "fixed32sr": "32sr", "float": "float"}[mode.value]


def emit_pe(step: StepSpec, layout: LayoutPlan) -> PEProgram:
    net = layout.net
    l = net.layers[step.layer]
    op = step.op
    phase = {"FF": "ff", "BP": "bp", "UP": "up", "Prep": "ff"}[step.phase]
    bits = _bits_name(net.mode(phase))
    if op in ("ConvFF", "ConvBP"):
        return PEProgram("MAC", bits, (l.kh, l.kw), l.kh * l.kw)
    if op == "ConvUP":
        c = l.in_shape[0] * l.kh * l.kw
        P = largest_divisor(c, 64)
        return PEProgram("MAC", bits, (P, 64), 64)
    if op in ("FCFF", "FCBP"):
        if step.sub == "gate":
            return PEProgram("MAC", bits, (1, 1), 1)
        inf = layout.fc[step.layer][step.sub or next(iter(layout.fc[step.layer]))]
        P, L = (inf["P"], inf["L"]) if op == "FCFF" else (inf["Pb"], inf["Lb"])
        return PEProgram("MAC", bits, (P, L), L)
    if op == "FCUP":
        inf = next(iter(layout.fc[step.layer].values()))
        return PEProgram("MAC", bits, (inf["h"],), 1)
    if op == "Pool":
        return PEProgram("MAX", "16", (l.r, l.r), l.r * l.r)
    if op == "PoolBP":
        return PEProgram("MAX", bits, (l.r, l.r), l.r * l.r)
    if op == "LossEval":
        # one lane group per pass; the operand stream's end mark bounds the loop
        n = layout.cfg.lanes
        return PEProgram("MAC", _bits_name(net.mode("bp")), (n,), n)
    return PEProgram("NOP", bits, (), 0)


# ---------------------------------------------------------------- iBuffer

ENTRY_BYTES = 22
PMAG_BYTES = 18
IBUFFER_BYTES = 16384


@dataclass(frozen=True)
class IBufferImage:
    data: bytes
    entries: int
    capacity: int = IBUFFER_BYTES

    def __len__(self) -> int:
        return len(self.data)


def ibuffer_layers(capacity: int = IBUFFER_BYTES, entries_per_layer: int = 4) -> int:
    """Layers whose programs fit: each layer needs FF, BP, UP and one preparation entry."""
    return capacity // (ENTRY_BYTES * entries_per_layer)


def _pack_pe(pe: PEProgram) -> bytes:
    c2 = tuple(pe.cnt2) + (0,) * (2 - len(pe.cnt2))
    vals = c2 + (pe.cnt1,)
    shift = 0
    while any(v >> shift >= 512 for v in vals):
        shift += 1
    if shift > 3 or any(v & ((1 << shift) - 1) for v in vals):
        raise CompileError(f"PE counters {vals} do not fit 9-bit fields with a shared shift")
    if pe.op == "NOP":
        if any(vals):
            raise CompileError("NOP carries no counters")
        word = _BITS.index(pe.bits) << 1
    else:
        if len(pe.cnt2) == 2 and c2[1] == 0 or not any(vals):
            raise CompileError("compute programs need nonzero counters")
        word = _OPS.index(pe.op) | _BITS.index(pe.bits) << 1
    for j, v in enumerate(vals):
        word |= (v >> shift) << (3 + 9 * j)
    word |= shift << 30
    return struct.pack("<I", word)


def _unpack_pe(b: bytes) -> PEProgram:
    (word,) = struct.unpack("<I", b)
    shift = word >> 30
    vals = [((word >> (3 + 9 * j)) & 511) << shift for j in range(3)]
    bits = _BITS[word >> 1 & 3]
    if not any(vals):
        return PEProgram("NOP", bits, (), 0)
    cnt2 = (vals[0],) if vals[1] == 0 else (vals[0], vals[1])
    return PEProgram(_OPS[word & 1], bits, cnt2, vals[2])


def _pack_pmag(prog: PMAGProgram) -> bytes:
    if any(r >= 1 << 16 for r in prog.R):
        raise CompileError(f"counter bound {max(prog.R)} exceeds 16 bits")
    codes = 0
    for j, m in enumerate(prog.mux):
        codes |= SOURCES.index(m) << (4 * j)
    return struct.pack("<7HI", *prog.R, codes)


def _unpack_pmag(b: bytes) -> tuple:
    vals = struct.unpack("<7HI", b)
    return tuple(vals[:7]), tuple(SOURCES[(vals[7] >> (4 * j)) & 15] for j in range(8))


def pack_ibuffer(programs: list, capacity: int = IBUFFER_BYTES) -> IBufferImage:
    """Pack (PMAGProgram, PEProgram) pairs into 22-byte little-endian entries in execution order.

    Entry layout:
      bytes 0-13   R1..R7 as u16
      bytes 14-17  u32 of eight 4-bit mux codes, s in the low nibble (code = index in SOURCES)
      bytes 18-21  u32 PE word: bit 0 op (MAC 0, MAX 1), bits 1-2 bit mode (16, 32, 32sr, float),
                   bits 3-29 CNT2a, CNT2b, CNT1 as 9-bit fields, bits 30-31 a shared left shift.
                   CNT2b = 0 marks a single-level CNT2; all-zero counters mark a NOP.
    Strides, bases and comparator bounds are layout data loaded with the tensors and are not packed.
    """
    if not programs:
        raise CompileError("no programs to pack")
    need = len(programs) * ENTRY_BYTES
    if need > capacity:
        raise CapacityError(f"iBuffer needs {need} B for {len(programs)} entries but holds {capacity} B")
    out = bytearray()
    for pm, pe in programs:
        out += _pack_pmag(pm) + _pack_pe(pe)
    return IBufferImage(bytes(out), len(programs), capacity)


def unpack_ibuffer(img: IBufferImage) -> list:
    """Inverse of pack_ibuffer: a list of (R, mux, PEProgram)."""
    out = []
    for j in range(img.entries):
        e = img.data[j * ENTRY_BYTES:(j + 1) * ENTRY_BYTES]
        R, mux = _unpack_pmag(e[:PMAG_BYTES])
        out.append((R, mux, _unpack_pe(e[PMAG_BYTES:])))
    return out


# ---------------------------------------------------------------- whole network

@dataclass
class CompiledStep:
    spec: StepSpec
    pmag: StepPMAG
    pe: PEProgram


@dataclass
class Compiled:
    net: NetworkSpec
    layout: LayoutPlan
    plan: PhasePlan
    steps: list
    image: IBufferImage


def step_key(s: StepSpec) -> tuple:
    """Identity of a step's program; unrolled recurrent time steps share one entry."""
    return (s.phase, s.layer, s.op, s.sub)


def compile_network(net: NetworkSpec, cfg: MachineConfig) -> Compiled:
    layout = plan_layout(net, cfg)
    plan = derive_phases(net)
    seen: dict = {}
    steps, entries = [], []
    for s in plan.steps:
        key = step_key(s)
        if key not in seen:
            seen[key] = (emit_pmag(s, layout), emit_pe(s, layout))
            entries.append((seen[key][0].table, seen[key][1]))
        steps.append(CompiledStep(s, *seen[key]))
    return Compiled(net, layout, plan, steps, pack_ibuffer(entries, cfg.ibuffer))


def dump_programs(comp: Compiled) -> str:
    """One row per distinct step program, columns mirroring the programming tables."""
    head = ["#", "phase", "layer", "op", "sub", "R1", "R2", "R3", "R4", "R5", "R6", "R7",
            "s", "t", "u", "v", "a", "b", "c", "d", "cmp", "pe", "bits", "CNT2", "CNT1"]
    rows, seen = [head], set()
    for j, st in enumerate(comp.steps):
        s = st.spec
        if step_key(s) in seen:
            continue
        seen.add(step_key(s))
        t = st.pmag.table
        cmp = ";".join(f"{c.src}[{c.lo},{c.hi})" for c in t.cmp) or "-"
        rows.append([str(j), s.phase, str(s.layer), s.op, s.sub or "-", *map(str, t.R), *t.mux, cmp,
                     st.pe.op, st.pe.bits, "x".join(map(str, st.pe.cnt2)) or "-", str(st.pe.cnt1)])
    widths = [max(len(r[c]) for r in rows) for c in range(len(head))]
    return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in rows) + "\n"
