"""Tile schedules of compiled steps: how each PE walks its share of a step through its buffers."""
from __future__ import annotations

from .compiler import LayoutPlan, ceil_div, elem_bytes
from .netspec import NumericMode, StepSpec
from .timing import Schedule, Tile

PHASE_MODE = {"FF": "ff", "BP": "bp", "UP": "up"}


def _mode(step: StepSpec, net) -> NumericMode:
    if step.phase == "Prep":
        return net.mode("bp" if step.op == "Partition" else "ff")
    return net.mode(PHASE_MODE[step.phase])


def _pairs(mode: NumericMode) -> int:
    """Operand pairs per lane per cycle: two 16-bit products share a 32-bit lane."""
    return 2 if mode is NumericMode.FIXED16 else 1


def _fit(limit: int, per: int, hi: int) -> int:
    return max(1, min(hi, limit // max(per, 1)))


def _row_tiles(pieces, rows_per_tile: int):
    for pc in pieces:
        h = pc.h0
        while h < pc.h1:
            r = min(rows_per_tile, pc.h1 - h)
            yield r
            h += r


def _conv_pass(cfg, part, in_depth, in_wp, out_depth, out_w, kh, kw, e, pairs) -> Schedule:
    """Sliding-window pass: the kernel set is broadcast once (per group), strips stream from the local vault."""
    half_in, half_out = cfg.in_buf // 2, cfg.out_buf // 2
    kbytes = out_depth * in_depth * kh * kw * e
    groups = ceil_div(kbytes, cfg.in_buf)
    ng = ceil_div(out_depth, groups)
    rows = min(_fit(half_in, in_wp * in_depth * e, 1 << 30) - (kh - 1), _fit(half_out, out_w * ng * e, 1 << 30))
    rows = max(1, rows)
    sched = Schedule([], {}, bits=8 * e)
    for g in range(groups):
        sched.chunks[g] = min(ng, out_depth - g * ng) * in_depth * kh * kw * e
    for p in range(cfg.pes):
        ts = []
        for g in range(groups):
            k = min(ng, out_depth - g * ng)
            first = True
            for r in _row_tiles(part.pieces(p), rows):
                ts.append(Tile(compute=ceil_div(r * out_w, cfg.lanes) * ceil_div(k, pairs) * in_depth * kh * kw,
                               fill=(r + kh - 1) * in_wp * in_depth * e, chunks=(g,) if first else (),
                               wb=r * out_w * k * e, macs=r * out_w * k * in_depth * kh * kw))
                first = False
        sched.tiles.append(ts)
    return sched


def _conv_up(cfg, part, l, e, pairs) -> Schedule:
    """Lowered weight gradient: X_M rows and dY rows stream locally, partial dW merges per column block."""
    d = l.in_shape[0]
    no, ho, wo = l.out_shape
    c = d * l.kh * l.kw
    half_in = cfg.in_buf // 2
    cb = max(1, min(c, cfg.out_buf // (no * 4)))
    mt = max(1, min(half_in // (cb * e), half_in // (no * e)))
    sched = Schedule([], {}, tail_bus=2 * no * c * 4, bits=8 * e)
    for p, (g0, g1) in enumerate(part.ranges):
        m = (g1 - g0) * wo
        ts = []
        for c0 in range(0, c, cb):
            w = min(cb, c - c0)
            for m0 in range(0, m, mt):
                k = min(mt, m - m0)
                ts.append(Tile(compute=k * w * ceil_div(no, cfg.lanes * pairs), fill=k * (w + no) * e,
                               merge=no * w * 4 if m0 + k >= m else 0, macs=k * w * no))
        sched.tiles.append(ts)
    return sched


def _fc_pass(cfg, rows, cols, P, L, k, e, pairs, base=0, sched=None) -> Schedule:
    """Row-partitioned matrix times a broadcast operand block; outputs merge to the common vault."""
    sched = sched or Schedule([[] for _ in range(cfg.pes)], {}, bits=8 * e)
    nc = cols // L
    nrb = max(ceil_div(b - a, P) for a, b in rows)
    for rb in range(nrb):
        for cb in range(nc):
            sched.chunks[base + rb * nc + cb] = L * k * e
    for p, (a, b) in enumerate(rows):
        h = b - a
        for rb in range(ceil_div(h, P)):
            pr = min(P, h - rb * P)
            for cb in range(nc):
                sched.tiles[p].append(Tile(compute=ceil_div(pr, pairs) * L * ceil_div(k, cfg.lanes), fill=pr * L * e,
                                           chunks=(base + rb * nc + cb,),
                                           merge=pr * k * e if cb == nc - 1 else 0, macs=pr * L * k))
    used = [c for c in sched.chunks if any(c in t.chunks for ts in sched.tiles for t in ts)]
    sched.chunks = {c: sched.chunks[c] for c in used}
    return sched


def _fc_up_pass(cfg, rows, cols, k, e, pairs, sched, base) -> int:
    """Gradient plus in-place update of a row-partitioned matrix; broadcast operand by column group."""
    lanes = cfg.lanes
    hb = max(1, min(cfg.out_buf // 2 // (lanes * 4), cfg.in_buf // 2 // (k * e)))
    ncg = ceil_div(cols, lanes)
    nid = base
    for p, (a, b) in enumerate(rows):
        h = b - a
        for r0 in range(0, h, hb):
            r = min(hb, h - r0)
            own = nid
            sched.chunks[own] = r * k * e
            nid += 1
            for g in range(ncg):
                w = min(lanes, cols - g * lanes)
                key = ("x", base, r0 // hb, g)
                if key not in sched.chunks:
                    sched.chunks[key] = k * w * e
                sched.tiles[p].append(Tile(compute=ceil_div(r, pairs) * k + r, fill=r * w * e,
                                           chunks=(key, own) if g == 0 else (key,), wb=r * w * e,
                                           macs=r * w * k + r * w))
    return nid


def _stream(cfg, nbytes_in: int, nbytes_out: int, ops: int, macs: int, e: int, local: bool) -> Schedule:
    """Elementwise work split over PEs; operands come from and return to the common vault unless local."""
    sched = Schedule([], {}, bits=8 * e)
    share_in = ceil_div(nbytes_in, cfg.pes)
    share_out = ceil_div(nbytes_out, cfg.pes)
    half = cfg.in_buf // 2
    for p in range(cfg.pes):
        ts = []
        left = min(share_in, max(0, nbytes_in - p * share_in))
        out = min(share_out, max(0, nbytes_out - p * share_out))
        n = max(1, ceil_div(left, half)) if left or out else 0
        for j in range(n):
            b = min(half, left - j * half) if left else 0
            o = ceil_div(out, n)
            el = ceil_div(b, e)
            if local:
                ts.append(Tile(compute=ceil_div(el, cfg.lanes) * ops, fill=b, wb=o, macs=ceil_div(macs, cfg.pes * n)))
            else:
                cid = (p, j)
                sched.chunks[cid] = b
                ts.append(Tile(compute=ceil_div(el, cfg.lanes) * ops, chunks=(cid,) if b else (), merge=o,
                               macs=ceil_div(macs, cfg.pes * n)))
        sched.tiles.append(ts)
    total = sum(t.macs for ts in sched.tiles for t in ts)
    # keep the op count exact: trim the rounding surplus from the last tiles
    extra = total - macs
    for ts in reversed(sched.tiles):
        for t in reversed(ts):
            cut = min(extra, t.macs)
            t.macs -= cut
            extra -= cut
    return sched


def build_schedule(step: StepSpec, lay: LayoutPlan) -> Schedule:
    net, cfg = lay.net, lay.cfg
    mode = _mode(step, net)
    e = elem_bytes(mode)
    pairs = _pairs(mode)
    k = net.batch
    i = step.layer
    l = net.layers[i]
    op = step.op
    if op == "ConvFF":
        info = lay.conv[i]
        d, _, _ = l.in_shape
        no, _, wo = l.out_shape
        return _conv_pass(cfg, info["part"], d, info["x"].wp, no, wo, l.kh, l.kw, e, pairs)
    if op == "ConvBP":
        info = lay.conv[i]
        d, _, w = l.in_shape
        no = l.kernels
        return _conv_pass(cfg, info["bpart"], no, info["dy"].wp, d, w, l.kh, l.kw, e, pairs)
    if op == "ConvUP":
        return _conv_up(cfg, lay.conv[i]["part"], l, e, pairs)
    if op == "Pool":
        info = lay.conv[i]
        d, _, w = l.in_shape
        _, _, wo = l.out_shape
        rows = max(1, (cfg.in_buf // 2) // (l.r * w * d * e))
        sched = Schedule([], {}, bits=8 * e)
        for p in range(cfg.pes):
            sched.tiles.append([Tile(compute=ceil_div(r * wo * d, cfg.lanes) * l.r * l.r, fill=r * l.r * w * d * e,
                                     wb=r * wo * d * (e + 1)) for r in _row_tiles(info["part"].pieces(p), rows)])
        return sched
    if op == "PoolBP":
        info = lay.conv[i]
        d, _, w = l.in_shape
        _, _, wo = l.out_shape
        rows = max(1, (cfg.out_buf // 2) // (l.r * w * d * e))
        sched = Schedule([], {}, bits=8 * e)
        for p in range(cfg.pes):
            sched.tiles.append([Tile(compute=ceil_div(r * l.r * w * d, cfg.lanes), fill=r * wo * d * (e + 1),
                                     wb=r * l.r * w * d * e) for r in _row_tiles(info["part"].pieces(p), rows)])
        return sched
    if op in ("FCFF", "FCBP"):
        if step.sub == "gate":
            n = k * l.hidden
            if op == "FCFF":
                return _stream(cfg, 4 * n * e, n * e, 6, 3 * n, e, local=False)
            return _stream(cfg, 6 * n * e, 5 * n * e, 12, 8 * n, e, local=False)
        inf = lay.fc[i]["w" if l.kind == "fc" else step.sub]
        hh, ww = inf["shape"]
        if op == "FCFF":
            return _fc_pass(cfg, inf["rows"], ww, inf["P"], inf["L"], k, e, pairs)
        return _fc_pass(cfg, inf["cols"], hh, inf["Pb"], inf["Lb"], k, e, pairs)
    if op == "FCUP":
        sched = Schedule([[] for _ in range(cfg.pes)], {}, bits=8 * e)
        kk = k * (l.steps if l.kind == "rnn" else 1)
        nid = 0
        for m, inf in lay.fc[i].items():
            hh, ww = inf["shape"]
            nid = _fc_up_pass(cfg, inf["rows"], ww, kk, e, pairs, sched, nid)
            nid = _fc_up_pass(cfg, inf["cols"], hh, kk, e, pairs, sched, nid)
        return sched
    if op == "LossEval":
        n = k * l.in_shape[0] if len(l.in_shape) == 1 else k * _vol(l.in_shape)
        return _stream(cfg, n * e, n * elem_bytes(net.mode("bp")), 4, n, e, local=False)
    if op == "Merge":
        st = lay.input_strip(i)
        return _prep(cfg, [st.footprint(p) * e for p in range(cfg.pes)], lambda b: (b, 0, b), e)
    if op == "Partition":
        st = lay.input_strip(i)
        total = k * _vol(net.layers[i - 1].out_shape) * e
        sched = Schedule([], {}, bits=8 * e)
        half = cfg.in_buf // 2
        n = ceil_div(total, half)
        for c in range(n):
            sched.chunks[c] = min(half, total - c * half)
        for p in range(cfg.pes):
            own = st.footprint(p) * e
            sched.tiles.append([Tile(compute=0, chunks=(c,), wb=ceil_div(own, n)) for c in range(n)])
        return sched
    if op in ("AddPad", "RemovePad"):
        info = lay.conv[i]
        src = lay.input_strip(i)
        xs = info["x"]
        d, _, w = l.in_shape
        moves = []
        for p in range(cfg.pes):
            halo = len(xs.part.pieces(p)) * (l.kh - 1) * w * d * e
            a, b = src.footprint(p) * e, xs.footprint(p) * e
            moves.append((a, b, halo) if op == "AddPad" else (b, a, 0))
        return _prep(cfg, moves, None, e, local=True)
    raise ValueError(f"no schedule for {op}")


def _vol(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _prep(cfg, per_pe, fn, e, local: bool = False) -> Schedule:
    """Data movement only: read, then write locally or merge, in buffer-half sized tiles."""
    sched = Schedule([], {}, bits=8 * e, merge_to_common=not local)
    half = cfg.in_buf // 2
    for x in per_pe:
        rd, wr, bus = fn(x) if fn else x
        n = ceil_div(max(rd, wr), half)
        ts = []
        for j in range(n):
            f = min(half, max(0, rd - j * half))
            if local:
                ts.append(Tile(compute=0, fill=f, wb=ceil_div(wr, n), merge=ceil_div(bus, n)))
            else:
                ts.append(Tile(compute=0, fill=f, merge=ceil_div(bus, n)))
        sched.tiles.append(ts)
    return sched
