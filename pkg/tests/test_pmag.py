from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_net, conv_read_multiset, events_multiset, fc_c_multiset, fc_i_multiset, fc_net, small_cfg
from pimtrain import compiler as C
from pimtrain.fxnum import Q16_16, build_lut
from pimtrain.netspec import StepSpec
from pimtrain.pmag import (END_MARK, PMAGRangeError, PrepError, accepted_points, addr_stream, apply_lut,
                           prep_exec, stream_arrays, write_trace)


def events(prog):
    return [e for e in addr_stream(prog) if not e.end]


def test_unit_program_single_event_then_end_mark():
    prog = C.make_program((1,) * 7, C.MERGE_MUX, base=5)
    evs = list(addr_stream(prog))
    assert [(e.addr, e.end) for e in evs] == [(5, False), (0xFFFFFFFF, True)]


def test_end_mark_width_follows_stream_bits():
    prog = C.make_program((2,), C.STREAM_MUX, strides=(1, 0, 0, 0), bits=16)
    evs = list(addr_stream(prog))
    assert evs[-1].addr == END_MARK[16] == 0xFFFF
    assert sum(e.end for e in evs) == 1 and evs[-1].end


def test_stream_is_deterministic():
    prog = C.make_program((2, 3, 2), C.MERGE_MUX, strides=(1, 2, 6, 0))
    assert list(addr_stream(prog)) == list(addr_stream(prog))


def test_address_outside_extent_is_error():
    prog = C.make_program((4,), C.STREAM_MUX, strides=(1, 0, 0, 0), extent=3)
    with pytest.raises(PMAGRangeError, match="outside"):
        list(addr_stream(prog))
    with pytest.raises(PMAGRangeError):
        stream_arrays(prog)


@st.composite
def programs(draw):
    R = tuple(draw(st.integers(1, 3)) for _ in range(7))
    mux = draw(st.sampled_from([C.CONV_FF_MUX, C.CONV_UP_MUX, C.FC_I_MUX, C.FC_C_MUX, C.MERGE_MUX,
                                C.ADDPAD_MUX, C.PARTITION_MUX]))
    strides = tuple(draw(st.integers(0, 20)) for _ in range(4))
    cmps = ()
    if draw(st.booleans()):
        j = draw(st.integers(1, 7))
        lo = draw(st.integers(0, R[j - 1]))
        cmps = (C.Comparator(f"r{j}", lo, draw(st.integers(lo, R[j - 1]))),)
    return C.make_program(R, mux, strides=strides, base=draw(st.integers(0, 9)), cmp=cmps,
                          cmp_mode=draw(st.sampled_from(["gate", "zero"])), const_r=draw(st.integers(0, 2)))


@settings(max_examples=150, deadline=None)
@given(programs())
def test_vectorised_stream_matches_generator(prog):
    evs = events(prog)
    lanes, addr, data = stream_arrays(prog)
    assert [e.lane for e in evs] == lanes.tolist()
    assert [e.addr for e in evs] == addr.tolist()
    assert [e.data for e in evs] == data.tolist()
    n, d = accepted_points(prog)
    assert (n, d) == (len(evs), sum(e.data for e in evs))


@settings(max_examples=100, deadline=None)
@given(programs())
def test_gated_points_never_emit(prog):
    if prog.cmp_mode != "gate" or not prog.cmp:
        return
    c = prog.cmp[0]
    idx = int(c.src[1]) - 1
    shape = prog.R
    for e in events(prog):
        rs = np.unravel_index(e.lane, shape)
        assert c.lo <= rs[idx] < c.hi


def test_addpad_plane_has_16_data_and_20_zero_points():
    one = C.StripLayout(C.RowPartition(1, 4, 1), 1, 4, halo=2, wpad=1)
    src = C.StripLayout(C.RowPartition(1, 4, 1), 1, 4)
    pairs = C.addpad_pairs(one, src, 1)
    assert len(pairs) == 1
    evs = events(pairs[0][1])
    grid = np.zeros((6, 6), dtype=int)
    for e in evs:
        grid[divmod(e.addr, 6)] = 1 if e.data else 2
    expect = np.full((6, 6), 2)
    expect[1:5, 1:5] = 1
    assert np.array_equal(grid, expect)
    assert sum(e.data for e in evs) == 16 and len(evs) == 36


def _fill_strip(strip, x):
    """Place tensor x (n, d, h, w) into strip pieces of an unpadded strip."""
    mem = {}
    for p in range(strip.part.pes):
        a = np.zeros(strip.footprint(p))
        for j, pc in enumerate(strip.part.pieces(p)):
            blk = x[pc.n, :, pc.h0:pc.h1, :]
            a[strip.bases(p)[j]:strip.bases(p)[j] + blk.size] = blk.ravel()
        mem[p] = a
    return mem


@pytest.mark.parametrize("pes", [2, 3, 4])
def test_merge_then_partition_is_identity(pes):
    rng = np.random.default_rng(pes)
    x = rng.normal(size=(3, 2, 5, 4))
    part = C.RowPartition(3, 5, pes)
    strip = C.StripLayout(part, 2, 4)
    mem = _fill_strip(strip, x)
    mem[pes] = np.zeros(x.size)
    merged = prep_exec("Merge", C.merge_pairs(strip, pes), mem)
    assert np.array_equal(merged[pes], x.ravel())
    back = prep_exec("Partition", C.partition_pairs(part, 2, 4, pes), merged,
                     {p: np.zeros_like(mem[p]) for p in range(pes)})
    for p in range(pes):
        assert np.array_equal(back[p], mem[p])


def test_partition_with_overlap_matches_slicing():
    x = np.arange(64, dtype=float).reshape(1, 1, 8, 8)
    part = C.RowPartition(1, 8, 4)
    pairs = C.partition_pairs(part, 1, 8, 4, overlap=1)
    dst = {p: np.zeros(sum(hi - lo for _, lo, hi, _ in C.overlap_windows(part, p, 1)) * 8) for p in range(4)}
    out = prep_exec("Partition", pairs, {4: x.ravel()}, dst)
    for p in range(4):
        lo, hi = max(0, 2 * p - 1), min(8, 2 * p + 3)
        assert np.array_equal(out[p], x[0, 0, lo:hi].ravel())
    assert [len(out[p]) // 8 for p in range(4)] == [3, 4, 4, 3]


@pytest.mark.parametrize("pes,k,pad", [(2, 3, 1), (3, 3, 1), (4, 5, 2), (3, 1, 0), (2, 3, 0)])
def test_addpad_then_removepad_is_identity(pes, k, pad):
    rng = np.random.default_rng(k + pes)
    n, d, h, w = 2, 2, 6, 5
    x = rng.normal(size=(n, d, h, w))
    net = conv_net(d, h, w, 2, k, pad, n)
    lay = C.plan_layout(net, small_cfg(pes))
    xs, src = lay.conv[0]["x"], lay.input_strip(0)
    mem = _fill_strip(src, x)
    padded = prep_exec("AddPad", C.addpad_pairs(xs, src, pad), mem,
                       {p: np.full(xs.footprint(p), np.nan) for p in range(pes)})
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for p in range(pes):
        got = padded[p]
        for j, pc in enumerate(xs.part.pieces(p)):
            pr = xs.piece_rows(pc)
            blk = xp[pc.n, :, pc.h0:pc.h0 + pr, :]
            b = xs.bases(p)[j]
            assert np.array_equal(got[b:b + blk.size], blk.ravel())
    removed = prep_exec("RemovePad", C.removepad_pairs(xs, pad), padded,
                        {p: np.full(xs.footprint(p), np.nan) for p in range(pes)})
    for p in range(pes):
        want = []
        for pc in xs.part.pieces(p):
            lo, hi = max(0, pc.h0 - pad), min(h, pc.h0 - pad + xs.piece_rows(pc))
            want.append(x[pc.n, :, lo:hi, :].ravel())
        got = removed[p][:sum(len(v) for v in want)]
        assert np.array_equal(got, np.concatenate(want))


def test_overlap_disagreement_is_error():
    a = C.make_program((2,), C.STREAM_MUX, strides=(1, 0, 0, 0), vault=0)
    b = C.make_program((2,), C.STREAM_MUX, strides=(1, 0, 0, 0), vault=1, direction="write")
    mem = {0: np.array([1.0, 2.0]), 1: np.zeros(2)}
    c = C.make_program((2,), C.STREAM_MUX, strides=(1, 0, 0, 0), base=0, vault=0, tag="c")
    mem[0] = np.array([1.0, 2.0, 9.0])
    c = C.make_program((2,), C.STREAM_MUX, strides=(2, 0, 0, 0), vault=0)
    with pytest.raises(PrepError, match="written with"):
        prep_exec("Merge", [([a], b), ([c], b)], mem)


def test_apply_lut():
    relu = build_lut("relu")
    neg = Q16_16.from_float(-np.linspace(0.1, 3, 10))
    assert not apply_lut(neg, relu).any()
    ident = build_lut("identity")
    vals = Q16_16.from_float(np.linspace(-2, 2, 9))
    assert np.array_equal(apply_lut(vals, ident), vals)
    sig = build_lut("sigmoid")
    xs = np.linspace(-3, 3, 101)
    got = Q16_16.to_float(apply_lut(Q16_16.from_float(xs), sig))
    step = (sig.hi - sig.lo) / sig.size
    assert np.max(np.abs(got - 1 / (1 + np.exp(-xs)))) <= step / 4 + 2 * Q16_16.lsb
    prog = C.make_program((3,), C.STREAM_MUX, strides=(1, 0, 0, 0))
    pairs = list(zip(events(prog), vals[:3].tolist()))
    out = apply_lut(pairs, relu)
    assert [e for e, _ in out] == [e for e, _ in pairs]


def test_trace_dump_format(tmp_path):
    prog = C.make_program((2,), C.STREAM_MUX, strides=(3, 0, 0, 0), vault=2, bits=16)
    with open(tmp_path / "t.txt", "w") as f:
        write_trace(addr_stream(prog), f)
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert lines == ["0 2 R 0x0", "1 2 R 0x3", "2 2 R 0xffff"]


@pytest.mark.parametrize("pes", [2, 3, 4])
@pytest.mark.parametrize("k,pad", [(3, 1), (3, 0), (1, 0)])
def test_conv_streams_match_loop_nests(pes, k, pad):
    d, h, w, no, n = 2, 5, 4, 3, 2
    net = conv_net(d, h, w, no, k, pad, n)
    lay = C.plan_layout(net, small_cfg(pes))
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    ff = C.emit_pmag(StepSpec("FF", 0, "ConvFF"), lay)
    assert events_multiset(ff.streams["x"], stream_arrays) == conv_read_multiset(n, ho, wo, d, k, k, w + 2 * pad,
                                                                                  pes, no)
    up = C.emit_pmag(StepSpec("UP", 0, "ConvUP"), lay)
    assert events_multiset(up.streams["x"], stream_arrays) == conv_read_multiset(n, ho, wo, d, k, k, w + 2 * pad,
                                                                                  pes, 1, up=True)
    pb = k - 1 - pad
    bp = C.emit_pmag(StepSpec("BP", 0, "ConvBP"), lay)
    assert events_multiset(bp.streams["dy"], stream_arrays) == conv_read_multiset(n, h, w, no, k, k, wo + 2 * pb,
                                                                                   pes, d)


@pytest.mark.parametrize("pes", [2, 3, 4])
def test_fc_streams_match_loop_nests(pes):
    inp, out, n = 6, 7, 3
    net = fc_net(inp, out, n)
    cfg = small_cfg(pes)
    lay = C.plan_layout(net, cfg)
    info = lay.fc[0]["w"]
    ff = C.emit_pmag(StepSpec("FF", 0, "FCFF"), lay)
    assert events_multiset(ff.streams["i"], stream_arrays) == fc_i_multiset(out, inp, n, pes, info["P"])
    assert events_multiset(ff.streams["c"], stream_arrays) == fc_c_multiset(out, inp, n, pes, info["P"], pes)
    bp = C.emit_pmag(StepSpec("BP", 0, "FCBP"), lay)
    assert events_multiset(bp.streams["i"], stream_arrays) == fc_i_multiset(inp, out, n, pes, info["Pb"])
    up = C.emit_pmag(StepSpec("UP", 0, "FCUP"), lay)
    ref = Counter()
    for rows_total, cols in ((out, inp), (inp, out)):
        chunk = -(-rows_total // pes)
        groups = cols // C.largest_divisor(cols, cfg.lanes)
        for p in range(pes):
            h = max(0, min(rows_total, (p + 1) * chunk) - p * chunk)
            for s in range(n):
                for o in range(h):
                    ref[(p, s * h + o)] += groups
    assert events_multiset(up.streams["i"], stream_arrays) == ref
