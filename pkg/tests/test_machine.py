import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimtrain import goldref as G
from pimtrain.compiler import compile_network
from pimtrain.config import MachineConfig, load_machine
from pimtrain.data import make_dataset, stream
from pimtrain.machine import DeadlockError, Machine, run_training, trace_rows
from pimtrain.netspec import bundled_network, parse_network
from pimtrain.schedule import build_schedule
from pimtrain.timing import STALL_CAUSES, Schedule, Tile, simulate

from oracles import conv_net, fc_net, fixed32_mlp_oracle, small_cfg

HMC1 = load_machine("hmc1")


def bundled(name, **modes):
    net = parse_network(bundled_network(name))
    return net.with_modes(**modes) if modes else net


def float_net(name):
    return bundled(name, ff="float", bp="float", up="float")


def step_timing(net, op, cfg=HMC1, phase=None):
    comp = compile_network(net, cfg)
    for cs in comp.steps:
        if cs.spec.op == op and (phase is None or cs.spec.phase == phase):
            return cs.spec, simulate(build_schedule(cs.spec, comp.layout), cfg), comp
    raise LookupError(op)


# ---------------------------------------------------------------- functional equivalence

@pytest.mark.parametrize("name", ["toy_mlp", "mlp", "gru", "cnn_rnn"])
def test_float_mode_bit_matches_reference(name):
    net = float_net(name)
    data, _ = make_dataset(net, 1, 3)
    res = run_training(net, data, 1, HMC1, seed=1, timing=False)
    ref = G.init_params(net, stream(1, "weights"))
    losses = []
    for x, t in data:
        ref, loss = G.train_step(net, ref, x, t)
        losses.append(loss)
    assert res.losses == losses
    for i, p in ref.items():
        got = res.params[i]
        if isinstance(p, dict):
            for m in p:
                assert np.array_equal(got[m], p[m]), (i, m)
        else:
            assert np.array_equal(got, p), i


def test_float_conv_net_bit_matches_reference():
    net = parse_network("input shape=8x8x2\nconv kernels=4 kernel=3x3\nact fn=relu\nmaxpool r=2\n"
                        "fc out=3\nloss fn=softmax_ce\ntrain batch=4 lr=0.1 modes=ff:float,bp:float,up:float\n")
    data, _ = make_dataset(net, 2, 2)
    res = run_training(net, data, 1, HMC1, seed=2, timing=False)
    ref = G.init_params(net, stream(2, "weights"))
    for x, t in data:
        ref, _ = G.train_step(net, ref, x, t)
    for i in ref:
        assert np.array_equal(res.params[i], ref[i])


def test_fixed32_matches_wide_integer_oracle():
    net = bundled("toy_mlp", ff="fixed32", bp="fixed32", up="fixed32")
    data, _ = make_dataset(net, 3, 10)
    res = run_training(net, data, 1, HMC1, seed=3, timing=False)
    p = G.init_params(net, stream(3, "weights"))
    w0, w2 = fixed32_mlp_oracle(p[0], p[2], data, net.lr)
    assert np.array_equal(res.machine.w[0], np.array(w0))
    assert np.array_equal(res.machine.w[2], np.array(w2))
    assert np.array_equal(res.machine.wt[0].T, res.machine.w[0])


@pytest.mark.parametrize("mode", ["float", "fixed32", "fixed32sr", "fixed16"])
def test_zero_learning_rate_leaves_weights(mode):
    net = dataclasses.replace(bundled("mlp", ff=mode, bp=mode, up=mode), lr=0.0)
    data, _ = make_dataset(net, 4, 2)
    m = Machine(net, HMC1, seed=4, timing=False)
    before = {i: a.copy() for i, a in m.w.items()}
    for x, t in data:
        m.train_batch(x, t)
    for i in before:
        assert np.array_equal(m.w[i], before[i])


def test_timing_does_not_change_results():
    net = bundled("mlp")
    data, _ = make_dataset(net, 5, 2)
    a = run_training(net, data, 1, HMC1, seed=5, timing=True)
    b = run_training(net, data, 1, HMC1, seed=5, timing=False)
    assert a.losses == b.losses
    for i in a.params:
        assert np.array_equal(a.params[i], b.params[i])
    assert [t.macs for t in a.traces] == [t.macs for t in b.traces]


def test_training_is_deterministic():
    net = bundled("cnn_rnn")
    data, _ = make_dataset(net, 6, 2)
    a = run_training(net, data, 1, HMC1, seed=6)
    b = run_training(net, data, 1, HMC1, seed=6)
    assert a.losses == b.losses
    assert trace_rows(a.traces) == trace_rows(b.traces)


def test_sr_variants_differ_but_agree_closely():
    net = bundled("mlp", ff="fixed32sr", bp="fixed32sr", up="fixed32sr")
    data, _ = make_dataset(net, 7, 4)
    lo = run_training(net, data, 1, HMC1, seed=7, timing=False)
    full = run_training(net, data, 1, dataclasses.replace(HMC1, sr_variant="full"), seed=7, timing=False)
    diff = max(np.abs(lo.params[i] - full.params[i]).max() for i in lo.params)
    assert 0 < diff < 1e-3


def test_fixed16_counts_saturations():
    net = bundled("mlp", ff="fixed16", bp="fixed16", up="fixed16")
    data, _ = make_dataset(net, 8, 1, offset=200.0)
    res = run_training(net, data, 1, HMC1, seed=8, timing=False)
    assert sum(t.saturations for t in res.traces) > 0


def test_bad_batch_shape_is_rejected():
    m = Machine(bundled("toy_mlp"), HMC1, timing=False)
    with pytest.raises(ValueError):
        m.begin(np.zeros((3, 8)), np.zeros((3, 2)))


# ---------------------------------------------------------------- timing invariants

def _check_conservation(tm, cfg, bits):
    pairs = 2 if bits == 16 else 1
    assert tm.cycles >= math.ceil(tm.macs / (cfg.lanes * pairs * cfg.pes))
    assert tm.cycles * cfg.pes >= tm.busy
    busiest = max(max(r + w for r, w in zip(tm.reads[:cfg.pes], tm.writes[:cfg.pes])),
                  tm.bcast + tm.merged)
    assert tm.cycles >= math.ceil(busiest / cfg.bytes_per_cycle)
    assert cfg.pes * tm.cycles == tm.busy + sum(tm.stalls.values())
    assert set(tm.stalls) == set(STALL_CAUSES)


@pytest.mark.parametrize("name", ["alexnet_like", "gru", "cnn_rnn", "mlp"])
def test_work_conservation_every_step(name):
    net = bundled(name)
    data, _ = make_dataset(net, 9, 1)
    m = Machine(net, HMC1, seed=9)
    _, traces = m.train_batch(*data[0])
    for cs in m.comp.steps:
        tm = m.step_timing(cs)
        ph = {"FF": "ff", "BP": "bp", "UP": "up"}.get(cs.spec.phase, "ff")
        _check_conservation(tm, HMC1, net.mode(ph).bits)
    assert all(t.cycles > 0 for t in traces)


@settings(max_examples=25, deadline=None)
@given(inp=st.integers(8, 300), out=st.integers(1, 200), batch=st.sampled_from([1, 4, 32]),
       pes=st.integers(1, 6))
def test_fc_mac_count_is_exact(inp, out, batch, pes):
    cfg = small_cfg(pes)
    net = fc_net(inp, out, batch)
    _, tm, _ = step_timing(net, "FCFF", cfg)
    assert tm.macs == batch * inp * out
    _check_conservation(tm, cfg, 16)
    # gradient MACs plus one update multiply per weight, for the matrix and its transposed mirror
    _, tm, _ = step_timing(net, "FCUP", cfg)
    assert tm.macs == 2 * (batch + 1) * inp * out
    _check_conservation(tm, cfg, 32)


@settings(max_examples=15, deadline=None)
@given(d=st.integers(1, 4), h=st.integers(3, 12), no=st.integers(1, 8), k=st.sampled_from([1, 3]),
       batch=st.sampled_from([1, 2, 4]), pes=st.integers(1, 5))
def test_conv_mac_count_is_exact(d, h, no, k, batch, pes):
    cfg = small_cfg(pes)
    net = conv_net(d, h, h, no, k, k // 2, batch)
    spec, tm, _ = step_timing(net, "ConvFF", cfg)
    assert tm.macs == batch * h * h * no * d * k * k
    _check_conservation(tm, cfg, 16)


def test_broadcast_atomicity_and_double_buffering():
    net = conv_net(16, 32, 32, 32, 3, 1, 32)
    comp = compile_network(net, HMC1)
    cs = next(c for c in comp.steps if c.spec.op == "ConvFF")
    sched = build_schedule(cs.spec, comp.layout)
    probe = []
    simulate(sched, HMC1, probe)
    sim = probe[0]
    log = sorted(sim.bus_log)
    for (s0, e0, *_), (s1, _, *_) in zip(log, log[1:]):
        assert s1 >= e0  # the bus carries one transfer at a time
    starts = {c: s for s, _, kind, c in log if kind == "bcast"}
    for c, users in sim.chunk_users.items():
        for p, j in users:
            # a chunk goes out once, only when every receiving half is free
            assert j < 2 or sim.comp_done[p][j - 2] <= starts[c]
            assert sim.comp_start[p][j] >= sim.chunk_done[c]
    for p, ts in enumerate(sched.tiles):
        for j in range(2, len(ts)):
            assert sim.fill_start[p][j] >= sim.comp_done[p][j - 2]
            assert sim.comp_start[p][j] >= sim._drained(p, j - 2)


def test_crossed_broadcast_order_deadlocks():
    # PE0 needs A before B, PE1 needs B before A, two tiles apart: neither chunk can find free halves
    sched = Schedule([[Tile(10, chunks=("A",)), Tile(10), Tile(10, chunks=("B",))],
                      [Tile(10, chunks=("B",)), Tile(10), Tile(10, chunks=("A",))]],
                     chunks={"A": 64, "B": 64})
    with pytest.raises(DeadlockError, match="chunk"):
        simulate(sched, small_cfg(2))


def test_deadlock_budget_bounds_silent_stretches():
    sched = Schedule([[Tile(50_000), Tile(1), Tile(1, chunks=("A",))]], chunks={"A": 64})
    assert simulate(sched, small_cfg(1)).cycles >= 50_000
    with pytest.raises(DeadlockError, match="no progress"):
        simulate(sched, dataclasses.replace(small_cfg(1), deadlock_budget=100))


def test_conv_ff_sustains_peak():
    net = conv_net(16, 32, 32, 32, 3, 1, 32)
    _, tm, _ = step_timing(net, "ConvFF")
    util = 2 * tm.macs / (tm.cycles / HMC1.clock_hz) / HMC1.peak_ops(16)
    assert util >= 0.85


def test_large_fc_ff_sustains_peak():
    net = fc_net(4096, 3840, 32)
    _, tm, _ = step_timing(net, "FCFF")
    assert 2 * tm.macs / (tm.cycles / HMC1.clock_hz) / HMC1.peak_ops(16) >= 0.85


def test_tiny_fc_bp_stalls_on_writeback():
    net = parse_network("input shape=4096\nfc out=10\nfc out=10\nloss fn=mse\ntrain batch=32\n")
    comp = compile_network(net, HMC1)
    cs = next(c for c in comp.steps if c.spec.op == "FCBP" and c.spec.layer == 1)
    tm = simulate(build_schedule(cs.spec, comp.layout), HMC1)
    assert tm.stalls["writeback"] > 0


def test_hmc2_preset_runs():
    net = bundled("mlp")
    data, _ = make_dataset(net, 0, 1)
    res = run_training(net, data, 1, load_machine("hmc2"), seed=0)
    assert all(len(t.reads) == 32 for t in res.traces)


def test_machine_config_validation():
    with pytest.raises(ValueError):
        MachineConfig(vaults=16, pes=14)
    with pytest.raises(ValueError):
        MachineConfig(sr_variant="mid")
