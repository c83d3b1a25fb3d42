import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from pimtrain.config import PowerTable, load_machine
from pimtrain.data import make_dataset
from pimtrain.machine import StepTrace, run_training
from pimtrain.metrics import (ScaleOutParams, derive_scaleout, energy, peak, report_json, report_text, scaleout,
                              summarize, sweep, sweep_text, throughput)
from pimtrain.netspec import bundled_network, parse_network
from pimtrain.timing import STALL_CAUSES

HMC1 = load_machine("hmc1")


def trace(cycles, macs=0, reads=0, writes=0, busy=None, bits=16):
    r = [0] * HMC1.vaults
    w = [0] * HMC1.vaults
    r[0], w[0] = reads, writes
    return StepTrace(0, "FF", 0, "FCFF", 0, "", bits, cycles, macs, r, w, 0, 0,
                     cycles if busy is None else busy, dict.fromkeys(STALL_CAUSES, 0))


def test_peaks():
    assert peak(HMC1, 16) == 4.8e12
    assert peak(HMC1, 32) == 2.4e12
    assert peak(load_machine("hmc2"), 16) == pytest.approx(9.92e12)


def test_throughput_formula():
    cyc = 1000
    t = trace(cyc, macs=cyc * 15 * 32 * 2)
    assert throughput(t, HMC1) == pytest.approx(peak(HMC1, 16))
    with pytest.raises(ValueError):
        throughput(trace(0), HMC1)


def test_dram_power_identity():
    e = energy([trace(int(HMC1.clock_hz), reads=int(68.5e9), busy=0)], HMC1.power, HMC1)
    assert e["dram_power"] == pytest.approx(68.5e9 * 8 * 3.7e-12)
    assert abs(e["dram_power"] - 2.03) / 2.03 < 0.005
    assert e["logic_energy"] == 0


def test_zero_traffic_zero_dram_energy():
    e = energy([trace(100, busy=10)], HMC1.power, HMC1)
    assert e["dram_energy"] == 0
    assert e["logic_energy"] == pytest.approx(HMC1.power.logic_die * 100 / HMC1.clock_hz)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10 ** 6),
                          st.integers(0, 1)), min_size=1, max_size=12),
       st.integers(0, 12))
def test_energy_is_additive(rows, cut):
    ts = [trace(c, macs=m, reads=b, busy=c * a) for c, m, b, a in rows]
    whole = energy(ts, HMC1.power, HMC1)
    a, b = energy(ts[:cut], HMC1.power, HMC1), energy(ts[cut:], HMC1.power, HMC1)
    for k in ("dram_energy", "logic_energy", "energy", "seconds"):
        assert whole[k] == pytest.approx(a[k] + b[k], rel=1e-12, abs=1e-18)


def test_power_table_validation():
    with pytest.raises(ValueError):
        PowerTable(pe=-1.0)
    low = PowerTable(logic_die=1.0)
    with pytest.raises(ValueError):
        energy([trace(10)], low, HMC1)
    assert HMC1.power.logic_die >= HMC1.power.logic_parts(HMC1.pes, HMC1.vaults)


def test_scaleout_worked_example():
    r = scaleout(ScaleOutParams(4, 63.1e-3, 42.4e-3, 4.61e-3))
    assert r["latency"] == pytest.approx(0.26958, rel=1e-12)
    assert r["images_per_s"] == pytest.approx(4 * 32 / 0.26958)


def test_scaleout_single_module_is_t1():
    assert scaleout(ScaleOutParams(1, 0.05, 0.0, 0.0))["latency"] == 0.05


def test_scaleout_rejects_bad_params():
    for bad in ((0, 1.0, 0, 0), (1, 0.0, 0, 0), (1, 1.0, -1, 0)):
        with pytest.raises(ValueError):
            ScaleOutParams(*bad)


pos = st.floats(1e-4, 1.0)


@given(n=st.integers(1, 64), t1=pos, up=pos, link=pos, which=st.integers(0, 3), bump=st.floats(1e-3, 1.0))
def test_scaleout_latency_monotone(n, t1, up, link, which, bump):
    base = [n, t1, up, link]
    more = list(base)
    more[which] = more[which] + (1 if which == 0 else bump)
    assert scaleout(ScaleOutParams(*more))["latency"] > scaleout(ScaleOutParams(*base))["latency"]


@given(t1=pos, n=st.integers(1, 63))
def test_images_per_second_grows_with_n_without_host_cost(t1, n):
    a = scaleout(ScaleOutParams(n, t1, 0.0, 0.0))["images_per_s"]
    b = scaleout(ScaleOutParams(n + 1, t1, 0.0, 0.0))["images_per_s"]
    assert b > a


def test_sweep_saturates_under_host_cost():
    t_up, t_link = derive_scaleout()
    assert t_up == pytest.approx(42.4e-3, rel=0.01)
    assert t_link == pytest.approx(4.61e-3, rel=0.01)
    rows = sweep(63.1e-3, t_up, t_link)
    ips = [r["images_per_s"] for r in rows]
    assert all(b > a for a, b in zip(ips, ips[1:]))
    limit = 32 / (t_up + 2 * t_link)
    assert ips[-1] < limit and ips[-1] > 0.95 * limit
    text = sweep_text(rows)
    assert len(text.splitlines()) == 65


def test_summary_reports():
    net = parse_network(bundled_network("mlp"))
    data, _ = make_dataset(net, 0, 2)
    res = run_training(net, data, 1, HMC1, seed=0)
    s = summarize(res.traces, HMC1)
    assert s["macs"] == sum(t.macs for t in res.traces)
    assert s["throughput"] <= s["peak_16"]
    assert s["dram_energy"] > 0 and s["logic_energy"] > 0
    assert s["gflops_per_w"] > 0
    for d in s["by_op"].values():
        assert d["utilization"] <= 1.0
    assert json.loads(report_json(s)) == json.loads(json.dumps(s))
    assert set(s["power"]) == {f.name for f in dataclasses.fields(PowerTable)}
    text = report_text(s)
    assert "gflops_per_w" in text and "FF:FCFF" in text


def test_per_trace_throughput_never_exceeds_peak():
    net = parse_network(bundled_network("alexnet_like"))
    data, _ = make_dataset(net, 0, 1)
    res = run_training(net, data, 1, HMC1, seed=0)
    for t in res.traces:
        if t.cycles:
            assert throughput(t, HMC1) <= peak(HMC1, t.bits) * (1 + 1e-12)
