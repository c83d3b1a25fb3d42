"""Throughput, energy and multi-module scale-out figures computed from step traces."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .config import MachineConfig, PowerTable
from .timing import STALL_CAUSES

__all__ = ["PowerTable", "ScaleOutParams", "peak", "throughput", "energy", "summarize", "scaleout",
           "derive_scaleout", "sweep", "report_json", "report_text", "sweep_text"]


def peak(cfg: MachineConfig, bits: int = 16) -> float:
    """Ops/s with every lane busy; multiply and add count as two ops."""
    return cfg.peak_ops(bits)


def throughput(trace, cfg: MachineConfig) -> float:
    if trace.cycles <= 0:
        raise ValueError("throughput of a zero-cycle trace")
    return 2 * trace.macs / (trace.cycles / cfg.clock_hz)


def _check_power(table: PowerTable, cfg: MachineConfig) -> None:
    parts = table.logic_parts(cfg.pes, cfg.vaults)
    if table.logic_die < parts - 1e-12:
        raise ValueError(f"logic-die power {table.logic_die} W is below the sum of its parts {parts:.4f} W")


def energy(traces, table: PowerTable, cfg: MachineConfig) -> dict:
    """DRAM energy from bits moved; logic energy as logic-die power over active steps (idle steps cost nothing)."""
    _check_power(table, cfg)
    bits = 8 * sum(t.dram_bytes for t in traces)
    dram = bits * table.dram_pj_per_bit * 1e-12
    active = sum(t.cycles for t in traces if t.busy > 0) / cfg.clock_hz
    logic = table.logic_die * active
    seconds = sum(t.cycles for t in traces) / cfg.clock_hz
    ops = sum(t.ops for t in traces)
    total = dram + logic
    return {
        "dram_energy": dram,
        "logic_energy": logic,
        "energy": total,
        "seconds": seconds,
        "dram_power": dram / seconds if seconds else 0.0,
        "average_power": total / seconds if seconds else 0.0,
        "gflops_per_w": ops / total / 1e9 if total else 0.0,
    }


def summarize(traces, cfg: MachineConfig, table: PowerTable | None = None) -> dict:
    """Whole-run report plus a per-operation breakdown; field names follow StepTrace and PowerTable."""
    table = table or cfg.power
    cycles = sum(t.cycles for t in traces)
    macs = sum(t.macs for t in traces)
    out = {
        "machine": cfg.name,
        "steps": len(traces),
        "cycles": cycles,
        "macs": macs,
        "ops": 2 * macs,
        "busy": sum(t.busy for t in traces),
        "stalls": {c: sum(t.stalls[c] for t in traces) for c in STALL_CAUSES},
        "dram_bytes": sum(t.dram_bytes for t in traces),
        "bcast": sum(t.bcast for t in traces),
        "merged": sum(t.merged for t in traces),
        "saturations": sum(t.saturations for t in traces),
        "throughput": 2 * macs / (cycles / cfg.clock_hz) if cycles else 0.0,
        "peak_16": peak(cfg, 16),
        "peak_32": peak(cfg, 32),
        "power": asdict(table),
    }
    out.update(energy(traces, table, cfg))
    by_op: dict = {}
    for t in traces:
        key = f"{t.phase}:{t.op}"
        d = by_op.setdefault(key, {"steps": 0, "cycles": 0, "macs": 0, "bits": t.bits,
                                   "stalls": dict.fromkeys(STALL_CAUSES, 0)})
        d["steps"] += 1
        d["cycles"] += t.cycles
        d["macs"] += t.macs
        for c in STALL_CAUSES:
            d["stalls"][c] += t.stalls[c]
    for d in by_op.values():
        d["throughput"] = 2 * d["macs"] / (d["cycles"] / cfg.clock_hz) if d["cycles"] else 0.0
        d["utilization"] = d["throughput"] / peak(cfg, d["bits"])
    out["by_op"] = by_op
    return out


# ---------------------------------------------------------------- scale-out

@dataclass(frozen=True)
class ScaleOutParams:
    n: int  # modules
    t1: float  # per-minibatch training latency of one module (s)
    t_up: float  # host update time per module gradient (s)
    t_link: float  # one-way module-host transfer (s)
    batch: int = 32

    def __post_init__(self):
        if self.n < 1 or self.t1 <= 0 or self.t_up < 0 or self.t_link < 0 or self.batch < 1:
            raise ValueError("scale-out needs n >= 1, t1 > 0, nonnegative host and link times, batch >= 1")


def scaleout(p: ScaleOutParams) -> dict:
    """Synchronous data-parallel step: every module trains, the host applies each gradient, round trip per module."""
    total = p.t1 + p.n * p.t_up + 2 * p.n * p.t_link
    return {"n": p.n, "latency": total, "images_per_s": p.n * p.batch / total}


def derive_scaleout(params: float = 138e6, host_flops: float = 326e9, link_bw: float = 240e9,
                    ops_per_param: float = 100.0, bytes_per_param: float = 8.0) -> tuple:
    """(T_up, T_link) from model size, host compute and link bandwidth."""
    return params * ops_per_param / host_flops, params * bytes_per_param / link_bw


def sweep(t1: float, t_up: float, t_link: float, ns=range(1, 65), batch: int = 32) -> list:
    return [scaleout(ScaleOutParams(n, t1, t_up, t_link, batch)) for n in ns]


# ---------------------------------------------------------------- reports

def report_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def _table(head: list, rows: list) -> str:
    cells = [head] + [[str(c) for c in r] for r in rows]
    width = [max(len(r[j]) for r in cells) for j in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, width)) for r in cells) + "\n"


def report_text(summary: dict) -> str:
    lines = []
    for k in ("machine", "steps", "cycles", "macs", "ops", "seconds", "throughput", "peak_16", "peak_32",
              "dram_bytes", "dram_energy", "logic_energy", "energy", "average_power", "gflops_per_w",
              "saturations"):
        v = summary[k]
        lines.append(f"{k:<16}{v:.6g}" if isinstance(v, float) else f"{k:<16}{v}")
    for c in STALL_CAUSES:
        lines.append(f"{'stalls.' + c:<16}{summary['stalls'][c]}")
    head = ["step", "bits", "steps", "cycles", "macs", "throughput", "utilization", *STALL_CAUSES]
    rows = [[k, d["bits"], d["steps"], d["cycles"], d["macs"], f"{d['throughput']:.4g}", f"{d['utilization']:.3f}",
             *(d["stalls"][c] for c in STALL_CAUSES)] for k, d in summary["by_op"].items()]
    return "\n".join(lines) + "\n\n" + _table(head, rows)


def sweep_text(rows: list) -> str:
    return _table(["n", "latency_ms", "images_per_s"],
                  [[r["n"], f"{r['latency'] * 1e3:.2f}", f"{r['images_per_s']:.1f}"] for r in rows])
