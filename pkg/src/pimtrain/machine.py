"""The modeled accelerator: functional execution of compiled steps plus their timing."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import goldref as G
from .compiler import Compiled, CompiledStep, compile_network, step_key
from .config import MachineConfig
from .data import stream
from .netspec import NetworkSpec, render_network
from .numops import Acc, Num, SRBank
from .schedule import build_schedule
from .snapshot import Tensor, save_snapshot
from .timing import STALL_CAUSES, DeadlockError, StepTiming, simulate

__all__ = ["StepTrace", "Machine", "TrainResult", "run_training", "write_artifacts", "DeadlockError"]


@dataclass
class StepTrace:
    index: int
    phase: str
    layer: int
    op: str
    t: int
    sub: str
    bits: int
    cycles: int
    macs: int
    reads: list
    writes: list
    bcast: int
    merged: int
    busy: int
    stalls: dict
    saturations: int = 0

    @property
    def ops(self) -> int:
        """Multiplies and adds counted separately."""
        return 2 * self.macs

    @property
    def dram_bytes(self) -> int:
        return sum(self.reads) + sum(self.writes)


TRACE_FIELDS = ["index", "phase", "layer", "op", "t", "sub", "bits", "cycles", "macs", "bcast", "merged", "busy",
                *STALL_CAUSES, "saturations", "reads", "writes"]


def trace_rows(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for tr in traces:
        w.writerow([tr.index, tr.phase, tr.layer, tr.op, tr.t, tr.sub, tr.bits, tr.cycles, tr.macs, tr.bcast,
                    tr.merged, tr.busy, *(tr.stalls[c] for c in STALL_CAUSES), tr.saturations,
                    ":".join(map(str, tr.reads)), ":".join(map(str, tr.writes))])
    return buf.getvalue()


class Machine:
    """One accelerator instance holding compiled programs, master weights and SR state."""

    def __init__(self, net: NetworkSpec, cfg: MachineConfig, seed: int = 0, params: dict | None = None,
                 timing: bool = True):
        self.net, self.cfg, self.seed, self.timing = net, cfg, seed, timing
        self.comp: Compiled = compile_network(net, cfg)
        self.bank = SRBank(seed, cfg.sr_variant, cfg.lanes)
        self.num = {ph: Num(net.mode(ph), self.bank, cfg.pes, cfg.lanes) for ph in ("ff", "bp", "up")}
        if params is None:
            params = G.init_params(net, stream(seed, "weights"))
        up = self.num["up"]
        self.w, self.wt = {}, {}
        for i, p in params.items():
            if isinstance(p, dict):
                self.w[i] = {m: up.enc(a) for m, a in p.items()}
                self.wt[i] = {m: a.T.copy() for m, a in self.w[i].items()}
            else:
                self.w[i] = up.enc(p)
                if p.ndim == 2:
                    self.wt[i] = self.w[i].T.copy()
        self._timing: dict = {}
        self._index = 0

    # ------------------------------------------------------------ weights

    def params(self) -> dict:
        """Master weights decoded to float."""
        up = self.num["up"]
        return {i: ({m: up.dec(a) for m, a in p.items()} if isinstance(p, dict) else up.dec(p))
                for i, p in self.w.items()}

    def _ff_w(self, i, m=None):
        w = self.w[i] if m is None else self.w[i][m]
        return self.num["ff"].cast(w, self.num["up"])

    def _bp_wt(self, i, m=None):
        w = self.wt[i] if m is None else self.wt[i][m]
        return self.num["bp"].cast(w, self.num["up"])

    # ------------------------------------------------------------ functional steps

    def begin(self, x: np.ndarray, target: np.ndarray) -> None:
        if x.shape[1:] != tuple(self.net.input_shape) or x.shape[0] != self.net.batch:
            raise ValueError(f"batch shape {x.shape} != ({self.net.batch}, *{self.net.input_shape})")
        self.inp = {0: self.num["ff"].enc(x)}
        self.out, self.ids, self.rnn, self.dY, self.rnn_dw = {}, {}, {}, {}, {}
        self.target, self.g, self.loss = target, None, None

    def _set_out(self, i: int, y) -> None:
        ff = self.num["ff"]
        layers = self.net.layers
        self.out[i] = y
        j = i + 1
        while j < len(layers) and layers[j].kind == "act":
            self.inp[j] = y
            y = ff.act(layers[j].fn, y)
            self.out[j] = y
            j += 1
        self.inp[j] = y

    def _bp_acts(self, j: int) -> None:
        """Apply activation derivatives of act layers at and below j (fused into the writeback)."""
        bp, ff = self.num["bp"], self.num["ff"]
        layers = self.net.layers
        while j >= 0 and layers[j].kind == "act":
            self.dY[j] = self.g
            self.g = bp.mul(self.g, bp.act_d(layers[j].fn, bp.cast(self.out[j], ff)))
            j -= 1

    def execute(self, spec) -> None:
        """Functional effect of one step on the batch state."""
        ff, bp, up = self.num["ff"], self.num["bp"], self.num["up"]
        net, k = self.net, self.net.batch
        i, op = spec.layer, spec.op
        l = net.layers[i]
        if spec.phase == "Prep":
            return  # data movement only; tensors are tracked logically
        if op == "ConvFF":
            self._set_out(i, ff.conv(self.inp[i], self._ff_w(i), l.pad))
        elif op == "Pool":
            y, self.ids[i] = ff.pool(self.inp[i], l.r)
            self._set_out(i, y)
        elif op == "FCFF":
            if l.kind == "fc":
                self._set_out(i, ff.fc(self.inp[i].reshape(k, -1), self._ff_w(i)))
            elif spec.t == 0 and spec.sub == l.matrices[0]:
                self._set_out(i, self._rnn_forward(i, l))
        elif op == "LossEval":
            y = self.inp[i]
            self.loss = G.loss_value(l.fn, ff.dec(y), self.target)
            self.g = bp.loss_grad(l.fn, bp.cast(y, ff), self.target)
            self.dY[i] = self.g
            self._bp_acts(i - 1)
        elif op == "ConvBP":
            self.dY[i] = self.g
            self.g = bp.conv_t(self.g, self._bp_wt_conv(i), l.pad)
            self._bp_acts(i - 1)
        elif op == "PoolBP":
            self.dY[i] = self.g
            self.g = bp.pool_t(self.g, self.ids[i], l.r)
            self._bp_acts(i - 1)
        elif op == "FCBP":
            if l.kind == "fc":
                self.dY[i] = self.g
                self.g = bp.fc(self.g.reshape(k, -1), self._bp_wt(i)).reshape(self.inp[i].shape)
                self._bp_acts(i - 1)
            elif spec.t == l.steps - 1 and spec.sub == self._first_bp_sub(l):
                self.dY[i] = self.g
                self.g = self._rnn_backward(i, l)
                self._bp_acts(i - 1)
        elif op == "ConvUP":
            s = up.up_conv(up.cast(self.inp[i], ff), up.cast(self.dY[i], bp), l.kh, l.kw, l.pad)
            self.w[i] = up.update(self.w[i], s, k, net.lr, split=False)
        elif op == "FCUP":
            if l.kind == "fc":
                s = up.up_fc(up.cast(self.inp[i].reshape(k, -1), ff), up.cast(self.dY[i].reshape(k, -1), bp))
                self.w[i], self.wt[i] = self._update_pair(self.w[i], self.wt[i], s)
            else:
                for m in l.matrices:
                    self.w[i][m], self.wt[i][m] = self._update_pair(self.w[i][m], self.wt[i][m], self.rnn_dw[i][m])
        else:
            raise ValueError(f"no functional model for {op}")

    def _bp_wt_conv(self, i):
        return self.num["bp"].cast(self.w[i], self.num["up"])

    @staticmethod
    def _first_bp_sub(l) -> str:
        return "gate" if l.cell == "gru" else l.matrices[-1]

    def _update_pair(self, w, wt, s):
        """Update a matrix and its transposed mirror; each copy rounds with its own PEs' generators."""
        up, k, lr = self.num["up"], self.net.batch, self.net.lr
        st = Acc(s.v.T.copy(), s.frac) if up.fixed else s.T
        return up.update(w, s, k, lr), up.update(wt, st, k, lr)

    # ------------------------------------------------------------ recurrent cells

    def _rnn_inputs(self, l, x):
        x = x.reshape(x.shape[0], -1)
        if l.feed == "repeat":
            return [x] * l.steps
        return [x[:, t * l.inp:(t + 1) * l.inp] for t in range(l.steps)]

    def _rnn_forward(self, i, l):
        ff = self.num["ff"]
        p = {m: self._ff_w(i, m) for m in l.matrices}
        xs = self._rnn_inputs(l, self.inp[i])
        h = ff.enc(np.zeros((self.net.batch, l.hidden)))
        cache = []
        for t in range(l.steps):
            if l.cell == "elman":
                z = ff.add(ff.fc(xs[t], p["wx"]), ff.fc(h, p["uh"]))
                hn = ff.act("tanh", z)
                cache.append({"h": h, "hn": hn})
            else:
                zg = ff.act("sigmoid", ff.add(ff.fc(xs[t], p["wz"]), ff.fc(h, p["uz"])))
                rg = ff.act("sigmoid", ff.add(ff.fc(xs[t], p["wr"]), ff.fc(h, p["ur"])))
                rh = ff.mul(rg, h)
                c = ff.act("tanh", ff.add(ff.fc(xs[t], p["wh"]), ff.fc(rh, p["uh"])))
                hn = ff.add(ff.mul(ff.one_minus(zg), h), ff.mul(zg, c))
                cache.append({"h": h, "z": zg, "r": rg, "rh": rh, "c": c, "hn": hn})
            h = hn
        self.rnn[i] = {"xs": xs, "steps": cache}
        return h

    def _rnn_backward(self, i, l):
        ff, bp, up = self.num["ff"], self.num["bp"], self.num["up"]
        pt = {m: self._bp_wt(i, m) for m in l.matrices}
        cache = self.rnn[i]
        xs = [bp.cast(x, ff) for x in cache["xs"]]
        n = self.g.shape[0]
        dws = {m: up.acc_zero(self.w[i][m].shape) for m in l.matrices}

        def acc(m, x, d):
            dws[m] = up.acc_add(dws[m], up.up_fc(up.cast(x, bp), up.cast(d, bp)))

        dxs = [None] * l.steps
        dh = self.g
        for t in range(l.steps - 1, -1, -1):
            st = {key: bp.cast(v, ff) for key, v in cache["steps"][t].items()}
            h = st["h"]
            if l.cell == "elman":
                dz = bp.mul(dh, bp.act_d("tanh", st["hn"]))
                acc("wx", xs[t], dz)
                acc("uh", h, dz)
                dxs[t] = bp.fc(dz, pt["wx"])
                dh = bp.fc(dz, pt["uh"])
            else:
                zg, rg, c = st["z"], st["r"], st["c"]
                dc = bp.mul(dh, zg)
                dzg = bp.mul(dh, bp.sub(c, h))
                dhp = bp.mul(dh, bp.one_minus(zg))
                dac = bp.mul(dc, bp.act_d("tanh", c))
                drh = bp.fc(dac, pt["uh"])
                dr = bp.mul(drh, h)
                dhp = bp.add(dhp, bp.mul(drh, rg))
                dar = bp.mul(dr, bp.act_d("sigmoid", rg))
                daz = bp.mul(dzg, bp.act_d("sigmoid", zg))
                acc("wh", xs[t], dac)
                acc("uh", st["rh"], dac)
                acc("wr", xs[t], dar)
                acc("ur", h, dar)
                acc("wz", xs[t], daz)
                acc("uz", h, daz)
                dxs[t] = bp.add(bp.add(bp.fc(dac, pt["wh"]), bp.fc(dar, pt["wr"])), bp.fc(daz, pt["wz"]))
                dh = bp.add(bp.add(dhp, bp.fc(dar, pt["ur"])), bp.fc(daz, pt["uz"]))
        if l.feed == "repeat":
            dx = dxs[0]
            for t in range(1, l.steps):
                dx = bp.add(dx, dxs[t])
        else:
            dx = np.concatenate(dxs, axis=1)
        self.rnn_dw[i] = dws
        return dx.reshape((n,) + tuple(l.in_shape))

    # ------------------------------------------------------------ steps

    def step_timing(self, cs: CompiledStep) -> StepTiming:
        key = step_key(cs.spec)
        if key not in self._timing:
            sched = build_schedule(cs.spec, self.comp.layout)
            if self.timing:
                try:
                    self._timing[key] = simulate(sched, self.cfg)
                except DeadlockError as e:
                    raise DeadlockError(f"step {cs.spec.phase} {cs.spec.op} layer {cs.spec.layer}: {e}") from None
            else:
                macs = sum(t.macs for ts in sched.tiles for t in ts)
                z = [0] * self.cfg.vaults
                self._timing[key] = StepTiming(0, 0, dict.fromkeys(STALL_CAUSES, 0), z, z, 0, 0, macs, 0)
        return self._timing[key]

    def run_step(self, cs: CompiledStep) -> StepTrace:
        before = sum(n.saturations for n in self.num.values())
        self.execute(cs.spec)
        sat = sum(n.saturations for n in self.num.values()) - before
        tm = self.step_timing(cs)
        s = cs.spec
        ph = {"FF": "ff", "BP": "bp", "UP": "up"}.get(s.phase, "bp" if s.op == "Partition" else "ff")
        bits = 16 if self.net.mode(ph).bits == 16 else 32
        tr = StepTrace(self._index, s.phase, s.layer, s.op, s.t, s.sub, bits, tm.cycles, tm.macs, list(tm.reads),
                       list(tm.writes), tm.bcast, tm.merged, tm.busy, dict(tm.stalls), sat)
        self._index += 1
        return tr

    def train_batch(self, x: np.ndarray, target: np.ndarray) -> tuple:
        """FF, loss, BP and UP over one minibatch; returns (loss before the update, traces)."""
        self.begin(x, target)
        traces = [self.run_step(cs) for cs in self.comp.steps]
        return self.loss, traces

    def predict(self, x: np.ndarray) -> np.ndarray:
        """FF only, in the FF numeric mode, batched by the network batch size; returns float scores."""
        k = self.net.batch
        ff = self.num["ff"]
        outs = []
        for b in range(0, len(x), k):
            xb = x[b:b + k]
            pad = k - len(xb)
            if pad:
                xb = np.concatenate([xb, np.zeros((pad,) + xb.shape[1:])])
            self.begin(xb, np.zeros(k, dtype=np.int64))
            for cs in self.comp.steps:
                if cs.spec.phase == "FF" and cs.spec.op != "LossEval":
                    self.execute(cs.spec)
            last = len(self.net.layers) - 1
            outs.append(ff.dec(self.inp[last]).reshape(k, -1)[:k - pad])
        return np.concatenate(outs)


@dataclass
class TrainResult:
    params: dict
    losses: list
    traces: list = field(default_factory=list)
    machine: Machine | None = None


def run_training(net: NetworkSpec, data, epochs: int, cfg: MachineConfig, seed: int = 0, timing: bool = True,
                 params: dict | None = None) -> TrainResult:
    """Train over ``data`` (a list of (x, target) minibatches) for ``epochs`` passes."""
    m = Machine(net, cfg, seed, params, timing)
    losses, traces = [], []
    for _ in range(epochs):
        for x, t in data:
            loss, tr = m.train_batch(x, t)
            losses.append(loss)
            traces.extend(tr)
    return TrainResult(m.params(), losses, traces, m)


def write_artifacts(out: Path, net: NetworkSpec, cfg: MachineConfig, res: TrainResult, manifest: dict,
                    metrics: dict | None = None) -> None:
    """Config snapshot, iBuffer image, loss CSV, trace CSV, final weights (and metrics if given)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_doc = {"manifest": manifest, "machine": json.loads(cfg.to_json()), "network": render_network(net),
               "weight_init": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), stream 'weights'"}
    (out / "config.json").write_text(json.dumps(cfg_doc, indent=2, sort_keys=True) + "\n")
    (out / "ibuffer.bin").write_bytes(res.machine.comp.image.data)
    seed = res.machine.seed
    lines = [f"# seed={seed}", "minibatch,loss"] + [f"{j},{l!r}" for j, l in enumerate(res.losses)]
    (out / "loss.csv").write_text("\n".join(lines) + "\n")
    (out / "trace.csv").write_text(f"# seed={seed}\n" + trace_rows(res.traces))
    up = net.mode("up").value
    # the seed as two little-endian 32-bit words
    halves = np.array([[seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF]], dtype=np.uint32).view(np.int32)
    tensors = {"meta.seed": Tensor(halves, "NC", "fixed32")}
    for i, p in res.machine.w.items():
        items = p.items() if isinstance(p, dict) else [("w", p)]
        for mname, a in items:
            tensors[f"layer{i}.{mname}"] = Tensor(np.asarray(a), "OIHW" if a.ndim == 4 else "OI", up)
    save_snapshot(out / "weights.snap", tensors)
    if metrics is not None:
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
