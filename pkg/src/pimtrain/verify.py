"""Self-checks run by ``pimtrain verify``: address streams, float equivalence and gradients."""
from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import goldref as G
from .compiler import compile_network
from .config import MachineConfig
from .data import make_dataset, stream
from .machine import run_training
from .netspec import NetworkSpec
from .pmag import accepted_points, addr_stream, stream_arrays

__all__ = ["reduced", "check_streams", "check_float_match", "check_gradients", "run_checks"]


def reduced(net: NetworkSpec, batch: int = 2) -> NetworkSpec:
    """Same layer shapes, smaller minibatch."""
    return dataclasses.replace(net, batch=min(net.batch, batch))


def check_streams(net: NetworkSpec, cfg: MachineConfig, walk: int = 2048) -> list:
    """Each program's counter walk agrees with its closed form, stays in range and visits the counted points.

    The lazy walk is compared on its first ``walk`` events; the closed form
    covers the whole program.
    """
    comp = compile_network(net, cfg)
    fails, seen = [], set()
    for cs in comp.steps:
        for prog in cs.pmag.programs:
            if prog in seen:
                continue
            seen.add(prog)
            name = f"{cs.spec.phase} {cs.spec.op} layer {cs.spec.layer} {prog.tag}"
            try:
                lanes, addr, ok = stream_arrays(prog)
                ev = [e for e in itertools.islice(addr_stream(prog), walk + 1) if not e.end][:walk]
            except Exception as e:  # range errors are failures to report, not crashes
                fails.append(f"{name}: {e}")
                continue
            n = len(ev)
            if [e.addr for e in ev] != addr[:n].tolist() or [e.lane for e in ev] != lanes[:n].tolist() \
                    or [e.data for e in ev] != ok[:n].tolist():
                fails.append(f"{name}: counter walk and closed form disagree")
            events, data = accepted_points(prog)
            if len(lanes) != events or int(ok.sum()) != data:
                fails.append(f"{name}: {len(lanes)} events, {int(ok.sum())} data points; expected {events}, {data}")
    return fails


def _float(net: NetworkSpec) -> NetworkSpec:
    return net.with_modes(ff="float", bp="float", up="float")


def check_float_match(net: NetworkSpec, cfg: MachineConfig, seed: int, batches: int = 2) -> list:
    """Float-mode machine training equals the reference bit for bit."""
    net = _float(net)
    data, _ = make_dataset(net, seed, batches)
    res = run_training(net, data, 1, cfg, seed=seed, timing=False)
    ref = G.init_params(net, stream(seed, "weights"))
    fails = []
    for j, (x, t) in enumerate(data):
        ref, loss = G.train_step(net, ref, x, t)
        if loss != res.losses[j]:
            fails.append(f"minibatch {j}: loss {res.losses[j]!r} != {loss!r}")
    for i, p in ref.items():
        got = res.params[i]
        for m, a in (p.items() if isinstance(p, dict) else [("w", p)]):
            b = got[m] if isinstance(p, dict) else got
            if not np.array_equal(a, b):
                fails.append(f"layer {i} {m}: max difference {np.abs(a - b).max():.3g}")
    return fails


def _loss(net, params, x, t) -> float:
    acts = G.forward(net, x, params)
    return G.loss_value(net.layers[-1].fn, acts.inputs[-1], t)


def check_gradients(net: NetworkSpec, seed: int, per_layer: int = 4, h: float = 1e-6, tol: float = 1e-4) -> list:
    """Backpropagated weight gradients against central differences of the loss."""
    net = _float(net)
    (x, t), = make_dataset(net, seed, 1, test=0)[0]
    params = G.init_params(net, stream(seed, "weights"))
    acts = G.forward(net, x, params)
    dws = G.weight_grads(net, acts, G.loss_and_backward(net, acts, t, params))
    rng = stream(seed, "gradcheck")
    fails = []
    for i, p in params.items():
        for m, w in (p.items() if isinstance(p, dict) else [(None, p)]):
            g = dws[i][m] if m is not None else dws[i]
            for _ in range(per_layer):
                idx = tuple(int(rng.integers(0, s)) for s in w.shape)
                old = w[idx]
                w[idx] = old + h
                up = _loss(net, params, x, t)
                w[idx] = old - h
                down = _loss(net, params, x, t)
                w[idx] = old
                num = (up - down) / (2 * h)
                if abs(num - g[idx]) > tol * max(1.0, abs(num), abs(g[idx])):
                    fails.append(f"layer {i} {m or 'w'} {idx}: backprop {g[idx]:.6g} vs numeric {num:.6g}")
    return fails


def run_checks(net: NetworkSpec, cfg: MachineConfig, seed: int) -> list:
    """[(check name, failures)] at reduced size."""
    small = reduced(net)
    return [
        ("address streams", check_streams(small, cfg)),
        ("float bit-match", check_float_match(small, cfg, seed)),
        ("gradients", check_gradients(small, seed)),
    ]
