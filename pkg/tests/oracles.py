"""Naive loop-nest references for address streams, written without the compiler's helpers."""
from collections import Counter

import numpy as np

from pimtrain.config import MachineConfig
from pimtrain.netspec import parse_network


def small_cfg(pes: int) -> MachineConfig:
    return MachineConfig(name=f"t{pes}", vaults=pes + 1, pes=pes)


def conv_net(d, h, w, no, k, pad, batch):
    return parse_network(f"input shape={w}x{h}x{d}\nconv kernels={no} kernel={k}x{k} pad={pad}\n"
                         f"loss fn=mse\ntrain batch={batch}\n")


def fc_net(inp, out, batch):
    return parse_network(f"input shape={inp}\nfc out={out}\nloss fn=mse\ntrain batch={batch}\n")


def ref_pieces(samples, rows, pes, p):
    """(n, h0, h1) runs of flattened sample-major rows owned by PE p under ceil chunking."""
    chunk = -(-samples * rows // pes)
    out = []
    for g in range(p * chunk, min(samples * rows, (p + 1) * chunk)):
        n, h = divmod(g, rows)
        if out and out[-1][0] == n:
            out[-1][2] = h + 1
        else:
            out.append([n, h, h + 1])
    return [tuple(x) for x in out]


def ref_bases(pieces, piece_size):
    bases, off = [], 0
    for pc in pieces:
        bases.append(off)
        off += piece_size(pc)
    return bases


def conv_read_multiset(samples, out_rows, out_w, depth, kh, kw, wp, pes, outer, up=False):
    """Reads of a padded strip for a conv pass; output rows come from ``outer`` x rows x cols x depth x kernel."""
    ref = Counter()
    for p in range(pes):
        pcs = ref_pieces(samples, out_rows, pes, p)
        pr = lambda pc: pc[2] - pc[1] + kh - 1
        bases = ref_bases(pcs, lambda pc: depth * pr(pc) * wp)
        for (n, h0, h1), b in zip(pcs, bases):
            for _o in range(1 if up else outer):
                for h in range(h0, h1):
                    for x in range(out_w):
                        for c in range(depth):
                            for i in range(kh):
                                for j in range(kw):
                                    ref[(p, b + (c * pr((n, h0, h1)) + h - h0 + i) * wp + x + j)] += 1
    return ref


def fc_i_multiset(H, W, k, pes, P):
    """Per-PE reads of a row-partitioned (H x W) matrix: each local element once per sample."""
    chunk = -(-H // pes)
    ref = Counter()
    for p in range(pes):
        rows = max(0, min(H, (p + 1) * chunk) - p * chunk)
        for i in range(rows):
            for j in range(W):
                ref[(p, i * W + j)] += k
    return ref


def fc_c_multiset(H, W, k, pes, P, cv):
    chunk = -(-H // pes)
    blocks = -(-chunk // P)
    return Counter({(cv, s * W + j): blocks * P for s in range(k) for j in range(W)})


def events_multiset(progs, stream):
    out = Counter()
    for pr in progs:
        _, addr, _ = stream(pr)
        out.update(zip([pr.vault] * len(addr), np.asarray(addr).tolist()))
    return out


# ---------------------------------------------------------------- wide-integer Q16.16 oracle

_F = 16
_LO, _HI = -(1 << 31), (1 << 31) - 1


def _sat(v: int) -> int:
    return min(_HI, max(_LO, v))


def _q(x: float) -> int:
    return _sat(int(round(x * (1 << _F))))  # round() is ties-to-even on floats


def _matvec_floor(w, v):
    """floor(sum_j w[o][j] * v[j] / 2**16) per output, Python ints throughout."""
    return [_sat(sum(a * b for a, b in zip(row, v)) >> _F) for row in w]


def fixed32_mlp_oracle(w0, w2, batches, lr):
    """Truncating Q16.16 training of fc-relu-fc-mse over ``batches``; returns (w0, w2) as int lists.

    Weights are (out, in) float arrays; each batch is (x, target) floats.
    """
    W0 = [[_q(v) for v in row] for row in w0]
    W2 = [[_q(v) for v in row] for row in w2]
    eta = _q(lr)
    for x, t in batches:
        k = len(x)
        X = [[_q(v) for v in row] for row in x]
        T = [[_q(v) for v in row] for row in t]
        H = [[max(0, v) for v in _matvec_floor(W0, xs)] for xs in X]
        Y = [_matvec_floor(W2, hs) for hs in H]
        G2 = [[_sat(y - tt) for y, tt in zip(ys, ts)] for ys, ts in zip(Y, T)]
        W2t = [list(c) for c in zip(*W2)]
        G0 = []
        for gs, hs in zip(G2, H):
            g = _matvec_floor(W2t, gs)
            G0.append([_sat(gv * (1 << _F if h > 0 else 0) >> _F) for gv, h in zip(g, hs)])

        def step(W, G, A):
            out = []
            for o, row in enumerate(W):
                new = []
                for i, w in enumerate(row):
                    s = sum(G[n][o] * A[n][i] for n in range(k))
                    dw = _sat(s // ((1 << _F) * k))
                    new.append(_sat(((w << _F) - eta * dw) >> _F))
                out.append(new)
            return out

        W2 = step(W2, G2, H)
        W0 = step(W0, G0, X)
    return W0, W2
