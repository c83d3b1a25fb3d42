"""Mode-aware arithmetic for the functional side of the machine.

A ``Num`` instance implements one numeric mode. In float mode every op is
the reference primitive itself, so a float run reproduces the reference
bit for bit. Fixed modes keep tensors as int64 arrays in Q8.8 (16-bit) or
Q16.16 (32-bit), accumulate exactly in the MAC accumulator width (with
saturation), and round at writeback: truncation, or stochastic rounding
from the writing PE's generator in the SR mode.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import goldref as G
from .fxnum import Q8_8, Q16_16, acc_bounds, build_lut, convert, lut_eval, make_sr, sat_add, stochastic_round
from .netspec import NumericMode


class SRBank:
    """One stochastic-rounding generator per named hardware stream (PEs, common vault)."""

    def __init__(self, seed: int, variant: str = "lo", lanes: int = 32):
        self.seed, self.variant, self.lanes = seed, variant, lanes
        self._srs: dict = {}

    def get(self, name: str):
        if name not in self._srs:
            s = (self.seed * 1_000_003 + zlib.crc32(name.encode())) & 0xFFFFFFFF
            self._srs[name] = make_sr(self.variant, s, self.lanes)
        return self._srs[name]


class Acc:
    """A wide accumulator value with its fraction bits (fixed modes only)."""

    def __init__(self, v: np.ndarray, frac: int):
        self.v, self.frac = v, frac


class Num:
    def __init__(self, mode, bank: SRBank | None = None, pes: int = 15, lanes: int = 32):
        self.mode = NumericMode(mode)
        self.fixed = self.mode.is_fixed
        self.fmt = Q8_8 if self.mode is NumericMode.FIXED16 else Q16_16
        self.acc_kind = "fixed16x2" if self.mode is NumericMode.FIXED16 else "fixed32"
        self.sr = self.mode is NumericMode.FIXED32SR
        self.bank = bank
        self.pes, self.lanes = pes, lanes
        self.saturations = 0
        self._luts: dict = {}

    # -------------------------------------------------------- conversion

    def enc(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.fmt.from_float(x) if self.fixed else x.copy()

    def dec(self, a) -> np.ndarray:
        return self.fmt.to_float(a) if self.fixed else np.asarray(a, dtype=np.float64)

    def cast(self, a, src: "Num") -> np.ndarray:
        """Re-express a tensor held in ``src``'s format in this one (widening exact, narrowing floors)."""
        if src.fixed == self.fixed and (not self.fixed or src.fmt == self.fmt):
            return a
        if not self.fixed:
            return src.dec(a)
        if not src.fixed:
            return self.enc(a)
        out, n = convert(a, src.fmt, self.fmt)
        self.saturations += n
        return out

    # -------------------------------------------------------- rounding

    def _rng(self, name: str, clock: int = 0):
        if not self.sr or self.bank is None:
            return None
        sr = self.bank.get(name)
        sr.clock(clock)
        return sr

    def round(self, acc: np.ndarray, frac: int, stream: str = "common", divisor: int = 1, clock: int = 0):
        out, n = stochastic_round(acc, frac, self.fmt, self._rng(stream, clock), divisor)
        self.saturations += n
        return out

    def round_cols(self, acc: np.ndarray, frac: int, divisor: int = 1, macs: int = 0) -> np.ndarray:
        """Round (K, O) outputs whose columns are split over PEs; lanes run over the first axis."""
        out = np.empty_like(acc)
        o = acc.shape[1]
        chunk = -(-o // self.pes)
        for p in range(self.pes):
            a, b = min(o, p * chunk), min(o, (p + 1) * chunk)
            if b > a:
                cyc = macs * (b - a) // max(o * self.lanes, 1)
                out[:, a:b] = self.round(acc[:, a:b].T, frac, f"pe{p}", divisor, cyc).T
        return out

    def round_rows(self, acc: np.ndarray, frac: int, divisor: int = 1, macs: int = 0) -> np.ndarray:
        """Round (N, C, H, W) outputs split over PEs by flattened (sample, row)."""
        n, c, h, w = acc.shape
        out = np.empty_like(acc)
        chunk = -(-n * h // self.pes)
        for p in range(self.pes):
            g0, g1 = min(n * h, p * chunk), min(n * h, (p + 1) * chunk)
            if g1 <= g0:
                continue
            cyc = macs * (g1 - g0) // max(n * h * self.lanes, 1)
            sr = self._rng(f"pe{p}", cyc)
            g = g0
            while g < g1:
                s, r0 = divmod(g, h)
                r1 = min(h, r0 + g1 - g)
                blk, k = stochastic_round(acc[s, :, r0:r1, :], frac, self.fmt, sr, divisor)
                self.saturations += k
                out[s, :, r0:r1, :] = blk
                g += r1 - r0
        return out

    # -------------------------------------------------------- accumulation

    def _matmul(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """acc[s, o] = sum_j w[o, j] x[s, j] in the accumulator width, j ascending when it can saturate."""
        lo, hi = acc_bounds(self.acc_kind)
        bound = int(np.abs(x).max(initial=0)) * int(np.abs(w).sum(axis=1).max(initial=0))
        if bound <= hi:
            return x @ w.T
        acc = np.zeros((x.shape[0], w.shape[0]), dtype=np.int64)
        for j in range(w.shape[1]):
            acc, n = sat_add(acc, w[None, :, j] * x[:, j, None], lo, hi)
            self.saturations += n
        return acc

    def _sum_terms(self, terms) -> np.ndarray:
        lo, hi = acc_bounds(self.acc_kind)
        acc = None
        for t in terms:
            if acc is None:
                acc = np.zeros(t.shape, dtype=np.int64)
            acc, n = sat_add(acc, t, lo, hi)
            self.saturations += n
        return acc

    def _conv_acc(self, xp: np.ndarray, w: np.ndarray, ho: int, wo: int) -> np.ndarray:
        d, kh, kw = w.shape[1:]
        lo, hi = acc_bounds(self.acc_kind)
        bound = int(np.abs(xp).max(initial=0)) * int(np.abs(w).reshape(w.shape[0], -1).sum(axis=1).max(initial=0))
        terms = (w[None, :, c, i, j, None, None] * xp[:, None, c, i:i + ho, j:j + wo]
                 for c in range(d) for i in range(kh) for j in range(kw))
        if bound <= hi:
            acc = np.zeros((xp.shape[0], w.shape[0], ho, wo), dtype=np.int64)
            for t in terms:
                acc += t
            return acc
        return self._sum_terms(terms)

    # -------------------------------------------------------- layer primitives

    def fc(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Y = X W^T with outputs split over PEs by weight row."""
        if not self.fixed:
            return G.fc_ff(x, w)
        macs = x.shape[0] * w.size
        return self.round_cols(self._matmul(x, w), 2 * self.fmt.frac, macs=macs)

    def conv(self, x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
        if not self.fixed:
            return G.conv_ff(x, w, pad)
        n, d, h, wd = x.shape
        no, _, kh, kw = w.shape
        ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        acc = self._conv_acc(xp, w, ho, wo)
        return self.round_rows(acc, 2 * self.fmt.frac, macs=acc.size * d * kh * kw)

    def conv_t(self, dy: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
        """Input gradient through the flipped, transposed kernel (the CNT2 sweep order)."""
        if not self.fixed:
            return G.conv_bp(dy, w, pad)
        no, d, kh, kw = w.shape
        wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        ph = kh - 1 - pad
        dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (ph, ph)))
        hi, wi = dy.shape[2] + 2 * ph - kh + 1, dy.shape[3] + 2 * ph - kw + 1
        acc = self._conv_acc(dyp, np.ascontiguousarray(wt), hi, wi)
        return self.round_rows(acc, 2 * self.fmt.frac, macs=acc.size * no * kh * kw)

    def up_fc(self, x: np.ndarray, dy: np.ndarray):
        """sum_s dY_s X_s^T (unrounded)."""
        if not self.fixed:
            return G.fc_up_sum(x, dy)
        return Acc(self._matmul(dy.T.copy(), x.T.copy()), 2 * self.fmt.frac)

    def up_conv(self, x: np.ndarray, dy: np.ndarray, kh: int, kw: int, pad: int):
        """Lowered weight-gradient sum; per-PE partial sums merge exactly at the common vault."""
        if not self.fixed:
            return G.conv_up_sum_lowered(x, dy, kh, kw, pad)
        n, d = x.shape[:2]
        _, no, ho, wo = dy.shape
        xm = G.lower(x.astype(np.float64), kh, kw, pad, ho, wo).astype(np.int64)
        dym = dy.transpose(1, 0, 2, 3).reshape(no, -1)
        return Acc(self._matmul(dym, xm.T.copy()).reshape(no, d, kh, kw), 2 * self.fmt.frac)

    def acc_zero(self, shape):
        if not self.fixed:
            return np.zeros(shape)
        return Acc(np.zeros(shape, dtype=np.int64), 2 * self.fmt.frac)

    def acc_add(self, a, b):
        if not self.fixed:
            return a + b
        lo, hi = acc_bounds("fixed32")
        v, n = sat_add(a.v, b.v, lo, hi)
        self.saturations += n
        return Acc(v, a.frac)

    def update(self, w: np.ndarray, s, k: int, lr: float, stream: str = "common", split: bool = True) -> np.ndarray:
        """W - lr * S / K. Fixed: dW rounds with the batch divisor, then the scaled step rounds once more."""
        if not self.fixed:
            return G.sgd_update(w, s / k, lr)
        eta = int(self.fmt.from_float(lr))
        f = self.fmt.frac
        if split and w.ndim == 2:
            dw = self.round_cols(s.v.T, s.frac, divisor=k).T
            wide = (w << f) - eta * dw
            return self.round_cols(wide.T, 2 * f).T
        dw = self.round(s.v, s.frac, stream, divisor=k)
        return self.round((w << f) - eta * dw, 2 * f, stream)

    # -------------------------------------------------------- elementwise

    def add(self, a, b):
        if not self.fixed:
            return a + b
        out, n = self.fmt.saturate(np.asarray(a, dtype=np.int64) + b)
        self.saturations += n
        return out

    def sub(self, a, b):
        if not self.fixed:
            return a - b
        out, n = self.fmt.saturate(np.asarray(a, dtype=np.int64) - b)
        self.saturations += n
        return out

    def mul(self, a, b):
        if not self.fixed:
            return a * b
        return self.round(np.asarray(a, dtype=np.int64) * b, 2 * self.fmt.frac)

    def one_minus(self, z):
        if not self.fixed:
            return 1.0 - z
        return self.sub(np.full_like(z, 1 << self.fmt.frac), z)

    def lut(self, fn: str, lo=None, hi=None):
        key = (fn, lo, hi)
        if key not in self._luts:
            self._luts[key] = build_lut(fn, fmt=self.fmt, lo=lo, hi=hi)
        return self._luts[key]

    def act(self, fn: str, z):
        if not self.fixed:
            return G.act_forward(fn, z)
        return lut_eval(self.lut(fn), z, self.fmt)

    def act_d(self, fn: str, y):
        """f'(z) from the stored output y."""
        if not self.fixed:
            return G.act_deriv_from_output(fn, y)
        return lut_eval(self.lut(fn + "_d"), y, self.fmt)

    def loss_grad(self, kind: str, y, target) -> np.ndarray:
        if not self.fixed:
            return G.loss_grad(kind, y, target)
        shape = y.shape
        y = y.reshape(y.shape[0], -1)
        if kind == "mse":
            return self.sub(y, self.enc(target).reshape(y.shape)).reshape(shape)
        m = y.max(axis=1, keepdims=True)
        e = lut_eval(self.lut("exp"), y - m, self.fmt)
        s = e.sum(axis=1, keepdims=True)
        logs = lut_eval(self.lut("log", hi=float(max(8, y.shape[1]))), s, self.fmt)
        p = lut_eval(self.lut("exp"), self.sub(self.sub(y, m), logs), self.fmt)
        p[np.arange(y.shape[0]), target] -= 1 << self.fmt.frac
        return p.reshape(shape)

    def pool(self, x, r: int):
        return G.pool_ff(x, r)

    def pool_t(self, dy, ids, r: int):
        out = G.pool_bp(dy, ids, r)
        return out.astype(np.int64) if self.fixed else out
