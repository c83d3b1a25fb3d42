"""Bit-exact fixed-point arithmetic for the PE datapath.

Values are plain integers (numpy int64 arrays) in two's complement Q formats.
A MAC accumulates exact double-width products; conversion to storage width
happens once, at output writeback, by truncation (floor) or stochastic
rounding. Overflow saturates and is counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MASK32 = 0xFFFFFFFF
TAPS = (32, 22, 2, 1)


@dataclass(frozen=True)
class FixedFormat:
    bits: int
    frac: int

    def __post_init__(self):
        if self.bits not in (16, 32):
            raise ValueError("bits must be 16 or 32")
        if not 0 <= self.frac < self.bits:
            raise ValueError("need 0 <= frac < bits")

    @property
    def min(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def max(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac

    def from_float(self, x) -> np.ndarray:
        """Round to nearest (ties to even) and saturate."""
        q = np.rint(np.asarray(x, dtype=np.float64) * (1 << self.frac))
        return np.clip(q, self.min, self.max).astype(np.int64)

    def to_float(self, q) -> np.ndarray:
        return np.asarray(q, dtype=np.float64) / (1 << self.frac)

    def saturate(self, q: np.ndarray):
        q = np.asarray(q, dtype=np.int64)
        n = int(np.count_nonzero((q < self.min) | (q > self.max)))
        return np.clip(q, self.min, self.max), n


Q8_8 = FixedFormat(16, 8)
Q16_16 = FixedFormat(32, 16)


def convert(q: np.ndarray, src: FixedFormat, dst: FixedFormat):
    """Exact widening; narrowing floors then saturates. Returns (values, saturations)."""
    q = np.asarray(q, dtype=np.int64)
    d = dst.frac - src.frac
    q = q << d if d >= 0 else q >> -d
    return dst.saturate(q)


# ---------------------------------------------------------------- LFSR

def lfsr_step(state: int):
    """One clock of the 32-bit Fibonacci LFSR (taps 32,22,2,1). Returns (state, output bit)."""
    bit = ((state >> 31) ^ (state >> 21) ^ (state >> 1) ^ state) & 1
    return ((state << 1) | bit) & MASK32, bit


@lru_cache(maxsize=None)
def _power_tables(j: int) -> np.ndarray:
    """Byte tables of the linear map 'advance 2**j clocks'; shape (4, 256) uint32."""
    if j == 0:
        cols = []
        for i in range(32):
            cols.append(lfsr_step(1 << i)[0])
    else:
        prev = _power_tables(j - 1)
        cols = [_apply_scalar(prev, _apply_scalar(prev, 1 << i)) for i in range(32)]
    tabs = np.zeros((4, 256), dtype=np.uint32)
    for k in range(4):
        for v in range(256):
            acc = 0
            for b in range(8):
                if v >> b & 1:
                    acc ^= cols[8 * k + b]
            tabs[k, v] = acc
    return tabs


def _apply_scalar(tabs: np.ndarray, s: int) -> int:
    return int(tabs[0, s & 255]) ^ int(tabs[1, (s >> 8) & 255]) ^ int(tabs[2, (s >> 16) & 255]) ^ int(tabs[3, s >> 24])


def _apply_vec(tabs: np.ndarray, s: np.ndarray) -> np.ndarray:
    return tabs[0, s & 255] ^ tabs[1, (s >> 8) & 255] ^ tabs[2, (s >> 16) & 255] ^ tabs[3, s >> 24]


def lfsr_advance(state, n: int):
    """Jump ``n`` clocks ahead; ``state`` may be an int or a uint32 array."""
    vec = isinstance(state, np.ndarray)
    j = 0
    while n:
        if n & 1:
            tabs = _power_tables(j)
            state = _apply_vec(tabs, state) if vec else _apply_scalar(tabs, state)
        n >>= 1
        j += 1
    return state


def seed_state(seed: int) -> int:
    s = (seed * 0x9E3779B1 + 0x7F4A7C15) & MASK32
    return s or 1


@dataclass
class LfsrState:
    state: int
    taps: tuple = TAPS

    def __post_init__(self):
        if self.state & MASK32 == 0:
            raise ValueError("LFSR state must be nonzero")

    def step(self) -> int:
        self.state, bit = lfsr_step(self.state)
        return bit

    def advance(self, n: int) -> None:
        self.state = lfsr_advance(self.state, n)

    def word(self) -> int:
        """Fresh 32 bits: after 32 clocks the state holds exactly the last 32 output bits."""
        self.advance(32)
        return self.state


# ---------------------------------------------------------------- stochastic rounding

class SharedShiftSR:
    """Low-overhead SR: one LFSR bit per clock into a 32-bit left-shift register shared by all lanes.

    For a left-shifting Fibonacci LFSR the register contents equal the LFSR
    state, so the register value at a clock is the state itself. Every lane
    rounding in the same clock sees the same value.
    """

    variant = "lo"

    def __init__(self, seed: int):
        self.lfsr = LfsrState(seed_state(seed))

    def clock(self, n: int = 1) -> None:
        if n:
            self.lfsr.advance(n)

    def draw_rows(self, rows: int) -> np.ndarray:
        """Register value for ``rows`` consecutive clocks (one row written per clock)."""
        out = np.empty(rows, dtype=np.uint64)
        s = self.lfsr.state
        for r in range(rows):
            s, _ = lfsr_step(s)
            out[r] = s
        self.lfsr.state = s
        return out

    def draw(self, shape) -> np.ndarray:
        shape = tuple(shape)
        rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        vals = self.draw_rows(rows)
        return np.broadcast_to(vals.reshape(shape[:-1] + (1,)), shape).astype(np.uint64)


class LaneSR:
    """Conventional SR: an independent LFSR per lane, 32 fresh bits per rounding."""

    variant = "full"

    def __init__(self, seed: int, lanes: int = 64):
        self.lanes = lanes
        self.states = np.array([seed_state(seed * 131 + i + 1) for i in range(lanes)], dtype=np.uint32)

    def clock(self, n: int = 1) -> None:
        pass

    def draw(self, shape) -> np.ndarray:
        shape = tuple(shape)
        total = int(np.prod(shape))
        rounds = -(-total // self.lanes)
        out = np.empty((rounds, self.lanes), dtype=np.uint64)
        st = self.states
        for r in range(rounds):
            st = _apply_vec(_power_tables(5), st)
            out[r] = st
        self.states = st
        return out.reshape(-1)[:total].reshape(shape)


def make_sr(variant: str, seed: int, lanes: int = 64):
    if variant == "lo":
        return SharedShiftSR(seed)
    if variant == "full":
        return LaneSR(seed, lanes)
    raise ValueError(f"unknown SR variant {variant}")


def stochastic_round(acc, acc_frac: int, target: FixedFormat, rng=None, divisor: int = 1):
    """Convert a wide accumulator (``acc_frac`` fraction bits) to ``target``.

    Computes floor(acc / D) with D = 2**(acc_frac - target.frac) * divisor and,
    when ``rng`` is given, rounds up with probability rem / D using a 32-bit
    random value r: up iff r * D < rem * 2**32. Without ``rng`` this truncates.
    Returns (values, saturation count).
    """
    acc = np.asarray(acc, dtype=np.int64)
    shift = acc_frac - target.frac
    if shift < 0:
        return target.saturate(acc << -shift)
    d = (1 << shift) * divisor
    if d >= 1 << 31:
        raise ValueError("rounding divisor too large for the 32-bit comparator")
    q = np.floor_divide(acc, d)
    if rng is not None:
        rem = acc - q * d
        r = rng.draw(acc.shape).astype(np.int64) if acc.ndim else np.int64(rng.draw((1,))[0])
        q = q + ((r * d) < (rem << 32))
    return target.saturate(q)


# ---------------------------------------------------------------- MAC / MAX

MODES = ("fixed16x2", "fixed32", "fixed32sr")


def acc_bounds(mode: str) -> tuple:
    w = 32 if mode == "fixed16x2" else 64
    return -(1 << (w - 1)), (1 << (w - 1)) - 1


def sat_add(acc: np.ndarray, prod: np.ndarray, lo: int, hi: int):
    """acc + prod saturated to [lo, hi]; both int64. Returns (sum, saturation count)."""
    if hi < (1 << 62):
        s = acc + prod
        n = int(np.count_nonzero((s < lo) | (s > hi)))
        return np.clip(s, lo, hi), n
    with np.errstate(over="ignore"):
        s = acc + prod
    ovf = ((acc >= 0) == (prod >= 0)) & ((s >= 0) != (acc >= 0))
    n = int(np.count_nonzero(ovf))
    if n:
        s = np.where(ovf, np.where(acc >= 0, hi, lo), s)
    return s, n


@dataclass
class MacResult:
    y: np.ndarray
    macs: int
    saturations: int = 0


def mac_step(mode: str, a, x: np.ndarray, y: np.ndarray, rng=None) -> MacResult:
    """y <- a*x + y across the lanes.

    fixed16x2: ``a`` is a pair of 16-bit operands sharing one 32-bit word and
    ``y`` has shape (2, k), so each lane performs two MACs. fixed32/fixed32sr:
    ``a`` is a scalar and ``y`` has shape (k,). The shared SR register (if any)
    is clocked once.
    """
    if mode not in MODES:
        raise ValueError(mode)
    lo, hi = acc_bounds(mode)
    x = np.asarray(x, dtype=np.int64)
    if mode == "fixed16x2":
        a = np.asarray(a, dtype=np.int64).reshape(2, 1)
        prod = a * x[None, :]
    else:
        prod = np.int64(a) * x
    out, nsat = sat_add(np.asarray(y, dtype=np.int64), prod, lo, hi)
    if rng is not None:
        rng.clock(1)
    return MacResult(out, prod.size, nsat)


def max_step(x: np.ndarray, y: np.ndarray, ids: np.ndarray, pos: int):
    """Per-lane running max; ids move to ``pos`` only on strict improvement."""
    better = np.asarray(x) > y
    return np.where(better, x, y), np.where(better, pos, ids)


# ---------------------------------------------------------------- LUTs

_EXACT = ("identity", "relu", "relu_d")
_ODD = ("tanh",)

_FUNCS = {
    "tanh": np.tanh,
    "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)),
    "exp": np.exp,
    "log": np.log,
    "tanh_d": lambda y: 1.0 - y * y,  # indexed by the stored output y
    "sigmoid_d": lambda y: y * (1.0 - y),
}

_RANGES = {
    "tanh": (0.0, 4.0),  # mirrored: table covers |x|
    "sigmoid": (-4.0, 4.0),
    "exp": (-8.0, 8.0),
    "log": (2.0 ** -16, 8.0),
    "tanh_d": (-1.0, 1.0),
    "sigmoid_d": (0.0, 1.0),
    "identity": (-1.0, 1.0),
    "relu": (-4.0, 4.0),
    "relu_d": (-4.0, 4.0),
}


@dataclass(frozen=True)
class Lut:
    fn: str
    entries: np.ndarray = field(compare=False)
    lo: float
    hi: float
    fmt: FixedFormat

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def exact(self) -> bool:
        return self.fn in _EXACT

    @property
    def odd(self) -> bool:
        """Odd functions store only x >= 0 and mirror the sign."""
        return self.fn in _ODD


def build_lut(fn: str, n: int = 1024, fmt: FixedFormat = Q16_16, lo: float | None = None,
              hi: float | None = None) -> Lut:
    dlo, dhi = _RANGES[fn]
    lo = dlo if lo is None else lo
    hi = dhi if hi is None else hi
    centers = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    if fn == "identity":
        vals = centers
    elif fn == "relu":
        vals = np.maximum(centers, 0.0)
    elif fn == "relu_d":
        vals = (centers > 0).astype(np.float64)
    else:
        vals = _FUNCS[fn](centers)
    return Lut(fn, fmt.from_float(vals), lo, hi, fmt)


def lut_eval(lut: Lut, x, xfmt: FixedFormat = Q16_16) -> np.ndarray:
    """Nearest-bin lookup of fixed-point ``x`` (in ``xfmt``), returning values in ``lut.fmt``.

    identity, relu and relu' are piecewise linear and computed exactly by the
    comparator path instead of the table.
    """
    x = np.asarray(x, dtype=np.int64)
    if lut.fn == "identity":
        return convert(x, xfmt, lut.fmt)[0]
    if lut.fn == "relu":
        return convert(np.maximum(x, 0), xfmt, lut.fmt)[0]
    if lut.fn == "relu_d":
        return np.where(x > 0, 1 << lut.fmt.frac, 0).astype(np.int64)
    n = lut.size
    xs = np.abs(x) if lut.odd else x
    idx = np.floor((xfmt.to_float(xs) - lut.lo) * n / (lut.hi - lut.lo)).astype(np.int64)
    out = lut.entries[np.clip(idx, 0, n - 1)]
    return np.sign(x) * out if lut.odd else out


def dump_lut_hex(lut: Lut, path) -> None:
    digits = lut.fmt.bits // 4
    mask = (1 << lut.fmt.bits) - 1
    with open(path, "w") as f:
        f.write(f"# {lut.fn} entries={lut.size} range=[{lut.lo!r},{lut.hi!r}] q{lut.fmt.bits - lut.fmt.frac}.{lut.fmt.frac}\n")
        for i, v in enumerate(lut.entries):
            f.write(f"{i:04x} {int(v) & mask:0{digits}x}\n")
