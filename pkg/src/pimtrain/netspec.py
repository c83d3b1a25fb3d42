"""Network descriptions and their expansion into accelerator steps.

A network file is line oriented. Blank lines and ``#`` comments are ignored::

    input shape=32x32x3            # W x H x D volume, or a single length
    conv kernels=16 kernel=3x3 pad=1
    act fn=relu
    maxpool r=2
    fc out=10
    loss fn=softmax_ce
    train batch=32 lr=0.01 modes=ff:fixed16,bp:fixed32sr,up:fixed32sr

Recurrent layers read a flattened sequence of ``steps`` frames of ``in``
elements each (``feed=seq``) or the same vector at every step
(``feed=repeat``) and emit the last hidden state::

    rnn cell=gru in=8 hidden=16 steps=4 feed=seq
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Union


class NetSpecError(ValueError):
    """Raised for malformed or inconsistent network descriptions."""


class ShapeError(NetSpecError):
    pass


class NumericMode(str, Enum):
    FLOAT = "float"
    FIXED16 = "fixed16"
    FIXED32 = "fixed32"
    FIXED32SR = "fixed32sr"

    @property
    def bits(self) -> int:
        return 16 if self is NumericMode.FIXED16 else 32

    @property
    def is_fixed(self) -> bool:
        return self is not NumericMode.FLOAT


DEFAULT_MODES = {"ff": NumericMode.FIXED16, "bp": NumericMode.FIXED32SR, "up": NumericMode.FIXED32SR}

Shape = tuple  # (D, H, W) for volumes, (n,) for vectors


def _is_volume(shape: Shape) -> bool:
    return len(shape) == 3


def _size(shape: Shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


@dataclass(frozen=True)
class ConvLayer:
    in_shape: Shape
    kernels: int
    kh: int
    kw: int
    pad: int
    stride: int = 1
    kind = "conv"
    parameterized = True

    @property
    def out_shape(self) -> Shape:
        d, h, w = self.in_shape
        return (self.kernels, h + 2 * self.pad - self.kh + 1, w + 2 * self.pad - self.kw + 1)

    @property
    def weight_shape(self) -> Shape:
        return (self.kernels, self.in_shape[0], self.kh, self.kw)


@dataclass(frozen=True)
class PoolLayer:
    in_shape: Shape
    r: int
    kind = "maxpool"
    parameterized = False

    @property
    def out_shape(self) -> Shape:
        d, h, w = self.in_shape
        return (d, h // self.r, w // self.r)


@dataclass(frozen=True)
class FCLayer:
    in_shape: Shape
    out: int
    kind = "fc"
    parameterized = True

    @property
    def out_shape(self) -> Shape:
        return (self.out,)

    @property
    def weight_shape(self) -> Shape:
        return (self.out, _size(self.in_shape))


@dataclass(frozen=True)
class RecurrentLayer:
    in_shape: Shape
    cell: str  # "elman" | "gru"
    inp: int
    hidden: int
    steps: int
    feed: str = "seq"  # "seq" | "repeat"
    kind = "rnn"
    parameterized = True

    @property
    def out_shape(self) -> Shape:
        return (self.hidden,)

    @property
    def matrices(self) -> tuple:
        if self.cell == "elman":
            return ("wx", "uh")
        return ("wz", "uz", "wr", "ur", "wh", "uh")

    def matrix_shape(self, name: str) -> Shape:
        """Input-side matrices start with "w", recurrent ones with "u"."""
        cols = self.inp if name.startswith("w") else self.hidden
        return (self.hidden, cols)


@dataclass(frozen=True)
class ActivationLayer:
    in_shape: Shape
    fn: str  # relu | tanh | sigmoid
    kind = "act"
    parameterized = False

    @property
    def out_shape(self) -> Shape:
        return self.in_shape


@dataclass(frozen=True)
class LossLayer:
    in_shape: Shape
    fn: str  # mse | softmax_ce
    kind = "loss"
    parameterized = False

    @property
    def out_shape(self) -> Shape:
        return self.in_shape


LayerSpec = Union[ConvLayer, PoolLayer, FCLayer, RecurrentLayer, ActivationLayer, LossLayer]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: Shape
    layers: tuple
    batch: int = 32
    lr: float = 0.01
    modes: tuple = (("ff", NumericMode.FIXED16), ("bp", NumericMode.FIXED32SR), ("up", NumericMode.FIXED32SR))

    def mode(self, phase: str) -> NumericMode:
        return dict(self.modes)[phase]

    def with_modes(self, **modes) -> "NetworkSpec":
        cur = dict(self.modes)
        for k, v in modes.items():
            cur[k] = NumericMode(v)
        return replace(self, modes=tuple((p, cur[p]) for p in ("ff", "bp", "up")))

    @property
    def param_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.parameterized]


# ---------------------------------------------------------------- parsing

_KEYS = {
    "input": {"shape"},
    "conv": {"kernels", "kernel", "pad", "stride"},
    "maxpool": {"r"},
    "fc": {"out"},
    "rnn": {"cell", "in", "hidden", "steps", "feed"},
    "act": {"fn"},
    "loss": {"fn"},
    "train": {"batch", "lr", "modes"},
}
_REQUIRED = {
    "input": {"shape"},
    "conv": {"kernels", "kernel"},
    "maxpool": {"r"},
    "fc": {"out"},
    "rnn": {"cell", "in", "hidden", "steps"},
    "act": {"fn"},
    "loss": {"fn"},
    "train": set(),
}
_ACTS = ("relu", "tanh", "sigmoid")
_LOSSES = ("mse", "softmax_ce")


def _int(v: str, lineno: int, key: str) -> int:
    try:
        n = int(v)
    except ValueError:
        raise NetSpecError(f"line {lineno}: {key}={v!r} is not an integer") from None
    if n < 1 and key != "pad":
        raise NetSpecError(f"line {lineno}: {key} must be >= 1")
    if n < 0:
        raise NetSpecError(f"line {lineno}: {key} must be >= 0")
    return n


def _dims(v: str, lineno: int, key: str) -> tuple:
    parts = v.lower().split("x")
    return tuple(_int(p, lineno, key) for p in parts)


def _parse_modes(v: str, lineno: int) -> tuple:
    modes = dict(DEFAULT_MODES)
    for item in v.split(","):
        if ":" not in item:
            raise NetSpecError(f"line {lineno}: bad mode entry {item!r}")
        phase, m = item.split(":", 1)
        if phase not in modes:
            raise NetSpecError(f"line {lineno}: unknown phase {phase!r}")
        try:
            modes[phase] = NumericMode(m)
        except ValueError:
            raise NetSpecError(f"line {lineno}: unknown numeric mode {m!r}") from None
    return tuple((p, modes[p]) for p in ("ff", "bp", "up"))


def _build(kind: str, kv: dict, shape: Shape, lineno: int, prev: str) -> LayerSpec:
    if kind == "conv":
        if not _is_volume(shape):
            raise ShapeError(f"line {lineno}: conv needs a volume input but {prev} produces a vector {shape}")
        kdims = _dims(kv["kernel"], lineno, "kernel")
        if len(kdims) != 2:
            raise NetSpecError(f"line {lineno}: kernel must be KHxKW")
        kh, kw = kdims
        stride = _int(kv.get("stride", "1"), lineno, "stride")
        if stride != 1:
            raise NetSpecError(f"line {lineno}: only stride=1 is supported")
        pad = _int(kv.get("pad", str((kw - 1) // 2)), lineno, "pad")
        if pad > 0 and not (kh == kw and kw % 2 == 1 and pad == (kw - 1) // 2):
            raise NetSpecError(f"line {lineno}: pad={pad} requires an odd square kernel with pad=(k-1)/2")
        layer = ConvLayer(shape, _int(kv["kernels"], lineno, "kernels"), kh, kw, pad, stride)
        if min(layer.out_shape) < 1:
            raise ShapeError(f"line {lineno}: kernel larger than input {shape} after {prev}")
        return layer
    if kind == "maxpool":
        if not _is_volume(shape):
            raise ShapeError(f"line {lineno}: maxpool needs a volume input but {prev} produces {shape}")
        r = _int(kv["r"], lineno, "r")
        if shape[1] % r or shape[2] % r:
            raise ShapeError(f"line {lineno}: maxpool r={r} does not divide {shape[1]}x{shape[2]} from {prev}")
        return PoolLayer(shape, r)
    if kind == "fc":
        return FCLayer(shape, _int(kv["out"], lineno, "out"))
    if kind == "rnn":
        cell = kv["cell"]
        if cell not in ("elman", "gru"):
            raise NetSpecError(f"line {lineno}: unknown cell {cell!r}")
        feed = kv.get("feed", "seq")
        if feed not in ("seq", "repeat"):
            raise NetSpecError(f"line {lineno}: feed must be seq or repeat")
        layer = RecurrentLayer(shape, cell, _int(kv["in"], lineno, "in"), _int(kv["hidden"], lineno, "hidden"),
                               _int(kv["steps"], lineno, "steps"), feed)
        need = layer.inp * layer.steps if feed == "seq" else layer.inp
        if _is_volume(shape) and feed == "seq":
            raise ShapeError(f"line {lineno}: rnn with feed=seq needs a vector input but {prev} produces {shape}")
        if _size(shape) != need:
            raise ShapeError(f"line {lineno}: rnn expects {need} inputs but {prev} produces {_size(shape)}")
        return layer
    if kind == "act":
        if kv["fn"] not in _ACTS:
            raise NetSpecError(f"line {lineno}: unknown activation {kv['fn']!r}")
        return ActivationLayer(shape, kv["fn"])
    if kind == "loss":
        if kv["fn"] not in _LOSSES:
            raise NetSpecError(f"line {lineno}: unknown loss {kv['fn']!r}")
        return LossLayer(shape, kv["fn"])
    raise NetSpecError(f"line {lineno}: unknown layer kind {kind!r}")


def parse_network(text: str) -> NetworkSpec:
    input_shape = None
    layers: list = []
    train: dict = {}
    shape = None
    prev = "input"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *items = line.split()
        if kind not in _KEYS:
            raise NetSpecError(f"line {lineno}: unknown directive {kind!r}")
        kv = {}
        for item in items:
            m = re.fullmatch(r"([A-Za-z_]+)=(\S+)", item)
            if not m:
                raise NetSpecError(f"line {lineno}: expected key=value, got {item!r}")
            key, val = m.groups()
            if key not in _KEYS[kind]:
                raise NetSpecError(f"line {lineno}: unknown key {key!r} for {kind}")
            if key in kv:
                raise NetSpecError(f"line {lineno}: duplicate key {key!r}")
            kv[key] = val
        missing = _REQUIRED[kind] - kv.keys()
        if missing:
            raise NetSpecError(f"line {lineno}: {kind} missing {sorted(missing)}")

        if kind == "input":
            if input_shape is not None or layers:
                raise NetSpecError(f"line {lineno}: input must appear once, before any layer")
            dims = _dims(kv["shape"], lineno, "shape")
            if len(dims) == 3:
                w, h, d = dims
                input_shape = (d, h, w)
            elif len(dims) == 1:
                input_shape = dims
            else:
                raise NetSpecError(f"line {lineno}: shape must be WxHxD or a length")
            shape = input_shape
            continue
        if kind == "train":
            if "batch" in kv:
                train["batch"] = _int(kv["batch"], lineno, "batch")
            if "lr" in kv:
                try:
                    train["lr"] = float(kv["lr"])
                except ValueError:
                    raise NetSpecError(f"line {lineno}: lr={kv['lr']!r} is not a number") from None
                if train["lr"] < 0:
                    raise NetSpecError(f"line {lineno}: lr must be >= 0")
            if "modes" in kv:
                train["modes"] = _parse_modes(kv["modes"], lineno)
            continue
        if shape is None:
            raise NetSpecError(f"line {lineno}: layer before input declaration")
        if layers and layers[-1].kind == "loss":
            raise NetSpecError(f"line {lineno}: no layer may follow the loss")
        layer = _build(kind, kv, shape, lineno, prev)
        layers.append(layer)
        shape = layer.out_shape
        prev = f"{kind} (line {lineno})"

    if input_shape is None:
        raise NetSpecError("missing input declaration")
    if not layers or layers[-1].kind != "loss":
        raise NetSpecError("last layer must be a loss")
    return NetworkSpec(input_shape, tuple(layers), **train)


def render_network(net: NetworkSpec) -> str:
    if len(net.input_shape) == 3:
        d, h, w = net.input_shape
        lines = [f"input shape={w}x{h}x{d}"]
    else:
        lines = [f"input shape={net.input_shape[0]}"]
    for l in net.layers:
        if l.kind == "conv":
            lines.append(f"conv kernels={l.kernels} kernel={l.kh}x{l.kw} pad={l.pad}")
        elif l.kind == "maxpool":
            lines.append(f"maxpool r={l.r}")
        elif l.kind == "fc":
            lines.append(f"fc out={l.out}")
        elif l.kind == "rnn":
            lines.append(f"rnn cell={l.cell} in={l.inp} hidden={l.hidden} steps={l.steps} feed={l.feed}")
        else:
            lines.append(f"{l.kind} fn={l.fn}")
    modes = ",".join(f"{p}:{m.value}" for p, m in net.modes)
    lines.append(f"train batch={net.batch} lr={net.lr!r} modes={modes}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- phases

OP_CLASSES = ("ConvFF", "ConvBP", "ConvUP", "Pool", "PoolBP", "FCFF", "FCBP", "FCUP", "LossEval",
              "Merge", "Partition", "AddPad", "RemovePad")


@dataclass(frozen=True)
class StepSpec:
    phase: str  # FF | BP | UP | Prep
    layer: int
    op: str
    t: int = -1  # time step for unrolled recurrent groups
    sub: str = ""  # recurrent matrix name or gate tag

    def __post_init__(self):
        if self.op not in OP_CLASSES:
            raise ValueError(f"unknown op class {self.op}")


@dataclass(frozen=True)
class PhasePlan:
    steps: tuple = field(default_factory=tuple)

    def ops(self) -> list:
        return [s.op for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def _rnn_ff_group(i: int, layer: RecurrentLayer, t: int) -> list:
    out = [StepSpec("FF", i, "FCFF", t, m) for m in layer.matrices]
    if layer.cell == "gru":
        out.append(StepSpec("FF", i, "FCFF", t, "gate"))
    return out


def _rnn_bp_group(i: int, layer: RecurrentLayer, t: int) -> list:
    out = []
    if layer.cell == "gru":
        out.append(StepSpec("BP", i, "FCBP", t, "gate"))
    out += [StepSpec("BP", i, "FCBP", t, m) for m in reversed(layer.matrices)]
    return out


def _is_conv_side(layer) -> bool:
    return _is_volume(layer.in_shape) and layer.kind in ("conv", "maxpool", "act")


def derive_phases(net: NetworkSpec) -> PhasePlan:
    """Expand ``net`` into FF steps, the loss, BP steps in reverse and one UP per parameterized layer."""
    layers = net.layers
    steps: list = []
    for i, l in enumerate(layers):
        if i > 0 and _is_volume(layers[i - 1].out_shape) and not _is_volume(l.out_shape) and l.kind != "act":
            steps.append(StepSpec("Prep", i, "Merge"))
        if l.kind == "conv":
            if l.pad > 0:
                steps.append(StepSpec("Prep", i, "AddPad"))
            steps.append(StepSpec("FF", i, "ConvFF"))
        elif l.kind == "maxpool":
            steps.append(StepSpec("FF", i, "Pool"))
        elif l.kind == "fc":
            steps.append(StepSpec("FF", i, "FCFF"))
        elif l.kind == "rnn":
            for t in range(l.steps):
                steps += _rnn_ff_group(i, l, t)
        elif l.kind == "loss":
            steps.append(StepSpec("FF", i, "LossEval"))
    for i in range(len(layers) - 1, -1, -1):
        l = layers[i]
        if l.kind == "conv":
            steps.append(StepSpec("BP", i, "ConvBP"))
        elif l.kind == "maxpool":
            steps.append(StepSpec("BP", i, "PoolBP"))
        elif l.kind == "fc":
            steps.append(StepSpec("BP", i, "FCBP"))
        elif l.kind == "rnn":
            for t in range(l.steps - 1, -1, -1):
                steps += _rnn_bp_group(i, l, t)
        if i > 0 and _is_volume(layers[i - 1].out_shape) and not _is_volume(l.out_shape) and l.kind != "act":
            steps.append(StepSpec("Prep", i, "Partition"))
    for i in net.param_layers:
        op = {"conv": "ConvUP", "fc": "FCUP", "rnn": "FCUP"}[layers[i].kind]
        steps.append(StepSpec("UP", i, op))
    return PhasePlan(tuple(steps))


def bundled_networks() -> list:
    from importlib.resources import files

    return sorted(p.name[:-4] for p in files("pimtrain").joinpath("nets").iterdir() if p.name.endswith(".net"))


def bundled_network(name: str) -> str:
    """Text of a network description shipped with the package (name without .net)."""
    from importlib.resources import files

    p = files("pimtrain").joinpath("nets", name + ".net")
    if not p.is_file():
        raise NetSpecError(f"no bundled network {name!r}; available: {', '.join(bundled_networks())}")
    return p.read_text()
