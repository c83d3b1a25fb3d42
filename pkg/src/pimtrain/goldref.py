"""Float64 reference training engine.

Every contraction is accumulated with an explicit loop over the reduction
index so that the order of floating point additions is fixed:

* conv FF: input depth, kernel row, kernel column
* conv BP: output depth, kernel row, kernel column (flipped, transposed kernel)
* conv UP: sample, output row, output column
* FC FF / BP / UP: input index / output index / sample

The machine simulator in float mode follows the same orders and is compared
against this module bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netspec import NetworkSpec, RecurrentLayer


# ---------------------------------------------------------------- activations

def act_forward(fn: str, z: np.ndarray) -> np.ndarray:
    if fn == "relu":
        return np.maximum(z, 0.0)
    if fn == "tanh":
        return np.tanh(z)
    if fn == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(fn)


def act_deriv_from_output(fn: str, y: np.ndarray) -> np.ndarray:
    """f'(z) expressed through y = f(z), which is what gets stored during FF."""
    if fn == "relu":
        return (y > 0).astype(y.dtype)
    if fn == "tanh":
        return 1.0 - y * y
    if fn == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(fn)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- primitives

def conv_ff(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Cross-correlation of ``x`` (N, D, H, W) with ``w`` (NO, D, KH, KW), zero padded by ``pad``."""
    n, d, h, wd = x.shape
    no, dk, kh, kw = w.shape
    if dk != d:
        raise ValueError(f"kernel depth {dk} != input depth {d}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    y = np.zeros((n, no, ho, wo))
    for c in range(d):
        for i in range(kh):
            for j in range(kw):
                y += w[None, :, c, i, j, None, None] * xp[:, None, c, i:i + ho, j:j + wo]
    return y


def conv_bp(dy: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Gradient w.r.t. the conv input: full correlation of dY with the flipped, transposed kernel."""
    no, d, kh, kw = w.shape
    wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (D, NO, KH, KW)
    n, _, ho, wo = dy.shape
    ph, pw = kh - 1 - pad, kw - 1 - pad
    dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hi, wi = ho + 2 * ph - kh + 1, wo + 2 * pw - kw + 1
    dx = np.zeros((n, d, hi, wi))
    for c in range(no):
        for i in range(kh):
            for j in range(kw):
                dx += wt[None, :, c, i, j, None, None] * dyp[:, None, c, i:i + hi, j:j + wi]
    return dx


def lower(x: np.ndarray, kh: int, kw: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """im2col: rows ordered (sample, out row, out col), columns (depth, kernel row, kernel col)."""
    n, d = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, d, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + ho, j:j + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, d * kh * kw)


def conv_up_sum_direct(x: np.ndarray, dy: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Sum over samples of X_s * dY_s as a large-kernel correlation."""
    n, d = x.shape[:2]
    _, no, ho, wo = dy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dw = np.zeros((no, d, kh, kw))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                dw += dy[s, :, i, j, None, None, None] * xp[s, None, :, i:i + kh, j:j + kw]
    return dw


def conv_up_sum_lowered(x: np.ndarray, dy: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Same sum through the lowered matrix X_M, accumulated in the same row order."""
    n, d = x.shape[:2]
    _, no, ho, wo = dy.shape
    xm = lower(x, kh, kw, pad, ho, wo)
    dym = dy.transpose(1, 0, 2, 3).reshape(no, -1)
    dw = np.zeros((no, xm.shape[1]))
    for m in range(xm.shape[0]):
        dw += dym[:, m, None] * xm[None, m, :]
    return dw.reshape(no, d, kh, kw)


def pool_ff(x: np.ndarray, r: int):
    """Non-overlapping r x r max pooling; returns (y, ids) with ids the flat in-window argmax (first wins)."""
    n, d, h, w = x.shape
    ho, wo = h // r, w // r
    win = x.reshape(n, d, ho, r, wo, r).transpose(0, 1, 2, 4, 3, 5).reshape(n, d, ho, wo, r * r)
    ids = win.argmax(axis=-1)
    y = np.take_along_axis(win, ids[..., None], axis=-1)[..., 0]
    return y, ids


def pool_bp(dy: np.ndarray, ids: np.ndarray, r: int) -> np.ndarray:
    n, d, ho, wo = dy.shape
    win = np.zeros((n, d, ho, wo, r * r))
    np.put_along_axis(win, ids[..., None], dy[..., None], axis=-1)
    return win.reshape(n, d, ho, wo, r, r).transpose(0, 1, 2, 4, 3, 5).reshape(n, d, ho * r, wo * r)


def fc_ff(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Y[s, o] = sum_j W[o, j] X[s, j], j ascending."""
    y = np.zeros((x.shape[0], w.shape[0]))
    for j in range(w.shape[1]):
        y += w[None, :, j] * x[:, j, None]
    return y


def fc_bp(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """dX[s, j] = sum_o W[o, j] dY[s, o], o ascending."""
    dx = np.zeros((dy.shape[0], w.shape[1]))
    for o in range(w.shape[0]):
        dx += w[None, o, :] * dy[:, o, None]
    return dx


def fc_up_sum(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """sum_s dY_s X_s^T, s ascending."""
    dw = np.zeros((dy.shape[1], x.shape[1]))
    for s in range(x.shape[0]):
        dw += dy[s, :, None] * x[s, None, :]
    return dw


def sgd_update(w: np.ndarray, dw: np.ndarray, lr: float) -> np.ndarray:
    return w - lr * dw


# ---------------------------------------------------------------- parameters

def fan_in(layer) -> dict:
    if layer.kind == "conv":
        return {"w": layer.in_shape[0] * layer.kh * layer.kw}
    if layer.kind == "fc":
        return {"w": layer.weight_shape[1]}
    return {m: layer.matrix_shape(m)[1] for m in layer.matrices}


def init_params(net: NetworkSpec, rng: np.random.Generator) -> dict:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], layers in order."""
    params = {}
    for i in net.param_layers:
        l = net.layers[i]
        if l.kind == "rnn":
            params[i] = {}
            for m in l.matrices:
                b = 1.0 / np.sqrt(l.matrix_shape(m)[1])
                params[i][m] = rng.uniform(-b, b, size=l.matrix_shape(m))
        else:
            b = 1.0 / np.sqrt(fan_in(l)["w"])
            params[i] = rng.uniform(-b, b, size=l.weight_shape)
    return params


def copy_params(params: dict) -> dict:
    return {k: ({m: a.copy() for m, a in v.items()} if isinstance(v, dict) else v.copy())
            for k, v in params.items()}


# ---------------------------------------------------------------- recurrent cells

def _rnn_inputs(layer: RecurrentLayer, x: np.ndarray) -> list:
    x = x.reshape(x.shape[0], -1)
    if layer.feed == "repeat":
        return [x] * layer.steps
    return [x[:, t * layer.inp:(t + 1) * layer.inp] for t in range(layer.steps)]


def rnn_forward(layer: RecurrentLayer, p: dict, x: np.ndarray):
    xs = _rnn_inputs(layer, x)
    h = np.zeros((x.shape[0], layer.hidden))
    cache = []
    for t in range(layer.steps):
        if layer.cell == "elman":
            z = fc_ff(xs[t], p["wx"]) + fc_ff(h, p["uh"])
            hn = np.tanh(z)
            cache.append({"h": h, "hn": hn})
        else:
            zg = act_forward("sigmoid", fc_ff(xs[t], p["wz"]) + fc_ff(h, p["uz"]))
            rg = act_forward("sigmoid", fc_ff(xs[t], p["wr"]) + fc_ff(h, p["ur"]))
            rh = rg * h
            c = np.tanh(fc_ff(xs[t], p["wh"]) + fc_ff(rh, p["uh"]))
            hn = (1.0 - zg) * h + zg * c
            cache.append({"h": h, "z": zg, "r": rg, "rh": rh, "c": c, "hn": hn})
        h = hn
    return h, {"xs": xs, "steps": cache}


def rnn_backward(layer: RecurrentLayer, p: dict, cache: dict, dh_out: np.ndarray, in_shape):
    """BPTT. Returns (dX, per-matrix weight-gradient sums over the batch)."""
    xs = cache["xs"]
    n = dh_out.shape[0]
    dws = {m: np.zeros_like(p[m]) for m in layer.matrices}
    dxs = [None] * layer.steps
    dh = dh_out
    for t in range(layer.steps - 1, -1, -1):
        st = cache["steps"][t]
        h = st["h"]
        if layer.cell == "elman":
            dz = dh * (1.0 - st["hn"] * st["hn"])
            dws["wx"] += fc_up_sum(xs[t], dz)
            dws["uh"] += fc_up_sum(h, dz)
            dxs[t] = fc_bp(dz, p["wx"])
            dh = fc_bp(dz, p["uh"])
        else:
            zg, rg, c = st["z"], st["r"], st["c"]
            dc = dh * zg
            dzg = dh * (c - h)
            dhp = dh * (1.0 - zg)
            dac = dc * (1.0 - c * c)
            drh = fc_bp(dac, p["uh"])
            dr = drh * h
            dhp = dhp + drh * rg
            dar = dr * (rg * (1.0 - rg))
            daz = dzg * (zg * (1.0 - zg))
            dws["wh"] += fc_up_sum(xs[t], dac)
            dws["uh"] += fc_up_sum(st["rh"], dac)
            dws["wr"] += fc_up_sum(xs[t], dar)
            dws["ur"] += fc_up_sum(h, dar)
            dws["wz"] += fc_up_sum(xs[t], daz)
            dws["uz"] += fc_up_sum(h, daz)
            dxs[t] = fc_bp(dac, p["wh"]) + fc_bp(dar, p["wr"]) + fc_bp(daz, p["wz"])
            dh = dhp + fc_bp(dar, p["ur"]) + fc_bp(daz, p["uz"])
    if layer.feed == "repeat":
        dx = dxs[0]
        for t in range(1, layer.steps):
            dx = dx + dxs[t]
    else:
        dx = np.concatenate(dxs, axis=1)
    return dx.reshape((n,) + tuple(in_shape)), dws


# ---------------------------------------------------------------- network passes

@dataclass
class Activations:
    inputs: list = field(default_factory=list)  # input of layer i
    outputs: list = field(default_factory=list)  # output of layer i
    pool_ids: dict = field(default_factory=dict)
    rnn: dict = field(default_factory=dict)


def forward(net: NetworkSpec, x: np.ndarray, params: dict) -> Activations:
    if x.shape[1:] != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} != {net.input_shape}")
    acts = Activations()
    cur = x
    for i, l in enumerate(net.layers):
        acts.inputs.append(cur)
        if l.kind == "conv":
            cur = conv_ff(cur, params[i], l.pad)
        elif l.kind == "maxpool":
            cur, acts.pool_ids[i] = pool_ff(cur, l.r)
        elif l.kind == "fc":
            cur = fc_ff(cur.reshape(cur.shape[0], -1), params[i])
        elif l.kind == "rnn":
            cur, acts.rnn[i] = rnn_forward(l, params[i], cur)
        elif l.kind == "act":
            cur = act_forward(l.fn, cur)
        acts.outputs.append(cur)
    return acts


def loss_value(kind: str, y: np.ndarray, target: np.ndarray) -> float:
    y = y.reshape(y.shape[0], -1)
    if kind == "mse":
        return float(np.mean(0.5 * np.sum((y - target.reshape(y.shape)) ** 2, axis=1)))
    p = softmax(y)
    return float(-np.mean(np.log(p[np.arange(y.shape[0]), target])))


def loss_grad(kind: str, y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample dL_s/dy (not divided by the batch size)."""
    shape = y.shape
    y = y.reshape(y.shape[0], -1)
    if kind == "mse":
        g = y - target.reshape(y.shape)
    else:
        g = softmax(y)
        g[np.arange(y.shape[0]), target] -= 1.0
    return g.reshape(shape)


@dataclass
class Gradients:
    dX: dict = field(default_factory=dict)  # gradient w.r.t. input of layer i
    dY: dict = field(default_factory=dict)  # gradient w.r.t. output of layer i
    rnn_dw: dict = field(default_factory=dict)
    loss: float = 0.0


def loss_and_backward(net: NetworkSpec, acts: Activations, target: np.ndarray, params: dict) -> Gradients:
    grads = Gradients()
    last = len(net.layers) - 1
    loss = net.layers[last]
    y = acts.inputs[last]
    grads.loss = loss_value(loss.fn, y, target)
    g = loss_grad(loss.fn, y, target)
    grads.dY[last] = g
    grads.dX[last] = g
    for i in range(last - 1, -1, -1):
        l = net.layers[i]
        grads.dY[i] = g
        if l.kind == "conv":
            g = conv_bp(g, params[i], l.pad)
        elif l.kind == "maxpool":
            if i not in acts.pool_ids:
                raise KeyError(f"missing pooling index map for layer {i}")
            g = pool_bp(g, acts.pool_ids[i], l.r)
        elif l.kind == "fc":
            g = fc_bp(g.reshape(g.shape[0], -1), params[i]).reshape(acts.inputs[i].shape)
        elif l.kind == "rnn":
            g, grads.rnn_dw[i] = rnn_backward(l, params[i], acts.rnn[i], g, l.in_shape)
        elif l.kind == "act":
            g = g * act_deriv_from_output(l.fn, acts.outputs[i])
        grads.dX[i] = g
    return grads


def weight_grads(net: NetworkSpec, acts: Activations, grads: Gradients, k: int | None = None) -> dict:
    """Minibatch-averaged dW per parameterized layer."""
    k = k or acts.inputs[0].shape[0]
    dws = {}
    for i in net.param_layers:
        l = net.layers[i]
        if l.kind == "conv":
            dws[i] = conv_up_sum_lowered(acts.inputs[i], grads.dY[i], l.kh, l.kw, l.pad) / k
        elif l.kind == "fc":
            x = acts.inputs[i].reshape(k, -1)
            dws[i] = fc_up_sum(x, grads.dY[i].reshape(k, -1)) / k
        else:
            dws[i] = {m: a / k for m, a in grads.rnn_dw[i].items()}
    return dws


def apply_update(params: dict, dws: dict, lr: float) -> dict:
    out = {}
    for i, p in params.items():
        if isinstance(p, dict):
            out[i] = {m: sgd_update(p[m], dws[i][m], lr) for m in p}
        else:
            out[i] = sgd_update(p, dws[i], lr)
    return out


def train_step(net: NetworkSpec, params: dict, x: np.ndarray, target: np.ndarray, lr: float | None = None):
    """One minibatch: FF, loss, BP, UP, SGD. Returns (new params, loss before the update)."""
    acts = forward(net, x, params)
    grads = loss_and_backward(net, acts, target, params)
    dws = weight_grads(net, acts, grads)
    return apply_update(params, dws, net.lr if lr is None else lr), grads.loss


def predict(net: NetworkSpec, params: dict, x: np.ndarray) -> np.ndarray:
    acts = forward(net, x, params)
    return acts.inputs[-1].reshape(x.shape[0], -1)
