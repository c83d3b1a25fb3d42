from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from pimtrain import netspec
from pimtrain.netspec import NetSpecError, ShapeError, derive_phases, parse_network, render_network

ALEXNET_LIKE = """
input shape=32x32x3
conv kernels=16 kernel=5x5 pad=2   # C1
act fn=relu
maxpool r=2
conv kernels=32 kernel=3x3         # C2
act fn=relu
maxpool r=2
conv kernels=32 kernel=3x3         # C3
act fn=relu
conv kernels=32 kernel=3x3         # C4
act fn=relu
conv kernels=16 kernel=3x3         # C5
act fn=relu
maxpool r=2
fc out=64                          # FC1
act fn=relu
fc out=64                          # FC2
act fn=relu
fc out=10                          # FC3
loss fn=softmax_ce
"""


def test_padded_conv_keeps_spatial_dims():
    net = parse_network("input shape=32x32x3\nconv kernels=16 kernel=3x3 pad=1\nloss fn=mse\n")
    conv = net.layers[0]
    assert conv.out_shape == (16, 32, 32)
    assert conv.weight_shape == (16, 3, 3, 3)


def test_fc_then_conv_is_shape_error():
    text = "input shape=128\nfc out=10\nconv kernels=4 kernel=3x3\nloss fn=mse\n"
    with pytest.raises(ShapeError, match=r"fc \(line 2\)"):
        parse_network(text)


def test_alexnet_like_has_five_conv_three_fc():
    net = parse_network(ALEXNET_LIKE)
    kinds = [l.kind for l in net.layers if l.parameterized]
    assert kinds == ["conv"] * 5 + ["fc"] * 3


@pytest.mark.parametrize("text,msg", [
    ("input shape=8\nfc out=2 bias=1\nloss fn=mse\n", "unknown key"),
    ("input shape=8x8x1\nconv kernels=2 kernel=3x3 stride=2\nloss fn=mse\n", "stride"),
    ("input shape=8x8x1\nconv kernels=2 kernel=4x4 pad=1\nloss fn=mse\n", "odd square"),
    ("input shape=8\nfc out=2\n", "last layer"),
    ("input shape=8\nloss fn=mse\nfc out=2\n", "follow the loss"),
    ("input shape=8\nfrob x=1\nloss fn=mse\n", "line 2"),
    ("input shape=8\nact fn=gelu\nloss fn=mse\n", "unknown activation"),
    ("input shape=6x6x1\nmaxpool r=4\nloss fn=mse\n", "does not divide"),
])
def test_parse_errors(text, msg):
    with pytest.raises(NetSpecError, match=msg):
        parse_network(text)


def test_train_block():
    net = parse_network("input shape=4\nfc out=2\nloss fn=mse\ntrain batch=8 lr=0.5 modes=ff:float\n")
    assert net.batch == 8 and net.lr == 0.5
    assert net.mode("ff") is netspec.NumericMode.FLOAT
    assert net.mode("bp") is netspec.NumericMode.FIXED32SR


def test_minimal_conv_plan():
    net = parse_network("input shape=8x8x2\nconv kernels=2 kernel=3x3\nloss fn=mse\n")
    assert derive_phases(net).ops() == ["AddPad", "ConvFF", "LossEval", "ConvBP", "ConvUP"]


def test_conv_fc_has_one_merge_one_partition():
    net = parse_network("input shape=8x8x2\nconv kernels=2 kernel=3x3\nact fn=relu\nfc out=3\nloss fn=mse\n")
    plan = derive_phases(net)
    ops = plan.ops()
    assert ops.count("Merge") == 1 and ops.count("Partition") == 1
    assert ops.index("Merge") > ops.index("ConvFF")
    bp = [s for s in plan.steps if s.phase in ("BP", "Prep")]
    assert [s.op for s in bp if s.op in ("FCBP", "Partition", "ConvBP")] == ["FCBP", "Partition", "ConvBP"]


def _rnn_net(cell, steps):
    return parse_network(f"input shape={4 * steps}\nrnn cell={cell} in=4 hidden=5 steps={steps}\nfc out=2\nloss fn=mse\n")


@pytest.mark.parametrize("cell", ["elman", "gru"])
def test_recurrent_unrolls_t_groups(cell):
    net = _rnn_net(cell, 3)
    plan = derive_phases(net)
    ff_t = [s.t for s in plan.steps if s.phase == "FF" and s.layer == 0]
    bp_t = [s.t for s in plan.steps if s.phase == "BP" and s.layer == 0]
    # hand-unrolled: one group per time step, BP groups in reverse
    group = len(net.layers[0].matrices) + (1 if cell == "gru" else 0)
    assert ff_t == [t for t in range(3) for _ in range(group)]
    assert bp_t == [t for t in (2, 1, 0) for _ in range(group)]


def test_recurrent_ff_count_linear_in_t():
    counts = [sum(1 for s in derive_phases(_rnn_net("gru", t)).steps if s.phase == "FF") for t in (1, 2, 3, 4)]
    diffs = {b - a for a, b in zip(counts, counts[1:])}
    assert len(diffs) == 1


def test_recurrent_feed_length_checked():
    with pytest.raises(ShapeError):
        parse_network("input shape=7\nrnn cell=elman in=4 hidden=5 steps=2\nloss fn=mse\n")


# ---------------------------------------------------------------- random nets

@st.composite
def nets(draw):
    lines = []
    if draw(st.booleans()):
        w = draw(st.sampled_from([4, 6, 8]))
        d = draw(st.integers(1, 3))
        lines.append(f"input shape={w}x{w}x{d}")
        for _ in range(draw(st.integers(0, 3))):
            k = draw(st.sampled_from([1, 3]))
            lines.append(f"conv kernels={draw(st.integers(1, 4))} kernel={k}x{k} pad={(k - 1) // 2}")
            if draw(st.booleans()):
                lines.append(f"act fn={draw(st.sampled_from(['relu', 'tanh', 'sigmoid']))}")
        if draw(st.booleans()):
            lines.append("maxpool r=2")
    else:
        steps = draw(st.integers(1, 4))
        lines.append(f"input shape={3 * steps}")
        if draw(st.booleans()):
            lines.append(f"rnn cell={draw(st.sampled_from(['elman', 'gru']))} in=3 hidden=4 steps={steps} feed=seq")
    for _ in range(draw(st.integers(1, 3))):
        lines.append(f"fc out={draw(st.integers(1, 9))}")
        if draw(st.booleans()):
            lines.append("act fn=tanh")
    lines.append(f"loss fn={draw(st.sampled_from(['mse', 'softmax_ce']))}")
    lr = draw(st.floats(0, 1, allow_nan=False))
    lines.append(f"train batch={draw(st.integers(1, 64))} lr={lr!r} modes=ff:float,bp:fixed32,up:fixed32sr")
    return parse_network("\n".join(lines))


@settings(max_examples=80, deadline=None)
@given(nets())
def test_render_parse_round_trip(net):
    assert parse_network(render_network(net)) == net


@settings(max_examples=80, deadline=None)
@given(nets())
def test_up_steps_match_param_layers(net):
    plan = derive_phases(net)
    ups = Counter(s.layer for s in plan.steps if s.phase == "UP")
    assert ups == Counter(net.param_layers)


@settings(max_examples=80, deadline=None)
@given(nets())
def test_plan_invariants(net):
    plan = derive_phases(net)
    bp_layers = [s.layer for s in plan.steps if s.phase == "BP"]
    assert bp_layers == sorted(bp_layers, reverse=True)
    for k, s in enumerate(plan.steps):
        if s.op == "ConvFF" and net.layers[s.layer].pad > 0:
            assert plan.steps[k - 1].op == "AddPad"
    assert plan.ops().count("Merge") == plan.ops().count("Partition") <= 1
