"""Command line: compile, train, verify, scaleout.

Exit codes: 0 success, 1 user error (bad input, does not fit), 2 internal
invariant violation (deadlock, failed self-check, unexpected exception).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .compiler import CompileError, compile_network, dump_programs
from .config import load_machine
from .data import make_dataset
from .machine import DeadlockError, run_training, write_artifacts
from .metrics import derive_scaleout, report_json, report_text, summarize, sweep, sweep_text
from .netspec import DEFAULT_MODES, NetSpecError, NetworkSpec, NumericMode, bundled_network, parse_network
from .pmag import PMAGRangeError, PrepError
from .verify import run_checks

USER_ERRORS = (NetSpecError, CompileError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, ValueError)
INTERNAL_ERRORS = (DeadlockError, PMAGRangeError, PrepError, AssertionError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are user errors: exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_net(spec: str) -> NetworkSpec:
    """A .net file path or the name of a bundled network."""
    p = Path(spec)
    text = p.read_text() if p.is_file() else bundled_network(spec)
    return parse_network(text)


def apply_mode(net: NetworkSpec, mode: str | None) -> NetworkSpec:
    """float: every phase in float. fixed: the declared modes, with float phases moved to the fixed defaults."""
    if mode is None:
        return net
    if mode == "float":
        return net.with_modes(ff="float", bp="float", up="float")
    d = dict(DEFAULT_MODES)
    return net.with_modes(**{p: (m if m != NumericMode.FLOAT else d[p]) for p, m in net.modes})


def cmd_compile(args) -> int:
    net, cfg = load_net(args.net), load_machine(args.machine)
    comp = compile_network(net, cfg)
    img = comp.image
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "programs.txt").write_text(dump_programs(comp))
        (out / "ibuffer.bin").write_bytes(img.data)
    print(f"{img.entries} entries, {len(img)} of {img.capacity} bytes")
    return 0


def cmd_train(args) -> int:
    net = apply_mode(load_net(args.net), args.mode)
    cfg = load_machine(args.machine)
    manifest = {"command": "train", "net": args.net, "machine": args.machine, "seed": args.seed,
                "out": args.out, "epochs": args.epochs, "batches": args.batches, "mode": args.mode,
                "version": __version__}
    data, _ = make_dataset(net, args.seed, args.batches)
    res = run_training(net, data, args.epochs, cfg, seed=args.seed)
    summary = summarize(res.traces, cfg)
    summary["seed"] = args.seed
    write_artifacts(Path(args.out), net, cfg, res, manifest, json.loads(report_json(summary)))
    print(report_text(summary), end="")
    print(f"final loss {res.losses[-1]:.6g}; artifacts in {args.out}")
    return 0


def cmd_verify(args) -> int:
    net, cfg = load_net(args.net), load_machine(args.machine)
    bad = 0
    for name, fails in run_checks(net, cfg, args.seed):
        print(f"{'PASS' if not fails else 'FAIL'}  {name}")
        for f in fails[:10]:
            print(f"      {f}")
        bad += bool(fails)
    return 2 if bad else 0


def cmd_scaleout(args) -> int:
    t_up, t_link = args.t_up, args.t_link
    if args.params is not None:
        t_up, t_link = derive_scaleout(args.params, args.host_flops, args.link_bw)
        t_up, t_link = t_up * 1e3, t_link * 1e3
    if min(args.t1, t_up, t_link) < 0 or args.t1 == 0 or args.max_n < 1:
        raise UsageError("latencies must be nonnegative, t1 positive and --max-n at least 1")
    rows = sweep(args.t1 * 1e-3, t_up * 1e-3, t_link * 1e-3, range(1, args.max_n + 1), args.batch)
    print(f"t1 {args.t1:g} ms, t_up {t_up:g} ms, t_link {t_link:g} ms, batch {args.batch}")
    print(sweep_text(rows), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pimtrain", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=False):
        p.add_argument("--net", required=True, help="network file or bundled name")
        p.add_argument("--machine", default="hmc1", help="preset (hmc1, hmc2) or JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("compile", help="compile a network and pack the instruction buffer")
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("train", help="train on seeded synthetic data and write run artifacts")
    common(p, out_required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batches", type=int, default=20, help="minibatches per epoch")
    p.add_argument("--mode", choices=["float", "fixed"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the self-checks on a network at reduced size")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("scaleout", help="multi-module latency and images/s over module count")
    p.add_argument("--t1", type=float, default=63.1, help="per-minibatch module latency (ms)")
    p.add_argument("--t-up", type=float, default=42.4, help="host update per gradient (ms)")
    p.add_argument("--t-link", type=float, default=4.61, help="one-way link transfer (ms)")
    p.add_argument("--params", type=float, help="derive t-up and t-link from a parameter count")
    p.add_argument("--host-flops", type=float, default=326e9)
    p.add_argument("--link-bw", type=float, default=240e9, help="bytes/s")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--max-n", type=int, default=64)
    p.add_argument("--out", help="write the sweep as JSON")
    p.set_defaults(func=cmd_scaleout)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "epochs", 1) < 1 or getattr(args, "batches", 1) < 1:
            raise UsageError("--epochs and --batches must be at least 1")
        if getattr(args, "seed", 0) < 0 or getattr(args, "seed", 0) >= 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        return args.func(args)
    except INTERNAL_ERRORS as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (UsageError, *USER_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a bug in the tool
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
