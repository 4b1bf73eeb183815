"""Command line front end.

    xnesim ucode asm program.yaml -o program.bin
    xnesim ucode dis program.bin
    xnesim run layer --nif 128 --nof 128 --fs 3 --h 16 --w 16
    xnesim run net resnet18 --mode hyperram
    xnesim report mvgg-2
    xnesim verify --layers 100 --seed 1

Exit codes: 0 ok, 2 usage, 3 parse/decode error, 4 does not fit,
5 verification mismatch.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .engine import EngineConfig
from .errors import (CapacityError, DecodeError, PlanError, ShapeError,
                     UcodeSyntaxError)
from .golden import LayerSpec, layer_golden, random_layer_data
from .memory import CoefficientSet, coefficients_from_env, load_coefficients
from .microcode import disassemble, parse_program, program_to_yaml
from .networks import get_network
from .runner import (execute_layer, random_threshold_spec, run_network,
                     verify_layers)

EXIT_PARSE = 3
EXIT_CAPACITY = 4
EXIT_VERIFY = 5


def _coeffs(args) -> CoefficientSet:
    if getattr(args, "config", None):
        return load_coefficients(args.config)
    return coefficients_from_env()


def cmd_ucode_asm(args) -> int:
    with open(args.input) as f:
        prog = parse_program(f.read())
    blob = prog.assemble()
    if args.output:
        with open(args.output, "wb") as f:
            f.write(blob)
    if args.hex or not args.output:
        print(blob.hex())
    return 0


def cmd_ucode_ref(args) -> int:
    from .microcode import reference_program
    prog = reference_program()
    if args.bin:
        blob = prog.assemble()
        if args.output:
            with open(args.output, "wb") as f:
                f.write(blob)
        else:
            print(blob.hex())
        return 0
    text = program_to_yaml(prog)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_ucode_dis(args) -> int:
    with open(args.input, "rb") as f:
        data = f.read()
    prog = disassemble(data)
    text = program_to_yaml(prog) if args.yaml else prog.text()
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_run_layer(args) -> int:
    spec = LayerSpec(nif=args.nif, nof=args.nof, fs=args.fs,
                     h_out=args.h, w_out=args.w, d=args.d)
    cfg = EngineConfig(tp=args.tp)
    rng = np.random.default_rng(args.seed)
    x, w = random_layer_data(rng, spec)
    thr = random_threshold_spec(rng, spec)
    run = execute_layer(cfg, spec, x, w, thr)
    want = layer_golden(x, w, spec, thr)
    mism = int(np.sum(run.output.to_bits() != want.to_bits()))
    print(f"layer {spec.nif}->{spec.nof} fs={spec.fs} "
          f"{spec.h_out}x{spec.w_out} groups={spec.groups} tp={args.tp}")
    print(f"jobs {len(run.plan.jobs)}  cycles {run.cycles}  ops {run.ops}  "
          f"op/cycle {run.ops / run.cycles:.2f}")
    print(f"mismatches vs reference: {mism}")
    return 0 if mism == 0 else EXIT_VERIFY


def cmd_run_net(args) -> int:
    net = get_network(args.network)
    rep = run_network(net, args.mode, tp=args.tp, coeffs=_coeffs(args))
    out = rep.to_csv() if args.format == "csv" else rep.to_text()
    if args.output:
        with open(args.output, "w") as f:
            f.write(out + "\n")
    else:
        print(out)
    return 0


def cmd_report(args) -> int:
    net = get_network(args.network)
    cs = _coeffs(args)
    modes = args.modes.split(",") if args.modes else sorted(cs.modes)
    print(f"network {net.name}: {net.total_ops} ops, "
          f"{net.packed_param_bits / 8 / 1024:.2f} KiB parameters")
    print(f"{'mode':<14}{'E[uJ]':>10}{'t[ms]':>10}{'fps':>8}{'Gop/s':>8}")
    for mode in modes:
        try:
            rep = run_network(net, mode, tp=args.tp, coeffs=cs)
        except (CapacityError, PlanError) as ex:
            print(f"{mode:<14}{'-':>10}{'-':>10}{'-':>8}{'-':>8}  ({ex})")
            continue
        t = rep.total_seconds
        print(f"{mode:<14}{rep.energy.total_j * 1e6:>10.3f}"
              f"{t * 1e3:>10.3f}{rep.fps:>8.2f}"
              f"{rep.total_ops / t / 1e9:>8.2f}")
    return 0


def cmd_verify(args) -> int:
    recs = verify_layers(args.layers, seed=args.seed, tp=args.tp)
    bad = [r for r in recs if r["mismatches"]]
    total_ops = sum(r["ops"] for r in recs)
    print(f"{len(recs)} layers, {total_ops} ops, "
          f"{len(bad)} with mismatches")
    for r in bad:
        s = r["spec"]
        print(f"  layer {r['layer']}: {s.nif}->{s.nof} fs={s.fs} "
              f"groups={s.groups}: {r['mismatches']} wrong bits")
    return 0 if not bad else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xnesim",
                                description="binary conv engine simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    uc = sub.add_parser("ucode", help="microcode tools")
    ucsub = uc.add_subparsers(dest="ucmd", required=True)
    a = ucsub.add_parser("asm", help="yaml program -> 28 byte bitstream")
    a.add_argument("input")
    a.add_argument("-o", "--output")
    a.add_argument("--hex", action="store_true",
                   help="print the bitstream as hex even when writing a file")
    a.set_defaults(fn=cmd_ucode_asm)
    d = ucsub.add_parser("dis", help="bitstream -> listing")
    d.add_argument("input")
    d.add_argument("-o", "--output")
    d.add_argument("--yaml", action="store_true",
                   help="emit re-assemblable yaml instead of a listing")
    d.set_defaults(fn=cmd_ucode_dis)
    r = ucsub.add_parser("ref", help="dump the built-in walk program")
    r.add_argument("-o", "--output")
    r.add_argument("--bin", action="store_true",
                   help="emit the bitstream instead of yaml")
    r.set_defaults(fn=cmd_ucode_ref)

    run = sub.add_parser("run", help="run a layer or a network")
    runsub = run.add_subparsers(dest="rcmd", required=True)
    rl = runsub.add_parser("layer", help="one random layer vs the reference")
    rl.add_argument("--nif", type=int, required=True)
    rl.add_argument("--nof", type=int, required=True)
    rl.add_argument("--fs", type=int, default=3)
    rl.add_argument("--h", type=int, default=8)
    rl.add_argument("--w", type=int, default=8)
    rl.add_argument("--d", type=int, default=None,
                    help="band width (input channels per output channel)")
    rl.add_argument("--tp", type=int, default=128)
    rl.add_argument("--seed", type=int, default=0)
    rl.set_defaults(fn=cmd_run_layer)
    rn = runsub.add_parser("net", help="analytic network run")
    rn.add_argument("network", help="resnet18|resnet34|mvgg-N|mvgg-f")
    rn.add_argument("--mode", default="sram-0v6")
    rn.add_argument("--tp", type=int, default=128)
    rn.add_argument("--format", choices=("text", "csv"), default="text")
    rn.add_argument("--config", help="coefficient override yaml")
    rn.add_argument("-o", "--output")
    rn.set_defaults(fn=cmd_run_net)

    rep = sub.add_parser("report", help="energy/time across operating points")
    rep.add_argument("network")
    rep.add_argument("--modes", help="comma separated; default all")
    rep.add_argument("--tp", type=int, default=128)
    rep.add_argument("--config")
    rep.set_defaults(fn=cmd_report)

    v = sub.add_parser("verify", help="random layers engine vs reference")
    v.add_argument("--layers", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tp", type=int, default=128)
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CapacityError, PlanError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_CAPACITY
    except (UcodeSyntaxError, DecodeError, ShapeError,
            KeyError, ValueError, OSError) as ex:
        # str(KeyError) wraps the message in quotes
        msg = ex.args[0] if isinstance(ex, KeyError) and ex.args else ex
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
